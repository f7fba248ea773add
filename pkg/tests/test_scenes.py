import hashlib
import math

import numpy as np
import pytest

from pwood.errors import EmptyFile
from pwood.geometry import OrientedBox, rotated_iou
from pwood.scenes import (
    FEATURE_DIM,
    DotaRecord,
    SceneSpec,
    WeakAnnotation,
    build_dataset,
    derive_annotations,
    format_dota_annotations,
    generate_scene,
    inject_noise,
    parse_dota_annotations,
    quad_to_obb,
    scene_rng,
)


def scene_hash(scene) -> str:
    m = hashlib.sha256()
    m.update(scene.intensity.tobytes())
    for g in scene.gt:
        m.update(np.asarray(g.box.params()).tobytes())
        m.update(bytes([g.class_id]))
    return m.hexdigest()


class TestGenerateScene:
    def test_single_fixed_size_object(self):
        spec = SceneSpec(
            h=32, w=32, min_objects=1, max_objects=1, min_size=8, max_size=8
        )
        scene = generate_scene(spec, np.random.default_rng(0))
        assert len(scene.gt) == 1
        assert scene.gt[0].box.w == pytest.approx(8.0)
        assert scene.gt[0].box.h == pytest.approx(8.0)

    def test_iou_cap_zero_disjoint(self):
        spec = SceneSpec(h=48, w=48, min_objects=3, max_objects=3, max_pairwise_iou=0.0)
        scene = generate_scene(spec, np.random.default_rng(1))
        for i in range(len(scene.gt)):
            for j in range(i + 1, len(scene.gt)):
                assert rotated_iou(scene.gt[i].box, scene.gt[j].box) == 0.0

    def test_boxes_inside_bounds(self):
        spec = SceneSpec()
        scene = generate_scene(spec, np.random.default_rng(2))
        for g in scene.gt:
            corners = g.box.corners()
            assert (corners >= 0).all()
            assert (corners[:, 0] <= spec.w).all() and (corners[:, 1] <= spec.h).all()

    def test_fixed_seed_reproducible(self):
        spec = SceneSpec()
        a = generate_scene(spec, np.random.default_rng(7))
        b = generate_scene(spec, np.random.default_rng(7))
        assert scene_hash(a) == scene_hash(b)

    def test_feature_and_elevation_grids(self):
        scene = generate_scene(SceneSpec(), np.random.default_rng(3))
        assert scene.features.shape == (64, 64, FEATURE_DIM)
        assert scene.elevation.shape == (64, 64)
        assert np.isfinite(scene.features).all()


class TestDeriveAnnotations:
    def _gt(self):
        return generate_scene(SceneSpec(), np.random.default_rng(4)).gt

    def test_fully_supervised_rbox(self):
        anns = derive_annotations(self._gt(), {"rbox": 1.0}, 1.0, np.random.default_rng(0))
        assert len(anns) == len(self._gt())
        assert all(a.form == "rbox" for a in anns)

    def test_hbox_form(self):
        anns = derive_annotations(self._gt(), {"hbox": 1.0}, 1.0, np.random.default_rng(0))
        assert all(a.form == "hbox" and a.hbox is not None for a in anns)

    def test_scene_level_form_sampling(self):
        rng = np.random.default_rng(5)
        forms = set()
        for _ in range(50):
            anns = derive_annotations(self._gt(), {"rbox": 0.5, "hbox": 0.5}, 1.0, rng)
            per_scene = {a.form for a in anns}
            assert len(per_scene) == 1  # one form per scene
            forms |= per_scene
        assert forms == {"rbox", "hbox"}

    def test_labeled_fraction_statistics(self):
        gt = self._gt()
        labeled = 0
        n = 10_000
        for i in range(n):
            rng = scene_rng(123, i)
            if derive_annotations(gt, {"point": 1.0}, 0.2, rng):
                labeled += 1
        assert abs(labeled / n - 0.2) < 0.01


class TestInjectNoise:
    def test_zero_sigma_identity(self):
        box = OrientedBox(10, 10, 6, 4, 0.3)
        ann = WeakAnnotation.from_point(1, (10.0, 10.0))
        out = inject_noise(ann, box, 0.0, np.random.default_rng(0))
        assert out is ann

    def test_noise_bounded_by_sigma_h(self):
        box = OrientedBox(20, 20, 6, 10, 0.0)  # H = 10
        rng = np.random.default_rng(1)
        for _ in range(100):
            ann = WeakAnnotation.from_point(1, (20.0, 20.0))
            out = inject_noise(ann, box, 0.1, rng, bounds=(64, 64))
            assert abs(out.point[0] - 20.0) <= 1.0 + 1e-12
            assert abs(out.point[1] - 20.0) <= 1.0 + 1e-12

    def test_hbox_noise_keeps_validity(self):
        box = OrientedBox(16, 16, 8, 8, 0.0)
        ann = WeakAnnotation.from_hbox(0, __import__("pwood").geometry.HBox(12, 12, 20, 20))
        rng = np.random.default_rng(2)
        for _ in range(100):
            out = inject_noise(ann, box, 0.3, rng, bounds=(32, 32))
            assert out.hbox.xmin < out.hbox.xmax
            assert out.hbox.ymin < out.hbox.ymax
            assert 0 <= out.hbox.xmin and out.hbox.xmax <= 32

    def test_rbox_passthrough(self):
        box = OrientedBox(10, 10, 6, 4, 0.3)
        ann = WeakAnnotation.from_rbox(1, box)
        out = inject_noise(ann, box, 0.3, np.random.default_rng(3))
        assert out is ann


class TestBuildDataset:
    def test_split_sizes_and_labeling(self):
        spec = SceneSpec(h=24, w=24, min_objects=1, max_objects=2, min_size=4, max_size=8)
        ds = build_dataset(spec, 20, 5, 0.5, {"hbox": 1.0}, seed=9)
        assert len(ds.train) == 20 and len(ds.val) == 5
        labeled = [s for s in ds.train if s.labeled]
        assert 0 < len(labeled) < 20
        assert all(not s.annotations for s in ds.val)

    def test_seed_splitting_independence(self):
        spec = SceneSpec(h=24, w=24, min_objects=1, max_objects=2, min_size=4, max_size=8)
        a = build_dataset(spec, 4, 0, 1.0, {"rbox": 1.0}, seed=9)
        b = build_dataset(spec, 4, 0, 1.0, {"rbox": 1.0}, seed=9)
        for sa, sb in zip(a.train, b.train):
            assert scene_hash(sa) == scene_hash(sb)


class TestDotaFormat:
    def test_hand_example(self):
        result = parse_dota_annotations("0 0 2 0 2 1 0 1 cat 0\n")
        assert len(result.records) == 1 and not result.rejects
        rec = result.records[0]
        assert rec.category == "cat" and rec.difficult == 0
        assert rec.box.params() == pytest.approx([1.0, 0.5, 2.0, 1.0, 0.0])

    def test_header_only_file(self):
        result = parse_dota_annotations("imagesource:GoogleEarth\ngsd:0.146\n")
        assert result.records == [] and result.rejects == []

    def test_malformed_line_collected(self):
        text = "0 0 2 0 2 1 0 1 cat 0\n1 2 3 4 5 6 7\n"
        result = parse_dota_annotations(text)
        assert len(result.records) == 1
        assert len(result.rejects) == 1
        assert result.rejects[0][0] == 2

    def test_empty_file_raises(self):
        with pytest.raises(EmptyFile):
            parse_dota_annotations("")

    def test_round_trip_200_boxes(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            w = rng.uniform(2.0, 30.0)
            h = rng.uniform(1.0, w - 0.5)  # parser assigns theta from the longer edge
            box = OrientedBox(
                rng.uniform(-50, 50),
                rng.uniform(-50, 50),
                w,
                h,
                rng.uniform(-math.pi / 2 + 1e-6, math.pi / 2),
            )
            text = format_dota_annotations([DotaRecord(box, "thing", 0)])
            back = parse_dota_annotations(text).records[0].box
            assert back.cx == pytest.approx(box.cx, abs=1e-6)
            assert back.cy == pytest.approx(box.cy, abs=1e-6)
            assert back.w == pytest.approx(box.w, abs=1e-6)
            assert back.h == pytest.approx(box.h, abs=1e-6)
            dtheta = (back.theta - box.theta) % math.pi
            assert min(dtheta, math.pi - dtheta) < 1e-6

    def test_quad_to_obb_square_ties(self):
        box = quad_to_obb([[0, 0], [2, 0], [2, 2], [0, 2]])
        assert box.params() == pytest.approx([1.0, 1.0, 2.0, 2.0, 0.0])
