import numpy as np
import pytest

from pwood.detector import DensePrediction
from pwood.evaluation import Detection, ap50, dataset_ap50, decode
from pwood.geometry import OrientedBox
from pwood.scenes import GroundTruth


def _dense(h, w, c):
    return DensePrediction(
        probs=np.full((h, w, c), 0.01),
        cn=np.full((h, w), 0.5),
        dist=np.full((h, w, 4), 1.0),
        angle=np.zeros((h, w)),
    )


class TestDecode:
    def test_all_below_floor(self):
        assert decode(_dense(4, 4, 2)) == []

    def test_nms_keeps_best_of_identical_pair(self):
        pred = _dense(4, 4, 1)
        # adjacent cells decoding to the same box, scores 0.9 and 0.8
        pred.cn[1, 1] = pred.cn[1, 2] = 1.0
        pred.probs[1, 1, 0] = 0.9
        pred.probs[1, 2, 0] = 0.8
        pred.dist[1, 1] = [1.0, 1.0, 2.0, 1.0]
        pred.dist[1, 2] = [2.0, 1.0, 1.0, 1.0]
        dets = decode(pred)
        assert len(dets) == 1
        assert dets[0].score == pytest.approx(0.9)

    def test_disjoint_boxes_both_survive(self):
        pred = _dense(8, 8, 1)
        pred.cn[1, 1] = pred.cn[6, 6] = 1.0
        pred.probs[1, 1, 0] = 0.9
        pred.probs[6, 6, 0] = 0.8
        dets = decode(pred)
        assert len(dets) == 2

    def test_per_class_nms(self):
        pred = _dense(4, 4, 2)
        pred.cn[1, 1] = pred.cn[1, 2] = 1.0
        pred.probs[1, 1, 0] = 0.9
        pred.probs[1, 2, 1] = 0.8
        pred.dist[1, 1] = [1.0, 1.0, 2.0, 1.0]
        pred.dist[1, 2] = [2.0, 1.0, 1.0, 1.0]
        dets = decode(pred)
        assert len(dets) == 2  # identical boxes but different classes

    def test_top_k_cap(self):
        pred = _dense(6, 6, 1)
        pred.probs[:, :, 0] = 0.5
        dets_all = decode(pred, top_k=None)
        dets_capped = decode(pred, top_k=3)
        assert len(dets_capped) <= len(dets_all)


def _exact_det(box, cls, score):
    return Detection(box, cls, score)


class TestAp50:
    def test_single_exact_detection(self):
        gt = [GroundTruth(OrientedBox(5, 5, 4, 2, 0.3), 0)]
        dets = [_exact_det(gt[0].box, 0, 0.9)]
        per_class, m = ap50(dets, gt, num_classes=1)
        assert per_class[0] == pytest.approx(1.0) and m == pytest.approx(1.0)

    def test_low_iou_detection_scores_zero(self):
        gt = [GroundTruth(OrientedBox(5, 5, 4, 2, 0.0), 0)]
        shifted = OrientedBox(8.0, 5, 4, 2, 0.0)  # IoU well below 0.5
        per_class, m = ap50([_exact_det(shifted, 0, 0.9)], gt, num_classes=1)
        assert per_class[0] == 0.0 and m == 0.0

    def test_hand_pr_curve(self):
        g1 = OrientedBox(5, 5, 4, 2, 0.0)
        g2 = OrientedBox(20, 5, 4, 2, 0.0)
        gts = [GroundTruth(g1, 0), GroundTruth(g2, 0)]
        miss = OrientedBox(40, 40, 4, 2, 0.0)
        dets = [
            _exact_det(g1, 0, 0.9),
            _exact_det(miss, 0, 0.8),
            _exact_det(g2, 0, 0.7),
        ]
        per_class, m = ap50(dets, gts, num_classes=1)
        assert per_class[0] == pytest.approx(1.0 * 0.5 + (2 / 3) * 0.5, abs=1e-9)

    def test_zero_score_false_positive_never_increases_ap(self):
        rng = np.random.default_rng(0)
        gts = [GroundTruth(OrientedBox(5, 5, 4, 3, 0.2), 0)]
        dets = [_exact_det(gts[0].box, 0, 0.9)]
        base = ap50(dets, gts, num_classes=1)[1]
        worse = dets + [_exact_det(OrientedBox(30, 30, 2, 2, 0), 0, 0.0)]
        assert ap50(worse, gts, num_classes=1)[1] <= base

    def test_duplicate_detection_counts_as_fp(self):
        gt = [GroundTruth(OrientedBox(5, 5, 4, 2, 0.0), 0)]
        dets = [_exact_det(gt[0].box, 0, 0.9), _exact_det(gt[0].box, 0, 0.8)]
        per_class, _ = ap50(dets, gt, num_classes=1)
        # recall hits 1 at rank 1 with precision 1; the duplicate is a FP
        assert per_class[0] == pytest.approx(1.0)
        # with the duplicate ranked first by score manipulation, AP drops
        dets_swapped = [_exact_det(gt[0].box, 0, 0.9)] * 2
        per_class2, _ = ap50(dets_swapped, gt, num_classes=1)
        assert per_class2[0] <= 1.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        gts = [
            GroundTruth(OrientedBox(5 + 10 * k, 5, 4, 3, 0.1 * k), 0) for k in range(3)
        ]
        dets = [
            _exact_det(gts[k].box, 0, 0.5 + 0.1 * k) for k in range(3)
        ] + [_exact_det(OrientedBox(50, 50, 2, 2, 0), 0, 0.4)]
        base = ap50(dets, gts, num_classes=1)[1]
        for _ in range(5):
            perm = list(rng.permutation(len(dets)))
            assert ap50([dets[i] for i in perm], gts, num_classes=1)[1] == pytest.approx(base)

    def test_classes_without_gt_skipped(self):
        gts = [GroundTruth(OrientedBox(5, 5, 4, 2, 0.0), 0)]
        dets = [_exact_det(gts[0].box, 0, 0.9), _exact_det(gts[0].box, 1, 0.9)]
        per_class, m = ap50(dets, gts, num_classes=2)
        assert 1 not in per_class
        assert m == pytest.approx(1.0)

    def test_dataset_ap_respects_scene_boundaries(self):
        box = OrientedBox(5, 5, 4, 2, 0.0)
        gt_scene0 = [GroundTruth(box, 0)]
        gt_scene1 = [GroundTruth(box, 0)]
        # detection in scene 1 cannot match the gt of scene 0
        pairs = [([], gt_scene0), ([_exact_det(box, 0, 0.9)], gt_scene1)]
        _, m = dataset_ap50(pairs, num_classes=1)
        assert m == pytest.approx(0.5)
