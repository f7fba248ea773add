import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from pwood import cli
from pwood.config import RunConfig, format_config, parse_config, parse_config_dict
from pwood.dataio import load_dataset, read_pgm, save_dataset, write_pgm
from pwood.errors import ConfigInvalid
from pwood.geometry import OrientedBox
from pwood.scenes import DotaRecord, SceneSpec, build_dataset, format_dota_annotations

TINY = """
grid_h = 24
grid_w = 24
min_objects = 1
max_objects = 2
min_size = 5
max_size = 9
num_classes = 2
train_scenes = 10
val_scenes = 3
labeled_fraction = 0.5
pretrain_iters = 3
total_iters = 6
val_interval = 0
seed = 5
"""


def write_tiny_config(tmp_path, extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(TINY + extra)
    return path


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert parse_config(format_config(cfg)) == cfg

    def test_partial_override(self):
        cfg = parse_config("seed = 11\nlr = 0.01\n")
        assert cfg.seed == 11 and cfg.lr == 0.01
        assert cfg.grid_h == 64  # untouched default

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigInvalid):
            parse_config("not_a_key = 3\n")

    def test_comments_and_blanks(self):
        cfg = parse_config("# comment\n\nseed = 8  # trailing\n")
        assert cfg.seed == 8

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ConfigInvalid):
            parse_config("pretrain_iters = 10\ntotal_iters = 5\n")

    def test_none_threshold(self):
        cfg = parse_config("static_threshold = none\n")
        assert cfg.static_threshold is None
        cfg = parse_config("static_threshold = 0.4\n")
        assert cfg.static_threshold == 0.4

    def test_flat_dict_round_trip(self):
        cfg = parse_config("seed = 3\nplots = true\nstatic_threshold = 0.2\n")
        assert parse_config_dict(cfg.to_flat_dict()) == cfg


class TestDataIo:
    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.normal(0.3, 0.2, size=(12, 9))
        lo, hi = write_pgm(tmp_path / "a.pgm", img)
        back = read_pgm(tmp_path / "a.pgm", lo, hi)
        assert np.abs(back - img).max() < (hi - lo) / 65535

    def test_dataset_round_trip(self, tmp_path):
        spec = SceneSpec(h=16, w=16, min_objects=1, max_objects=2, min_size=4, max_size=7)
        ds = build_dataset(spec, 4, 2, 0.5, {"hbox": 1.0}, seed=1)
        save_dataset(ds, tmp_path / "d", {"seed": 1})
        back = load_dataset(tmp_path / "d")
        assert len(back.train) == 4 and len(back.val) == 2
        for a, b in zip(ds.train, back.train):
            assert len(a.gt) == len(b.gt)
            assert [x.form for x in a.annotations] == [x.form for x in b.annotations]
            for ga, gb in zip(a.gt, b.gt):
                assert np.allclose(ga.box.params(), gb.box.params(), atol=1e-3)
            assert np.abs(a.intensity - b.intensity).max() < 1e-3


class TestCmdGen:
    def test_writes_dataset_and_manifest(self, tmp_path):
        cfg = write_tiny_config(tmp_path)
        out = tmp_path / "ds"
        assert cli.main(["gen", "--config", str(cfg), "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["train"]) == 10 and len(manifest["val"]) == 3
        assert (out / "train" / manifest["train"][0]).exists()

    def test_rerun_identical_bytes(self, tmp_path):
        cfg = write_tiny_config(tmp_path)
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        cli.main(["gen", "--config", str(cfg), "--out", str(out1)])
        cli.main(["gen", "--config", str(cfg), "--out", str(out2)])
        m1 = (out1 / "manifest.json").read_bytes()
        m2 = (out2 / "manifest.json").read_bytes()
        assert m1 == m2
        s1 = sorted(p.name for p in (out1 / "train").iterdir())
        for name in s1:
            assert (out1 / "train" / name).read_bytes() == (out2 / "train" / name).read_bytes()

    def test_unwritable_dir_fails(self, tmp_path):
        cfg = write_tiny_config(tmp_path)
        target = tmp_path / "blocked"
        target.write_text("a file, not a directory")
        assert cli.main(["gen", "--config", str(cfg), "--out", str(target)]) != 0


class TestCmdTrain:
    def _train(self, tmp_path, extra="", name="out"):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(
            TINY + f"dataset_dir = {tmp_path / 'ds'}\nout_dir = {tmp_path / name}\n" + extra
        )
        if not (tmp_path / "ds").exists():
            cli.main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "ds")])
        rc = cli.main(["train", "--config", str(cfg_path)])
        assert rc == 0
        return tmp_path / name

    def test_writes_reports(self, tmp_path):
        out = self._train(tmp_path)
        assert (out / "report.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert "final_ap50" in summary
        # config echo re-parses to an equal RunConfig
        echoed = parse_config_dict(summary["config"])
        assert echoed.seed == 5 and echoed.total_iters == 6

    def test_deterministic_csv(self, tmp_path):
        out1 = self._train(tmp_path, name="out1")
        out2 = self._train(tmp_path, name="out2")
        assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()

    def test_plots_emitted(self, tmp_path):
        out = self._train(tmp_path, extra="plots = true\n", name="outp")
        svg = (out / "loss_sup.svg").read_text()
        assert svg.startswith("<svg") and "polyline" in svg

    def test_env_seed_override(self, tmp_path, monkeypatch):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(TINY + f"out_dir = {tmp_path / 'env_out'}\n")
        monkeypatch.setenv("PWOOD_SEED", "17")
        rc = cli.main(["train", "--config", str(cfg_path)])
        assert rc == 0
        summary = json.loads((tmp_path / "env_out" / "summary.json").read_text())
        assert summary["seed"] == 17

    def test_pretrain_only_report_has_empty_unsup(self, tmp_path):
        out = self._train(tmp_path, extra="pretrain_iters = 6\n", name="outb")
        lines = (out / "report.csv").read_text().splitlines()
        for line in lines[1:]:
            cols = line.split(",")
            assert cols[2] == "" and cols[3] == ""


class TestCmdCpf:
    def test_two_cluster_file(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        scores = np.concatenate([rng.normal(0.15, 0.03, 40), rng.normal(0.85, 0.03, 40)])
        path = tmp_path / "scores.txt"
        path.write_text("\n".join(f"{s:.6f}" for s in np.clip(scores, 0, 1)))
        assert cli.main(["cpf", str(path)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert 0.15 < payload["threshold"] <= 0.95
        assert payload["policy"] == "density"

    def test_constant_file_exits_nonzero(self, tmp_path):
        path = tmp_path / "scores.txt"
        path.write_text("0.5\n" * 30)
        assert cli.main(["cpf", str(path)]) == cli.EXIT_DEGENERATE

    def test_policy_flag(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        scores = np.concatenate([rng.normal(0.2, 0.05, 40), rng.normal(0.8, 0.05, 40)])
        path = tmp_path / "scores.txt"
        path.write_text("\n".join(f"{s:.6f}" for s in np.clip(scores, 0, 1)))
        assert cli.main(["cpf", "--policy", "posterior", str(path)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["policy"] == "posterior"


class TestCmdSweep:
    def test_single_threshold_grid(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(
            TINY + f"dataset_dir = {tmp_path / 'ds'}\nout_dir = {tmp_path / 'sweep'}\n"
        )
        cli.main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "ds")])
        rc = cli.main(["sweep-threshold", "--config", str(cfg_path), "--grid", "0.1"])
        assert rc == 0
        lines = (tmp_path / "sweep" / "threshold_sweep.csv").read_text().splitlines()
        assert lines[0] == "threshold,final_ap50"
        assert len(lines) == 3  # one static row + one cpf row
        assert lines[1].startswith("0.1,")
        assert lines[2].startswith("cpf,")


class TestCmdEval:
    def test_dota_eval(self, tmp_path, capsys):
        gt_boxes = [
            DotaRecord(OrientedBox(5, 5, 4, 2, 0.2), "plane", 0),
            DotaRecord(OrientedBox(20, 8, 6, 3, -0.4), "ship", 0),
        ]
        (tmp_path / "gt.txt").write_text(format_dota_annotations(gt_boxes, header=True))
        pred_lines = []
        for rec in gt_boxes:
            coords = " ".join(f"{v:.6f}" for v in rec.box.corners().ravel())
            pred_lines.append(f"{coords} {rec.category} 0.9")
        (tmp_path / "pred.txt").write_text("\n".join(pred_lines) + "\n")
        rc = cli.main(["eval", "--gt", str(tmp_path / "gt.txt"), "--pred", str(tmp_path / "pred.txt")])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["map50"] == pytest.approx(1.0)
        assert payload["per_class_ap50"]["plane"] == pytest.approx(1.0)


class TestCmdConfig:
    def test_defaults_listing(self, capsys):
        assert cli.main(["config", "--defaults"]) == 0
        text = capsys.readouterr().out
        assert "seed = 7" in text and "grid_h = 64" in text
        assert parse_config(text) == RunConfig()

    def test_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--config", "--seed", "--out", "--policy", "--plots"):
            assert flag in text

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["config", "--config", str(tmp_path / "nope.cfg")]) != 0
