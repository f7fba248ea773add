"""Command-line front end: dataset generation, training, CPF analysis,
threshold sweeps, offline DOTA evaluation and config inspection."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, format_config, parse_config
from .cpf import cpf_result_to_json, dynamic_threshold, fit_gmm
from .dataio import load_dataset, save_dataset
from .errors import ConfigInvalid, DegenerateScores, PwoodError
from .evaluation import Detection, dataset_ap50
from .scenes import GroundTruth, build_dataset, parse_dota_annotations
from .simloop import parse_form_mix, train
from .svgplot import line_plot_svg

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DEGENERATE = 3


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = parse_config(Path(args.config).read_text())
    env_seed = os.environ.get("PWOOD_SEED")
    if env_seed is not None:
        cfg = replace(cfg, seed=int(env_seed))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "policy", None):
        cfg = replace(cfg, cpf_policy=args.policy)
    if getattr(args, "plots", False):
        cfg = replace(cfg, plots=True)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _build_dataset(cfg: RunConfig):
    return build_dataset(
        cfg.scene_spec(),
        cfg.train_scenes,
        cfg.val_scenes,
        cfg.labeled_fraction,
        parse_form_mix(cfg.form_mix),
        cfg.noise_sigma,
        cfg.seed,
    )


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else Path(cfg.dataset_dir)
    dataset = _build_dataset(cfg)
    # run-local paths stay out of the manifest so identical configs produce
    # byte-identical dataset directories
    echo = {
        k: v
        for k, v in cfg.to_flat_dict().items()
        if k not in ("out_dir", "dataset_dir", "plots")
    }
    try:
        save_dataset(dataset, out, {"seed": cfg.seed, "config": echo})
    except OSError as exc:
        print(f"error: cannot write dataset: {exc}", file=sys.stderr)
        return EXIT_ERROR
    labeled = sum(1 for s in dataset.train if s.labeled)
    print(f"wrote {len(dataset.train)} train ({labeled} labeled) + {len(dataset.val)} val scenes to {out}")
    return EXIT_OK


def _write_report(cfg: RunConfig, report, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    summary = dict(report.summary)
    summary["config"] = cfg.to_flat_dict()
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    if cfg.plots:
        _write_plots(report, out)


def _write_plots(report, out: Path):
    rows = report.rows
    quantities = (
        ("loss_sup", lambda r: r.loss_sup),
        ("loss_unsup", lambda r: r.loss_unsup),
        ("threshold", lambda r: r.threshold),
        ("ap50_val", lambda r: r.ap_val),
    )
    for name, getter in quantities:
        xs = [float(r.iteration) for r in rows if getter(r) is not None]
        ys = [float(getter(r)) for r in rows if getter(r) is not None]
        (out / f"{name}.svg").write_text(line_plot_svg([(name, xs, ys)], title=name))


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset_dir = Path(args.dataset) if args.dataset else Path(cfg.dataset_dir)
    if dataset_dir.exists():
        dataset = load_dataset(dataset_dir)
    else:
        print(f"dataset {dataset_dir} not found; generating in memory", file=sys.stderr)
        dataset = _build_dataset(cfg)
    report = train(cfg.schedule(), dataset)
    out = Path(cfg.out_dir)
    _write_report(cfg, report, out)
    print(f"final AP50 {report.summary['final_ap50']:.4f} -> {out}/report.csv")
    return EXIT_OK


def cmd_cpf(args) -> int:
    cfg = _load_config(args)
    text = Path(args.scores).read_text()
    scores = [float(line) for line in text.split() if line.strip()]
    try:
        fit = fit_gmm(scores)
    except DegenerateScores as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    result = dynamic_threshold(fit, scores, cfg.cpf_policy)
    print(cpf_result_to_json(result))
    return EXIT_OK


def cmd_sweep_threshold(args) -> int:
    cfg = _load_config(args)
    dataset_dir = Path(args.dataset) if args.dataset else Path(cfg.dataset_dir)
    if dataset_dir.exists():
        dataset = load_dataset(dataset_dir)
    else:
        dataset = _build_dataset(cfg)
    grid = [float(t) for t in args.grid.split(",")] if args.grid else [
        round(0.1 * k, 1) for k in range(1, 10)
    ]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["threshold,final_ap50"]
    for thr in grid:
        run_cfg = replace(cfg, static_threshold=thr)
        report = train(run_cfg.schedule(), dataset)
        lines.append(f"{thr:.10g},{report.summary['final_ap50']:.10g}")
        print(f"static {thr:.2f}: AP50 {report.summary['final_ap50']:.4f}")
    cpf_cfg = replace(cfg, static_threshold=None)
    report = train(cpf_cfg.schedule(), dataset)
    lines.append(f"cpf,{report.summary['final_ap50']:.10g}")
    print(f"cpf: AP50 {report.summary['final_ap50']:.4f}")
    (out / "threshold_sweep.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _read_dota_gt(path: Path) -> tuple[list, dict[str, int]]:
    parsed = parse_dota_annotations(path.read_text())
    names = sorted({r.category for r in parsed.records})
    ids = {n: i for i, n in enumerate(names)}
    gts = [GroundTruth(r.box, ids[r.category]) for r in parsed.records]
    return gts, ids


def cmd_eval(args) -> int:
    gts, ids = _read_dota_gt(Path(args.gt))
    dets = []
    for lineno, raw in enumerate(Path(args.pred).read_text().splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) < 10:
            print(f"warning: pred line {lineno} malformed, skipped", file=sys.stderr)
            continue
        from .scenes import quad_to_obb

        quad = np.array([float(p) for p in parts[:8]]).reshape(4, 2)
        name = parts[8]
        score = float(parts[9])
        if name not in ids:
            continue
        dets.append(Detection(quad_to_obb(quad), ids[name], score))
    per_class, mean_ap = dataset_ap50([(dets, gts)], num_classes=len(ids))
    names = {i: n for n, i in ids.items()}
    payload = {
        "per_class_ap50": {names[k]: v for k, v in per_class.items()},
        "map50": mean_ap,
    }
    print(json.dumps(payload, sort_keys=True, indent=1))
    return EXIT_OK


def cmd_config(args) -> int:
    if args.defaults:
        print(format_config(RunConfig()), end="")
        return EXIT_OK
    cfg = _load_config(args)
    print(format_config(cfg), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pwood",
        description="Synthetic-scene simulator for partial weakly-supervised "
        "oriented object detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def _common(p, dataset=False):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory override")
        p.add_argument(
            "--policy", choices=("density", "posterior"), help="CPF threshold policy"
        )
        p.add_argument("--plots", action="store_true", help="emit SVG plots")
        if dataset:
            p.add_argument("--dataset", help="dataset directory override")

    p = sub.add_parser("gen", help="generate a dataset directory")
    _common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run the training loop and write reports")
    _common(p, dataset=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cpf", help="fit the score mixture from a score file")
    _common(p)
    p.add_argument("scores", help="text file, one score per line")
    p.set_defaults(func=cmd_cpf)

    p = sub.add_parser("sweep-threshold", help="static threshold grid vs CPF")
    _common(p, dataset=True)
    p.add_argument("--grid", help="comma-separated static thresholds")
    p.set_defaults(func=cmd_sweep_threshold)

    p = sub.add_parser("eval", help="AP between DOTA-format gt and predictions")
    p.add_argument("--gt", required=True, help="ground-truth DOTA file")
    p.add_argument("--pred", required=True, help="prediction file (DOTA + score)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("config", help="print the effective configuration")
    _common(p)
    p.add_argument("--defaults", action="store_true", help="print built-in defaults")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except PwoodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
