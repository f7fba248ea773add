"""Dataset directory serialization: scene JSON + P2 PGM intensity grids.

Feature and elevation grids are recomputed from the stored intensity on
load, so the on-disk format stays small and loading is deterministic.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .geometry import HBox, OrientedBox
from .scenes import (
    Dataset,
    GroundTruth,
    LabeledScene,
    WeakAnnotation,
    elevation_grid,
    feature_grid,
)

PGM_MAXVAL = 65535
FORMAT_NAME = "pwood-dataset-v1"


def write_pgm(path: Path, intensity: np.ndarray) -> tuple[float, float]:
    """Quantize a float grid to 16-bit ASCII PGM; returns the (lo, hi) range."""
    lo = float(intensity.min())
    hi = float(intensity.max())
    if hi - lo < 1e-12:
        hi = lo + 1.0
    q = np.rint((intensity - lo) / (hi - lo) * PGM_MAXVAL).astype(int)
    h, w = intensity.shape
    lines = ["P2", f"{w} {h}", str(PGM_MAXVAL)]
    for row in q:
        lines.append(" ".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return lo, hi


def read_pgm(path: Path, lo: float, hi: float) -> np.ndarray:
    """Inverse of :func:`write_pgm` (dequantized float grid)."""
    tokens = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if tokens[0] != "P2":
        raise ValueError(f"{path} is not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array([int(t) for t in tokens[4 : 4 + w * h]], dtype=float).reshape(h, w)
    return lo + vals / maxval * (hi - lo)


def _ann_to_json(ann: WeakAnnotation) -> dict:
    if ann.form == "rbox":
        b = ann.rbox
        data = [b.cx, b.cy, b.w, b.h, b.theta]
    elif ann.form == "hbox":
        hb = ann.hbox
        data = [hb.xmin, hb.ymin, hb.xmax, hb.ymax]
    else:
        data = list(ann.point)
    return {"class": ann.class_id, "form": ann.form, "data": data}


def _ann_from_json(d: dict) -> WeakAnnotation:
    data = d["data"]
    if d["form"] == "rbox":
        return WeakAnnotation.from_rbox(d["class"], OrientedBox(*data))
    if d["form"] == "hbox":
        return WeakAnnotation.from_hbox(d["class"], HBox(*data))
    return WeakAnnotation.from_point(d["class"], data)


def save_scene(scene: LabeledScene, directory: Path, stem: str) -> dict:
    """Write one scene (JSON + PGM); returns its manifest entry."""
    pgm_name = f"{stem}.pgm"
    lo, hi = write_pgm(directory / pgm_name, scene.intensity)
    payload = {
        "num_classes": scene.num_classes,
        "intensity": {"pgm": pgm_name, "lo": lo, "hi": hi},
        "gt": [
            {
                "class": g.class_id,
                "box": [g.box.cx, g.box.cy, g.box.w, g.box.h, g.box.theta],
            }
            for g in scene.gt
        ],
        "annotations": [_ann_to_json(a) for a in scene.annotations],
    }
    json_name = f"{stem}.json"
    (directory / json_name).write_text(json.dumps(payload, sort_keys=True, indent=1))
    return {"scene": json_name}


def load_scene(directory: Path, json_name: str) -> LabeledScene:
    payload = json.loads((directory / json_name).read_text())
    meta = payload["intensity"]
    intensity = read_pgm(directory / meta["pgm"], meta["lo"], meta["hi"])
    return LabeledScene(
        intensity=intensity,
        features=feature_grid(intensity),
        elevation=elevation_grid(intensity),
        gt=[GroundTruth(OrientedBox(*g["box"]), g["class"]) for g in payload["gt"]],
        annotations=[_ann_from_json(a) for a in payload["annotations"]],
        num_classes=payload["num_classes"],
    )


def save_dataset(dataset: Dataset, directory: Path, manifest_extra: dict | None = None):
    """Write a dataset directory with a manifest and train/val scene files."""
    directory = Path(directory)
    (directory / "train").mkdir(parents=True, exist_ok=True)
    (directory / "val").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "num_classes": dataset.num_classes,
        "train": [],
        "val": [],
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    digits = max(5, int(math.log10(max(len(dataset.train), 1)) + 1))
    for i, scene in enumerate(dataset.train):
        entry = save_scene(scene, directory / "train", f"train_{i:0{digits}d}")
        manifest["train"].append(entry["scene"])
    for i, scene in enumerate(dataset.val):
        entry = save_scene(scene, directory / "val", f"val_{i:0{digits}d}")
        manifest["val"].append(entry["scene"])
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_dataset(directory: Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != FORMAT_NAME:
        raise ValueError(f"unexpected dataset format {manifest.get('format')!r}")
    train = [load_scene(directory / "train", name) for name in manifest["train"]]
    val = [load_scene(directory / "val", name) for name in manifest["val"]]
    return Dataset(train, val, manifest["num_classes"])
