"""Deterministic synthetic oriented-rectangle scenes and weak annotations.

Scenes are rendered on an H x W cell grid (cell size 1 scene unit): noisy
background plus filled rotated rectangles with class-dependent intensity.
Feature and elevation grids derive deterministically from the intensity.
Also houses the DOTA annotation text format reader/writer used for offline
analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyFile, SpecInfeasible
from .geometry import (
    HBox,
    OrientedBox,
    normalize_angle,
    obb_to_hbox,
    obb_to_point,
    rotated_iou,
)

FEATURE_DIM = 12

RBOX, HBOX, POINT = "rbox", "hbox", "point"


@dataclass(frozen=True)
class SceneSpec:
    """Generation parameters for one synthetic scene family."""

    h: int = 64
    w: int = 64
    min_objects: int = 2
    max_objects: int = 6
    min_size: float = 6.0
    max_size: float = 20.0
    num_classes: int = 3
    max_pairwise_iou: float = 0.05
    background_noise: float = 0.05
    class_intensities: tuple[float, ...] | None = None
    seed: int = 7

    def intensities(self) -> np.ndarray:
        if self.class_intensities is not None:
            if len(self.class_intensities) != self.num_classes:
                raise ValueError("class_intensities length != num_classes")
            return np.asarray(self.class_intensities, dtype=float)
        c = self.num_classes
        return 0.4 + 0.6 * (np.arange(c) + 1) / c


@dataclass(frozen=True)
class WeakAnnotation:
    """Tagged union of the weak annotation forms."""

    class_id: int
    form: str  # "rbox" | "hbox" | "point"
    rbox: OrientedBox | None = None
    hbox: HBox | None = None
    point: tuple[float, float] | None = None

    def __post_init__(self):
        populated = sum(x is not None for x in (self.rbox, self.hbox, self.point))
        if populated != 1:
            raise ValueError("exactly one annotation payload must be set")
        if self.form not in (RBOX, HBOX, POINT):
            raise ValueError(f"unknown form {self.form!r}")

    @staticmethod
    def from_rbox(class_id: int, box: OrientedBox) -> "WeakAnnotation":
        return WeakAnnotation(class_id, RBOX, rbox=box)

    @staticmethod
    def from_hbox(class_id: int, box: HBox) -> "WeakAnnotation":
        return WeakAnnotation(class_id, HBOX, hbox=box)

    @staticmethod
    def from_point(class_id: int, xy) -> "WeakAnnotation":
        return WeakAnnotation(class_id, POINT, point=(float(xy[0]), float(xy[1])))


@dataclass(frozen=True)
class GroundTruth:
    box: OrientedBox
    class_id: int


@dataclass
class LabeledScene:
    """Rendered scene with ground truth and (possibly empty) weak labels."""

    intensity: np.ndarray  # (H, W)
    features: np.ndarray  # (H, W, FEATURE_DIM)
    elevation: np.ndarray  # (H, W)
    gt: list[GroundTruth]
    annotations: list[WeakAnnotation] = field(default_factory=list)
    num_classes: int = 3

    @property
    def labeled(self) -> bool:
        return len(self.annotations) > 0

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.intensity.shape


def _box_inside(box: OrientedBox, w: float, h: float) -> bool:
    corners = box.corners()
    return bool(
        (corners[:, 0] >= 0).all()
        and (corners[:, 1] >= 0).all()
        and (corners[:, 0] <= w).all()
        and (corners[:, 1] <= h).all()
    )


def sample_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[OrientedBox]:
    """Rejection-sample non-overlapping boxes inside the grid."""
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[OrientedBox] = []
    attempts = 0
    while len(boxes) < count and attempts < 1000:
        attempts += 1
        bw = float(rng.uniform(spec.min_size, spec.max_size))
        bh = float(rng.uniform(spec.min_size, spec.max_size))
        cx = float(rng.uniform(0.0, spec.w))
        cy = float(rng.uniform(0.0, spec.h))
        theta = float(rng.uniform(-math.pi / 2, math.pi / 2))
        cand = OrientedBox(cx, cy, bw, bh, theta)
        if not _box_inside(cand, spec.w, spec.h):
            continue
        if any(rotated_iou(cand, b) > spec.max_pairwise_iou for b in boxes):
            continue
        boxes.append(cand)
    if not boxes:
        raise SpecInfeasible("could not place a single object inside the grid")
    return boxes


def render_intensity(
    spec: SceneSpec, boxes: list[OrientedBox], classes: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Background noise plus filled rotated rectangles."""
    img = rng.normal(0.0, spec.background_noise, size=(spec.h, spec.w))
    levels = spec.intensities()
    ys, xs = np.mgrid[0 : spec.h, 0 : spec.w]
    cx = xs + 0.5
    cy = ys + 0.5
    for box, cls in zip(boxes, classes):
        c, s = math.cos(box.theta), math.sin(box.theta)
        dx = cx - box.cx
        dy = cy - box.cy
        xp = c * dx + s * dy
        yp = -s * dx + c * dy
        inside = (np.abs(xp) <= 0.5 * box.w) & (np.abs(yp) <= 0.5 * box.h)
        img[inside] = levels[cls]
    return img


def _box_filter_mean(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a clipped square window via an integral image."""
    h, w = img.shape
    integ = np.zeros((h + 1, w + 1))
    integ[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    ys, xs = np.mgrid[0:h, 0:w]
    y0 = np.clip(ys - radius, 0, h)
    y1 = np.clip(ys + radius + 1, 0, h)
    x0 = np.clip(xs - radius, 0, w)
    x1 = np.clip(xs + radius + 1, 0, w)
    total = integ[y1, x1] - integ[y0, x1] - integ[y1, x0] + integ[y0, x0]
    area = (y1 - y0) * (x1 - x0)
    return total / area


def feature_grid(intensity: np.ndarray) -> np.ndarray:
    """12 per-cell scalars: windowed stats, edge magnitudes, coordinates.

    Window radii span the object size range so the box head can read local
    coverage up to ~20-cell objects.
    """
    h, w = intensity.shape
    feats = np.empty((h, w, FEATURE_DIM))
    feats[:, :, 0] = intensity
    k = 1
    for radius in (2, 5, 10):  # 5x5, 11x11, 21x21 windows
        m = _box_filter_mean(intensity, radius)
        m2 = _box_filter_mean(intensity * intensity, radius)
        feats[:, :, k] = m
        feats[:, :, k + 3] = np.sqrt(np.maximum(m2 - m * m, 0.0))
        k += 1
    gy, gx = np.gradient(intensity)
    feats[:, :, 7] = np.abs(gx)
    feats[:, :, 8] = np.abs(gy)
    feats[:, :, 9] = np.hypot(gx, gy)
    ys, xs = np.mgrid[0:h, 0:w]
    feats[:, :, 10] = (xs + 0.5) / w
    feats[:, :, 11] = (ys + 0.5) / h
    return feats


def elevation_grid(intensity: np.ndarray) -> np.ndarray:
    """Edge-magnitude elevation used by the watershed pipeline."""
    gy, gx = np.gradient(intensity)
    return np.hypot(gx, gy)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> LabeledScene:
    """Rejection-sampled boxes, rendered and featurized (annotations empty)."""
    boxes = sample_boxes(spec, rng)
    classes = rng.integers(0, spec.num_classes, size=len(boxes))
    intensity = render_intensity(spec, boxes, classes, rng)
    return LabeledScene(
        intensity=intensity,
        features=feature_grid(intensity),
        elevation=elevation_grid(intensity),
        gt=[GroundTruth(b, int(c)) for b, c in zip(boxes, classes)],
        annotations=[],
        num_classes=spec.num_classes,
    )


def derive_annotations(
    gt: list[GroundTruth],
    form_mix: dict[str, float],
    labeled_fraction: float,
    rng: np.random.Generator,
) -> list[WeakAnnotation]:
    """Scene-level weak labels: Bernoulli(labeled) then one sampled form.

    Returns an empty list for unlabeled scenes. The form is drawn once per
    scene from `form_mix` (fractions over rbox/hbox/point summing to 1).
    """
    forms = sorted(form_mix)
    fracs = np.array([form_mix[f] for f in forms], dtype=float)
    if abs(fracs.sum() - 1.0) > 1e-9 or (fracs < 0).any():
        raise ValueError("form mix fractions must be non-negative and sum to 1")
    labeled = rng.uniform() < labeled_fraction
    form = forms[int(rng.choice(len(forms), p=fracs))]
    if not labeled:
        return []
    out = []
    for g in gt:
        if form == RBOX:
            out.append(WeakAnnotation.from_rbox(g.class_id, g.box))
        elif form == HBOX:
            out.append(WeakAnnotation.from_hbox(g.class_id, obb_to_hbox(g.box)))
        else:
            out.append(WeakAnnotation.from_point(g.class_id, obb_to_point(g.box)))
    return out


def inject_noise(
    ann: WeakAnnotation,
    gt_box: OrientedBox,
    sigma: float,
    rng: np.random.Generator,
    bounds: tuple[float, float] | None = None,
) -> WeakAnnotation:
    """Perturb annotation coordinates by i.i.d. Uniform(-sigma*H, +sigma*H).

    H is the ground-truth object height. Applies to HBox corners and Point
    coordinates; RBox annotations pass through. `bounds` = (W, H) scene size
    for clipping, None disables the clip.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0 or ann.form == RBOX:
        return ann
    amp = sigma * gt_box.h

    def _clip(v: float, limit: float) -> float:
        return min(max(v, 0.0), limit) if bounds is not None else v

    if ann.form == POINT:
        dx, dy = rng.uniform(-amp, amp, size=2)
        x = ann.point[0] + dx
        y = ann.point[1] + dy
        if bounds is not None:
            x, y = _clip(x, bounds[0]), _clip(y, bounds[1])
        return WeakAnnotation.from_point(ann.class_id, (x, y))

    d = rng.uniform(-amp, amp, size=4)
    xmin, ymin = ann.hbox.xmin + d[0], ann.hbox.ymin + d[1]
    xmax, ymax = ann.hbox.xmax + d[2], ann.hbox.ymax + d[3]
    if bounds is not None:
        xmin, xmax = _clip(xmin, bounds[0]), _clip(xmax, bounds[0])
        ymin, ymax = _clip(ymin, bounds[1]), _clip(ymax, bounds[1])
    if xmin >= xmax:
        xmin, xmax = min(xmin, xmax), min(xmin, xmax) + 1e-6
    if ymin >= ymax:
        ymin, ymax = min(ymin, ymax), min(ymin, ymax) + 1e-6
    return WeakAnnotation.from_hbox(ann.class_id, HBox(xmin, ymin, xmax, ymax))


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    train: list[LabeledScene]
    val: list[LabeledScene]
    num_classes: int


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Per-scene generator by seed splitting, so scenes are independent."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def build_dataset(
    spec: SceneSpec,
    n_train: int,
    n_val: int,
    labeled_fraction: float,
    form_mix: dict[str, float],
    noise_sigma: float = 0.0,
    seed: int | None = None,
) -> Dataset:
    """Generate train/val scene lists; only train scenes carry annotations."""
    seed = spec.seed if seed is None else seed
    train = []
    for i in range(n_train):
        rng = scene_rng(seed, i)
        scene = generate_scene(spec, rng)
        anns = derive_annotations(scene.gt, form_mix, labeled_fraction, rng)
        if noise_sigma > 0:
            anns = [
                inject_noise(a, g.box, noise_sigma, rng, bounds=(spec.w, spec.h))
                for a, g in zip(anns, scene.gt)
            ]
        scene.annotations = anns
        train.append(scene)
    val = [generate_scene(spec, scene_rng(seed, n_train + i)) for i in range(n_val)]
    return Dataset(train, val, spec.num_classes)


# ---------------------------------------------------------------------------
# DOTA annotation text format
# ---------------------------------------------------------------------------

_DOTA_HEADERS = ("imagesource:", "gsd:")


@dataclass
class DotaRecord:
    box: OrientedBox
    category: str
    difficult: int


@dataclass
class DotaParseResult:
    records: list[DotaRecord]
    rejects: list[tuple[int, str, str]]  # (line number, line, reason)


def quad_to_obb(quad: np.ndarray) -> OrientedBox:
    """Near-rectangular quad to OrientedBox.

    Center is the vertex mean; the angle follows the longer mean-edge pair,
    so the returned box always has w >= h; skew is absorbed by averaging
    opposite edges.
    """
    quad = np.asarray(quad, dtype=float).reshape(4, 2)
    center = quad.mean(axis=0)
    e1 = quad[1] - quad[0]
    e2 = quad[2] - quad[1]
    e3 = quad[3] - quad[2]
    e4 = quad[0] - quad[3]
    len_a = 0.5 * (np.linalg.norm(e1) + np.linalg.norm(e3))
    len_b = 0.5 * (np.linalg.norm(e2) + np.linalg.norm(e4))
    dir_a = 0.5 * (e1 - e3)
    dir_b = 0.5 * (e2 - e4)
    if len_a >= len_b:
        theta = math.atan2(dir_a[1], dir_a[0])
        w, h = len_a, len_b
    else:
        theta = math.atan2(dir_b[1], dir_b[0])
        w, h = len_b, len_a
    return OrientedBox(center[0], center[1], w, h, normalize_angle(theta))


def parse_dota_annotations(text: str) -> DotaParseResult:
    """Parse DOTA lines "x1 y1 x2 y2 x3 y3 x4 y4 category difficult".

    Header lines are skipped; malformed lines land in the rejects list.
    Raises EmptyFile only for a stream with no lines at all.
    """
    lines = text.splitlines()
    if not lines:
        raise EmptyFile("annotation stream contains no lines")
    records: list[DotaRecord] = []
    rejects: list[tuple[int, str, str]] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if any(line.lower().startswith(h) for h in _DOTA_HEADERS):
            continue
        parts = line.split()
        if len(parts) < 10:
            rejects.append((lineno, raw, f"expected 10 fields, got {len(parts)}"))
            continue
        try:
            coords = np.array([float(p) for p in parts[:8]]).reshape(4, 2)
            difficult = int(parts[9])
            box = quad_to_obb(coords)
        except (ValueError, ZeroDivisionError) as exc:
            rejects.append((lineno, raw, str(exc)))
            continue
        records.append(DotaRecord(box, parts[8], difficult))
    return DotaParseResult(records, rejects)


def format_dota_annotations(
    records: list[DotaRecord], header: bool = False
) -> str:
    """Inverse of the parser; corners emitted with 10 significant digits."""
    lines = []
    if header:
        lines.extend(["imagesource:synthetic", "gsd:1.0"])
    for rec in records:
        corners = rec.box.corners()
        coords = " ".join(f"{v:.10g}" for v in corners.ravel())
        lines.append(f"{coords} {rec.category} {rec.difficult}")
    return "\n".join(lines) + "\n"
