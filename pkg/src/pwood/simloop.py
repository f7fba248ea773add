"""Teacher-student training engine.

Pre-train on the weakly labeled scenes, copy the student into the teacher at
the burn-in step, then alternate supervised batches with teacher-filtered
distillation on unlabeled scenes, updating the teacher by EMA. Every
iteration is a pure gradient step in the flat parameter vector, so runs are
bit-deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cpf import DENSITY_MODE, dynamic_threshold, fit_gmm
from .detector import DensePrediction, PredGrads, ToyDetector, cell_centers
from .errors import ConfigInvalid, DegenerateScores, ShapeMismatch
from .evaluation import dataset_ap50, decode
from .geometry import HBox, OrientedBox, normalize_angle
from .losses import (
    LossValue,
    PointTargets,
    SupervisedAux,
    SupervisedWeights,
    ViewTransform,
    supervised_loss,
    total_loss,
    unsupervised_loss,
)
from .scale_targets import scale_targets_for_scene, scene_basins
from .scenes import FEATURE_DIM, Dataset, LabeledScene, WeakAnnotation


@dataclass
class EmaState:
    """Teacher parameter vector and its EMA momentum."""

    theta: np.ndarray
    momentum: float


def ema_update(state: EmaState, theta_student: np.ndarray) -> EmaState:
    """theta_T' = m * theta_T + (1 - m) * theta_S, exactly."""
    if state.theta.shape != theta_student.shape:
        raise ShapeMismatch("teacher/student parameter shapes disagree")
    m = state.momentum
    return EmaState(m * state.theta + (1.0 - m) * theta_student, m)


@dataclass(frozen=True)
class Schedule:
    """Training schedule; burn-in happens at pretrain_iters."""

    pretrain_iters: int
    total_iters: int
    lr: float = 0.05
    seed: int = 7
    ema_momentum: float = 0.999
    cpf_policy: str = DENSITY_MODE
    static_threshold: float | None = None
    labeled_fraction: float = 0.1
    form_mix: str = "hbox"
    noise_sigma: float = 0.0
    val_interval: int = 200
    val_subset: int = 25
    init_bias_prob: float = 0.02
    min_cpf_scores: int = 20
    scale_transform: str = "log1p"
    overlap_normalization: str = "count"
    point_radius: float = 1.5
    aug_noise: float = 0.1
    aug_erase: bool = True
    decode_top_k: int = 2000
    decode_max_dets: int = 100
    grad_clip: float | None = 1.0
    lr_box: float | None = 0.05
    lr_angle: float | None = 0.02

    @property
    def burn_in_step(self) -> int:
        return self.pretrain_iters

    def validate(self):
        if not (0 <= self.pretrain_iters <= self.total_iters):
            raise ConfigInvalid("need 0 <= pretrain_iters <= total_iters")
        if self.lr <= 0:
            raise ConfigInvalid("lr must be positive")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise ConfigInvalid("ema momentum must be in [0, 1]")
        if not (0.0 <= self.labeled_fraction <= 1.0):
            raise ConfigInvalid("labeled fraction must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigInvalid("noise sigma must be >= 0")
        parse_form_mix(self.form_mix)


def parse_form_mix(spec: str) -> dict[str, float]:
    """Parse "hbox" or "rbox:0.5,hbox:0.5" into a fraction dict."""
    spec = spec.strip()
    if not spec:
        raise ConfigInvalid("empty form mix")
    mix: dict[str, float] = {}
    if ":" not in spec:
        mix[spec] = 1.0
    else:
        for part in spec.split(","):
            name, _, frac = part.partition(":")
            mix[name.strip()] = float(frac)
    for form in mix:
        if form not in ("rbox", "hbox", "point"):
            raise ConfigInvalid(f"unknown annotation form {form!r}")
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigInvalid(f"form mix fractions sum to {total}, expected 1")
    return mix


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------


def assign_targets(
    annotations: list[WeakAnnotation],
    h: int,
    w: int,
    cell_size: float = 1.0,
    point_radius: float = 1.5,
) -> PointTargets:
    """FCOS-style dense targets from weak annotations.

    Box forms mark cells whose center falls inside the (oriented or
    horizontal) box and carry distance/centerness targets; point form marks
    cells within `point_radius` cells with a centerness target of 1 and no
    box geometry. Overlaps resolve to the smallest-area annotation.
    """
    class_id = np.full((h, w), -1, dtype=np.int64)
    cn = np.full((h, w), np.nan)
    dist = np.full((h, w, 4), np.nan)
    angle = np.full((h, w), np.nan)
    cxs, cys = cell_centers(h, w, cell_size)

    def _area(ann: WeakAnnotation) -> float:
        if ann.form == "rbox":
            return ann.rbox.area()
        if ann.form == "hbox":
            return ann.hbox.area()
        return 0.0

    # paint large to small so the smallest annotation wins contested cells
    for ann in sorted(annotations, key=_area, reverse=True):
        if ann.form == "point":
            px, py = ann.point
            mask = (cxs - px) ** 2 + (cys - py) ** 2 <= (point_radius * cell_size) ** 2
            class_id[mask] = ann.class_id
            cn[mask] = 1.0
            dist[mask] = np.nan
            angle[mask] = np.nan
            continue
        if ann.form == "rbox":
            box = ann.rbox
            c, s = math.cos(box.theta), math.sin(box.theta)
            dx = cxs - box.cx
            dy = cys - box.cy
            xp = c * dx + s * dy
            yp = -s * dx + c * dy
            left = xp + 0.5 * box.w
            right = 0.5 * box.w - xp
            top = yp + 0.5 * box.h
            bottom = 0.5 * box.h - yp
            ang_target = box.theta
        else:
            hb = ann.hbox
            left = cxs - hb.xmin
            right = hb.xmax - cxs
            top = cys - hb.ymin
            bottom = hb.ymax - cys
            ang_target = np.nan
        mask = (left >= 0) & (right >= 0) & (top >= 0) & (bottom >= 0)
        if not mask.any():
            continue
        class_id[mask] = ann.class_id
        lr_ratio = np.minimum(left, right) / np.maximum(left, right)
        tb_ratio = np.minimum(top, bottom) / np.maximum(top, bottom)
        with np.errstate(invalid="ignore"):
            cn[mask] = np.sqrt(lr_ratio[mask] * tb_ratio[mask])
        dist[mask, 0] = left[mask]
        dist[mask, 1] = top[mask]
        dist[mask, 2] = right[mask]
        dist[mask, 3] = bottom[mask]
        angle[mask] = ang_target
    return PointTargets(class_id, cn, dist, angle)


# ---------------------------------------------------------------------------
# augmentation and symmetry views
# ---------------------------------------------------------------------------


def augment(
    features: np.ndarray,
    mode: str,
    rng: np.random.Generator,
    noise_scale: float = 0.1,
    erase: bool = True,
) -> np.ndarray:
    """Weak = identity; strong = per-channel Gaussian noise + one zero erase.

    Geometry is unchanged so teacher/student cell correspondence stays the
    identity. The erased rectangle covers at most 20% of the grid.
    """
    if mode == "weak":
        return features
    if mode != "strong":
        raise ValueError(f"unknown augmentation mode {mode!r}")
    h, w, f = features.shape
    out = features.copy()
    if noise_scale > 0:
        stds = features.reshape(-1, f).std(axis=0)
        out += rng.normal(size=(h, w, f)) * (noise_scale * stds)
    if erase:
        fw = rng.uniform(0.1, 0.44)
        fh = rng.uniform(0.1, min(0.44, 0.2 / fw))
        ew = max(1, int(fw * w))
        eh = max(1, int(fh * h))
        x0 = int(rng.integers(0, w - ew + 1))
        y0 = int(rng.integers(0, h - eh + 1))
        out[y0 : y0 + eh, x0 : x0 + ew, :] = 0.0
    return out


def transform_annotation(
    ann: WeakAnnotation, trans: ViewTransform, h: int, w: int
) -> WeakAnnotation:
    """Map a weak annotation into the transformed view's coordinates."""
    if trans.kind == "flip":
        if ann.form == "rbox":
            b = ann.rbox
            return WeakAnnotation.from_rbox(
                ann.class_id, OrientedBox(b.cx, h - b.cy, b.w, b.h, -b.theta)
            )
        if ann.form == "hbox":
            hb = ann.hbox
            return WeakAnnotation.from_hbox(
                ann.class_id, HBox(hb.xmin, h - hb.ymax, hb.xmax, h - hb.ymin)
            )
        return WeakAnnotation.from_point(ann.class_id, (ann.point[0], h - ann.point[1]))
    gx, gy = 0.5 * w, 0.5 * h
    c, s = math.cos(trans.angle), math.sin(trans.angle)

    def _rot(x, y):
        dx, dy = x - gx, y - gy
        return gx + c * dx - s * dy, gy + s * dx + c * dy

    if ann.form == "rbox":
        b = ann.rbox
        x, y = _rot(b.cx, b.cy)
        return WeakAnnotation.from_rbox(
            ann.class_id, OrientedBox(x, y, b.w, b.h, normalize_angle(b.theta + trans.angle))
        )
    if ann.form == "hbox":
        corners = ann.hbox.corners()
        pts = np.array([_rot(x, y) for x, y in corners])
        return WeakAnnotation.from_hbox(
            ann.class_id,
            HBox(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()),
        )
    x, y = _rot(*ann.point)
    return WeakAnnotation.from_point(ann.class_id, (x, y))


def symmetry_view(
    features: np.ndarray,
    annotations: list[WeakAnnotation],
    trans: ViewTransform,
) -> tuple[np.ndarray, np.ndarray, list[WeakAnnotation]]:
    """Transformed feature grid, cell correspondence, transformed annotations.

    The correspondence maps each original cell to the view cell its center
    lands in ((-1, -1) when it falls off the grid). Flip is exact; rotation
    resamples features by nearest neighbor about the grid center.
    """
    h, w, _ = features.shape
    cell_map = np.full((h, w, 2), -1, dtype=np.int64)
    if trans.kind == "flip":
        view = features[::-1, :, :].copy()
        ys, xs = np.mgrid[0:h, 0:w]
        cell_map[:, :, 0] = h - 1 - ys
        cell_map[:, :, 1] = xs
    else:
        gx, gy = 0.5 * w, 0.5 * h
        c, s = math.cos(trans.angle), math.sin(trans.angle)
        ys, xs = np.mgrid[0:h, 0:w]
        px = xs + 0.5
        py = ys + 0.5
        # backward map for resampling
        sx = gx + c * (px - gx) + s * (py - gy)
        sy = gy - s * (px - gx) + c * (py - gy)
        six = np.floor(sx).astype(np.int64)
        siy = np.floor(sy).astype(np.int64)
        ok = (six >= 0) & (six < w) & (siy >= 0) & (siy < h)
        view = np.zeros_like(features)
        view[ok] = features[siy[ok], six[ok]]
        # forward map for the correspondence
        fx = gx + c * (px - gx) - s * (py - gy)
        fy = gy + s * (px - gx) + c * (py - gy)
        fix = np.floor(fx).astype(np.int64)
        fiy = np.floor(fy).astype(np.int64)
        fok = (fix >= 0) & (fix < w) & (fiy >= 0) & (fiy < h)
        cell_map[fok, 0] = fiy[fok]
        cell_map[fok, 1] = fix[fok]
    anns = [transform_annotation(a, trans, h, w) for a in annotations]
    return view, cell_map, anns


def draw_view_transform(rng: np.random.Generator) -> ViewTransform:
    """Flip or a uniform random rotation, 50/50."""
    if rng.uniform() < 0.5:
        return ViewTransform("flip")
    return ViewTransform("rotate", float(rng.uniform(0.0, 2.0 * math.pi)))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class StepPlan:
    """Everything one gradient step needs besides the student parameters.

    Quantities that the framework treats as constants (teacher outputs, CPF
    threshold, watershed scale targets) are frozen here, which makes
    `step_loss` a pure function of theta.
    """

    features: np.ndarray
    targets: PointTargets
    weak_form: str
    trans: ViewTransform | None = None
    view_features: np.ndarray | None = None
    cell_map: np.ndarray | None = None
    anchor_cells: np.ndarray | None = None
    scale_wh_targets: np.ndarray | None = None
    strong_features: np.ndarray | None = None
    teacher_pred: DensePrediction | None = None
    active_mask: np.ndarray | None = None
    omega: np.ndarray | None = None
    threshold: float | None = None


@dataclass
class ReportRow:
    iteration: int
    loss_sup: float
    loss_unsup: float | None
    threshold: float | None
    ap_val: float | None


@dataclass
class TrainingReport:
    rows: list[ReportRow]
    summary: dict

    CSV_HEADER = "iteration,loss_sup,loss_unsup,threshold,ap50_val"

    def to_csv(self) -> str:
        def _fmt(v):
            return "" if v is None else f"{v:.10g}"

        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.iteration},{_fmt(r.loss_sup)},{_fmt(r.loss_unsup)},"
                f"{_fmt(r.threshold)},{_fmt(r.ap_val)}"
            )
        return "\n".join(lines) + "\n"


def _split_supervised_grad(lv: LossValue, pred: DensePrediction, view_pred):
    n1 = pred.flat_size()
    g1 = PredGrads.from_flat(lv.grad[:n1], pred)
    g2 = None
    if view_pred is not None:
        g2 = PredGrads.from_flat(lv.grad[n1:], view_pred)
    return g1, g2


def step_loss(
    det: ToyDetector,
    theta: np.ndarray,
    plan: StepPlan,
    weights: SupervisedWeights,
    schedule: Schedule,
) -> tuple[LossValue, float, float | None]:
    """Total loss of one iteration with gradient in parameter space."""
    pred = det.forward(theta, plan.features)
    view_pred = None
    if plan.view_features is not None:
        view_pred = det.forward(theta, plan.view_features)
    aux = SupervisedAux(
        view_transform=plan.trans,
        view_pred=view_pred,
        cell_map=plan.cell_map,
        anchor_cells=plan.anchor_cells,
        scale_targets=plan.scale_wh_targets,
    )
    sup = supervised_loss(
        pred,
        plan.targets,
        plan.weak_form,
        weights,
        aux,
        scale_transform=schedule.scale_transform,
        overlap_normalization=schedule.overlap_normalization,
    )
    g1, g2 = _split_supervised_grad(sup, pred, view_pred)
    g_theta = det.backward(theta, plan.features, pred, g1)
    if g2 is not None:
        g_theta += det.backward(theta, plan.view_features, view_pred, g2)
    sup_theta = LossValue(sup.value, g_theta, empty=sup.empty, terms=sup.terms)

    unsup_value = None
    if plan.strong_features is not None:
        spred = det.forward(theta, plan.strong_features)
        lu = unsupervised_loss(plan.teacher_pred, spred, plan.active_mask, plan.omega)
        gu_theta = det.backward(
            theta, plan.strong_features, spred, PredGrads.from_flat(lu.grad, spred)
        )
        unsup_value = lu.value
        combined = total_loss(sup_theta, LossValue(lu.value, gu_theta, empty=lu.empty))
    else:
        combined = sup_theta
    return combined, sup.value, unsup_value


def _anchor_cell(point, h, w):
    ix = min(max(int(point[0]), 0), w - 1)
    iy = min(max(int(point[1]), 0), h - 1)
    return iy, ix


class _Trainer:
    """Owns the per-run caches and rng; one instance per train() call."""

    def __init__(self, det: ToyDetector, schedule: Schedule, dataset: Dataset):
        self.det = det
        self.schedule = schedule
        self.dataset = dataset
        self.rng = np.random.default_rng(schedule.seed)
        self.targets_cache: dict[int, PointTargets] = {}
        self.basins_cache: dict[int, np.ndarray] = {}
        self.last_threshold: float | None = None

    def _targets_for(self, idx: int, scene: LabeledScene) -> PointTargets:
        if idx not in self.targets_cache:
            h, w = scene.grid_shape
            self.targets_cache[idx] = assign_targets(
                scene.annotations, h, w, self.det.cell_size, self.schedule.point_radius
            )
        return self.targets_cache[idx]

    def build_plan(
        self, theta: np.ndarray, idx: int, unlabeled_idx: int | None, teacher
    ) -> StepPlan:
        scene = self.dataset.train[idx]
        h, w = scene.grid_shape
        form = scene.annotations[0].form
        plan = StepPlan(
            features=scene.features,
            targets=self._targets_for(idx, scene),
            weak_form=form,
        )
        if form in ("hbox", "point"):
            trans = draw_view_transform(self.rng)
            view, cmap, _ = symmetry_view(scene.features, scene.annotations, trans)
            plan.trans = trans
            plan.view_features = view
            plan.cell_map = cmap
        if form == "point":
            points = np.array([a.point for a in scene.annotations])
            anchors = np.array([_anchor_cell(p, h, w) for p in points])
            if idx not in self.basins_cache:
                self.basins_cache[idx] = scene_basins(points, scene.elevation)
            pred = self.det.forward(theta, scene.features)
            angles = normalize_angles_at(pred, anchors)
            wh = scale_targets_for_scene(
                points,
                angles,
                scene.elevation,
                resolution=self.det.cell_size,
                basins=self.basins_cache[idx],
            )
            plan.anchor_cells = anchors
            plan.scale_wh_targets = np.array(wh)
        if unlabeled_idx is not None and teacher is not None:
            uscene = self.dataset.train[unlabeled_idx]
            weak = augment(uscene.features, "weak", self.rng)
            strong = augment(
                uscene.features,
                "strong",
                self.rng,
                self.schedule.aug_noise,
                self.schedule.aug_erase,
            )
            tpred = self.det.forward(teacher.theta, weak)
            thr = self._choose_threshold(tpred)
            smap = tpred.scores()
            active = smap >= thr
            plan.strong_features = strong
            plan.teacher_pred = tpred
            plan.active_mask = active
            plan.omega = np.where(active, smap, 0.0)
            plan.threshold = thr
        return plan

    def _choose_threshold(self, teacher_pred: DensePrediction) -> float:
        if self.schedule.static_threshold is not None:
            thr = float(self.schedule.static_threshold)
        else:
            scores = teacher_pred.scores().ravel()
            if len(scores) < self.schedule.min_cpf_scores:
                thr = self.last_threshold if self.last_threshold is not None else 0.5
            else:
                try:
                    fit = fit_gmm(scores)
                    thr = dynamic_threshold(fit, scores, self.schedule.cpf_policy).threshold
                except DegenerateScores:
                    thr = self.last_threshold if self.last_threshold is not None else 0.5
        self.last_threshold = thr
        return thr


def normalize_angles_at(pred: DensePrediction, anchors: np.ndarray) -> np.ndarray:
    from .geometry import normalize_angles

    return normalize_angles(pred.angle[anchors[:, 0], anchors[:, 1]])


def evaluate_model(
    det: ToyDetector,
    theta: np.ndarray,
    scenes: list[LabeledScene],
    num_classes: int,
    top_k: int | None = 2000,
    max_dets_per_class: int | None = 100,
) -> tuple[dict[int, float], float]:
    """AP50 of a parameter vector over a scene list (per-scene matching)."""
    pairs = []
    for scene in scenes:
        pred = det.forward(theta, scene.features)
        pairs.append(
            (decode(pred, top_k=top_k, max_dets_per_class=max_dets_per_class), scene.gt)
        )
    return dataset_ap50(pairs, num_classes)


def train(
    schedule: Schedule,
    dataset: Dataset,
    detector: ToyDetector | None = None,
    weights: SupervisedWeights = SupervisedWeights(),
    return_state: bool = False,
):
    """Run the full pre-train -> burn-in -> distillation procedure.

    Phase 1 trains the student on labeled scenes only. At the burn-in step
    the student is copied into the teacher; afterwards each iteration adds a
    distillation term on one unlabeled scene (teacher on weak augmentation,
    student on strong, CPF-selected cells) and the teacher tracks the
    student by EMA. Returns the per-iteration trace and a summary.
    """
    schedule.validate()
    det = detector or ToyDetector(FEATURE_DIM, dataset.num_classes)
    trainer = _Trainer(det, schedule, dataset)
    theta = det.init_params(schedule.init_bias_prob)
    # per-head learning rates: the exponential box head and the free-running
    # angle head need far smaller steps than the sigmoid heads
    lr_vec = np.full(det.n_params, schedule.lr)
    slices = det.param_slices()
    if schedule.lr_box is not None:
        lr_vec[slices["box"]] = schedule.lr_box
    if schedule.lr_angle is not None:
        lr_vec[slices["angle"]] = schedule.lr_angle
    labeled_ids = [i for i, s in enumerate(dataset.train) if s.labeled]
    unlabeled_ids = [i for i, s in enumerate(dataset.train) if not s.labeled]
    if not labeled_ids:
        raise ConfigInvalid("dataset has no labeled scenes")

    teacher: EmaState | None = None
    rows: list[ReportRow] = []
    for it in range(schedule.total_iters):
        if teacher is None and it == schedule.burn_in_step:
            teacher = EmaState(theta.copy(), schedule.ema_momentum)
        li = labeled_ids[int(trainer.rng.integers(len(labeled_ids)))]
        ui = None
        if teacher is not None and unlabeled_ids:
            ui = unlabeled_ids[int(trainer.rng.integers(len(unlabeled_ids)))]
        plan = trainer.build_plan(theta, li, ui, teacher)
        combined, sup_value, unsup_value = step_loss(det, theta, plan, weights, schedule)
        grad = combined.grad
        if schedule.grad_clip is not None:
            # per-component value clip: bounds every update step, which keeps
            # the exponential box head from overshooting into its clamp
            grad = np.clip(grad, -schedule.grad_clip, schedule.grad_clip)
        theta = theta - lr_vec * grad
        if teacher is not None:
            teacher = ema_update(teacher, theta)

        ap = None
        if schedule.val_interval and (it + 1) % schedule.val_interval == 0 and dataset.val:
            eval_theta = teacher.theta if teacher is not None else theta
            _, ap = evaluate_model(
                det,
                eval_theta,
                dataset.val[: schedule.val_subset],
                dataset.num_classes,
                schedule.decode_top_k,
                schedule.decode_max_dets,
            )
        rows.append(ReportRow(it, sup_value, unsup_value, plan.threshold, ap))

    final_theta_student = theta
    per_class_s, ap_student = evaluate_model(
        det,
        final_theta_student,
        dataset.val,
        dataset.num_classes,
        schedule.decode_top_k,
        schedule.decode_max_dets,
    )
    if teacher is not None:
        per_class_t, ap_teacher = evaluate_model(
            det,
            teacher.theta,
            dataset.val,
            dataset.num_classes,
            schedule.decode_top_k,
            schedule.decode_max_dets,
        )
        final_ap, per_class = ap_teacher, per_class_t
    else:
        ap_teacher, per_class_t = None, None
        final_ap, per_class = ap_student, per_class_s

    summary = {
        "final_ap50": final_ap,
        "final_ap50_student": ap_student,
        "final_ap50_teacher": ap_teacher,
        "per_class_ap50": {str(k): v for k, v in per_class.items()},
        "final_threshold": trainer.last_threshold,
        "seed": schedule.seed,
        "iterations": schedule.total_iters,
        "burn_in_step": schedule.burn_in_step,
        "labeled_scenes": len(labeled_ids),
        "unlabeled_scenes": len(unlabeled_ids),
    }
    report = TrainingReport(rows, summary)
    if return_state:
        state = {
            "theta_student": theta,
            "theta_teacher": teacher.theta if teacher is not None else None,
        }
        return report, state
    return report
