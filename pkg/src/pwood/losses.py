"""Loss suite with analytic gradients.

Every loss returns a :class:`LossValue` carrying the scalar and the gradient
with respect to its declared inputs; the layout is documented per function.
The composed supervised/unsupervised losses produce gradients over flattened
dense-prediction fields (see :class:`pwood.detector.PredGrads`) so the
training loop can backpropagate them through the detector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detector import DensePrediction, PredGrads, decode_cell_boxes, decode_jacobians
from .errors import InvalidTarget, ShapeMismatch
from .geometry import (
    HBox,
    OrientedBox,
    axis_iou,
    normalize_angle,
    normalize_angles,
    obb_to_gaussian,
    obb_to_hbox,
    rotated_iou,
)

SMOOTH_L1_BETA = 1.0
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
IOU_FD_STEP = 1e-6
_EPS_P = 1e-12

RBOX, HBOX, POINT = "rbox", "hbox", "point"


@dataclass
class LossValue:
    """Scalar loss plus the gradient w.r.t. the declared parameter vector."""

    value: float
    grad: np.ndarray
    empty: bool = False
    terms: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SupervisedWeights:
    """Term weights for the supervised loss; defaults follow the framework."""

    alpha1: float = 1.0  # classification
    alpha2: float = 1.0  # centerness
    alpha3: float = 1.0  # box IoU
    alpha4: float = 0.2  # angle symmetry
    alpha5: float = 10.0  # Gaussian overlap
    alpha6: float = 5.0  # watershed scale


@dataclass(frozen=True)
class ViewTransform:
    """Symmetry view: vertical flip, or rotation by `angle` about grid center."""

    kind: str  # "flip" | "rotate"
    angle: float = 0.0

    def __post_init__(self):
        if self.kind not in ("flip", "rotate"):
            raise ValueError(f"unknown view transform {self.kind!r}")


@dataclass
class PointTargets:
    """Per-cell assignment targets; NaN marks quantities the weak form lacks."""

    class_id: np.ndarray  # (H, W) int, -1 = background
    cn: np.ndarray  # (H, W) float
    dist: np.ndarray  # (H, W, 4) float
    angle: np.ndarray  # (H, W) float

    @property
    def positive_mask(self) -> np.ndarray:
        return self.class_id >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive_mask.sum())


@dataclass
class SupervisedAux:
    """Side inputs for the weak-form-specific supervised terms."""

    view_transform: ViewTransform | None = None
    view_pred: DensePrediction | None = None
    cell_map: np.ndarray | None = None  # (H, W, 2) int; view cell per cell, -1 = dropped
    anchor_cells: np.ndarray | None = None  # (N, 2) int (iy, ix), one per object
    scale_targets: np.ndarray | None = None  # (N, 2) float (w_t, h_t)


# ---------------------------------------------------------------------------
# elementary losses
# ---------------------------------------------------------------------------


def _smooth_l1_vec(r: np.ndarray, beta: float):
    """(value, dvalue/dr) of the smooth-L1 kernel, elementwise."""
    a = np.abs(r)
    quad = a < beta
    v = np.where(quad, 0.5 * r * r / beta, a - 0.5 * beta)
    g = np.where(quad, r / beta, np.sign(r))
    return v, g


def smooth_l1(x: float, t: float, beta: float = SMOOTH_L1_BETA) -> LossValue:
    """Smooth-L1 of (x - t); gradient w.r.t. [x]."""
    v, g = _smooth_l1_vec(np.array(x - t, dtype=float), beta)
    return LossValue(float(v), np.array([float(g)]))


def _focal_vec(p: np.ndarray, target: np.ndarray):
    """(value, dvalue/dp) of the symmetric-alpha focal kernel, elementwise."""
    p = np.clip(p, _EPS_P, 1.0 - _EPS_P)
    pt = np.where(target == 1, p, 1.0 - p)
    log_pt = np.log(pt)
    one_m = 1.0 - pt
    v = -FOCAL_ALPHA * one_m**FOCAL_GAMMA * log_pt
    dv_dpt = -FOCAL_ALPHA * (
        -FOCAL_GAMMA * one_m ** (FOCAL_GAMMA - 1) * log_pt + one_m**FOCAL_GAMMA / pt
    )
    g = dv_dpt * np.where(target == 1, 1.0, -1.0)
    return v, g


def focal_loss(p: float, target: int) -> LossValue:
    """Focal loss on one probability; gradient w.r.t. [p]."""
    v, g = _focal_vec(np.array(p, dtype=float), np.array(target))
    return LossValue(float(v), np.array([float(g)]))


def _bce_vec(p: np.ndarray, target: np.ndarray):
    """(value, dvalue/dp) of binary cross-entropy with soft targets."""
    p = np.clip(p, _EPS_P, 1.0 - _EPS_P)
    v = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    g = -target / p + (1.0 - target) / (1.0 - p)
    return v, g


def _entropy_vec(t: np.ndarray) -> np.ndarray:
    """Binary entropy of soft targets, with 0 log 0 = 0."""
    t = np.clip(t, 0.0, 1.0)
    out = np.zeros_like(t, dtype=float)
    m = (t > 0.0) & (t < 1.0)
    tm = t[m]
    out[m] = -(tm * np.log(tm) + (1.0 - tm) * np.log(1.0 - tm))
    return out


def bce_loss(p: float, target: float) -> LossValue:
    """Binary cross-entropy with a soft target; gradient w.r.t. [p]."""
    v, g = _bce_vec(np.array(p, dtype=float), np.array(target, dtype=float))
    return LossValue(float(v), np.array([float(g)]))


def angle_loss(theta: float, theta_view: float, trans: ViewTransform) -> LossValue:
    """Symmetry consistency between an original and a transformed-view angle.

    Flip pairs should satisfy theta_view + theta = 0; rotate pairs should
    satisfy theta_view - theta = rotation angle. The residual is wrapped to
    (-pi/2, pi/2] before smooth-L1. Gradient layout: [d/dtheta, d/dtheta_view].
    """
    if trans.kind == "flip":
        r = normalize_angle(theta_view + theta)
        sign_theta = 1.0
    else:
        r = normalize_angle(theta_view - theta - trans.angle)
        sign_theta = -1.0
    v, g = _smooth_l1_vec(np.array(r, dtype=float), SMOOTH_L1_BETA)
    return LossValue(float(v), np.array([sign_theta * float(g), float(g)]))


def iou_loss(pred: OrientedBox, gt: OrientedBox) -> LossValue:
    """1 - rotated IoU; gradient over [cx, cy, w, h, theta] of `pred`.

    The clipped-polygon area has no tidy closed-form derivative, so the
    gradient uses internal central differences (step 1e-6) on the box params.
    """
    value = 1.0 - rotated_iou(pred, gt)
    base = pred.params()
    grad = np.zeros(5)
    for k in range(5):
        hi, lo = base.copy(), base.copy()
        hi[k] += IOU_FD_STEP
        lo[k] -= IOU_FD_STEP
        f_hi = 1.0 - rotated_iou(OrientedBox(*hi), gt)
        f_lo = 1.0 - rotated_iou(OrientedBox(*lo), gt)
        grad[k] = (f_hi - f_lo) / (2.0 * IOU_FD_STEP)
    return LossValue(value, grad)


_SCALE_TRANSFORMS = ("identity", "log1p", "bounded")


def _scale_transform(d2: float, transform: str):
    """(value, dvalue/dd2) of the configured GWD transform."""
    if transform == "identity":
        return d2, 1.0
    if transform == "log1p":
        return math.log1p(d2), 1.0 / (1.0 + d2)
    if transform == "bounded":
        u = 1.0 + math.log1p(d2)
        return 1.0 - 1.0 / u, 1.0 / (u * u * (1.0 + d2))
    raise ValueError(f"unknown scale transform {transform!r}")


def _scale_loss_wh(w: float, h: float, wt: float, ht: float, transform: str):
    """Core of the watershed scale loss on raw (w, h); returns (v, dw, dh)."""
    dw = 0.5 * (w - wt)
    dh = 0.5 * (h - ht)
    d2 = dw * dw + dh * dh
    v, dv = _scale_transform(d2, transform)
    return v, dv * dw, dv * dh


def watershed_scale_loss(
    pred: OrientedBox, target_wh: tuple[float, float], transform: str = "log1p"
) -> LossValue:
    """Scale regression against watershed extents via the diagonal GWD.

    For zero-mean diagonal Gaussians the squared distance collapses to
    ((w - w_t)/2)^2 + ((h - h_t)/2)^2, then passes through a monotone
    transform (default ln(1 + d^2)). Gradient layout: [d/dw, d/dh].
    """
    wt, ht = float(target_wh[0]), float(target_wh[1])
    if wt <= 0.0 or ht <= 0.0:
        raise InvalidTarget(f"scale targets must be positive, got ({wt}, {ht})")
    v, gw, gh = _scale_loss_wh(pred.w, pred.h, wt, ht, transform)
    return LossValue(float(v), np.array([gw, gh]))


def _box_gaussian_derivs(box: OrientedBox):
    """mu, Sigma and dSigma/d(w, h, theta) for the box-as-Gaussian model."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s], [s, c]])
    qw, qh = (0.5 * box.w) ** 2, (0.5 * box.h) ** 2
    sigma = rot @ np.diag([qw, qh]) @ rot.T
    d_w = 0.5 * box.w * (rot @ np.diag([1.0, 0.0]) @ rot.T)
    d_h = 0.5 * box.h * (rot @ np.diag([0.0, 1.0]) @ rot.T)
    d_th = (qw - qh) * (rot @ np.array([[0.0, 1.0], [1.0, 0.0]]) @ rot.T)
    return box.center, sigma, d_w, d_h, d_th


def gaussian_overlap_loss(
    boxes: list[OrientedBox], normalization: str = "count"
) -> LossValue:
    """Mean Bhattacharyya overlap over ordered box pairs; zero for N <= 1.

    `normalization`: "count" divides the ordered-pair sum by N (the literal
    reading of the overlap objective); "pairs" divides by N(N-1) for a true
    pairwise mean. Gradient layout: 5 entries (cx, cy, w, h, theta) per box,
    in list order.
    """
    n = len(boxes)
    grad = np.zeros(5 * n)
    if n <= 1:
        return LossValue(0.0, grad)
    if normalization == "count":
        denom = float(n)
    elif normalization == "pairs":
        denom = float(n * (n - 1))
    else:
        raise ValueError(f"unknown normalization {normalization!r}")

    derivs = [_box_gaussian_derivs(b) for b in boxes]
    total = 0.0
    for i in range(n):
        mu_i, sig_i, dwi, dhi, dti = derivs[i]
        inv_i = np.linalg.inv(sig_i)
        for j in range(i + 1, n):
            mu_j, sig_j, dwj, dhj, dtj = derivs[j]
            inv_j = np.linalg.inv(sig_j)
            sbar = 0.5 * (sig_i + sig_j)
            p = np.linalg.inv(sbar)
            d = mu_i - mu_j
            pd = p @ d
            db = 0.125 * float(d @ pd) + 0.5 * math.log(
                np.linalg.det(sbar)
                / math.sqrt(np.linalg.det(sig_i) * np.linalg.det(sig_j))
            )
            bc = math.exp(-db)
            total += 2.0 * bc  # both ordered pairs

            outer = np.outer(pd, pd)
            g_shared = -0.0625 * outer + 0.25 * p
            g_i = g_shared - 0.25 * inv_i
            g_j = g_shared - 0.25 * inv_j
            gmu = 0.25 * pd
            # dBC = -BC * dDB; factor 2 for the ordered-pair double count
            f = -2.0 * bc / denom
            grad[5 * i : 5 * i + 5] += f * np.array(
                [
                    gmu[0],
                    gmu[1],
                    float((g_i * dwi).sum()),
                    float((g_i * dhi).sum()),
                    float((g_i * dti).sum()),
                ]
            )
            grad[5 * j : 5 * j + 5] += f * np.array(
                [
                    -gmu[0],
                    -gmu[1],
                    float((g_j * dwj).sum()),
                    float((g_j * dhj).sum()),
                    float((g_j * dtj).sum()),
                ]
            )
    return LossValue(total / denom, grad)


# ---------------------------------------------------------------------------
# composed losses
# ---------------------------------------------------------------------------


def _positive_cells(targets: PointTargets) -> np.ndarray:
    return np.argwhere(targets.class_id >= 0)


def _envelope_iou_batch(params: np.ndarray, thb: np.ndarray) -> np.ndarray:
    """Axis IoU between box envelopes and target HBoxes, both batched.

    params: (P, 5) decoded (cx, cy, w, h, theta); thb: (P, 4) xmin,ymin,xmax,ymax.
    """
    c = np.abs(np.cos(params[:, 4]))
    s = np.abs(np.sin(params[:, 4]))
    ex = 0.5 * params[:, 2] * c + 0.5 * params[:, 3] * s
    ey = 0.5 * params[:, 2] * s + 0.5 * params[:, 3] * c
    xmin, xmax = params[:, 0] - ex, params[:, 0] + ex
    ymin, ymax = params[:, 1] - ey, params[:, 1] + ey
    iw = np.minimum(xmax, thb[:, 2]) - np.maximum(xmin, thb[:, 0])
    ih = np.minimum(ymax, thb[:, 3]) - np.maximum(ymin, thb[:, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_p = (xmax - xmin) * (ymax - ymin)
    area_t = (thb[:, 2] - thb[:, 0]) * (thb[:, 3] - thb[:, 1])
    union = area_p + area_t - inter
    return np.where(union > 0.0, inter / np.maximum(union, 1e-300), 0.0)


def supervised_loss(
    pred: DensePrediction,
    targets: PointTargets,
    weak_form: str,
    weights: SupervisedWeights = SupervisedWeights(),
    aux: SupervisedAux | None = None,
    scale_transform: str = "log1p",
    overlap_normalization: str = "count",
) -> LossValue:
    """Weak-form-gated supervised loss over one scene.

    Term gating: rbox -> cls, cen, full-OBB IoU; hbox -> cls, cen, envelope
    IoU, angle symmetry; point -> cls, cen, angle symmetry, Gaussian overlap,
    watershed scale. Per-cell sums are normalized by the positive count.

    Gradient layout: the flattened primary prediction (probs, cn, dist,
    angle) followed by the flattened view prediction when `aux.view_pred`
    is present. A zero-positive scene yields a flagged zero loss.
    """
    if weak_form not in (RBOX, HBOX, POINT):
        raise ValueError(f"unknown weak form {weak_form!r}")
    aux = aux or SupervisedAux()
    h, w, c = pred.probs.shape
    has_view = aux.view_pred is not None
    g = pred.zero_grads()
    g_view = aux.view_pred.zero_grads() if has_view else None

    def _pack(value, empty=False, terms=None):
        flat = g.to_flat()
        if has_view:
            flat = np.concatenate([flat, g_view.to_flat()])
        return LossValue(float(value), flat, empty=empty, terms=terms or {})

    pos = _positive_cells(targets)
    n_pos = len(pos)
    if n_pos == 0:
        return _pack(0.0, empty=True)
    terms: dict[str, float] = {}

    # classification: focal over every cell and class
    onehot = (targets.class_id[:, :, None] == np.arange(c)[None, None, :]).astype(float)
    v_cls, g_cls = _focal_vec(pred.probs, onehot)
    terms["cls"] = float(v_cls.sum()) / n_pos
    g.d_probs += weights.alpha1 * g_cls / n_pos

    # centerness: excess BCE at positives with a defined target
    cen_mask = targets.positive_mask & np.isfinite(targets.cn)
    if cen_mask.any():
        t_cn = targets.cn[cen_mask]
        v_cen, g_cen = _bce_vec(pred.cn[cen_mask], t_cn)
        terms["cen"] = float((v_cen - _entropy_vec(t_cn)).sum()) / n_pos
        g.d_cn[cen_mask] += weights.alpha2 * g_cen / n_pos
    else:
        terms["cen"] = 0.0

    # box term
    terms["box"] = 0.0
    box_mask = targets.positive_mask & np.isfinite(targets.dist).all(axis=2)
    if weak_form in (RBOX, HBOX) and box_mask.any():
        cells = np.argwhere(box_mask)
        x0 = (cells[:, 1] + 0.5) * pred.cell_size
        y0 = (cells[:, 0] + 0.5) * pred.cell_size
        pdist = pred.dist[cells[:, 0], cells[:, 1]]
        pang = pred.angle[cells[:, 0], cells[:, 1]]
        params = decode_cell_boxes(x0, y0, pdist, pang)
        jacs = decode_jacobians(pdist, pang)
        tdist = targets.dist[cells[:, 0], cells[:, 1]]
        if weak_form == HBOX:
            thb = np.stack(
                [x0 - tdist[:, 0], y0 - tdist[:, 1], x0 + tdist[:, 2], y0 + tdist[:, 3]],
                axis=1,
            )
            base = _envelope_iou_batch(params, thb)
            value_box = float((1.0 - base).sum()) / n_pos
            g5 = np.zeros_like(params)
            for k in range(5):
                hi, lo = params.copy(), params.copy()
                hi[:, k] += IOU_FD_STEP
                lo[:, k] -= IOU_FD_STEP
                g5[:, k] = -(
                    _envelope_iou_batch(hi, thb) - _envelope_iou_batch(lo, thb)
                ) / (2.0 * IOU_FD_STEP)
        else:
            tang = targets.angle[cells[:, 0], cells[:, 1]]
            tparams = decode_cell_boxes(x0, y0, tdist, tang)
            value_box = 0.0
            g5 = np.zeros_like(params)
            for idx in range(len(cells)):
                gt_box = OrientedBox(*tparams[idx])
                lv = iou_loss(OrientedBox(*params[idx]), gt_box)
                value_box += lv.value
                g5[idx] = lv.grad
            value_box /= n_pos
        graw = np.einsum("pi,pik->pk", g5, jacs)
        scale = weights.alpha3 / n_pos
        np.add.at(g.d_dist, (cells[:, 0], cells[:, 1]), scale * graw[:, :4])
        np.add.at(g.d_angle, (cells[:, 0], cells[:, 1]), scale * graw[:, 4])
        terms["box"] = value_box

    # angle symmetry
    terms["ang"] = 0.0
    if weak_form in (HBOX, POINT) and has_view and aux.cell_map is not None:
        cmap = aux.cell_map
        valid = targets.positive_mask & (cmap[:, :, 0] >= 0)
        cells = np.argwhere(valid)
        if len(cells):
            vy = cmap[cells[:, 0], cells[:, 1], 0]
            vx = cmap[cells[:, 0], cells[:, 1], 1]
            th_p = pred.angle[cells[:, 0], cells[:, 1]]
            th_v = aux.view_pred.angle[vy, vx]
            trans = aux.view_transform
            if trans.kind == "flip":
                r = normalize_angles(th_v + th_p)
                s_p = 1.0
            else:
                r = normalize_angles(th_v - th_p - trans.angle)
                s_p = -1.0
            v_ang, g_ang = _smooth_l1_vec(r, SMOOTH_L1_BETA)
            n_pairs = len(cells)
            terms["ang"] = float(v_ang.sum()) / n_pairs
            scale = weights.alpha4 / n_pairs
            np.add.at(g.d_angle, (cells[:, 0], cells[:, 1]), scale * s_p * g_ang)
            np.add.at(g_view.d_angle, (vy, vx), scale * g_ang)

    # per-object terms at the anchor cells
    terms["overlap"] = 0.0
    terms["scale"] = 0.0
    if weak_form == POINT and aux.anchor_cells is not None and len(aux.anchor_cells):
        anchors = np.asarray(aux.anchor_cells)
        x0 = (anchors[:, 1] + 0.5) * pred.cell_size
        y0 = (anchors[:, 0] + 0.5) * pred.cell_size
        adist = pred.dist[anchors[:, 0], anchors[:, 1]]
        aang = pred.angle[anchors[:, 0], anchors[:, 1]]
        params = decode_cell_boxes(x0, y0, adist, aang)
        jacs = decode_jacobians(adist, aang)
        boxes = [OrientedBox(*row) for row in params]

        ov = gaussian_overlap_loss(boxes, overlap_normalization)
        terms["overlap"] = ov.value
        graw = np.einsum("pi,pik->pk", ov.grad.reshape(-1, 5), jacs)
        np.add.at(g.d_dist, (anchors[:, 0], anchors[:, 1]), weights.alpha5 * graw[:, :4])
        np.add.at(g.d_angle, (anchors[:, 0], anchors[:, 1]), weights.alpha5 * graw[:, 4])

        if aux.scale_targets is not None:
            st = np.asarray(aux.scale_targets, dtype=float)
            n_obj = len(boxes)
            v_sum = 0.0
            for idx, box in enumerate(boxes):
                v, gw_, gh_ = _scale_loss_wh(box.w, box.h, st[idx, 0], st[idx, 1], scale_transform)
                v_sum += v
                # w = l + r and h = t + b, so dw spreads to (l, r) and dh to (t, b)
                g.d_dist[anchors[idx, 0], anchors[idx, 1]] += (
                    weights.alpha6 / n_obj
                ) * np.array([gw_, gh_, gw_, gh_])
            terms["scale"] = v_sum / n_obj

    total = (
        weights.alpha1 * terms["cls"]
        + weights.alpha2 * terms["cen"]
        + weights.alpha3 * terms["box"]
        + weights.alpha4 * terms["ang"]
        + weights.alpha5 * terms["overlap"]
        + weights.alpha6 * terms["scale"]
    )
    return _pack(total, terms=terms)


def unsupervised_loss(
    teacher: DensePrediction,
    student: DensePrediction,
    active_mask: np.ndarray,
    omega: np.ndarray,
) -> LossValue:
    """Score-weighted distillation over CPF-selected cells.

    Per active cell: BCE from student to teacher class probabilities and
    centerness plus smooth-L1 on the four box distances, weighted by omega
    and normalized by the omega sum. Teacher values are constants. The raw
    BCE value includes the teacher self-entropy floor; `terms["excess"]`
    carries the floor-subtracted value. Gradient layout: flattened student
    prediction.
    """
    if teacher.probs.shape != student.probs.shape:
        raise ShapeMismatch("teacher/student grids disagree")
    g = student.zero_grads()
    cells = np.argwhere(active_mask)
    if len(cells) == 0:
        return LossValue(0.0, g.to_flat(), empty=True, terms={"excess": 0.0})
    wts = omega[cells[:, 0], cells[:, 1]]
    wsum = float(wts.sum())
    if wsum <= 0.0:
        return LossValue(0.0, g.to_flat(), empty=True, terms={"excess": 0.0})
    wn = wts / wsum

    t_probs = teacher.probs[cells[:, 0], cells[:, 1]]
    s_probs = student.probs[cells[:, 0], cells[:, 1]]
    v_cls, g_cls = _bce_vec(s_probs, t_probs)
    t_cn = teacher.cn[cells[:, 0], cells[:, 1]]
    s_cn = student.cn[cells[:, 0], cells[:, 1]]
    v_cn, g_cn = _bce_vec(s_cn, t_cn)
    v_box, g_box = _smooth_l1_vec(
        student.dist[cells[:, 0], cells[:, 1]] - teacher.dist[cells[:, 0], cells[:, 1]],
        SMOOTH_L1_BETA,
    )

    value = float((wn * (v_cls.sum(axis=1) + v_cn + v_box.sum(axis=1))).sum())
    floor = float((wn * (_entropy_vec(t_probs).sum(axis=1) + _entropy_vec(t_cn))).sum())
    np.add.at(g.d_probs, (cells[:, 0], cells[:, 1]), wn[:, None] * g_cls)
    np.add.at(g.d_cn, (cells[:, 0], cells[:, 1]), wn * g_cn)
    np.add.at(g.d_dist, (cells[:, 0], cells[:, 1]), wn[:, None] * g_box)
    return LossValue(
        value,
        g.to_flat(),
        terms={"excess": value - floor, "entropy_floor": floor},
    )


def total_loss(sup: LossValue, unsup: LossValue) -> LossValue:
    """Sum of the supervised and unsupervised losses, gradients added."""
    if sup.grad.shape != unsup.grad.shape:
        raise ShapeMismatch(
            f"gradient layouts disagree: {sup.grad.shape} vs {unsup.grad.shape}"
        )
    return LossValue(
        sup.value + unsup.value,
        sup.grad + unsup.grad,
        empty=sup.empty and unsup.empty,
        terms={"sup": sup.value, "unsup": unsup.value},
    )
