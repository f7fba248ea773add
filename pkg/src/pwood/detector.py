"""Toy differentiable dense detector.

Per grid cell the detector predicts independent class probabilities, a
centerness score, four box distances (left/top/right/bottom, in the box
frame) and an angle, each as a linear head on a hand-crafted feature vector.
Parameters live in one flat vector so EMA updates and finite-difference
checks stay trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .geometry import OrientedBox, normalize_angle, normalize_angles

# Pre-activation clamp for the exp box head: distances stay inside
# [e^-2, e^3.5] cells, ample for the scene scale while keeping SGD bounded.
BOX_LOGIT_LO = -2.0
BOX_LOGIT_HI = 3.5


@dataclass
class DensePrediction:
    """Dense per-cell detector output on an H x W grid."""

    probs: np.ndarray  # (H, W, C) class probabilities in (0, 1)
    cn: np.ndarray  # (H, W) centerness in (0, 1)
    dist: np.ndarray  # (H, W, 4) distances l, t, r, b  (> 0, scene units)
    angle: np.ndarray  # (H, W) raw angle in radians (wrapped on decode)
    cell_size: float = 1.0

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.probs.shape[0], self.probs.shape[1]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    def scores(self) -> np.ndarray:
        """(H, W) per-cell confidence: max class probability x centerness."""
        return self.probs.max(axis=2) * self.cn

    def flat_size(self) -> int:
        h, w, c = self.probs.shape
        return h * w * (c + 6)

    def zero_grads(self) -> "PredGrads":
        return PredGrads(
            np.zeros_like(self.probs),
            np.zeros_like(self.cn),
            np.zeros_like(self.dist),
            np.zeros_like(self.angle),
        )


@dataclass
class PredGrads:
    """Gradient arrays aligned with the DensePrediction fields."""

    d_probs: np.ndarray
    d_cn: np.ndarray
    d_dist: np.ndarray
    d_angle: np.ndarray

    def to_flat(self) -> np.ndarray:
        return np.concatenate(
            [
                self.d_probs.ravel(),
                self.d_cn.ravel(),
                self.d_dist.ravel(),
                self.d_angle.ravel(),
            ]
        )

    @staticmethod
    def from_flat(flat: np.ndarray, pred: DensePrediction) -> "PredGrads":
        h, w, c = pred.probs.shape
        n = h * w
        sizes = [n * c, n, n * 4, n]
        if len(flat) != sum(sizes):
            raise ShapeMismatch(f"flat gradient length {len(flat)} != {sum(sizes)}")
        parts = np.split(np.asarray(flat, dtype=float), np.cumsum(sizes)[:-1])
        return PredGrads(
            parts[0].reshape(h, w, c),
            parts[1].reshape(h, w),
            parts[2].reshape(h, w, 4),
            parts[3].reshape(h, w),
        )

    def scale(self, s: float) -> "PredGrads":
        return PredGrads(self.d_probs * s, self.d_cn * s, self.d_dist * s, self.d_angle * s)


@dataclass
class ToyDetector:
    """Linear per-cell heads over an F-dim feature grid.

    Parameter layout (flat): W_cls (F*C), b_cls (C), w_cen (F), b_cen (1),
    W_box (F*4), b_box (4), w_ang (F), b_ang (1).
    """

    feature_dim: int = 12
    num_classes: int = 3
    cell_size: float = 1.0

    @property
    def n_params(self) -> int:
        f, c = self.feature_dim, self.num_classes
        return f * (c + 6) + c + 6

    def param_slices(self) -> dict[str, slice]:
        """Flat-vector slices per head, for param-group learning rates."""
        f, c = self.feature_dim, self.num_classes
        i_cls = f * c + c
        i_cen = i_cls + f + 1
        i_box = i_cen + f * 4 + 4
        i_ang = i_box + f + 1
        return {
            "cls": slice(0, i_cls),
            "cen": slice(i_cls, i_cen),
            "box": slice(i_cen, i_box),
            "angle": slice(i_box, i_ang),
        }

    def init_params(self, bias_prob: float | None = None) -> np.ndarray:
        """Zero weights; class/centerness biases optionally set to a prior prob."""
        theta = np.zeros(self.n_params)
        if bias_prob is not None:
            b = float(np.log(bias_prob / (1.0 - bias_prob)))
            f, c = self.feature_dim, self.num_classes
            theta[f * c : f * c + c] = b
        return theta

    def _split(self, theta: np.ndarray):
        f, c = self.feature_dim, self.num_classes
        if theta.shape != (self.n_params,):
            raise ShapeMismatch(f"theta shape {theta.shape} != ({self.n_params},)")
        i = 0
        w_cls = theta[i : i + f * c].reshape(f, c)
        i += f * c
        b_cls = theta[i : i + c]
        i += c
        w_cen = theta[i : i + f]
        i += f
        b_cen = theta[i]
        i += 1
        w_box = theta[i : i + f * 4].reshape(f, 4)
        i += f * 4
        b_box = theta[i : i + 4]
        i += 4
        w_ang = theta[i : i + f]
        i += f
        b_ang = theta[i]
        return w_cls, b_cls, w_cen, b_cen, w_box, b_box, w_ang, b_ang

    def forward(self, theta: np.ndarray, features: np.ndarray) -> DensePrediction:
        """Pure function of (theta, features) -> DensePrediction."""
        if features.ndim != 3 or features.shape[2] != self.feature_dim:
            raise ShapeMismatch(
                f"feature grid {features.shape} does not match feature_dim {self.feature_dim}"
            )
        h, w, f = features.shape
        x = features.reshape(-1, f)
        w_cls, b_cls, w_cen, b_cen, w_box, b_box, w_ang, b_ang = self._split(theta)
        probs = _sigmoid(x @ w_cls + b_cls).reshape(h, w, self.num_classes)
        cn = _sigmoid(x @ w_cen + b_cen).reshape(h, w)
        z_box = np.clip(x @ w_box + b_box, BOX_LOGIT_LO, BOX_LOGIT_HI)
        dist = (np.exp(z_box) * self.cell_size).reshape(h, w, 4)
        angle = (x @ w_ang + b_ang).reshape(h, w)
        return DensePrediction(probs, cn, dist, angle, self.cell_size)

    def backward(
        self,
        theta: np.ndarray,
        features: np.ndarray,
        pred: DensePrediction,
        grads: PredGrads,
    ) -> np.ndarray:
        """Chain loss gradients on the prediction back to a flat theta gradient."""
        h, w, f = features.shape
        x = features.reshape(-1, f)
        p = pred.probs.reshape(-1, self.num_classes)
        dz_cls = grads.d_probs.reshape(-1, self.num_classes) * p * (1.0 - p)
        cn = pred.cn.reshape(-1)
        dz_cen = grads.d_cn.reshape(-1) * cn * (1.0 - cn)
        # d dist / d z = dist itself; zero where the clamp is active
        dist = pred.dist.reshape(-1, 4)
        z = np.log(np.maximum(dist / self.cell_size, 1e-300))
        live = (z > BOX_LOGIT_LO + 1e-12) & (z < BOX_LOGIT_HI - 1e-12)
        dz_box = grads.d_dist.reshape(-1, 4) * dist * live
        dz_ang = grads.d_angle.reshape(-1)

        g = np.zeros(self.n_params)
        fdim, c = self.feature_dim, self.num_classes
        i = 0
        g[i : i + fdim * c] = (x.T @ dz_cls).ravel()
        i += fdim * c
        g[i : i + c] = dz_cls.sum(axis=0)
        i += c
        g[i : i + fdim] = x.T @ dz_cen
        i += fdim
        g[i] = dz_cen.sum()
        i += 1
        g[i : i + fdim * 4] = (x.T @ dz_box).ravel()
        i += fdim * 4
        g[i : i + 4] = dz_box.sum(axis=0)
        i += 4
        g[i : i + fdim] = x.T @ dz_ang
        i += fdim
        g[i] = dz_ang.sum()
        return g


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cell_centers(h: int, w: int, cell_size: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """(H, W) arrays of cell-center x and y in scene units."""
    ys, xs = np.mgrid[0:h, 0:w]
    return (xs + 0.5) * cell_size, (ys + 0.5) * cell_size


def decode_cell_boxes(
    cx0: np.ndarray, cy0: np.ndarray, dist: np.ndarray, angle: np.ndarray
) -> np.ndarray:
    """Decode (l,t,r,b,angle) at anchor points into (cx,cy,w,h,theta) rows.

    Distances are measured in the box frame, so the center offset rotates by
    the predicted angle. Shapes: anchors (N,), dist (N, 4), angle (N,).
    """
    l, t, r, b = dist[:, 0], dist[:, 1], dist[:, 2], dist[:, 3]
    th = normalize_angles(angle)
    dxp = 0.5 * (r - l)
    dyp = 0.5 * (b - t)
    c, s = np.cos(th), np.sin(th)
    cx = cx0 + c * dxp - s * dyp
    cy = cy0 + s * dxp + c * dyp
    return np.stack([cx, cy, l + r, t + b, th], axis=1)


def decode_jacobians(dist: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """(N, 5, 5) Jacobians d(cx,cy,w,h,theta)/d(l,t,r,b,angle_raw)."""
    n = len(angle)
    l, t, r, b = dist[:, 0], dist[:, 1], dist[:, 2], dist[:, 3]
    th = normalize_angles(angle)
    c, s = np.cos(th), np.sin(th)
    dxp = 0.5 * (r - l)
    dyp = 0.5 * (b - t)
    jac = np.zeros((n, 5, 5))
    # cx row
    jac[:, 0, 0] = -0.5 * c
    jac[:, 0, 1] = 0.5 * s
    jac[:, 0, 2] = 0.5 * c
    jac[:, 0, 3] = -0.5 * s
    jac[:, 0, 4] = -s * dxp - c * dyp
    # cy row
    jac[:, 1, 0] = -0.5 * s
    jac[:, 1, 1] = -0.5 * c
    jac[:, 1, 2] = 0.5 * s
    jac[:, 1, 3] = 0.5 * c
    jac[:, 1, 4] = c * dxp - s * dyp
    # w, h, theta rows
    jac[:, 2, 0] = 1.0
    jac[:, 2, 2] = 1.0
    jac[:, 3, 1] = 1.0
    jac[:, 3, 3] = 1.0
    jac[:, 4, 4] = 1.0
    return jac


def decode_box_at(pred: DensePrediction, iy: int, ix: int) -> OrientedBox:
    """OrientedBox decoded from one cell of a dense prediction."""
    x0 = (ix + 0.5) * pred.cell_size
    y0 = (iy + 0.5) * pred.cell_size
    row = decode_cell_boxes(
        np.array([x0]),
        np.array([y0]),
        pred.dist[iy, ix][None, :],
        np.array([pred.angle[iy, ix]]),
    )[0]
    return OrientedBox(row[0], row[1], row[2], row[3], normalize_angle(row[4]))
