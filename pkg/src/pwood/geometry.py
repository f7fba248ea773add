"""Rotated-rectangle and 2-D Gaussian primitives.

Scene coordinates: x grows to the right, y grows downward (row direction of
the grids elsewhere in the package). A box angle is measured from the +x axis
toward the w edge and is stored wrapped to (-pi/2, pi/2]; a rectangle is
identical under a half turn, so that range covers every pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SingularCovariance

# Eigenvalue floor applied to every covariance; keeps Bhattacharyya/GWD finite
# for degenerate thin boxes.
VARIANCE_FLOOR = 1e-9


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi/2, pi/2] using the rectangle's pi-symmetry."""
    r = (theta + math.pi / 2.0) % math.pi
    if r == 0.0:
        r = math.pi
    return r - math.pi / 2.0


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    """Vector form of :func:`normalize_angle`."""
    r = np.mod(np.asarray(theta, dtype=float) + math.pi / 2.0, math.pi)
    r = np.where(r == 0.0, math.pi, r)
    return r - math.pi / 2.0


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle: center, side lengths and angle of the w edge."""

    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        if not (self.w > 0.0 and self.h > 0.0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> np.ndarray:
        """The 4 corners, CCW in the algebraic orientation, shape (4, 2)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        hw, hh = 0.5 * self.w, 0.5 * self.h
        local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center

    def params(self) -> np.ndarray:
        """(cx, cy, w, h, theta) as a 5-vector."""
        return np.array([self.cx, self.cy, self.w, self.h, self.theta])


@dataclass(frozen=True)
class HBox:
    """Axis-aligned box, the orientation-free weak annotation form."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError("HBox must have xmin < xmax and ymin < ymax")

    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def corners(self) -> np.ndarray:
        return np.array(
            [
                [self.xmin, self.ymin],
                [self.xmax, self.ymin],
                [self.xmax, self.ymax],
                [self.xmin, self.ymax],
            ]
        )


@dataclass(frozen=True)
class Gaussian2:
    """2-D Gaussian with symmetrized, variance-floored covariance."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(2)
        sig = np.asarray(self.sigma, dtype=float).reshape(2, 2)
        sig = 0.5 * (sig + sig.T)
        evals, evecs = np.linalg.eigh(sig)
        if evals.min() < VARIANCE_FLOOR:
            evals = np.maximum(evals, VARIANCE_FLOOR)
            sig = (evecs * evals) @ evecs.T
            sig = 0.5 * (sig + sig.T)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sig)

    def det(self) -> float:
        return float(np.linalg.det(self.sigma))

    def pdf(self, xy: np.ndarray) -> np.ndarray:
        """Density at points of shape (..., 2)."""
        xy = np.asarray(xy, dtype=float)
        d = xy - self.mu
        inv = np.linalg.inv(self.sigma)
        q = np.einsum("...i,ij,...j->...", d, inv, d)
        norm = 2.0 * math.pi * math.sqrt(self.det())
        return np.exp(-0.5 * q) / norm


@dataclass(frozen=True)
class ConvexPolygon:
    """Ordered CCW vertex list; empty means the null region."""

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "vertices", v)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) < 3

    def area(self) -> float:
        return polygon_area(self.vertices)


def polygon_area(vertices: np.ndarray) -> float:
    """Shoelace area (absolute value) of an ordered vertex list."""
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` by convex CCW polygon `clip`."""
    out = [tuple(p) for p in np.asarray(subject, dtype=float)]
    clip = np.asarray(clip, dtype=float)
    n = len(clip)
    for k in range(n):
        if len(out) < 3:
            return np.zeros((0, 2))
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        prev = inp[-1]
        prev_in = ex * (prev[1] - ay) - ey * (prev[0] - ax) >= 0.0
        for cur in inp:
            cur_in = ex * (cur[1] - ay) - ey * (cur[0] - ax) >= 0.0
            if cur_in != prev_in:
                # segment crosses the clip line; append the intersection
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = (ex * (ay - prev[1]) - ey * (ax - prev[0])) / denom
                    out.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
    if len(out) < 3:
        return np.zeros((0, 2))
    return np.array(out)


def obb_to_gaussian(box: OrientedBox) -> Gaussian2:
    """Model a box as a Gaussian: mean at the center, R diag((w/2)^2,(h/2)^2) R^T."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s], [s, c]])
    diag = np.diag([(0.5 * box.w) ** 2, (0.5 * box.h) ** 2])
    return Gaussian2(box.center, rot @ diag @ rot.T)


def bhattacharyya_coefficient(a: Gaussian2, b: Gaussian2) -> float:
    """Overlap coefficient exp(-D_B) in [0, 1]; 1 for identical Gaussians.

    D_B = 1/8 d^T S^-1 d + 1/2 ln(det S / sqrt(det Sa det Sb)), S = (Sa + Sb)/2.
    """
    sbar = 0.5 * (a.sigma + b.sigma)
    det_bar = float(np.linalg.det(sbar))
    if det_bar < VARIANCE_FLOOR**2:
        raise SingularCovariance(f"det of averaged covariance {det_bar} below floor")
    d = a.mu - b.mu
    inv = np.linalg.inv(sbar)
    term_mu = 0.125 * float(d @ inv @ d)
    term_det = 0.5 * math.log(det_bar / math.sqrt(a.det() * b.det()))
    return math.exp(-(term_mu + term_det))


def gwd_squared(a: Gaussian2, b: Gaussian2) -> float:
    """Squared 2-Wasserstein distance between Gaussians (closed form for 2x2).

    ||mu_a - mu_b||^2 + Tr(Sa) + Tr(Sb) - 2 Tr((Sb^1/2 Sa Sb^1/2)^1/2); the trace
    of the matrix square root reduces to sqrt(Tr(Sa Sb) + 2 sqrt(det Sa det Sb)).
    """
    det_prod = a.det() * b.det()
    if det_prod < VARIANCE_FLOOR**4:
        raise SingularCovariance("covariance determinant underflow")
    dmu = a.mu - b.mu
    tr_ab = float(np.trace(a.sigma @ b.sigma))
    cross = math.sqrt(max(tr_ab + 2.0 * math.sqrt(det_prod), 0.0))
    val = float(dmu @ dmu) + float(np.trace(a.sigma) + np.trace(b.sigma)) - 2.0 * cross
    return max(val, 0.0)


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Exact IoU of two rotated rectangles via polygon clipping."""
    inter = polygon_area(clip_polygon(a.corners(), b.corners()))
    if inter <= 0.0:
        return 0.0
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def obb_to_hbox(box: OrientedBox) -> HBox:
    """Tight axis-aligned envelope of the box corners."""
    corners = box.corners()
    return HBox(
        float(corners[:, 0].min()),
        float(corners[:, 1].min()),
        float(corners[:, 0].max()),
        float(corners[:, 1].max()),
    )


def obb_to_point(box: OrientedBox) -> np.ndarray:
    """Point annotation form: the box center."""
    return box.center


def hbox_to_obb(box: HBox) -> OrientedBox:
    """Axis-aligned box as a zero-angle OrientedBox."""
    return OrientedBox(
        0.5 * (box.xmin + box.xmax),
        0.5 * (box.ymin + box.ymax),
        box.xmax - box.xmin,
        box.ymax - box.ymin,
        0.0,
    )


def axis_iou(a: HBox, b: HBox) -> float:
    """IoU of two axis-aligned boxes (closed form)."""
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)
