"""Voronoi + watershed pipeline for per-object scale regression targets.

Point annotations act as foreground markers and the ridges of their pixel
Voronoi diagram as background markers; priority-flooding an elevation grid
(the edge-magnitude map of the rendered scene) then segments a basin per
object whose rotated extent provides a (w_t, h_t) regression target.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyBasin, NoMarkers, NoPoints

UNLABELED = -1


@dataclass
class MarkerSet:
    """Foreground point markers (scene coords, 1-based ids) plus a ridge mask."""

    foreground: list[tuple[tuple[float, float], int]]
    ridge: np.ndarray  # (H, W) bool

    def __post_init__(self):
        h, w = self.ridge.shape
        for (x, y), obj_id in self.foreground:
            if not (0.0 <= x < w and 0.0 <= y < h):
                raise ValueError(f"marker ({x}, {y}) outside {h}x{w} grid")
            if obj_id < 1:
                raise ValueError("object ids must be >= 1")


def grid_voronoi(points: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-point labeling of the cell grid plus its ridge mask.

    Cells are labeled 1..P by Euclidean distance from the cell center to the
    points (ties to the lowest point index). Ridge cells are those 4-adjacent
    to a differently labeled cell.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(points) == 0:
        raise NoPoints("grid_voronoi needs at least one point")
    for x, y in points:
        if not (0.0 <= x < w and 0.0 <= y < h):
            raise ValueError(f"point ({x}, {y}) outside {h}x{w} grid")
    ys, xs = np.mgrid[0:h, 0:w]
    cx = xs + 0.5
    cy = ys + 0.5
    d2 = (cx[:, :, None] - points[None, None, :, 0]) ** 2 + (
        cy[:, :, None] - points[None, None, :, 1]
    ) ** 2
    labels = d2.argmin(axis=2).astype(np.int64) + 1

    ridge = np.zeros((h, w), dtype=bool)
    ridge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    ridge[1:, :] |= labels[1:, :] != labels[:-1, :]
    ridge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    ridge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    return labels, ridge


def watershed(elev: np.ndarray, markers: MarkerSet) -> np.ndarray:
    """Marker-seeded priority flood; returns a total (H, W) labeling.

    The queue is seeded with every marker cell (ridge cells labeled 0,
    foreground cells labeled by object id, in that foreground-then-ridge
    insertion order). The minimum-elevation cell pops first (ties by
    insertion sequence) and claims its unlabeled 4-neighbors. Any cell a
    flood never reaches falls back to background 0.
    """
    elev = np.asarray(elev, dtype=float)
    h, w = elev.shape
    if not markers.foreground:
        raise NoMarkers("watershed needs at least one foreground marker")
    labels = np.full((h, w), UNLABELED, dtype=np.int64)
    heap: list[tuple[float, int, int, int]] = []
    seq = 0
    for (x, y), obj_id in markers.foreground:
        iy, ix = int(y), int(x)
        labels[iy, ix] = obj_id
        heapq.heappush(heap, (float(elev[iy, ix]), seq, iy, ix))
        seq += 1
    for iy, ix in np.argwhere(markers.ridge):
        if labels[iy, ix] == UNLABELED:
            labels[iy, ix] = 0
            heapq.heappush(heap, (float(elev[iy, ix]), seq, int(iy), int(ix)))
            seq += 1

    while heap:
        _, _, iy, ix = heapq.heappop(heap)
        lab = labels[iy, ix]
        for ny, nx in ((iy - 1, ix), (iy + 1, ix), (iy, ix - 1), (iy, ix + 1)):
            if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] == UNLABELED:
                labels[ny, nx] = lab
                heapq.heappush(heap, (float(elev[ny, nx]), seq, ny, nx))
                seq += 1
    labels[labels == UNLABELED] = 0
    return labels


def basin_extents(
    labels: np.ndarray,
    object_id: int,
    anchor: tuple[float, float],
    theta: float,
    resolution: float = 1.0,
    policy: str = "full",
    quantiles: tuple[float, float] = (0.02, 0.98),
) -> tuple[float, float]:
    """Extent of one basin in the frame rotated by -theta about the anchor.

    Full policy takes min/max of the rotated cell centers plus one cell;
    the quantile policy trims to the configured quantiles first. Output is
    scaled by `resolution` (cells to scene units).
    """
    cells = np.argwhere(labels == object_id)
    if len(cells) == 0:
        raise EmptyBasin(f"no cell labeled {object_id}")
    x = cells[:, 1] + 0.5 - anchor[0]
    y = cells[:, 0] + 0.5 - anchor[1]
    c, s = math.cos(-theta), math.sin(-theta)
    xp = c * x - s * y
    yp = s * x + c * y
    if policy == "full":
        w_t = float(xp.max() - xp.min()) + 1.0
        h_t = float(yp.max() - yp.min()) + 1.0
    elif policy == "quantile":
        lo, hi = quantiles
        w_t = float(np.quantile(xp, hi) - np.quantile(xp, lo)) + 1.0
        h_t = float(np.quantile(yp, hi) - np.quantile(yp, lo)) + 1.0
    else:
        raise ValueError(f"unknown extent policy {policy!r}")
    return w_t * resolution, h_t * resolution


def scene_basins(points: np.ndarray, elev: np.ndarray) -> np.ndarray:
    """Voronoi-ridge watershed labeling for a scene's annotated points.

    Points landing on a ridge cell have that ridge cell cleared so the
    marker-set invariant holds.
    """
    elev = np.asarray(elev, dtype=float)
    h, w = elev.shape
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    _, ridge = grid_voronoi(points, h, w)
    fg = []
    for idx, (x, y) in enumerate(points):
        ridge[int(y), int(x)] = False
        fg.append(((float(x), float(y)), idx + 1))
    return watershed(elev, MarkerSet(fg, ridge))


def scale_targets_for_scene(
    points: np.ndarray,
    angles: np.ndarray,
    elev: np.ndarray,
    resolution: float = 1.0,
    policy: str = "full",
    basins: np.ndarray | None = None,
) -> list[tuple[float, float]]:
    """One (w_t, h_t) pair per annotated point.

    `basins` may carry a cached `scene_basins` labeling (it depends only on
    the points and elevation, not on the predicted angles).
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if basins is None:
        basins = scene_basins(points, elev)
    out = []
    for idx, (x, y) in enumerate(points):
        out.append(
            basin_extents(
                basins,
                idx + 1,
                (float(x), float(y)),
                float(np.asarray(angles).reshape(-1)[idx]),
                resolution=resolution,
                policy=policy,
            )
        )
    return out


def basins_to_pgm(labels: np.ndarray) -> str:
    """Basin labeling as a P2 grayscale grid for visual inspection."""
    labels = np.asarray(labels)
    h, w = labels.shape
    top = max(int(labels.max()), 1)
    vals = (labels.astype(float) / top * 255.0).round().astype(int)
    lines = [f"P2", f"{w} {h}", "255"]
    for row in vals:
        lines.append(" ".join(str(v) for v in row))
    return "\n".join(lines) + "\n"
