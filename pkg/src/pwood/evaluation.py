"""Detection decoding and AP50/mAP metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import DensePrediction, decode_cell_boxes
from .geometry import OrientedBox, obb_to_hbox, axis_iou, rotated_iou
from .scenes import GroundTruth


@dataclass(frozen=True)
class Detection:
    box: OrientedBox
    class_id: int
    score: float


def _pair_iou(a: OrientedBox, b: OrientedBox) -> float:
    # cheap reject on the axis envelopes before exact clipping
    if axis_iou(obb_to_hbox(a), obb_to_hbox(b)) <= 0.0:
        return 0.0
    return rotated_iou(a, b)


def _envelopes(boxes: list[OrientedBox]) -> np.ndarray:
    out = np.empty((len(boxes), 4))
    for i, b in enumerate(boxes):
        hb = obb_to_hbox(b)
        out[i] = (hb.xmin, hb.ymin, hb.xmax, hb.ymax)
    return out


def _envelope_overlaps(env: np.ndarray, envs: np.ndarray) -> np.ndarray:
    """Indices of `envs` rows whose axis envelope overlaps `env`."""
    if len(envs) == 0:
        return np.zeros(0, dtype=int)
    iw = np.minimum(env[2], envs[:, 2]) - np.maximum(env[0], envs[:, 0])
    ih = np.minimum(env[3], envs[:, 3]) - np.maximum(env[1], envs[:, 1])
    return np.nonzero((iw > 0) & (ih > 0))[0]


def decode(
    dense: DensePrediction,
    score_floor: float = 0.05,
    nms_iou: float = 0.5,
    top_k: int | None = None,
    max_dets_per_class: int | None = None,
) -> list[Detection]:
    """Per-cell boxes above the score floor, greedy rotated-IoU NMS per class.

    Scores are class probability x centerness; candidates sort by descending
    score with ties broken by cell index. `top_k` caps the candidate list
    before NMS and `max_dets_per_class` caps the survivors, both
    configuration-visible speed guards. Exact polygon clipping runs only for
    candidates whose axis envelopes overlap.
    """
    h, w, c = dense.probs.shape
    scores = dense.probs * dense.cn[:, :, None]  # (H, W, C)
    iy, ix, cls = np.nonzero(scores >= score_floor)
    if len(iy) == 0:
        return []
    cand_scores = scores[iy, ix, cls]
    cell_index = iy * w + ix
    order = np.lexsort((cell_index, -cand_scores))
    if top_k is not None and len(order) > top_k:
        order = order[:top_k]
    x0 = (ix[order] + 0.5) * dense.cell_size
    y0 = (iy[order] + 0.5) * dense.cell_size
    params = decode_cell_boxes(
        x0, y0, dense.dist[iy[order], ix[order]], dense.angle[iy[order], ix[order]]
    )
    boxes = [OrientedBox(*row) for row in params]
    envs = _envelopes(boxes)
    cls_sorted = cls[order]
    score_sorted = cand_scores[order]

    areas = np.array([b.area() for b in boxes])
    kept: list[Detection] = []
    for class_id in range(c):
        idxs = np.nonzero(cls_sorted == class_id)[0]
        chosen: list[int] = []
        chosen_envs = np.empty((len(idxs), 4))
        chosen_areas = np.empty(len(idxs))
        for i in idxs:
            ce = chosen_envs[: len(chosen)]
            iw = np.minimum(envs[i, 2], ce[:, 2]) - np.maximum(envs[i, 0], ce[:, 0])
            ih = np.minimum(envs[i, 3], ce[:, 3]) - np.maximum(envs[i, 1], ce[:, 1])
            env_inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
            # envelope intersection bounds the true one from above, so this
            # upper-bounds the rotated IoU and prunes most exact clips
            upper = env_inter / np.maximum(
                areas[i] + chosen_areas[: len(chosen)] - env_inter, 1e-300
            )
            near = np.nonzero(upper > nms_iou)[0]
            near = near[np.argsort(-upper[near], kind="stable")]
            if all(rotated_iou(boxes[i], boxes[chosen[j]]) <= nms_iou for j in near):
                chosen_envs[len(chosen)] = envs[i]
                chosen_areas[len(chosen)] = areas[i]
                chosen.append(int(i))
                if max_dets_per_class is not None and len(chosen) >= max_dets_per_class:
                    break
        kept.extend(
            Detection(boxes[i], class_id, float(score_sorted[i])) for i in chosen
        )
    kept.sort(key=lambda d: -d.score)
    return kept


def _class_ap(
    dets: list[tuple[int, Detection]], gts: list[tuple[int, OrientedBox]], iou_thresh: float
) -> float:
    """AP for one class; detections/gts tagged with a scene id."""
    n_gt = len(gts)
    if n_gt == 0:
        return float("nan")
    # per-scene gt buckets so matching never scans the whole dataset
    gt_by_scene: dict[int, list[int]] = {}
    for j, (scene, _) in enumerate(gts):
        gt_by_scene.setdefault(scene, []).append(j)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, i))
    matched: set[int] = set()
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        scene, det = dets[i]
        best_iou, best_j = 0.0, -1
        for j in gt_by_scene.get(scene, ()):
            if j in matched:
                continue
            iou = _pair_iou(det.box, gts[j][1])
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched.add(best_j)
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (np.arange(len(order)) + 1.0)
    # all-point interpolation: integrate the precision envelope
    ap = 0.0
    prev_r = 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1] if len(order) else precision
    for rank in range(len(order)):
        if tp[rank] == 0.0:
            continue
        r = recall[rank]
        ap += (r - prev_r) * env[rank]
        prev_r = r
    return float(ap)


def ap50(
    dets: list[Detection],
    gts: list[GroundTruth],
    num_classes: int,
    iou_thresh: float = 0.5,
) -> tuple[dict[int, float], float]:
    """Per-class AP and mAP over one pooled detection/ground-truth list.

    Classes without any ground truth are skipped; mAP averages the rest.
    """
    return dataset_ap50([(dets, gts)], num_classes, iou_thresh)


def dataset_ap50(
    per_scene: list[tuple[list[Detection], list[GroundTruth]]],
    num_classes: int,
    iou_thresh: float = 0.5,
) -> tuple[dict[int, float], float]:
    """AP with per-scene matching across a list of (detections, gts) pairs."""
    per_class: dict[int, float] = {}
    aps = []
    for class_id in range(num_classes):
        dets = [
            (scene_id, d)
            for scene_id, (ds, _) in enumerate(per_scene)
            for d in ds
            if d.class_id == class_id
        ]
        gts = [
            (scene_id, g.box)
            for scene_id, (_, gs) in enumerate(per_scene)
            for g in gs
            if g.class_id == class_id
        ]
        ap = _class_ap(dets, gts, iou_thresh)
        if not np.isnan(ap):
            per_class[class_id] = ap
            aps.append(ap)
    return per_class, float(np.mean(aps)) if aps else 0.0
