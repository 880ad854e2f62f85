"""COCO-style average precision on normalised cx,cy,w,h boxes.

Every (query, class) pair of the final decoder layer is a candidate
detection scored by that class probability; there is no score threshold.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .boxes import cxcywh_to_xyxy

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    ap50: float
    ap75: float
    map: float
    ap_small: float
    ap_medium: float
    ap_large: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageDetections:
    scores: np.ndarray  # (D,)
    classes: np.ndarray  # (D,)
    boxes: np.ndarray  # (D, 4) cx, cy, w, h

    @classmethod
    def from_query_probs(cls, probs: np.ndarray, boxes: np.ndarray) -> ImageDetections:
        n, k = probs.shape
        return cls(
            scores=probs.reshape(-1),
            classes=np.tile(np.arange(k), n),
            boxes=np.repeat(boxes, k, axis=0),
        )


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(D, 4) x (G, 4) cx,cy,w,h -> (D, G) IoU."""
    a = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))[:, None]
    b = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))[None]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1]) + (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1]) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _match_image(scores, det_boxes, det_area_ok, gt_boxes, gt_ignore, thresholds):
    """Greedy matching in descending score at every threshold.

    Returns (sorted scores, tp, skip) with tp/skip of shape (T, D).
    """
    order = np.argsort(-scores, kind="mergesort")
    n_t, n_d = len(thresholds), len(order)
    tp = np.zeros((n_t, n_d), dtype=bool)
    skip = np.zeros((n_t, n_d), dtype=bool)
    if len(gt_boxes) == 0:
        skip[:] = ~det_area_ok[order]
        return scores[order], tp, skip
    gt_order = np.argsort(gt_ignore, kind="mergesort")  # real GTs before ignored ones
    ign = gt_ignore[gt_order].tolist()
    ious = iou_matrix(det_boxes[order], gt_boxes[gt_order])
    row_max = ious.max(axis=1)
    ious_l = ious.tolist()
    area_ok = det_area_ok[order]
    n_g = len(gt_order)
    for t, thr in enumerate(thresholds):
        floor = min(thr, 1 - 1e-10)
        used = [False] * n_g
        for rank in range(n_d):
            best, best_iou = -1, floor
            if row_max[rank] >= floor:
                row = ious_l[rank]
                for g in range(n_g):
                    if used[g]:
                        continue
                    # once a real GT is matched, never fall back to an ignored one
                    if best > -1 and not ign[best] and ign[g]:
                        break
                    if row[g] < best_iou:
                        continue
                    best, best_iou = g, row[g]
            if best >= 0:
                used[best] = True
                tp[t, rank] = True
                skip[t, rank] = ign[best]
            else:
                skip[t, rank] = not area_ok[rank]
    return scores[order], tp, skip


def _interpolated_ap(scores, tp, n_pos) -> float:
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order].astype(np.float64)
    fp = 1.0 - tp
    tpc, fpc = np.cumsum(tp), np.cumsum(fp)
    recall = tpc / n_pos
    precision = tpc / np.maximum(tpc + fpc, np.finfo(np.float64).eps)
    # precision envelope
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return float(q.mean())


def class_ap_thresholds(
    dets: Sequence[ImageDetections],
    gts: Sequence[tuple[np.ndarray, np.ndarray]],
    cls: int,
    thresholds=IOU_THRESHOLDS,
    area_range: tuple[float, float] | None = None,
) -> list[float] | None:
    """AP of one class at each threshold; None if the class has no (non-ignored) ground truth."""
    thresholds = [float(t) for t in thresholds]
    per_t_scores = [[] for _ in thresholds]
    per_t_tp = [[] for _ in thresholds]
    n_pos = 0
    lo, hi = area_range if area_range is not None else (-np.inf, np.inf)
    for det, (g_cls, g_box) in zip(dets, gts):
        g_box = np.asarray(g_box, dtype=np.float64).reshape(-1, 4)
        gb = g_box[np.asarray(g_cls) == cls]
        g_area = gb[:, 2] * gb[:, 3]
        g_ign = (g_area < lo) | (g_area > hi)
        n_pos += int((~g_ign).sum())
        sel_d = det.classes == cls
        db = det.boxes[sel_d]
        d_area = db[:, 2] * db[:, 3]
        d_ok = (d_area >= lo) & (d_area <= hi)
        s, tp, skip = _match_image(det.scores[sel_d], db, d_ok, gb, g_ign, thresholds)
        for t in range(len(thresholds)):
            keep = ~skip[t]
            per_t_scores[t].append(s[keep])
            per_t_tp[t].append(tp[t][keep])
    if n_pos == 0:
        return None
    out = []
    for t in range(len(thresholds)):
        scores = np.concatenate(per_t_scores[t]) if per_t_scores[t] else np.zeros(0)
        tp = np.concatenate(per_t_tp[t]) if per_t_tp[t] else np.zeros(0, dtype=bool)
        out.append(_interpolated_ap(scores, tp, n_pos) if len(scores) else 0.0)
    return out


def class_ap(dets, gts, cls: int, thr: float, area_range=None) -> float | None:
    """AP of one class at one IoU threshold."""
    r = class_ap_thresholds(dets, gts, cls, [thr], area_range)
    return None if r is None else r[0]


def ap_table(dets, gts, n_classes: int, thresholds=IOU_THRESHOLDS, area_range=None) -> list[float | None]:
    """Per-threshold mean over classes that have ground truth (None where no class does)."""
    per_class = [class_ap_thresholds(dets, gts, c, thresholds, area_range) for c in range(n_classes)]
    per_class = [a for a in per_class if a is not None]
    if not per_class:
        return [None] * len(thresholds)
    return [float(np.mean(col)) for col in zip(*per_class)]


def mean_ap(dets, gts, n_classes: int, thresholds=IOU_THRESHOLDS, area_range=None) -> float:
    """Mean over thresholds of the mean over classes that have ground truth."""
    vals = [v for v in ap_table(dets, gts, n_classes, thresholds, area_range) if v is not None]
    return float(np.mean(vals)) if vals else 0.0


def size_edges(gts: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[float, float]:
    """Area terciles of the ground-truth boxes."""
    areas = np.concatenate([np.asarray(b).reshape(-1, 4)[:, 2] * np.asarray(b).reshape(-1, 4)[:, 3] for _, b in gts])
    if len(areas) == 0:
        return (0.0, 0.0)
    a, b = np.quantile(areas, [1 / 3, 2 / 3])
    return float(a), float(b)


def evaluate_detections(
    dets: Sequence[ImageDetections], gts: Sequence[tuple[np.ndarray, np.ndarray]], n_classes: int
) -> EvalResult:
    e1, e2 = size_edges(gts)
    eps = 1e-12
    table = ap_table(dets, gts, n_classes)
    i50 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.5)))
    i75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    vals = [v for v in table if v is not None]
    return EvalResult(
        ap50=table[i50] or 0.0,
        ap75=table[i75] or 0.0,
        map=float(np.mean(vals)) if vals else 0.0,
        ap_small=mean_ap(dets, gts, n_classes, area_range=(0.0, e1 + eps)),
        ap_medium=mean_ap(dets, gts, n_classes, area_range=(e1 + eps, e2 + eps)),
        ap_large=mean_ap(dets, gts, n_classes, area_range=(e2 + eps, np.inf)),
    )
