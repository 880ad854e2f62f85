"""Box conversions, IoU/GIoU and the L1 + GIoU box loss.

Every function works elementwise over the trailing 4-vector and broadcasts
over leading dims, so the same code serves pairwise cost matrices (plain
numpy, via broadcasting `a[:, None]` against `b[None]`) and differentiable
losses (DiffArray inputs).
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag

L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0


def _relu(x):
    if isinstance(x, ag.DiffArray):
        return ag.relu(x)
    return np.maximum(x, 0.0)


def _abs(x):
    if isinstance(x, ag.DiffArray):
        return ag.abs_(x)
    return np.abs(x)


def _sum_last(x):
    if isinstance(x, ag.DiffArray):
        return ag.sum_(x, axis=-1)
    return x.sum(axis=-1)


def _minimum(a, b):
    return a - _relu(a - b)


def _maximum(a, b):
    return b + _relu(a - b)


def _raw(x) -> np.ndarray:
    return x.values if isinstance(x, ag.DiffArray) else np.asarray(x)


# corner = center -/+ half extent, as one linear map on the trailing axis
_TO_CORNERS = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0], [-0.5, 0.0, 0.5, 0.0], [0.0, -0.5, 0.0, 0.5]])
_TO_CENTER = np.array([[0.5, 0.0, -1.0, 0.0], [0.0, 0.5, 0.0, -1.0], [0.5, 0.0, 1.0, 0.0], [0.0, 0.5, 0.0, 1.0]])


def _linear(b, m):
    if isinstance(b, ag.DiffArray):
        return ag.matmul(b, m.astype(b.dtype))
    b = np.asarray(b)
    return b @ m.astype(np.result_type(b.dtype, np.float32))


def cxcywh_to_xyxy(b):
    return _linear(b, _TO_CORNERS)


def xyxy_to_cxcywh(b):
    return _linear(b, _TO_CENTER)


def _prod_last(x):
    return x[..., 0] * x[..., 1]


def _area(b):
    return _prod_last(_relu(b[..., 2:] - b[..., :2]))


def _safe(den):
    # zero denominators only occur together with zero numerators; swap in 1
    zero = (_raw(den) == 0).astype(_raw(den).dtype)
    return den + zero


def _iou_union(a, b):
    inter = _prod_last(_relu(_minimum(a[..., 2:], b[..., 2:]) - _maximum(a[..., :2], b[..., :2])))
    union = _area(a) + _area(b) - inter
    return inter / _safe(union), union


def iou(a, b):
    """Intersection over union of corner boxes; 0 when the union is empty."""
    return _iou_union(a, b)[0]


def giou(a, b):
    """Generalized IoU of corner boxes, in (-1, 1]."""
    value, union = _iou_union(a, b)
    enclosure = _prod_last(_maximum(a[..., 2:], b[..., 2:]) - _minimum(a[..., :2], b[..., :2]))
    return value - (enclosure - union) / _safe(enclosure)


def box_loss(pred, target, l1_weight: float = L1_WEIGHT, giou_weight: float = GIOU_WEIGHT):
    """Weighted L1 (in cx,cy,w,h) plus weighted (1 - GIoU) (in corner form)."""
    l1 = _sum_last(_abs(pred - target))
    g = giou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(target))
    return l1_weight * l1 + giou_weight * (1.0 - g)


def pairwise_box_loss(pred: np.ndarray, target: np.ndarray, **kw) -> np.ndarray:
    """Box loss for every (pred i, target j) pair: (..., N, 4) x (..., G, 4) -> (..., N, G)."""
    return box_loss(pred[..., :, None, :], target[..., None, :, :], **kw)
