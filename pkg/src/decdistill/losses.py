"""Detection and distillation losses.

Conventions shared by every term:

* class BCE is averaged over the K classes of a query, then summed over
  queries;
* attention MSE is averaged over all map elements of a layer, then summed
  over layers and scaled;
* everything is averaged over the scenes of a batch.

Teacher quantities always arrive as plain ndarrays, so nothing here can send
gradient into the teacher.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autograd as ag
from .boxes import GIOU_WEIGHT, L1_WEIGHT, box_loss

MU_CLS = 20.0
LAMBDA_SA = 1e4
LAMBDA_CA = 1e4
PROB_EPS = 1e-7

STUDENT_MATCHING = ("adaptive", "index", "none")


@dataclass
class LossConfig:
    mu_cls: float = MU_CLS
    l1_weight: float = L1_WEIGHT
    giou_weight: float = GIOU_WEIGHT
    lambda_sa: float = LAMBDA_SA
    lambda_ca: float = LAMBDA_CA
    constraint_mode: str = "last-layer"
    use_pred: bool = True
    use_sa: bool = True
    use_ca: bool = True
    # how the student-query group is paired with teacher queries; "none" = no distillation
    student_matching: str = "adaptive"
    # auxiliary group fed the teacher's queries (fixed matching)
    fixed: bool = True
    n_student_groups: int = 1
    n_aux_groups: int = 1

    def __post_init__(self):
        for f in ("mu_cls", "l1_weight", "giou_weight", "lambda_sa", "lambda_ca"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be nonnegative")
        if self.student_matching not in STUDENT_MATCHING:
            raise ValueError(f"student_matching must be one of {STUDENT_MATCHING}")
        if self.constraint_mode not in ("off", "last-layer", "all-layers"):
            raise ValueError(f"unknown constraint mode {self.constraint_mode!r}")
        if self.n_student_groups < 1 or self.n_aux_groups < 1:
            raise ValueError("group counts must be >= 1")

    @property
    def any_distill(self) -> bool:
        return self.use_pred or self.use_sa or self.use_ca

    @property
    def needs_teacher(self) -> bool:
        return self.fixed or (self.any_distill and self.student_matching != "none")

    @classmethod
    def baseline(cls) -> LossConfig:
        return cls(use_pred=False, use_sa=False, use_ca=False, student_matching="none", fixed=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> LossConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LossReport:
    detection: ag.DiffArray | float = 0.0
    l_pred: ag.DiffArray | float = 0.0
    l_sa: ag.DiffArray | float = 0.0
    l_ca: ag.DiffArray | float = 0.0
    aux_detection: ag.DiffArray | float = 0.0
    aux_l_pred: ag.DiffArray | float = 0.0
    aux_l_sa: ag.DiffArray | float = 0.0
    aux_l_ca: ag.DiffArray | float = 0.0
    total: ag.DiffArray | float = 0.0

    COLUMNS = ("detection", "l_pred", "l_sa", "l_ca", "aux_detection", "aux_l_pred", "aux_l_sa", "aux_l_ca", "total")

    def values(self) -> dict[str, float]:
        return {c: _scalar(getattr(self, c)) for c in self.COLUMNS}


def _scalar(x) -> float:
    return x.item() if isinstance(x, ag.DiffArray) else float(x)


# -- class terms -------------------------------------------------------------


def bce_soft(p_student, p_teacher):
    """Binary cross-entropy against soft targets, averaged over the class axis."""
    t = p_teacher.values if isinstance(p_teacher, ag.DiffArray) else np.asarray(p_teacher)
    s_shape = p_student.shape
    if s_shape[-1] != t.shape[-1]:
        raise ValueError(f"class dims differ: {s_shape[-1]} vs {t.shape[-1]}")
    try:
        np.broadcast_shapes(s_shape, t.shape)
    except ValueError as exc:
        raise ValueError(f"shape mismatch: {s_shape} vs {t.shape}") from exc
    if isinstance(p_student, ag.DiffArray):
        t = t.astype(p_student.dtype, copy=False)
        s = ag.clip(p_student, PROB_EPS, 1.0 - PROB_EPS)
        terms = -(t * ag.log(s) + (1.0 - t) * ag.log(1.0 - s))
        return ag.mean(terms, axis=-1)
    s = np.clip(np.asarray(p_student, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return -(t * np.log(s) + (1.0 - t) * np.log(1.0 - s)).mean(axis=-1)


def entropy_floor(p_teacher) -> np.ndarray:
    """Lowest reachable `bce_soft` against these targets: their own binary entropy."""
    t = np.asarray(p_teacher, dtype=np.float64)
    return bce_soft(t, t)


# -- batching helpers ----------------------------------------------------------


def _batched(x, ndim: int):
    """Add a leading batch axis if `x` has only `ndim - 1` dims."""
    if x.ndim == ndim:
        return x
    if isinstance(x, ag.DiffArray):
        return ag.reshape(x, (1,) + x.shape)
    return np.asarray(x)[None]


def _batched_idx(idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    return idx[None] if idx.ndim == 1 else idx


# -- detection -------------------------------------------------------------------


def detection_loss(
    probs_layers: Sequence[ag.DiffArray],
    boxes_layers: Sequence[ag.DiffArray],
    gts: Sequence[tuple[np.ndarray, np.ndarray]],
    assignments: Sequence[Sequence],
    l1_weight: float = L1_WEIGHT,
    giou_weight: float = GIOU_WEIGHT,
):
    """Set-prediction loss summed over decoder layers, averaged over scenes.

    `gts[b]` is (classes, boxes) for scene b; `assignments[k][b]` is the
    GtAssignment of layer k in scene b. Matched queries get a one-hot class
    target plus the box loss, every other query an all-zero class target.
    """
    total = 0.0
    for k, (probs, boxes) in enumerate(zip(probs_layers, boxes_layers)):
        probs = _batched(probs, 3)
        boxes = _batched(boxes, 3)
        B, N, K = probs.shape
        target = np.zeros((B, N, K), dtype=probs.dtype)
        flat_idx, tgt_boxes = [], []
        for b in range(B):
            classes, gt_boxes = gts[b]
            q = assignments[k][b].query_for_gt
            if len(q):
                target[b, q, np.asarray(classes, dtype=np.int64)] = 1.0
                flat_idx.append(b * N + q)
                tgt_boxes.append(np.asarray(gt_boxes, dtype=probs.dtype).reshape(-1, 4))
        layer = ag.sum_(bce_soft(probs, target))
        if flat_idx:
            idx = np.concatenate(flat_idx)
            matched = ag.gather(ag.reshape(boxes, (B * N, 4)), idx, axis=0)
            layer = layer + ag.sum_(box_loss(matched, np.concatenate(tgt_boxes), l1_weight, giou_weight))
        total = total + layer * (1.0 / B)
    return total


# -- distillation ------------------------------------------------------------------


def pred_distill(
    student_probs: Sequence[ag.DiffArray],
    student_boxes: Sequence[ag.DiffArray],
    teacher_probs: Sequence[np.ndarray],
    teacher_boxes: Sequence[np.ndarray],
    matchings: Sequence[np.ndarray],
    mu_cls: float = MU_CLS,
    l1_weight: float = L1_WEIGHT,
    giou_weight: float = GIOU_WEIGHT,
):
    """Sum over layers and student queries of mu*BCE + box loss against matched teacher outputs."""
    total = 0.0
    for sp, sb, tp, tb, idx in zip(student_probs, student_boxes, teacher_probs, teacher_boxes, matchings):
        sp, sb = _batched(sp, 3), _batched(sb, 3)
        tp, tb = _batched(np.asarray(tp), 3), _batched(np.asarray(tb), 3)
        idx = _batched_idx(idx)
        if idx.max(initial=-1) >= tp.shape[1] or idx.min(initial=0) < 0:
            raise IndexError("matching index outside teacher queries")
        tp_g = np.take_along_axis(tp, idx[:, :, None], axis=1)
        tb_g = np.take_along_axis(tb, idx[:, :, None], axis=1)
        per_query = mu_cls * bce_soft(sp, tp_g) + box_loss(sb, tb_g.astype(sb.dtype), l1_weight, giou_weight)
        total = total + ag.sum_(per_query) * (1.0 / sp.shape[0])
    return total


def pred_distill_floor(teacher_probs: Sequence[np.ndarray], matchings: Sequence[np.ndarray], mu_cls: float = MU_CLS):
    """The class part of `pred_distill` when the student reproduces the teacher exactly."""
    total = 0.0
    for tp, idx in zip(teacher_probs, matchings):
        tp = _batched(np.asarray(tp, dtype=np.float64), 3)
        idx = _batched_idx(idx)
        tp_g = np.take_along_axis(tp, idx[:, :, None], axis=1)
        total += mu_cls * entropy_floor(tp_g).sum() / tp.shape[0]
    return total


def _check_heads(s_shape, t_shape):
    if s_shape[1] != t_shape[1]:
        raise ValueError(f"head count mismatch: student {s_shape[1]} vs teacher {t_shape[1]}")


def attn_distill_self(student_maps, teacher_maps, matchings, lambda_sa: float = LAMBDA_SA):
    """lambda * sum_k MSE(student map, teacher map gathered at matched rows and columns)."""
    total = 0.0
    for s, t, idx in zip(student_maps, teacher_maps, matchings):
        s = _batched(s, 4)
        t = _batched(np.asarray(t), 4)
        _check_heads(s.shape, t.shape)
        idx = _batched_idx(idx)
        rows = np.take_along_axis(t, idx[:, None, :, None], axis=2)
        sel = np.take_along_axis(rows, idx[:, None, None, :], axis=3)
        total = total + lambda_sa * ag.mse(s, sel.astype(s.dtype, copy=False))
    return total


def attn_distill_cross(student_maps, teacher_maps, matchings, lambda_ca: float = LAMBDA_CA):
    """lambda * sum_k MSE(student cross map, teacher rows gathered at matched queries)."""
    total = 0.0
    for s, t, idx in zip(student_maps, teacher_maps, matchings):
        s = _batched(s, 4)
        t = _batched(np.asarray(t), 4)
        _check_heads(s.shape, t.shape)
        if s.shape[-1] != t.shape[-1]:
            raise ValueError(
                f"teacher and student must share the token grid (HW {t.shape[-1]} vs {s.shape[-1]})"
            )
        idx = _batched_idx(idx)
        sel = np.take_along_axis(t, idx[:, None, :, None], axis=2)
        total = total + lambda_ca * ag.mse(s, sel.astype(s.dtype, copy=False))
    return total


def total_distill(student_group: dict, aux_group: dict, cfg: LossConfig) -> LossReport:
    """Combine per-group terms; disabled terms are excluded from the total.

    Each dict may carry `detection`, `l_pred`, `l_sa`, `l_ca`. Detection terms
    always count; distillation terms count only if enabled in `cfg`.
    """
    enabled = {"l_pred": cfg.use_pred, "l_sa": cfg.use_sa, "l_ca": cfg.use_ca}
    rep = LossReport()
    total = 0.0
    for prefix, group in (("", student_group), ("aux_", aux_group)):
        if not group:
            continue
        if "detection" in group:
            setattr(rep, prefix + "detection", group["detection"])
            total = total + group["detection"]
        for name, on in enabled.items():
            if on and name in group:
                setattr(rep, prefix + name, group[name])
                total = total + group[name]
    rep.total = total
    return rep
