"""Optimal assignment and the three matching problems used in training.

* prediction <-> ground truth (set-prediction supervision),
* student <-> teacher per decoder layer (adaptive matching),
* the fixed-matching constraint that copies the teacher's last-layer
  ground-truth assignment onto the auxiliary group.

All cost matrices here are plain numpy: matching is a discrete decision and
never part of the gradient graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .boxes import pairwise_box_loss
from .losses import MU_CLS, bce_soft

PAD_COST = 1e6
CONSTRAINT_MODES = ("off", "last-layer", "all-layers")


@dataclass(frozen=True)
class Assignment:
    """Row i is assigned column `cols[i]`; `cost` is the sum of selected entries."""

    cols: np.ndarray
    cost: float

    def pairs(self) -> list[tuple[int, int]]:
        return [(i, int(j)) for i, j in enumerate(self.cols)]


@dataclass(frozen=True)
class GtAssignment:
    """`query_for_gt[g]` is the query supervising ground truth g; other queries are background."""

    query_for_gt: np.ndarray
    cost: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.query_for_gt, dtype=np.int64)
        object.__setattr__(self, "query_for_gt", q)
        if len(np.unique(q)) != len(q):
            raise ValueError("query indices must be distinct")

    def __len__(self) -> int:
        return len(self.query_for_gt)

    def __eq__(self, other) -> bool:
        return isinstance(other, GtAssignment) and np.array_equal(self.query_for_gt, other.query_for_gt)

    def __hash__(self) -> int:
        return hash(tuple(self.query_for_gt.tolist()))


@dataclass
class LayerMatchings:
    """One student->teacher assignment per decoder layer."""

    assignments: list[Assignment] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.assignments)

    def __getitem__(self, k: int) -> Assignment:
        return self.assignments[k]

    def index_arrays(self) -> list[np.ndarray]:
        return [a.cols for a in self.assignments]


# -- solver --------------------------------------------------------------------


@numba.njit(cache=True)
def _solve_square(a):
    # shortest augmenting path Hungarian with row/column potentials
    n = a.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    return p, u, v


@numba.njit(cache=True)
def _try_kuhn(row, tight, col_blocked, match_col, seen):
    n = tight.shape[1]
    for j in range(n):
        if tight[row, j] and not col_blocked[j] and not seen[j]:
            seen[j] = True
            if match_col[j] < 0 or _try_kuhn(match_col[j], tight, col_blocked, match_col, seen):
                match_col[j] = row
                return True
    return False


@numba.njit(cache=True)
def _completes(tight, start_row, col_blocked):
    n = tight.shape[0]
    match_col = np.full(n, -1, dtype=np.int64)
    for r in range(start_row, n):
        seen = np.zeros(n, dtype=np.bool_)
        if not _try_kuhn(r, tight, col_blocked, match_col, seen):
            return False
    return True


@numba.njit(cache=True)
def _lex_smallest(tight):
    # any perfect matching on tight edges is optimal; take the lexicographically smallest
    n = tight.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    blocked = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        for j in range(n):
            if tight[i, j] and not blocked[j]:
                blocked[j] = True
                if _completes(tight, i + 1, blocked):
                    out[i] = j
                    break
                blocked[j] = False
    return out


@numba.njit(cache=True)
def _hungarian_cols(c, pad, rel_tol):
    n_rows, n = c.shape
    sq = np.full((n, n), pad)
    sq[:n_rows] = c
    for i in range(n):
        sq[i] -= sq[i].min()
    _, u, v = _solve_square(sq)
    tight = np.zeros((n, n), dtype=np.bool_)
    tol = rel_tol * max(1.0, np.abs(sq).max())
    for i in range(n):
        for j in range(n):
            tight[i, j] = sq[i, j] - u[i + 1] - v[j + 1] <= tol
    return _lex_smallest(tight)[:n_rows]


def hungarian(cost) -> Assignment:
    """Minimum-cost injective assignment of rows to columns (rows <= cols).

    Rectangular inputs are padded to square with `PAD_COST`. Among optimal
    assignments the lexicographically smallest column sequence is returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    n_rows, n_cols = c.shape
    if n_rows > n_cols:
        raise ValueError(f"more rows ({n_rows}) than columns ({n_cols})")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    if n_rows == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    # row reduction inside leaves the argmin unchanged and keeps potentials small
    cols = _hungarian_cols(np.ascontiguousarray(c), PAD_COST, 1e-10)
    total = 0.0
    for i in range(n_rows):
        total += c[i, cols[i]]
    return Assignment(cols, float(total))


# -- cost matrices -------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    """Per-query class probabilities (N, K) and normalised cx,cy,w,h boxes (N, 4)."""

    probs: np.ndarray
    boxes: np.ndarray

    def __len__(self) -> int:
        return len(self.probs)


def gt_cost_matrix(pred: Prediction, gt_classes, gt_boxes) -> np.ndarray:
    """(G, N) cost: -p_i[class_g] + box_loss(b_i, b_g)."""
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cls_cost = -np.asarray(pred.probs, dtype=np.float64)[:, gt_classes].T
    return cls_cost + pairwise_box_loss(gt_boxes, np.asarray(pred.boxes, dtype=np.float64))


def gt_match(pred: Prediction, gt_classes, gt_boxes) -> GtAssignment:
    n_gt = len(np.asarray(gt_classes))
    if n_gt > len(pred):
        raise ValueError(f"{n_gt} ground truths but only {len(pred)} queries")
    if n_gt == 0:
        return GtAssignment(np.zeros(0, dtype=np.int64), 0.0)
    a = hungarian(gt_cost_matrix(pred, gt_classes, gt_boxes))
    return GtAssignment(a.cols, a.cost)


def gt_match_batch(probs: np.ndarray, boxes: np.ndarray, gts) -> list[GtAssignment]:
    """`gt_match` for every scene of a batch; probs (B, N, K), boxes (B, N, 4)."""
    probs = np.asarray(probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    sizes = [len(np.asarray(c)) for c, _ in gts]
    if max(sizes, default=0) > probs.shape[1]:
        raise ValueError("more ground truths than queries")
    if sum(sizes) == 0:
        return [GtAssignment(np.zeros(0, dtype=np.int64)) for _ in gts]
    cls = np.concatenate([np.asarray(c, dtype=np.int64) for c, _ in gts])
    gtb = np.concatenate([np.asarray(b, dtype=np.float64).reshape(-1, 4) for _, b in gts])
    cost = -probs[:, :, cls] + box_loss_pairs(boxes, gtb)
    out, start = [], 0
    for b, g in enumerate(sizes):
        if g == 0:
            out.append(GtAssignment(np.zeros(0, dtype=np.int64)))
        else:
            a = hungarian(cost[b, :, start : start + g].T)
            out.append(GtAssignment(a.cols, a.cost))
        start += g
    return out


def box_loss_pairs(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """(B, N, 4) x (T, 4) -> (B, N, T) box loss."""
    return pairwise_box_loss(pred, target[None])


def gt_match_layers(preds: Sequence[Prediction], gt_classes, gt_boxes) -> list[GtAssignment]:
    return [gt_match(p, gt_classes, gt_boxes) for p in preds]


def distill_cost_matrix(student: Prediction, teacher: Prediction, mu_cls: float = MU_CLS) -> np.ndarray:
    """(N_s, N_t) teacher-student matching cost."""
    ps = np.asarray(student.probs, dtype=np.float64)
    pt = np.asarray(teacher.probs, dtype=np.float64)
    cls = bce_soft(ps[:, None, :], pt[None, :, :])
    box = pairwise_box_loss(np.asarray(student.boxes, np.float64), np.asarray(teacher.boxes, np.float64))
    return mu_cls * cls + box


def adaptive_match(
    student_layers: Sequence[Prediction], teacher_layers: Sequence[Prediction], mu_cls: float = MU_CLS
) -> LayerMatchings:
    """Independent optimal student->teacher assignment for each layer pair."""
    if len(student_layers) != len(teacher_layers):
        raise ValueError("student and teacher layer lists differ in length")
    out = []
    for s, t in zip(student_layers, teacher_layers):
        if len(s) > len(t):
            raise ValueError(f"student has more queries ({len(s)}) than teacher ({len(t)})")
        out.append(hungarian(distill_cost_matrix(s, t, mu_cls)))
    return LayerMatchings(out)


def adaptive_match_batch(
    student_probs: np.ndarray, student_boxes: np.ndarray, teacher_probs: np.ndarray, teacher_boxes: np.ndarray,
    mu_cls: float = MU_CLS,
) -> np.ndarray:
    """One layer, whole batch: (B, N_s) teacher index per student query."""
    ps = np.asarray(student_probs, dtype=np.float64)
    pt = np.asarray(teacher_probs, dtype=np.float64)
    if ps.shape[1] > pt.shape[1]:
        raise ValueError(f"student has more queries ({ps.shape[1]}) than teacher ({pt.shape[1]})")
    cost = mu_cls * bce_soft(ps[:, :, None, :], pt[:, None, :, :])
    cost = cost + pairwise_box_loss(np.asarray(student_boxes, np.float64), np.asarray(teacher_boxes, np.float64))
    return np.stack([hungarian(c).cols for c in cost])


def index_matchings(n_student: int, n_layers: int) -> LayerMatchings:
    """Query i <-> teacher query i at every layer (no matching strategy, or fixed matching)."""
    ident = np.arange(n_student, dtype=np.int64)
    return LayerMatchings([Assignment(ident, float("nan")) for _ in range(n_layers)])


def apply_fixed_constraint(
    aux_assignments: Sequence[GtAssignment],
    teacher_last: GtAssignment,
    mode: str = "last-layer",
    n_queries: int | None = None,
) -> list[GtAssignment]:
    """Replace the aux group's ground-truth assignments with the teacher's final-layer one."""
    if mode not in CONSTRAINT_MODES:
        raise ValueError(f"unknown constraint mode {mode!r}")
    if n_queries is not None and len(teacher_last) and teacher_last.query_for_gt.max() >= n_queries:
        raise IndexError("teacher assignment refers to a query outside the auxiliary group")
    out = list(aux_assignments)
    if mode == "off" or not out:
        return out
    for a in out:
        if len(a) != len(teacher_last):
            raise ValueError("aux and teacher assignments cover different ground-truth sets")
    if mode == "last-layer":
        out[-1] = teacher_last
    else:
        out = [teacher_last for _ in out]
    return out


def instability_metric(current: GtAssignment, previous: GtAssignment) -> float:
    """Fraction of ground truths whose assigned query changed between snapshots."""
    a, b = np.asarray(current.query_for_gt), np.asarray(previous.query_for_gt)
    if a.shape != b.shape:
        raise ValueError("snapshots cover different numbers of ground truths")
    if a.size == 0:
        return 0.0
    return float(np.mean(a != b))
