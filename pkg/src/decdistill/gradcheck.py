"""Finite-difference validation of the full training objective on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import DiffArray, ParamStore
from .losses import LossConfig
from .nn import ModelConfig, add_query_group, init_params
from .scenes import DatasetSpec, generate_scene, stack_grids

MAX_QUERIES = 3
MAX_LAYERS = 2


def tiny_model(n_dec_layers: int = 2, n_queries: int = 3, n_classes: int = 2) -> ModelConfig:
    return ModelConfig(
        d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=n_dec_layers, n_queries=n_queries,
        n_classes=n_classes, grid_h=4, grid_w=4, c_in=3, patch_size=1, ffn_dim=16,
    )


def tiny_data(cfg: ModelConfig, seed: int = 0) -> DatasetSpec:
    return DatasetSpec(
        seed=seed, n_scenes=64, grid_h=cfg.grid_h * cfg.patch_size, grid_w=cfg.grid_w * cfg.patch_size,
        c_in=cfg.c_in, n_classes=cfg.n_classes, max_objects=min(2, cfg.n_queries), min_size=1, max_size=3,
        max_overlap_iou=0.0,
    )


def param_group(name: str) -> str:
    """`dec.1.cross_attn.wq` -> `dec.1.cross_attn`; `query_embed` -> `query_embed`."""
    parts = name.split(".")
    return ".".join(parts[:-1]) if len(parts) > 1 else name


@dataclass
class GradcheckReport:
    max_rel_err: dict[str, float]
    tol: float
    offenders: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.offenders

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def lines(self) -> list[str]:
        out = [f"{g:32s} {e:.3e}" for g, e in sorted(self.max_rel_err.items())]
        out.append(f"{'PASS' if self.passed else 'FAIL'} worst={self.worst:.3e} tol={self.tol:g}")
        if self.offenders:
            out.append("offending parameters: " + ", ".join(self.offenders))
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None, floor: float = 1e-8) -> float:
    """||a - n|| / max(scale, floor); `scale` defaults to max(||a||, ||n||)."""
    diff = float(np.linalg.norm(analytic - numeric))
    if scale is None:
        scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff / max(scale, floor)


def check_gradients(
    loss_fn: Callable[[ParamStore], DiffArray],
    params: ParamStore,
    h: float = 1e-6,
    tol: float = 1e-4,
    group: Callable[[str], str] = param_group,
) -> GradcheckReport:
    """Compare reverse-mode gradients of `loss_fn` with central differences.

    Each tensor's error is measured against the gradient norm of its whole
    parameter group, so tensors whose exact gradient is zero (key biases,
    for one) are judged by the scale of their neighbours, not by noise.
    """
    params.zero_grad()
    ag.backward(loss_fn(params))
    analytic = {k: v.grad.astype(np.float64).copy() for k, v in params.items() if v.requires_grad}
    # the frozen view shares buffers, so perturbations show through without recording a graph
    view = params.frozen()
    numeric = ag.finite_diff_grad(lambda _: loss_fn(view), params, h=h, names=list(analytic))
    sq: dict[str, float] = {}
    for name in analytic:
        g = group(name)
        sq[g] = sq.get(g, 0.0) + max(float(np.sum(analytic[name] ** 2)), float(np.sum(numeric[name] ** 2)))
    per_group: dict[str, float] = {}
    offenders = []
    for name in analytic:
        g = group(name)
        err = relative_error(analytic[name], numeric[name], scale=float(np.sqrt(sq[g])))
        per_group[g] = max(per_group.get(g, 0.0), err)
        if err >= tol:
            offenders.append(name)
    params.zero_grad()
    return GradcheckReport(per_group, tol, offenders)


BIAS_JITTER = 1e-2


def jitter_biases(params: ParamStore, seed: int, scale: float = BIAS_JITTER) -> None:
    """Nudge zero-initialised biases so no ReLU input sits exactly on its kink.

    With all-zero biases a query whose hidden layer is fully inactive feeds an
    exact 0 into the next ReLU, where central differences see a one-sided slope.
    """
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        if name.rsplit(".", 1)[-1].startswith("b") and p.values.ndim == 1 and not p.values.any():
            p.values += rng.normal(0.0, scale, size=p.values.shape)


def gradcheck_objective(
    loss: LossConfig | None = None,
    n_trials: int = 1,
    seed: int = 0,
    student: ModelConfig | None = None,
    teacher: ModelConfig | None = None,
    batch_size: int = 2,
    h: float = 1e-6,
    tol: float = 1e-4,
) -> GradcheckReport:
    """Gradcheck the complete distillation objective with every matching held fixed.

    Each trial draws fresh Xavier-initialised student and teacher models and
    a fresh batch; the student's zero biases get a small jitter (see
    `jitter_biases`). Per-group errors are the maximum over trials.
    """
    from .train import distill_objective, layer_map, teacher_view

    loss = loss if loss is not None else LossConfig()
    scfg = student or tiny_model()
    tcfg = teacher or tiny_model()
    if scfg.n_queries > MAX_QUERIES or scfg.n_dec_layers > MAX_LAYERS:
        raise ValueError(f"gradcheck needs <= {MAX_QUERIES} queries and <= {MAX_LAYERS} decoder layers")
    merged: dict[str, float] = {}
    offenders: list[str] = []
    for trial in range(n_trials):
        tseed = seed * 1000 + trial
        params = init_params(scfg, tseed)
        for g in range(1, loss.n_student_groups):
            add_query_group(params, scfg, g, tseed)
        jitter_biases(params, tseed)
        spec = tiny_data(scfg, tseed)
        batch = [generate_scene(spec, i) for i in range(batch_size)]
        grids, gts = stack_grids(batch), [s.gts for s in batch]
        tv = None
        if loss.needs_teacher:
            t = init_params(tcfg, tseed + 1).frozen()
            tv = teacher_view(t, tcfg, grids, gts, layer_map(scfg.n_dec_layers, tcfg.n_dec_layers))
        _, fixed, _ = distill_objective(params, scfg, loss, grids, gts, tv)

        def f(p: ParamStore) -> DiffArray:
            return distill_objective(p, scfg, loss, grids, gts, tv, fixed=fixed)[0].total

        rep = check_gradients(f, params, h=h, tol=tol)
        for g, e in rep.max_rel_err.items():
            merged[g] = max(merged.get(g, 0.0), e)
        offenders += [o for o in rep.offenders if o not in offenders]
    return GradcheckReport(merged, tol, offenders)
