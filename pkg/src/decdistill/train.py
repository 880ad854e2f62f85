"""Teacher training, distillation and evaluation loops."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import ParamStore
from .config import OptimConfig, RunConfig
from .losses import (
    LossConfig,
    LossReport,
    attn_distill_cross,
    attn_distill_self,
    detection_loss,
    pred_distill,
    total_distill,
)
from .matching import (
    GtAssignment,
    adaptive_match_batch,
    apply_fixed_constraint,
    gt_match_batch,
    instability_metric,
)
from .metrics import EvalResult, ImageDetections, evaluate_detections
from .nn import (
    DecoderOutputs,
    ModelConfig,
    add_query_group,
    decode_groups,
    encoder_forward,
    forward,
    inheritable_names,
    init_params,
    patchify,
    query_param_name,
)
from .scenes import DatasetSpec, SceneSample, batch_iter, generate_scene, split, stack_grids

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step",) + LossReport.COLUMNS
METRIC_COLUMNS = ("epoch", "ap50", "ap75", "map", "ap_small", "ap_medium", "ap_large")
INSTABILITY_COLUMNS = ("epoch", "student_gt_churn", "aux_gt_churn", "adaptive_ts_churn", "fixed_ts_churn")


class TrainingDiverged(RuntimeError):
    pass


# -- optimiser -----------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: ParamStore, cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v.values) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.values) for k, v in params.items()}

    def step(self, lr: float) -> float:
        c = self.cfg
        self.t += 1
        grads = {k: p.grad for k, p in self.params.items()}
        norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
        scale = 1.0
        if c.grad_clip is not None and norm > c.grad_clip:
            scale = c.grad_clip / (norm + 1e-6)
        b1t = 1.0 - c.beta1**self.t
        b2t = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.values *= 1.0 - lr * c.weight_decay
            p.values -= lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)
        return norm


# -- helpers --------------------------------------------------------------------------


def _np_dtype(name: str):
    return {"float32": np.float32, "float64": np.float64}[name]


def layer_map(n_student: int, n_teacher: int) -> list[int]:
    """Teacher layer distilled into each student layer; the last layers always pair up."""
    return [int(round((k + 1) * n_teacher / n_student)) - 1 for k in range(n_student)]


def inherit_init(
    student: ParamStore, teacher: ParamStore, student_cfg: ModelConfig, teacher_cfg: ModelConfig
) -> ParamStore:
    """Copy backbone, encoder, decoder prefix, heads and queries from the teacher."""
    if student_cfg.d_model != teacher_cfg.d_model:
        raise ValueError(f"cannot inherit across hidden sizes {teacher_cfg.d_model} -> {student_cfg.d_model}")
    if student_cfg.n_dec_layers > teacher_cfg.n_dec_layers:
        raise ValueError("student has more decoder layers than the teacher")
    if student_cfg.n_enc_layers != teacher_cfg.n_enc_layers:
        raise ValueError("inheriting needs equal encoder depth")
    out = student.clone()
    for name in inheritable_names(student):
        if name not in teacher:
            raise KeyError(f"teacher has no parameter {name!r}")
        src = teacher[name].values
        dst = out[name]
        if src.shape != dst.shape:
            raise ValueError(f"shape mismatch for {name}: teacher {src.shape}, student {dst.shape}")
        dst.values[...] = src.astype(dst.dtype)
    return out


def _gts(batch: Sequence[SceneSample]):
    return [s.gts for s in batch]


def group_gt_assignments(out: DecoderOutputs, group: str, gts) -> list[list[GtAssignment]]:
    """[layer][scene] ground-truth assignments of one query group."""
    s = out.group_slices[group]
    return [gt_match_batch(p.values[:, s], x.values[:, s], gts) for p, x in zip(out.probs, out.boxes)]


@dataclass
class TeacherView:
    """Constant teacher outputs for one batch, restricted to the layers the student distills from."""

    probs: list[np.ndarray]
    boxes: list[np.ndarray]
    self_attn: list[np.ndarray]
    cross_attn: list[np.ndarray]
    last_assign: list[GtAssignment]
    queries: np.ndarray

    def predictions(self, b: int):
        from .matching import Prediction

        return [Prediction(p[b], x[b]) for p, x in zip(self.probs, self.boxes)]


def teacher_view(
    teacher: ParamStore, tcfg: ModelConfig, grids: np.ndarray, gts, layers: Sequence[int]
) -> TeacherView:
    out = forward(teacher, tcfg, grids)
    last = gt_match_batch(out.probs[-1].values, out.boxes[-1].values, gts)
    return TeacherView(
        probs=[out.probs[k].values for k in layers],
        boxes=[out.boxes[k].values for k in layers],
        self_attn=[out.attention.self_attn[k].values for k in layers],
        cross_attn=[out.attention.cross_attn[k].values for k in layers],
        last_assign=last,
        queries=teacher["query_embed"].values,
    )


@dataclass
class StepMatchings:
    """Every discrete decision of one distillation step; reusable to hold them fixed."""

    gt: dict[str, list[list[GtAssignment]]] = field(default_factory=dict)
    ts: dict[str, list[np.ndarray]] = field(default_factory=dict)  # [layer] -> (B, N_group)
    aux_own_last: dict[str, list[GtAssignment]] = field(default_factory=dict)


def group_names(loss: LossConfig) -> tuple[list[str], list[str]]:
    students = ["student"] + [f"student_g{i}" for i in range(1, loss.n_student_groups)]
    aux = ["aux"] + [f"aux{i}" for i in range(1, loss.n_aux_groups)] if loss.fixed else []
    return students, aux


def distill_objective(
    student: ParamStore,
    scfg: ModelConfig,
    loss: LossConfig,
    grids: np.ndarray,
    gts,
    teacher: TeacherView | None,
    fixed: StepMatchings | None = None,
) -> tuple[LossReport, StepMatchings, DecoderOutputs]:
    """Full training objective for one batch: detection for every group plus enabled distillation."""
    s_names, a_names = group_names(loss)
    groups = [(n, student[query_param_name(i)]) for i, n in enumerate(s_names)]
    if a_names:
        if teacher is None:
            raise ValueError("fixed matching needs a teacher")
        if teacher.queries.shape[1] != scfg.d_model:
            raise ValueError("query transplant requires equal hidden size")
        groups += [(n, teacher.queries) for n in a_names]
    enc = encoder_forward(patchify(grids, scfg.patch_size), student, scfg)
    out = decode_groups(enc, groups, student, scfg)
    m = fixed if fixed is not None else StepMatchings()
    B = grids.shape[0]
    L = out.n_layers
    distill_students = loss.any_distill and loss.student_matching != "none" and teacher is not None
    sgroup: dict = {}
    agroup: dict = {}

    def acc(d, key, val):
        d[key] = d[key] + val if key in d else val

    for name in s_names:
        if name not in m.gt:
            m.gt[name] = group_gt_assignments(out, name, gts)
        probs, boxes = out.group_probs(name), out.group_boxes(name)
        acc(sgroup, "detection", detection_loss(probs, boxes, gts, m.gt[name], loss.l1_weight, loss.giou_weight))
        if not distill_students:
            continue
        if name not in m.ts:
            n_s = probs[0].shape[1]
            if loss.student_matching == "adaptive":
                m.ts[name] = [
                    adaptive_match_batch(p.values, x.values, tp, tb, loss.mu_cls)
                    for p, x, tp, tb in zip(probs, boxes, teacher.probs, teacher.boxes)
                ]
            else:
                if n_s > teacher.probs[0].shape[1]:
                    raise ValueError("index correspondence needs N_s <= N_t")
                m.ts[name] = [np.tile(np.arange(n_s), (B, 1)) for _ in range(L)]
        _distill_terms(sgroup, acc, out, name, teacher, m.ts[name], loss)

    for name in a_names:
        if name not in m.gt:
            own = group_gt_assignments(out, name, gts)
            m.aux_own_last[name] = own[-1]
            per_scene = [[own[k][b] for k in range(L)] for b in range(B)]
            constrained = [
                apply_fixed_constraint(per_scene[b], teacher.last_assign[b], loss.constraint_mode, out.probs[0].shape[1])
                for b in range(B)
            ]
            m.gt[name] = [[constrained[b][k] for b in range(B)] for k in range(L)]
        probs, boxes = out.group_probs(name), out.group_boxes(name)
        acc(agroup, "detection", detection_loss(probs, boxes, gts, m.gt[name], loss.l1_weight, loss.giou_weight))
        if loss.any_distill:
            ident = np.tile(np.arange(teacher.queries.shape[0]), (B, 1))
            m.ts[name] = [ident for _ in range(L)]
            _distill_terms(agroup, acc, out, name, teacher, m.ts[name], loss)

    return total_distill(sgroup, agroup, loss), m, out


def _distill_terms(into, acc, out: DecoderOutputs, name, teacher: TeacherView, idx, loss: LossConfig):
    if loss.use_pred:
        acc(
            into,
            "l_pred",
            pred_distill(
                out.group_probs(name),
                out.group_boxes(name),
                teacher.probs,
                teacher.boxes,
                idx,
                loss.mu_cls,
                loss.l1_weight,
                loss.giou_weight,
            ),
        )
    if loss.use_sa:
        acc(into, "l_sa", attn_distill_self(out.group_self_attn(name), teacher.self_attn, idx, loss.lambda_sa))
    if loss.use_ca:
        acc(into, "l_ca", attn_distill_cross(out.group_cross_attn(name), teacher.cross_attn, idx, loss.lambda_ca))


# -- evaluation ------------------------------------------------------------------------


def predict(params: ParamStore, cfg: ModelConfig, grids: np.ndarray, batch_size: int = 64):
    """Final-layer (probs, boxes) of the model's own queries for each scene."""
    frozen = params.frozen()
    probs, boxes = [], []
    for start in range(0, len(grids), batch_size):
        out = forward(frozen, cfg, grids[start : start + batch_size])
        probs.append(out.probs[-1].values)
        boxes.append(out.boxes[-1].values)
    return np.concatenate(probs).astype(np.float64), np.concatenate(boxes).astype(np.float64)


def evaluate_ap(params: ParamStore, cfg: ModelConfig, scenes: Sequence[SceneSample]) -> EvalResult:
    grids = stack_grids(scenes).astype(params["backbone.proj.w"].dtype)
    probs, boxes = predict(params, cfg, grids)
    dets = [ImageDetections.from_query_probs(p, b) for p, b in zip(probs, boxes)]
    return evaluate_detections(dets, [s.gts for s in scenes], cfg.n_classes)


# -- loops ------------------------------------------------------------------------------


class _CsvLog:
    def __init__(self, path: Path | None, columns):
        self.rows: list[dict] = []
        self.columns = columns
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="") as fh:
                csv.writer(fh).writerow(columns)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in self.columns])


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


@dataclass
class RunResult:
    params: ParamStore
    metrics: list[dict]
    losses: list[dict]
    instability: list[dict] = field(default_factory=list)
    constraint_checks: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.metrics[-1] if self.metrics else {}


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2**63)


def _data(cfg: RunConfig):
    train_idx, val_idx = split(cfg.data)
    cache: dict = {}
    val = [generate_scene(cfg.data, int(i)) for i in val_idx]
    return train_idx, val, cache


def _check_finite(report: LossReport, step: int) -> None:
    if not np.isfinite(report.values()["total"]):
        raise TrainingDiverged(f"non-finite loss at step {step}: {report.values()}")


def _eval_row(params, mcfg, val, epoch) -> dict:
    res = evaluate_ap(params, mcfg, val)
    return {"epoch": epoch, **res.to_dict()}


def train_teacher(
    cfg: RunConfig, model_cfg: ModelConfig | None = None, out_dir: str | Path | None = None,
    optim: OptimConfig | None = None,
) -> RunResult:
    """Plain set-prediction training with per-layer supervision."""
    mcfg = model_cfg or cfg.teacher
    optim = optim or cfg.teacher_optim
    out = Path(out_dir) if out_dir is not None else None
    dt = _np_dtype(cfg.dtype)
    params = init_params(mcfg, cfg.seed).astype(dt)
    train_idx, val, cache = _data(cfg)
    metrics = _CsvLog(out / "metrics.csv" if out else None, METRIC_COLUMNS)
    losses = _CsvLog(out / "losses.csv" if out else None, LOSS_COLUMNS)
    opt = AdamW(params, optim)
    step = 0
    for epoch in range(optim.epochs):
        lr = optim.lr_at(epoch)
        for batch in batch_iter(cfg.data, train_idx, optim.batch_size, _epoch_seed(cfg.seed, epoch), cache):
            grids = stack_grids(batch).astype(dt)
            gts = _gts(batch)
            res = forward(params, mcfg, grids)
            assign = group_gt_assignments(res, "student", gts)
            det = detection_loss(res.probs, res.boxes, gts, assign)
            report = total_distill({"detection": det}, {}, LossConfig.baseline())
            _check_finite(report, step)
            ag.backward(report.total)
            opt.step(lr)
            params.zero_grad()
            losses.write({"step": step, **report.values()})
            step += 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == optim.epochs:
            row = _eval_row(params, mcfg, val, epoch)
            metrics.write(row)
            log.info("epoch %d %s", epoch, row)
    if out is not None:
        params.save(out / "checkpoint.d3ps")
    return RunResult(params, metrics.rows, losses.rows)


def distill_student(
    cfg: RunConfig, teacher: ParamStore | None, out_dir: str | Path | None = None
) -> RunResult:
    """Train the student against a frozen teacher with the configured matching and loss terms."""
    scfg, tcfg, loss = cfg.student, cfg.teacher, cfg.loss
    optim = cfg.student_optim
    out = Path(out_dir) if out_dir is not None else None
    dt = _np_dtype(cfg.dtype)
    if (loss.needs_teacher or cfg.inherit) and teacher is None:
        raise ValueError("this configuration needs a teacher checkpoint")
    if loss.fixed and tcfg.d_model != scfg.d_model:
        raise ValueError("query transplant requires equal hidden size")
    if teacher is not None and len(teacher["query_embed"].values) != tcfg.n_queries:
        raise ValueError("teacher checkpoint query count differs from the teacher config")

    params = init_params(scfg, cfg.seed).astype(dt)
    for g in range(1, loss.n_student_groups):
        add_query_group(params, scfg, g, cfg.seed)
    if cfg.inherit:
        params = inherit_init(params, teacher, scfg, tcfg)
    frozen_teacher = teacher.clone(requires_grad=False, dtype=dt) if teacher is not None else None
    teacher_sum = teacher.checksum() if teacher is not None else None
    layers = layer_map(scfg.n_dec_layers, tcfg.n_dec_layers)
    use_teacher = loss.needs_teacher

    train_idx, val, cache = _data(cfg)
    metrics = _CsvLog(out / "metrics.csv" if out else None, METRIC_COLUMNS)
    losses = _CsvLog(out / "losses.csv" if out else None, LOSS_COLUMNS)
    churn_log = _CsvLog(out / "instability.csv" if out else None, INSTABILITY_COLUMNS)
    opt = AdamW(params, optim)
    prev: dict[str, dict[int, np.ndarray]] = {"student": {}, "aux": {}, "ts": {}}
    checks: list[dict] = []
    step = 0
    for epoch in range(optim.epochs):
        lr = optim.lr_at(epoch)
        churn = {k: [] for k in INSTABILITY_COLUMNS[1:]}
        for batch in batch_iter(cfg.data, train_idx, optim.batch_size, _epoch_seed(cfg.seed, epoch), cache):
            grids = stack_grids(batch).astype(dt)
            gts = _gts(batch)
            tv = teacher_view(frozen_teacher, tcfg, grids, gts, layers) if use_teacher else None
            report, m, _ = distill_objective(params, scfg, loss, grids, gts, tv)
            _check_finite(report, step)
            ag.backward(report.total)
            opt.step(lr)
            params.zero_grad()
            losses.write({"step": step, **report.values()})
            _track_churn(batch, m, prev, churn)
            if loss.fixed:
                checks.append(_constraint_check(step, m, tv))
            step += 1
        row = {"epoch": epoch}
        for k, v in churn.items():
            row[k] = float(np.mean(v)) if v else 0.0
        churn_log.write(row)
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == optim.epochs:
            mrow = _eval_row(params, scfg, val, epoch)
            metrics.write(mrow)
            log.info("epoch %d %s", epoch, mrow)
    if teacher is not None and teacher.checksum() != teacher_sum:
        raise RuntimeError("teacher parameters changed during distillation")
    if out is not None:
        params.save(out / "checkpoint.d3ps")
    return RunResult(params, metrics.rows, losses.rows, churn_log.rows, checks)


def _track_churn(batch, m: StepMatchings, prev, churn) -> None:
    for b, scene in enumerate(batch):
        idx = scene.index
        cur = m.gt["student"][-1][b]
        if idx in prev["student"]:
            churn["student_gt_churn"].append(instability_metric(cur, prev["student"][idx]))
        prev["student"][idx] = cur
        if "aux" in m.gt:
            cur_a = m.gt["aux"][-1][b]
            if idx in prev["aux"]:
                churn["aux_gt_churn"].append(instability_metric(cur_a, prev["aux"][idx]))
            prev["aux"][idx] = cur_a
            # fixed matching pairs query i with teacher query i by construction
            ident = GtAssignment(m.ts["aux"][-1][b]) if "aux" in m.ts else None
            if ident is not None:
                churn["fixed_ts_churn"].append(instability_metric(ident, GtAssignment(np.arange(len(ident)))))
        if "student" in m.ts:
            cur_t = GtAssignment(m.ts["student"][-1][b])
            if idx in prev["ts"]:
                churn["adaptive_ts_churn"].append(instability_metric(cur_t, prev["ts"][idx]))
            prev["ts"][idx] = cur_t


def _constraint_check(step: int, m: StepMatchings, tv: TeacherView) -> dict:
    aux_last = m.gt["aux"][-1]
    own = m.aux_own_last["aux"]
    equal = all(a == t for a, t in zip(aux_last, tv.last_assign))
    differs = float(np.mean([o != t for o, t in zip(own, tv.last_assign)]))
    return {"step": step, "last_layer_equals_teacher": equal, "unconstrained_disagreement": differs}


def strip_training_groups(params: ParamStore) -> ParamStore:
    """Drop extra query groups that only exist for training."""
    return ParamStore({k: v for k, v in params.items() if not k.startswith("query_embed_g")})
