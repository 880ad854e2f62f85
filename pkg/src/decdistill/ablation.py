"""Named grids of training configurations and a runner that tabulates final AP."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .autograd import ParamStore
from .config import RunConfig
from .losses import LossConfig
from .train import train_teacher, distill_student

log = logging.getLogger(__name__)

ABLATION_COLUMNS = (
    "name",
    "mode",
    "seed",
    "n_dec_layers",
    "student_matching",
    "use_pred",
    "use_sa",
    "use_ca",
    "fixed",
    "n_student_groups",
    "n_aux_groups",
    "constraint_mode",
    "inherit",
    "ap50",
    "map",
)


@dataclass
class Variant:
    """One row of an ablation grid.

    `loss` and `model` are field overrides applied to the base config's
    LossConfig and model config. Mode "distill" trains the student
    architecture; mode "scratch" trains the teacher architecture with
    detection loss only (used by the depth sweep).
    """

    name: str
    loss: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    inherit: bool | None = None
    mode: str = "distill"

    def __post_init__(self):
        if self.mode not in ("distill", "scratch"):
            raise ValueError(f"unknown variant mode {self.mode!r}")

    def apply(self, base: RunConfig) -> RunConfig:
        loss = replace(base.loss, **self.loss)
        inherit = base.inherit if self.inherit is None else self.inherit
        if self.mode == "scratch":
            return base.with_(teacher=replace(base.teacher, **self.model), inherit=False, loss=LossConfig.baseline())
        return base.with_(loss=loss, student=replace(base.student, **self.model), inherit=inherit)


_NO_DISTILL = dict(use_pred=False, use_sa=False, use_ca=False, student_matching="none", fixed=False)


def _full(**kw) -> dict:
    d = dict(use_pred=True, use_sa=True, use_ca=True, student_matching="adaptive", fixed=False)
    d.update(kw)
    return d


def loss_component_grid() -> list[Variant]:
    """Matching strategy x loss term x inheriting rows, from nothing to everything."""
    return [
        Variant("baseline", _NO_DISTILL, inherit=False),
        Variant("index+pred+sa+ca", _full(student_matching="index"), inherit=False),
        Variant("adaptive+pred", _full(use_sa=False, use_ca=False), inherit=False),
        Variant("adaptive+sa+ca", _full(use_pred=False), inherit=False),
        Variant("adaptive+pred+sa", _full(use_ca=False), inherit=False),
        Variant("adaptive+pred+ca", _full(use_sa=False), inherit=False),
        Variant("adaptive+all", _full(), inherit=False),
        Variant("adaptive+fixed+all", _full(fixed=True), inherit=False),
        Variant("adaptive+fixed+all+inherit", _full(fixed=True), inherit=True),
    ]


def matching_grid(inherit: bool | None = False) -> list[Variant]:
    """No matching, each strategy alone, each strategy duplicated, and both together."""
    return [
        Variant("none", _NO_DISTILL, inherit=inherit),
        Variant("adaptive", _full(), inherit=inherit),
        Variant("fixed", _full(student_matching="none", fixed=True), inherit=inherit),
        Variant("adaptive x2", _full(n_student_groups=2), inherit=inherit),
        Variant("fixed x2", _full(student_matching="none", fixed=True, n_aux_groups=2), inherit=inherit),
        Variant("adaptive+fixed", _full(fixed=True), inherit=inherit),
    ]


def constraint_grid(inherit: bool | None = False) -> list[Variant]:
    """Fixed-matching constraint off, on every layer, on the last layer."""
    return [
        Variant(f"constraint={mode}", _full(fixed=True, constraint_mode=mode), inherit=inherit)
        for mode in ("off", "all-layers", "last-layer")
    ]


def depth_grid(depths: Sequence[int] = (1, 2, 3, 4)) -> list[Variant]:
    """Teacher architecture trained from scratch at several decoder depths."""
    return [Variant(f"depth={d}", model={"n_dec_layers": d}, mode="scratch") for d in depths]


PRESETS = {
    "components": loss_component_grid,
    "matching": matching_grid,
    "constraint": constraint_grid,
    "depth": depth_grid,
}


def _row(v: Variant, cfg: RunConfig, final: dict) -> dict:
    model = cfg.teacher if v.mode == "scratch" else cfg.student
    return {
        "name": v.name,
        "mode": v.mode,
        "seed": cfg.seed,
        "n_dec_layers": model.n_dec_layers,
        "student_matching": cfg.loss.student_matching,
        "use_pred": cfg.loss.use_pred,
        "use_sa": cfg.loss.use_sa,
        "use_ca": cfg.loss.use_ca,
        "fixed": cfg.loss.fixed,
        "n_student_groups": cfg.loss.n_student_groups,
        "n_aux_groups": cfg.loss.n_aux_groups,
        "constraint_mode": cfg.loss.constraint_mode,
        "inherit": cfg.inherit,
        "ap50": final.get("ap50", float("nan")),
        "map": final.get("map", float("nan")),
    }


def run_ablation(
    base: RunConfig,
    variants: Sequence[Variant],
    out_csv: str | Path | None = None,
    teacher: ParamStore | None = None,
    seeds: Sequence[int] | None = None,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Train every variant for every seed in grid order; one CSV row each.

    A teacher is trained from `base` (once per seed) only if some variant
    needs one and none was given.
    """
    seeds = list(seeds) if seeds is not None else [base.seed]
    out_dir = Path(out_dir) if out_dir is not None else None
    writer_fh = None
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        writer_fh = open(out_csv, "w", newline="")
        writer = csv.DictWriter(writer_fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer_fh.flush()
    rows: list[dict] = []
    teachers: dict[int, ParamStore] = {}
    try:
        for seed in seeds:
            for i, v in enumerate(variants):
                cfg = v.apply(base.with_(seed=seed))
                sub = out_dir / f"seed{seed}" / f"{i:02d}" if out_dir is not None else None
                if v.mode == "scratch":
                    res = train_teacher(cfg, out_dir=sub)
                else:
                    t = None
                    if cfg.inherit or cfg.loss.needs_teacher:
                        t = teacher
                        if t is None:
                            if seed not in teachers:
                                tdir = out_dir / f"seed{seed}" / "teacher" if out_dir is not None else None
                                teachers[seed] = train_teacher(base.with_(seed=seed), out_dir=tdir).params
                            t = teachers[seed]
                    res = distill_student(cfg, t, out_dir=sub)
                row = _row(v, cfg, res.final)
                log.info("ablation %s seed %d: ap50=%.4f map=%.4f", v.name, seed, row["ap50"], row["map"])
                rows.append(row)
                if writer_fh is not None:
                    writer.writerow(row)
                    writer_fh.flush()
    finally:
        if writer_fh is not None:
            writer_fh.close()
    return rows
