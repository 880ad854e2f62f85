"""Run configuration: models, losses, optimiser, data and paths."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .losses import LossConfig
from .nn import ModelConfig
from .scenes import DatasetSpec


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 15
    # learning rate is divided by 10 after this fraction of the epochs
    lr_drop_frac: float = 0.8
    batch_size: int = 32
    grad_clip: float | None = 0.1

    @property
    def drop_epoch(self) -> int:
        return int(round(self.lr_drop_frac * self.epochs))

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.drop_epoch else self.lr * 0.1


def default_teacher() -> ModelConfig:
    return ModelConfig(n_dec_layers=4, n_queries=12)


def default_student() -> ModelConfig:
    return ModelConfig(n_dec_layers=2, n_queries=12)


@dataclass
class RunConfig:
    teacher: ModelConfig = field(default_factory=default_teacher)
    student: ModelConfig = field(default_factory=default_student)
    loss: LossConfig = field(default_factory=LossConfig)
    teacher_optim: OptimConfig = field(default_factory=lambda: OptimConfig(epochs=30))
    student_optim: OptimConfig = field(default_factory=lambda: OptimConfig(epochs=15))
    data: DatasetSpec = field(default_factory=DatasetSpec)
    seed: int = 0
    inherit: bool = True
    dtype: str = "float32"
    out_dir: str | None = None
    data_spec_path: str | None = None
    teacher_ckpt: str | None = None
    eval_every: int = 1

    def __post_init__(self):
        needs_equal = self.inherit or self.loss.fixed
        if needs_equal:
            for f in ("d_model", "n_heads", "grid_h", "grid_w", "patch_size", "c_in"):
                if getattr(self.teacher, f) != getattr(self.student, f):
                    raise ValueError(
                        f"teacher and student must agree on {f} when inheriting or using fixed matching"
                    )
        if self.loss.any_distill and self.loss.student_matching != "none":
            for f in ("n_heads", "grid_h", "grid_w", "patch_size"):
                if getattr(self.teacher, f) != getattr(self.student, f):
                    raise ValueError(f"attention distillation needs equal {f}")

    # -- (de)serialisation ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "loss": self.loss.to_dict(),
            "teacher_optim": asdict(self.teacher_optim),
            "student_optim": asdict(self.student_optim),
            "data": asdict(self.data),
            "seed": self.seed,
            "inherit": self.inherit,
            "dtype": self.dtype,
            "out_dir": self.out_dir,
            "data_spec_path": self.data_spec_path,
            "teacher_ckpt": self.teacher_ckpt,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {sorted(unknown)}")
        kw = {}
        if "teacher" in d:
            kw["teacher"] = ModelConfig.from_dict(d["teacher"])
        if "student" in d:
            kw["student"] = ModelConfig.from_dict(d["student"])
        if "loss" in d:
            kw["loss"] = LossConfig.from_dict(d["loss"])
        for key in ("teacher_optim", "student_optim"):
            if key in d:
                kw[key] = OptimConfig(**d[key])
        if "data" in d:
            kw["data"] = DatasetSpec(**d["data"])
        scalars = {f.name for f in fields(cls)} - set(kw) - {"teacher", "student", "loss", "data"}
        kw.update({k: v for k, v in d.items() if k in scalars})
        return cls(**kw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_(self, **changes) -> RunConfig:
        return replace(self, **changes)
