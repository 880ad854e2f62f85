"""Command-line entry point: `decdistill <subcommand> [flags]`."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .ablation import PRESETS, run_ablation
from .attn_dump import dump_pair
from .autograd import ParamStore
from .config import RunConfig
from .gradcheck import gradcheck_objective
from .losses import LossConfig
from .scenes import DatasetSpec, generate_scene, split
from .train import distill_student, evaluate_ap, strip_training_groups, train_teacher

log = logging.getLogger("decdistill")


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="RunConfig JSON")
    p.add_argument("--seed", type=int, help="training seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--data-spec", type=Path, help="DatasetSpec JSON")
    p.add_argument("--teacher", type=Path, help="teacher checkpoint")
    p.add_argument(
        "--inherit", action=argparse.BooleanOptionalAction, default=None,
        help="initialise the student from the teacher",
    )


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    if args.data_spec is not None:
        cfg = cfg.with_(data=DatasetSpec.load(args.data_spec), data_spec_path=str(args.data_spec))
    if args.teacher is not None:
        cfg = cfg.with_(teacher_ckpt=str(args.teacher))
    if args.out is not None:
        cfg = cfg.with_(out_dir=str(args.out))
    return cfg


def _out(args, default: str) -> Path:
    out = args.out if args.out is not None else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_teacher(cfg: RunConfig) -> ParamStore:
    if not cfg.teacher_ckpt:
        raise SystemExit("this command needs --teacher <checkpoint>")
    return ParamStore.load(cfg.teacher_ckpt)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out(args, "data")
    cfg.data.save(out / "data_spec.json")
    train_idx, val_idx = split(cfg.data)
    if args.materialize:
        scenes = [generate_scene(cfg.data, i) for i in range(cfg.data.n_scenes)]
        np.savez_compressed(
            out / "scenes.npz",
            grids=np.stack([s.grid for s in scenes]),
            n_objects=np.array([len(s.classes) for s in scenes]),
            classes=np.concatenate([s.classes for s in scenes]),
            boxes=np.concatenate([s.boxes for s in scenes]),
            train_idx=train_idx,
            val_idx=val_idx,
        )
    print(json.dumps({"n_train": len(train_idx), "n_val": len(val_idx), "spec": str(out / "data_spec.json")}))
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    out = _out(args, "runs/teacher")
    cfg.save(out / "config.json")
    res = train_teacher(cfg, out_dir=out)
    print(json.dumps(res.final))
    return 0


def cmd_train_student(args) -> int:
    cfg = _load_config(args)
    inherit = bool(args.inherit)
    cfg = cfg.with_(loss=LossConfig.baseline(), inherit=inherit)
    out = _out(args, "runs/student")
    cfg.save(out / "config.json")
    res = distill_student(cfg, _load_teacher(cfg) if inherit else None, out_dir=out)
    print(json.dumps(res.final))
    return 0


def cmd_distill(args) -> int:
    cfg = _load_config(args)
    if args.inherit is not None:
        cfg = cfg.with_(inherit=args.inherit)
    out = _out(args, "runs/distill")
    cfg.save(out / "config.json")
    res = distill_student(cfg, _load_teacher(cfg), out_dir=out)
    print(json.dumps(res.final))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ckpt = args.checkpoint or args.teacher
    if ckpt is None:
        raise SystemExit("eval needs --checkpoint or --teacher")
    model = cfg.teacher if args.model == "teacher" else cfg.student
    params = strip_training_groups(ParamStore.load(ckpt))
    _, val_idx = split(cfg.data)
    res = evaluate_ap(params, model, [generate_scene(cfg.data, int(i)) for i in val_idx])
    print(json.dumps(res.to_dict()))
    if args.out is not None:
        _out(args, "").joinpath("eval.json").write_text(json.dumps(res.to_dict(), indent=2) + "\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if args.inherit is not None:
        cfg = cfg.with_(inherit=args.inherit)
    out = _out(args, "runs/ablation")
    variants = [v for name in args.preset for v in PRESETS[name]()]
    teacher = ParamStore.load(cfg.teacher_ckpt) if cfg.teacher_ckpt else None
    seeds = args.seeds if args.seeds else [cfg.seed]
    rows = run_ablation(cfg, variants, out / "ablation.csv", teacher=teacher, seeds=seeds, out_dir=out)
    for r in rows:
        print(f"{r['name']:32s} seed={r['seed']} ap50={r['ap50']:.4f} map={r['map']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    loss = LossConfig.baseline() if args.detection_only else LossConfig()
    rep = gradcheck_objective(loss, n_trials=args.trials, seed=args.seed or 0, tol=args.tol)
    print("\n".join(rep.lines()))
    return 0 if rep.passed else 1


def cmd_dump_attn(args) -> int:
    cfg = _load_config(args)
    teacher = _load_teacher(cfg)
    if args.checkpoint is None:
        raise SystemExit("dump-attn needs --checkpoint <student checkpoint>")
    student = strip_training_groups(ParamStore.load(args.checkpoint))
    out = _out(args, "runs/attn")
    written = dump_pair(teacher, cfg.teacher, student, cfg.student, generate_scene(cfg.data, args.scene), out)
    print(json.dumps({k: len(v) for k, v in written.items()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decdistill", description="Decoder distillation for small DETR-style detectors")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the dataset spec (and optionally every scene)")
    _shared(p)
    p.add_argument("--materialize", action="store_true", help="also write scenes.npz")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the teacher with detection loss only")
    _shared(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train the student without distillation")
    _shared(p)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("distill", help="distill the student from a teacher checkpoint")
    _shared(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="AP of a checkpoint on the validation split")
    _shared(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--model", choices=("teacher", "student"), default="student")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation grids and write ablation.csv")
    _shared(p)
    p.add_argument("--preset", nargs="+", choices=sorted(PRESETS), default=["matching"])
    p.add_argument("--seeds", type=int, nargs="*")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective on a tiny model")
    _shared(p)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--detection-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attn", help="write per-layer, per-head attention CSVs for teacher and student")
    _shared(p)
    p.add_argument("--checkpoint", type=Path, help="student checkpoint")
    p.add_argument("--scene", type=int, default=0)
    p.set_defaults(func=cmd_dump_attn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
