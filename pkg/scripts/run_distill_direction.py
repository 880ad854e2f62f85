"""Teacher, baseline student and distilled student per seed; prints AP50 and the mean gain.

    python scripts/run_distill_direction.py --seeds 0 1 2 --out runs/direction
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from decdistill.config import RunConfig
from decdistill.losses import LossConfig
from decdistill.train import distill_student, train_teacher


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, help="RunConfig JSON (defaults to the built-in desk-scale setup)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("runs/direction"))
    args = ap.parse_args(argv)
    base = RunConfig.load(args.config) if args.config else RunConfig()
    summary = []
    for seed in args.seeds:
        cfg = base.with_(seed=seed)
        root = args.out / f"seed{seed}"
        t0 = time.process_time()
        teacher = train_teacher(cfg, out_dir=root / "teacher")
        baseline = distill_student(cfg.with_(loss=LossConfig.baseline(), inherit=False), None, root / "baseline")
        distilled = distill_student(cfg, teacher.params, root / "distilled")
        row = {
            "seed": seed,
            "teacher_ap50": teacher.final["ap50"],
            "baseline_ap50": baseline.final["ap50"],
            "distilled_ap50": distilled.final["ap50"],
            "cpu_s": round(time.process_time() - t0, 1),
        }
        print(json.dumps(row), flush=True)
        summary.append(row)
    gain = np.mean([r["distilled_ap50"] - r["baseline_ap50"] for r in summary])
    print(f"mean AP50 gain {gain:+.4f} over {len(summary)} seeds")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
