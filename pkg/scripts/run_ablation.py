"""Run one or more ablation presets against a shared teacher and print a mean-mAP table."""

import argparse
from collections import defaultdict
from pathlib import Path

from decdistill.ablation import PRESETS, run_ablation
from decdistill.autograd import ParamStore
from decdistill.config import RunConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--preset", choices=sorted(PRESETS), nargs="+", default=["matching"])
    ap.add_argument("--teacher", type=Path, help="teacher checkpoint; trained per seed when omitted")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    args = ap.parse_args(argv)
    base = RunConfig.load(args.config) if args.config else RunConfig()
    teacher = ParamStore.load(args.teacher) if args.teacher else None
    for name in args.preset:
        rows = run_ablation(base, PRESETS[name](), args.out / name / "ablation.csv", teacher=teacher,
                            seeds=args.seeds, out_dir=args.out / name)
        by_variant = defaultdict(list)
        for r in rows:
            by_variant[r["name"]].append(r["map"])
        print(f"[{name}]")
        for variant, maps in by_variant.items():
            print(f"  {variant:28s} mAP {sum(maps) / len(maps):.4f}")


if __name__ == "__main__":
    main()
