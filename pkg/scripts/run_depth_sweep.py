"""mAP of the teacher architecture trained from scratch at several decoder depths."""

import argparse
from pathlib import Path

from decdistill.ablation import depth_grid, run_ablation
from decdistill.config import RunConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--depths", type=int, nargs="+", default=[1, 2, 3, 4])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("runs/depth"))
    args = ap.parse_args(argv)
    base = RunConfig.load(args.config) if args.config else RunConfig()
    rows = run_ablation(base, depth_grid(args.depths), args.out / "ablation.csv", seeds=args.seeds, out_dir=args.out)
    for d in args.depths:
        maps = [r["map"] for r in rows if r["n_dec_layers"] == d]
        print(f"L={d}: mAP {sum(maps) / len(maps):.4f}  {maps}")


if __name__ == "__main__":
    main()
