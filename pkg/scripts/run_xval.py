"""Five-fold cross-validation of the full model on a synthetic dataset."""

import argparse
import logging
from pathlib import Path

from maanet.synth import GenConfig, generate_dataset
from maanet.train import TrainConfig, cross_validate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/xval")
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--milestone", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    ds = generate_dataset(GenConfig(seed=args.seed), args.n, out / "data")
    cfg = TrainConfig(epochs=args.epochs, lr_milestones=(args.milestone,), seed=args.seed)
    report = cross_validate(ds, cfg, k=args.k, out_dir=out / "runs")

    keys = [k for k in report["Average"] if report["Average"][k] is not None]
    print(f"{'':<8}" + "".join(f"{k:>12}" for k in keys))
    for row in ("Average", "STD"):
        print(f"{row:<8}" + "".join(f"{report[row][k]:>12.4f}" for k in keys))


if __name__ == "__main__":
    main()
