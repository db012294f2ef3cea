"""Ablation table: Baseline, +Attr, +Attr+Attn and the full model over several seeds.

Defaults match the desk-scale benchmark: 3000 generated samples re-cut into
2000/500/500, 30 epochs. Use --n 1000 --epochs 15 --milestone 10 for a quick table.
"""

import argparse
import json
import logging
from pathlib import Path

from maanet.data import repartition
from maanet.synth import GenConfig, generate_dataset
from maanet.train import TrainConfig, ablation_suite

COLUMNS = ("auc_malig", "acc", "f1", "spec", "rec", "prec", "auc_avg", "hit_rate")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--n", type=int, default=3000)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--milestone", type=int, default=20)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--variants", nargs="+", default=["baseline", "attr", "attr_attn", "full"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    ds = generate_dataset(GenConfig(seed=args.data_seed), args.n, out / "data")
    n_eval = args.n // 6
    part = repartition(ds.ids, (args.n - 2 * n_eval, n_eval, n_eval), seed=args.data_seed)
    base = TrainConfig(epochs=args.epochs, lr_milestones=(args.milestone,))
    table = ablation_suite(ds, base, seeds=tuple(args.seeds), variants=tuple(args.variants),
                           out_dir=out / "runs", partition=part)

    fmt = lambda v: "   -  " if v is None else f"{v:.4f}"
    print(f"{'median over seeds':<20}" + "".join(f"{c:>10}" for c in COLUMNS))
    for name, row in table["median"].items():
        print(f"{name:<20}" + "".join(f"{fmt(row[c]):>10}" for c in COLUMNS))
    (out / "table.json").write_text(json.dumps(table, indent=1) + "\n")


if __name__ == "__main__":
    main()
