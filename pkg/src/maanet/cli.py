"""Command line entry point: generate, train, eval, ablate, xval, heatmap.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from maanet import checkpoint as ckpt_io
from maanet.data import Dataset, ensure_dir
from maanet.errors import ConfigError, MaanetError
from maanet.synth import GenConfig, generate_dataset
from maanet.train import (TrainConfig, ablation_suite, cross_validate, evaluate, export_heatmaps,
                          train_on_dataset)


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return obj


def _dump(path: Path, obj) -> None:
    ensure_dir(path.parent)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _train_config(args) -> TrainConfig:
    d = _load_json(args.config)
    for key in ("ablation", "seed", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    return TrainConfig.from_dict(d)


def cmd_generate(args) -> dict:
    d = _load_json(args.config)
    for key in ("image_size", "seed", "malignancy_k", "speckle_sigma"):
        val = getattr(args, key)
        if val is not None:
            d[key] = val
    if args.positive_rate is not None:
        d["positive_rates"] = [args.positive_rate] * 6
    try:
        cfg = GenConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad generator config: {exc}") from None
    ds = generate_dataset(cfg, args.n, args.out)
    counts = {s: sum(r["split"] == s for r in ds.records) for s in ("train", "val", "test")}
    return {"out": str(args.out), "n": args.n, "splits": counts}


def cmd_train(args) -> dict:
    cfg = _train_config(args)
    out = ensure_dir(args.out)
    _dump(out / "resolved_config.json", cfg.to_dict())
    res = train_on_dataset(Dataset.load(args.data), cfg, out_dir=out)
    return {"out": str(out), "best_epoch": res.log.best_epoch, "test": res.log.final_test}


def cmd_eval(args) -> dict:
    model, _ = ckpt_io.restore(ckpt_io.load(args.checkpoint))
    ds = Dataset.load(args.data, image_size=model.cfg.input_size)
    report = evaluate(model, ds.split(args.split)).to_dict()
    if args.out:
        _dump(Path(args.out) / f"metrics_{args.split}.json", report)
    return report


def cmd_ablate(args) -> dict:
    cfg = _train_config(args)
    out = ensure_dir(args.out)
    _dump(out / "resolved_config.json", {**cfg.to_dict(), "seeds": args.seeds, "variants": args.variants})
    table = ablation_suite(Dataset.load(args.data), cfg, seeds=tuple(args.seeds), variants=tuple(args.variants),
                           out_dir=out)
    return table["median"]


def cmd_xval(args) -> dict:
    cfg = _train_config(args)
    out = ensure_dir(args.out)
    _dump(out / "resolved_config.json", {**cfg.to_dict(), "k": args.k})
    report = cross_validate(Dataset.load(args.data), cfg, k=args.k, out_dir=out)
    return {"Average": report["Average"], "STD": report["STD"]}


def cmd_heatmap(args) -> dict:
    model, _ = ckpt_io.restore(ckpt_io.load(args.checkpoint))
    ds = Dataset.load(args.data, image_size=model.cfg.input_size)
    ids = args.ids.split(",") if args.ids else [r["id"] for r in ds.records if r["split"] == "test"][:8]
    files = export_heatmaps(model, ds.select(ids), args.out)
    return {"out": str(args.out), "files": len(files)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maanet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON file with generator fields")
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--malignancy-k", dest="malignancy_k", type=int)
    g.add_argument("--speckle-sigma", dest="speckle_sigma", type=float)
    g.add_argument("--positive-rate", dest="positive_rate", type=float, help="same rate for all six attributes")
    g.set_defaults(func=cmd_generate)

    def train_args(sp, out_default):
        sp.add_argument("--data", required=True)
        sp.add_argument("--config", help="JSON file with training fields")
        sp.add_argument("--ablation")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--out", default=out_default)

    t = sub.add_parser("train", help="train one model")
    train_args(t, "runs/train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train the ablation variants over several seeds")
    train_args(a, "runs/ablate")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--variants", nargs="+", default=["baseline", "attr", "attr_attn", "full"])
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("xval", help="k-fold cross-validation")
    train_args(x, "runs/xval")
    x.add_argument("--k", type=int, default=5)
    x.set_defaults(func=cmd_xval)

    h = sub.add_parser("heatmap", help="export per-head maps as PGM files")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--ids", help="comma-separated sample ids (default: first 8 test ids)")
    h.add_argument("--out", default="runs/heatmaps")
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = args.func(args)
    except MaanetError as exc:
        kind = {2: "config error", 3: "data error", 4: "numeric error"}.get(exc.exit_code, "error")
        print(f"{kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
