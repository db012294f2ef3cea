"""Training loop, evaluation, ablations, cross-validation and heatmap export."""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from maanet import checkpoint as ckpt_io
from maanet.autodiff import SgdState, backward, no_grad, sgd_step
from maanet.data import AugmentPolicy, Dataset, Split, batch_iter, ensure_dir, kfold_split, write_pgm
from maanet.errors import ConfigError, NumericError, UndefinedMetricError
from maanet.imageops import bilinear_resize
from maanet.losses import LossWeights, attn_loss, attr_loss, combine, spatial_loss
from maanet.metrics import auc, confusion_metrics, hit_rate
from maanet.model import ATTRIBUTES, HEADS, MAANet, ModelConfig, build, predict_probs
from maanet.nn import InitPolicy

log = logging.getLogger(__name__)

# ablation name -> (attribute branch, attention branch, spatial loss)
ABLATIONS = {
    "baseline": (False, False, False),
    "attr": (True, False, False),
    "attr_attn": (True, True, False),
    "full": (True, True, True),
}
TABLE_NAMES = {"baseline": "Baseline", "attr": "Baseline+Attr", "attr_attn": "Baseline+Attr+Attn",
               "full": "MAA-Net"}
_LETTERS = {"C": "calc", "S": "shape", "R": "ratio", "B": "boundary", "M": "margin", "E": "echo"}


def resolve_ablation(name: str):
    """Map an ablation name to (attr_branch, attn_branch, spatial, attributes).

    Besides the four named rows, ``baseline+<letters>`` (letters from CSRBME)
    trains the attribute branch on a subset without attention.
    """
    key = name.lower()
    if key in ("maanet", "maa-net"):
        key = "full"
    if key in ABLATIONS:
        attr, attn, spatial = ABLATIONS[key]
        return attr, attn, spatial, ATTRIBUTES
    if key.startswith("baseline+"):
        letters = name.split("+", 1)[1].replace("+", "").replace(",", "").upper()
        try:
            attrs = tuple(a for a in ATTRIBUTES if a in {_LETTERS[c] for c in letters})
        except KeyError:
            raise ConfigError(f"unknown attribute letter in ablation {name!r}") from None
        if not attrs:
            raise ConfigError(f"ablation {name!r} selects no attributes")
        return True, False, False, attrs
    raise ConfigError(f"unknown ablation {name!r}")


def table_name(ablation: str) -> str:
    key = ablation.lower()
    if key in ("maanet", "maa-net"):
        key = "full"
    if key in TABLE_NAMES:
        return TABLE_NAMES[key]
    return "Baseline+" + ablation.split("+", 1)[1].upper()


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 20
    lr0: float = 0.01
    lr_decay: float = 0.1
    lr_milestones: tuple = (20,)
    lr_step_every: int | None = None   # recurring decay instead of milestones
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    ablation: str = "full"
    w_attr: float = 1.0
    w_attn: float = 0.5
    w_spatial: float = 0.5
    augment: bool = True
    model: dict = field(default_factory=dict)   # ModelConfig overrides

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        resolve_ablation(self.ablation)

    def model_config(self) -> ModelConfig:
        attr, attn, _, attrs = resolve_ablation(self.ablation)
        base = dict(self.model)
        base.update(attr_branch=attr, attn_branch=attn, attributes=attrs)
        return ModelConfig.from_dict(base)

    @property
    def spatial(self) -> bool:
        return resolve_ablation(self.ablation)[2]

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_attr, self.w_attn, self.w_spatial)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """lr0 times decay^(number of decay points passed); epochs are 0-based."""
    if cfg.lr_step_every:
        steps = epoch // cfg.lr_step_every
    else:
        steps = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.lr0 * cfg.lr_decay ** steps


# -- evaluation ----------------------------------------------------------------

@dataclass
class MetricsReport:
    auc: dict                     # head -> AUC or None (inactive head / single class)
    avg_attr_auc: float | None
    malignancy: dict              # acc, f1, spec, rec, prec (+ counts)
    hit_rate: float | None
    hit_detail: dict | None = None
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def predict(model: MAANet, split: Split, batch_size: int = 50):
    """Eval-mode probabilities for every head plus the localization maps."""
    model.eval()
    probs, maps = [], []
    with no_grad():
        for batch in batch_iter(split, batch_size, model.cfg.map_size, training=False):
            out = model(batch.images)
            probs.append(predict_probs(out.attr_logits))
            if out.maps is not None:
                maps.append(out.maps.data)
    return np.concatenate(probs), (np.concatenate(maps) if maps else None)


def evaluate(model: MAANet, split: Split, batch_size: int = 50, map_threshold: float = 0.5,
             overlap_threshold: float = 0.5, overlap_measure: str = "coverage") -> MetricsReport:
    probs, maps = predict(model, split, batch_size)
    heads = model.cfg.heads
    aucs = {h: None for h in HEADS}
    for j, head in enumerate(heads):
        try:
            aucs[head] = auc(probs[:, j], split.labels[:, HEADS.index(head)])
        except UndefinedMetricError:
            log.warning("AUC undefined for head %s (single class in split)", head)
    attr_aucs = [aucs[a] for a in ATTRIBUTES if aucs[a] is not None]
    malig = confusion_metrics(probs[:, 0], split.labels[:, 0]).as_dict()
    hr = detail = None
    if maps is not None:
        res = hit_rate(maps[:, 6], split.masks, map_threshold, overlap_threshold, overlap_measure)
        hr, detail = res.rate, asdict(res)
    return MetricsReport(auc=aucs, avg_attr_auc=float(np.mean(attr_aucs)) if attr_aucs else None,
                         malignancy=malig, hit_rate=hr, hit_detail=detail, n=len(split))


# -- training --------------------------------------------------------------------

@dataclass
class RunLog:
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_auc: float | None = None
    final_test: dict | None = None
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: MAANet
    final: ckpt_io.Checkpoint
    best: ckpt_io.Checkpoint
    log: RunLog


def loss_terms(model: MAANet, out, batch, cfg: TrainConfig):
    heads_idx = [HEADS.index(h) for h in model.cfg.heads]
    terms = {"attr": attr_loss(out.attr_logits, batch.labels[:, heads_idx])}
    enabled = {"attr": True, "attn": False, "spatial": False}
    if model.cfg.attn_branch:
        terms["attn"] = attn_loss(out.attn_logits, batch.labels)
        enabled["attn"] = True
        if cfg.spatial:
            terms["spatial"] = spatial_loss(out.map7, batch.masks_small)
            enabled["spatial"] = True
    return combine(terms, cfg.weights, enabled)


def train(train_split: Split, cfg: TrainConfig, val_split: Split | None = None, model: MAANet | None = None,
          out_dir=None) -> TrainResult:
    """Train with SGD; per-epoch losses and validation metrics go to the RunLog.

    The checkpoint with the best validation malignancy AUC is kept next to the
    final one. Identical (config, data) give a bitwise-identical RunLog.
    """
    t0 = time.time()
    mcfg = cfg.model_config()
    if model is None:
        model = build(mcfg, InitPolicy(seed=cfg.seed))
    params = model.parameters()
    sgd = SgdState(learning_rate=cfg.lr0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 1]))
    policy = AugmentPolicy(enabled=cfg.augment)
    run = RunLog(config={"train": cfg.to_dict(), "model": mcfg.to_dict()})
    best = None
    out_path = ensure_dir(out_dir) if out_dir is not None else None
    for epoch in range(cfg.epochs):
        sgd.learning_rate = learning_rate(cfg, epoch)
        model.train()
        sums: dict = {}
        n_batches = 0
        for b_idx, batch in enumerate(batch_iter(train_split, cfg.batch_size, mcfg.map_size, rng, True, policy)):
            try:
                out = model(batch.images)
                total, rep = loss_terms(model, out, batch, cfg)
                backward(total)
                sgd_step(params, sgd)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b_idx}: {exc}") from exc
            for k, v in rep.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        entry = {"epoch": epoch, "lr": sgd.learning_rate}
        keys = ["l_attr"] + (["l_attn"] if mcfg.attn_branch else []) + \
               (["l_spatial"] if mcfg.attn_branch and cfg.spatial else []) + ["total"]
        entry.update({k: sums.get(k, 0.0) / max(n_batches, 1) for k in keys})
        if val_split is not None:
            rep_val = evaluate(model, val_split)
            entry["val"] = rep_val.to_dict()
            score = rep_val.auc["malig"]
            if score is not None and (run.best_val_auc is None or score > run.best_val_auc):
                run.best_val_auc, run.best_epoch = score, epoch
                best = ckpt_io.capture(model, epoch + 1, sgd, rng)
        run.epochs.append(entry)
        log.info("epoch %d lr %.4g loss %.4f%s", epoch, entry["lr"], entry["total"],
                 f" val AUC {entry['val']['auc']['malig']}" if "val" in entry else "")
    final = ckpt_io.capture(model, cfg.epochs, sgd, rng)
    if best is None:
        best = final
    run.seconds = time.time() - t0
    if out_path is not None:
        ckpt_io.save(out_path / "final.maan", final)
        ckpt_io.save(out_path / "best.maan", best)
        (out_path / "runlog.json").write_text(json.dumps(run.to_dict(), indent=1) + "\n")
        (out_path / "config.json").write_text(json.dumps(run.config, indent=2, sort_keys=True) + "\n")
    return TrainResult(model=model, final=final, best=best, log=run)


def train_on_dataset(dataset: Dataset, cfg: TrainConfig, out_dir=None, test_with: str = "best",
                     partition=None) -> TrainResult:
    """Train on the train split, select on val, report on test.

    ``partition`` optionally overrides the manifest splits with explicit
    (train_ids, val_ids, test_ids).
    """
    if partition is None:
        tr, va, te = dataset.split("train"), dataset.split("val"), dataset.split("test")
    else:
        tr, va, te = (dataset.select(ids) for ids in partition)
    result = train(tr, cfg, va, out_dir=out_dir)
    model = ckpt_io.restore(result.best if test_with == "best" else result.final)[0]
    result.log.final_test = evaluate(model, te).to_dict()
    result.log.final_test["checkpoint"] = test_with
    if out_dir is not None:
        (Path(out_dir) / "runlog.json").write_text(json.dumps(result.log.to_dict(), indent=1) + "\n")
    return result


# -- experiment drivers -----------------------------------------------------------

def _row(metrics: dict) -> dict:
    row = {f"auc_{h}": metrics["auc"][h] for h in HEADS}
    row["auc_avg"] = metrics["avg_attr_auc"]
    for k in ("acc", "f1", "spec", "rec", "prec"):
        row[k] = metrics["malignancy"][k]
    row["hit_rate"] = metrics["hit_rate"]
    return row


def ablation_suite(dataset: Dataset, base: TrainConfig, seeds=(0, 1, 2),
                   variants=("baseline", "attr", "attr_attn", "full"), out_dir=None, partition=None) -> dict:
    """Train every variant under every seed on the same splits and report per-run
    rows plus the per-variant median, keyed by the table row names."""
    runs: dict = {}
    for variant in variants:
        for seed in seeds:
            cfg = replace(base, ablation=variant, seed=seed)
            sub = Path(out_dir) / f"{variant}_seed{seed}" if out_dir is not None else None
            res = train_on_dataset(dataset, cfg, out_dir=sub, partition=partition)
            runs.setdefault(table_name(variant), []).append({"seed": seed, **_row(res.log.final_test)})
            log.info("ablation %s seed %d malignancy AUC %.4f", variant, seed,
                     res.log.final_test["auc"]["malig"])
    medians = {}
    for name, rows in runs.items():
        med = {}
        for key in rows[0]:
            if key == "seed":
                continue
            vals = [r[key] for r in rows if r[key] is not None]
            med[key] = statistics.median(vals) if vals else None
        medians[name] = med
    table = {"runs": runs, "median": medians, "seeds": list(seeds)}
    if out_dir is not None:
        ensure_dir(out_dir)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(table, indent=1) + "\n")
    return table


def cross_validate(dataset: Dataset, cfg: TrainConfig, k: int = 5, out_dir=None) -> dict:
    """k models on seeded folds of the whole manifest; rows "Average" and "STD" per metric."""
    if k < 2:
        raise ConfigError("cross-validation needs k >= 2")
    folds = kfold_split(dataset.ids, k, cfg.seed)
    rows = []
    for i, (train_ids, test_ids) in enumerate(folds):
        sub = Path(out_dir) / f"fold{i}" if out_dir is not None else None
        res = train(dataset.select(train_ids), replace(cfg, seed=cfg.seed + i), out_dir=sub)
        metrics = evaluate(res.model, dataset.select(test_ids)).to_dict()
        rows.append({"fold": i, **_row(metrics)})
    summary = summarize_folds(rows)
    report = {"folds": rows, **summary, "k": k}
    if out_dir is not None:
        ensure_dir(out_dir)
        (Path(out_dir) / "xval.json").write_text(json.dumps(report, indent=1) + "\n")
    return report


def summarize_folds(rows: list[dict]) -> dict:
    """Mean and population standard deviation over folds for each metric."""
    keys = [k for k in rows[0] if k != "fold"]
    avg, std = {}, {}
    for key in keys:
        vals = [r[key] for r in rows if r[key] is not None]
        avg[key] = float(np.mean(vals)) if vals else None
        std[key] = float(np.std(vals)) if vals else None
    return {"Average": avg, "STD": std}


def export_heatmaps(model: MAANet, split: Split, out_dir) -> list[Path]:
    """Write <id>_<head>.pgm for the seven head maps (upsampled to S×S) plus <id>_input.pgm."""
    if not model.cfg.attn_branch:
        raise ConfigError("heatmap export needs a model with the attention branch")
    out = ensure_dir(out_dir)
    _, maps = predict(model, split)
    S = split.images.shape[-1]
    channel = {"malig": 6, **{a: i for i, a in enumerate(ATTRIBUTES)}}
    written = []
    for i, sid in enumerate(split.ids):
        for head in HEADS:
            up = np.clip(bilinear_resize(maps[i, channel[head]], S, S), 0.0, 1.0)
            path = out / f"{sid}_{head}.pgm"
            write_pgm(path, up)
            written.append(path)
        path = out / f"{sid}_input.pgm"
        write_pgm(path, split.images[i])
        written.append(path)
    return written
