"""Dataset persistence (PGM + JSON-lines manifest), preprocessing, augmentation,
batching and k-fold partitioning."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from maanet.errors import ConfigError, ContractError, DataError
from maanet.imageops import area_downsample, bilinear_resize, nearest_resize, to_uint8

LABEL_FIELDS = ("malignancy", "calc", "shape", "ratio", "boundary", "margin", "echo")
MANIFEST_FIELDS = ("id", "image", "mask") + LABEL_FIELDS + ("split", "digest")
SPLITS = ("train", "val", "test")


# -- PGM ---------------------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    """Binary 8-bit greyscale (P5, maxval 255). uint8 input is written as is,
    floats are quantised from [0, 1] with round-half-up."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise DataError(f"{path}: PGM needs a 2-D array, got dims {list(arr.shape)}")
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    h, w = arr.shape
    try:
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (w, h))
            fh.write(np.ascontiguousarray(arr).tobytes())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM; returns uint8 for maxval <= 255, uint16 otherwise."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if buf[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {buf[:2]!r})")
    try:
        (w, h, maxval), start = _pgm_tokens(buf[2:], 3)
    except ValueError as exc:
        raise DataError(f"{path}: bad PGM header ({exc})") from exc
    start += 2
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    raster = buf[start:start + need]
    if len(raster) != need:
        raise DataError(f"{path}: expected {need} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(dtype.newbyteorder("="))


# -- preprocessing -----------------------------------------------------------

def pad_to_square(image: np.ndarray, mask: np.ndarray | None = None):
    """Zero-pad the shorter side; the odd extra pixel goes bottom/right."""
    image = np.asarray(image)
    if image.size == 0:
        raise ContractError("pad_to_square on an empty image")
    h, w = image.shape[:2]
    side = max(h, w)
    top, left = (side - h) // 2, (side - w) // 2
    pads = ((top, side - h - top), (left, side - w - left))
    out = np.pad(image, pads) if side != h or side != w else image
    if mask is None:
        return out
    return out, (np.pad(mask, pads) if out is not image else mask)


def resize(image: np.ndarray, size: int, method: str = "bilinear") -> np.ndarray:
    if size < 8:
        raise ContractError(f"resize target {size} is below 8")
    if method == "bilinear":
        return bilinear_resize(image, size, size).astype(np.float32)
    if method == "nearest":
        return nearest_resize(image, size, size)
    raise ConfigError(f"unknown resize method {method!r}")


def preprocess(image: np.ndarray, mask: np.ndarray, size: int):
    """Pad to square then resize: bilinear for the image, nearest for the mask."""
    image, mask = pad_to_square(image, mask)
    if image.shape[0] != size:
        image = resize(image, size, "bilinear")
        mask = resize(mask, size, "nearest")
    return image, mask


@dataclass(frozen=True)
class AugmentPolicy:
    enabled: bool = True
    scale_range: tuple = (1.0, 1.15)
    flip_prob: float = 0.5


def augment(image: np.ndarray, mask: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator):
    """Random up-scale, S×S crop and horizontal flip, applied identically to the mask.

    The random draws are consumed even when a step is a no-op so the RNG stream
    does not depend on image content.
    """
    if not policy.enabled:
        return image, mask
    size = image.shape[0]
    u = rng.uniform(*policy.scale_range)
    new = max(size, int(round(size * u)))
    oy = int(rng.integers(0, new - size + 1))
    ox = int(rng.integers(0, new - size + 1))
    flip = rng.random() < policy.flip_prob
    if new != size:
        image = bilinear_resize(image, new, new).astype(image.dtype)
        mask = nearest_resize(mask, new, new)
    image = image[oy:oy + size, ox:ox + size]
    mask = mask[oy:oy + size, ox:ox + size]
    if flip:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


# -- manifest and dataset ----------------------------------------------------

def write_dataset(out_dir, samples: Iterable, tags: list[str], gen_config=None) -> "Dataset":
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    records, specs = [], []
    for sample, tag in zip(samples, tags):
        img_rel, mask_rel = f"images/{sample.id}.pgm", f"masks/{sample.id}.pgm"
        write_pgm(out / img_rel, sample.image)
        write_pgm(out / mask_rel, (sample.mask > 0).astype(np.uint8) * 255)
        rec = {"id": sample.id, "image": img_rel, "mask": mask_rel}
        rec.update({k: int(v) for k, v in zip(LABEL_FIELDS, sample.labels)})
        rec["split"] = tag
        rec["digest"] = sample.spec.digest()
        records.append(rec)
        specs.append({"id": sample.id, **sample.spec.to_dict()})
    _write_jsonl(out / "manifest.jsonl", records)
    _write_jsonl(out / "specs.jsonl", specs)
    if gen_config is not None:
        _write_json(out / "gen_config.json", gen_config.to_dict())
    return Dataset.load(out)


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    try:
        with open(path, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    records, seen = [], set()
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if tuple(rec) != MANIFEST_FIELDS:
            raise DataError(f"{path}:{n}: fields {tuple(rec)} differ from {MANIFEST_FIELDS}")
        if rec["id"] in seen:
            raise DataError(f"{path}:{n}: duplicate id {rec['id']}")
        if any(rec[k] not in (0, 1) for k in LABEL_FIELDS):
            raise DataError(f"{path}:{n}: labels must be 0/1")
        seen.add(rec["id"])
        records.append(rec)
    return records


@dataclass
class Split:
    ids: list
    images: np.ndarray      # N×S×S float32
    masks: np.ndarray       # N×S×S uint8 {0,1}
    labels: np.ndarray      # N×7 int

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "Split":
        index = np.asarray(index)
        return Split([self.ids[i] for i in index], self.images[index], self.masks[index], self.labels[index])


@dataclass
class Dataset:
    root: Path
    records: list
    image_size: int = 64
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, root, image_size: int | None = None) -> "Dataset":
        root = Path(root)
        records = read_manifest(root / "manifest.jsonl")
        for rec in records:
            for key in ("image", "mask"):
                if not (root / rec[key]).exists():
                    raise DataError(f"missing file {root / rec[key]}")
        if image_size is None:
            cfg_path = root / "gen_config.json"
            image_size = json.loads(cfg_path.read_text())["image_size"] if cfg_path.exists() else 64
        return cls(root=root, records=records, image_size=image_size)

    @property
    def ids(self) -> list:
        return [r["id"] for r in self.records]

    def specs(self) -> dict:
        path = self.root / "specs.jsonl"
        if not path.exists():
            raise DataError(f"missing {path}")
        out = {}
        for line in path.read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                out[d.pop("id")] = d
        return out

    def _load_records(self, recs) -> Split:
        S = self.image_size
        n = len(recs)
        images = np.empty((n, S, S), dtype=np.float32)
        masks = np.empty((n, S, S), dtype=np.uint8)
        labels = np.empty((n, len(LABEL_FIELDS)), dtype=np.int64)
        for i, rec in enumerate(recs):
            img = read_pgm(self.root / rec["image"]).astype(np.float32) / 255.0
            msk = (read_pgm(self.root / rec["mask"]) > 127).astype(np.uint8)
            if img.shape != msk.shape:
                raise DataError(f"{rec['id']}: image dims {img.shape} != mask dims {msk.shape}")
            images[i], masks[i] = preprocess(img, msk, S)
            labels[i] = [rec[k] for k in LABEL_FIELDS]
        return Split([r["id"] for r in recs], images, masks, labels)

    def split(self, name: str) -> Split:
        if name not in self._cache:
            recs = [r for r in self.records if r["split"] == name]
            if not recs:
                raise DataError(f"split {name!r} is empty in {self.root}")
            self._cache[name] = self._load_records(recs)
        return self._cache[name]

    def select(self, ids) -> Split:
        wanted = set(ids)
        recs = [r for r in self.records if r["id"] in wanted]
        if len(recs) != len(wanted):
            raise DataError(f"{len(wanted) - len(recs)} requested ids are not in the manifest")
        return self._load_records(recs)


def kfold_split(ids, k: int = 5, seed: int = 0) -> list[tuple[list, list]]:
    """Seeded shuffle then ``k`` near-equal test folds; returns (train_ids, test_ids) per fold."""
    ids = list(ids)
    if k < 2 or len(ids) < k:
        raise ConfigError(f"cannot make {k} folds from {len(ids)} samples")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF01D])).permutation(len(ids))
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        test = [ids[j] for j in np.sort(folds[i])]
        train = [ids[j] for f in range(k) if f != i for j in np.sort(folds[f])]
        out.append((train, test))
    return out



def repartition(ids, sizes, seed: int = 0) -> list[list]:
    """Seeded shuffle of ``ids`` cut into consecutive groups of the given sizes."""
    ids = list(ids)
    if any(n < 1 for n in sizes) or sum(sizes) > len(ids):
        raise ConfigError(f"cannot cut sizes {list(sizes)} from {len(ids)} samples")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E7])).permutation(len(ids))
    bounds = np.cumsum([0, *sizes])
    return [[ids[j] for j in np.sort(perm[a:b])] for a, b in zip(bounds[:-1], bounds[1:])]

@dataclass
class Batch:
    images: np.ndarray        # N×1×S×S float32
    labels: np.ndarray        # N×7
    masks_small: np.ndarray   # N×h×w in [0, 1]
    masks: np.ndarray         # N×S×S {0,1}
    ids: list


def batch_iter(split: Split, batch_size: int, map_size: int, rng: np.random.Generator | None = None,
               training: bool = True, policy: AugmentPolicy | None = None) -> Iterator[Batch]:
    """Shuffled (training) or ordered (evaluation) batches.

    Training drops the final short batch; evaluation keeps it. Masks are
    area-averaged down to the attention-map resolution.
    """
    if batch_size < 2:
        raise ContractError("batch size must be at least 2")
    n = len(split)
    if n == 0:
        raise DataError("split is empty")
    if training:
        if rng is None:
            raise ContractError("training batches need an rng")
        order = rng.permutation(n)
        stop = n - n % batch_size
    else:
        order = np.arange(n)
        stop = n
    for lo in range(0, stop, batch_size):
        idx = order[lo:lo + batch_size]
        imgs = split.images[idx]
        msks = split.masks[idx]
        if training and policy is not None and policy.enabled:
            imgs = imgs.copy()
            msks = msks.copy()
            for j in range(len(idx)):
                imgs[j], msks[j] = augment(imgs[j], msks[j], policy, rng)
        small = area_downsample(msks, map_size, map_size).astype(np.float32)
        yield Batch(images=imgs[:, None].astype(np.float32), labels=split.labels[idx], masks_small=small,
                    masks=msks, ids=[split.ids[i] for i in idx])


def num_batches(n: int, batch_size: int, training: bool) -> int:
    return n // batch_size if training else -(-n // batch_size)


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        os.makedirs(p, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {p}: {exc}") from exc
    return p
