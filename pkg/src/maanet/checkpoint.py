"""Binary checkpoint archive.

Layout (all integers little-endian):

    b"MAAN" | u32 version | 64-byte config digest (hex sha256)
    u32 n + n bytes  JSON header: model config, epoch, optimizer scalars, RNG state, extras
    u32 count, then per tensor:
        u16 name length | name (utf-8) | u8 rank | rank × u32 dims | float32 values
    (model tensors first, then optimizer velocities under "velocity/<param>")

JSON is written with sorted keys and no whitespace so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from maanet.errors import ConfigError, DataError

MAGIC = b"MAAN"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: dict
    tensors: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    optimizer: dict = field(default_factory=dict)       # learning_rate, momentum, weight_decay
    velocity: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        from maanet.model import ModelConfig
        return ModelConfig.from_dict(self.model_config).digest()


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _write_tensors(buf: io.BytesIO, tensors) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensors(view: memoryview, pos: int):
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + nlen]).decode()
        pos += nlen
        (rank,) = struct.unpack_from("<B", view, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
        out[name] = arr
    return out, pos


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(ckpt.digest.encode("ascii"))
    header = _canon({"model_config": ckpt.model_config, "epoch": int(ckpt.epoch), "optimizer": ckpt.optimizer,
                     "rng_state": ckpt.rng_state, "extra": ckpt.extra})
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    tensors = OrderedDict(ckpt.tensors)
    for name, v in ckpt.velocity.items():
        tensors[f"velocity/{name}"] = v
    _write_tensors(buf, tensors)
    return buf.getvalue()


def from_bytes(blob: bytes, expected_digest: str | None = None) -> Checkpoint:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise DataError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    digest = bytes(view[8:72]).decode("ascii")
    (hlen,) = struct.unpack_from("<I", view, 72)
    header = json.loads(bytes(view[76:76 + hlen]))
    tensors, pos = _read_tensors(view, 76 + hlen)
    if pos != len(blob):
        raise DataError(f"checkpoint has {len(blob) - pos} trailing bytes")
    model_t = OrderedDict((k, v) for k, v in tensors.items() if not k.startswith("velocity/"))
    velocity = OrderedDict((k[len("velocity/"):], v) for k, v in tensors.items() if k.startswith("velocity/"))
    ckpt = Checkpoint(model_config=header["model_config"], tensors=model_t, epoch=header["epoch"],
                      optimizer=header["optimizer"], velocity=velocity, rng_state=header["rng_state"],
                      extra=header["extra"])
    if ckpt.digest != digest:
        raise DataError("checkpoint header digest does not match its model config")
    if expected_digest is not None and digest != expected_digest:
        raise ConfigError(f"checkpoint config digest {digest[:12]} does not match expected {expected_digest[:12]}")
    return ckpt


def save(path, ckpt: Checkpoint) -> None:
    try:
        Path(path).write_bytes(to_bytes(ckpt))
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path, expected_config=None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    expected = expected_config.digest() if expected_config is not None else None
    return from_bytes(blob, expected)


def capture(model, epoch: int = 0, sgd=None, rng: np.random.Generator | None = None, extra=None) -> Checkpoint:
    """Snapshot a model (and optionally optimizer/RNG) into a Checkpoint."""
    tensors = OrderedDict((k, np.array(v, dtype=np.float32)) for k, v in model.state_dict().items())
    optimizer, velocity = {}, OrderedDict()
    if sgd is not None:
        optimizer = {"learning_rate": sgd.learning_rate, "momentum": sgd.momentum, "weight_decay": sgd.weight_decay}
        names = [n for n, _ in model.named_parameters()]
        for name, v in zip(names, sgd.velocity):
            velocity[name] = np.array(v, dtype=np.float32)
    return Checkpoint(model_config=model.cfg.to_dict(), tensors=tensors, epoch=epoch, optimizer=optimizer,
                      velocity=velocity, rng_state=rng.bit_generator.state if rng is not None else None,
                      extra=dict(extra or {}))


def restore(ckpt: Checkpoint):
    """Rebuild the model (and optimizer state, when stored) from a checkpoint."""
    from maanet.autodiff import SgdState
    from maanet.model import MAANet, ModelConfig
    model = MAANet(ModelConfig.from_dict(ckpt.model_config))
    model.load_state_dict(ckpt.tensors)
    sgd = None
    if ckpt.optimizer:
        sgd = SgdState(**ckpt.optimizer)
        names = [n for n, _ in model.named_parameters()]
        if ckpt.velocity:
            sgd.velocity = [ckpt.velocity[n].copy() for n in names]
    return model, sgd
