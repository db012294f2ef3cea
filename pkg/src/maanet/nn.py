"""Layers built from the autodiff primitives."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from maanet.autodiff import Tensor
from maanet.autodiff import functional as F
from maanet.errors import ConfigError, ShapeError


class Module:
    """Minimal container: parameters, buffers and child modules are discovered
    from instance attributes in definition order, which fixes parameter naming
    and initialisation order."""

    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v
            elif isinstance(value, dict) and value and all(isinstance(v, Module) for v in value.values()):
                for k, v in value.items():
                    yield f"{key}.{k}", v

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, child in self._children():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(child, Tensor):
                if child.requires_grad:
                    yield full, child
            else:
                yield from child.named_parameters(full)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for key, buf in getattr(mod, "_buffers", {}).items():
                yield (f"{mod_name}.{key}" if mod_name else key), buf

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        params = dict(self.named_parameters())
        for name, value in state.items():
            target = own[name]
            if target.shape != value.shape:
                raise ShapeError("load_state_dict", target.shape, value.shape, detail=name)
            if name in params:
                params[name].data = np.array(value, dtype=target.dtype)
            else:
                target[...] = value

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Convert every parameter and buffer in place (float64 check mode)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for _, mod in self.named_modules():
            bufs = getattr(mod, "_buffers", None)
            if bufs:
                for k in bufs:
                    bufs[k] = bufs[k].astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _param(*dims) -> Tensor:
    return Tensor(np.zeros(dims), requires_grad=True)


class ConvBlock(Module):
    """k×k convolution (k in {1, 3}) with "same" zero padding (k-1)/2.

    The bias is omitted when the conv feeds a BatchNorm, where it would be
    cancelled by the mean subtraction.
    """

    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, bias: bool = True):
        if k not in (1, 3):
            raise ConfigError(f"kernel size must be 1 or 3, got {k}")
        self.weight = _param(out_ch, in_ch, k, k)
        self.bias = _param(out_ch) if bias else None
        self.stride = stride
        self.padding = (k - 1) // 2

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = _param(channels)
        self.beta = _param(channels)
        self.eps = eps
        self.momentum = momentum
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=np.float32),
            "running_var": np.ones(channels, dtype=np.float32),
        }

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers["running_var"]

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int):
        self.weight = _param(out_features, in_features)
        self.bias = _param(out_features)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ConvBnRelu(Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        self.conv = ConvBlock(in_ch, out_ch, 3, stride, bias=False)
        self.bn = BatchNorm(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


class ResidualBlock(Module):
    """ReLU(BN(conv2(ReLU(BN(conv1(x))))) + skip(x)).

    The skip path is a 1×1 conv + BN whenever the stride or channel count
    changes, identity otherwise.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        self.in_ch = in_ch
        self.conv1 = ConvBlock(in_ch, out_ch, 3, stride, bias=False)
        self.bn1 = BatchNorm(out_ch)
        self.conv2 = ConvBlock(out_ch, out_ch, 3, 1, bias=False)
        self.bn2 = BatchNorm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.skip_conv = ConvBlock(in_ch, out_ch, 1, stride, bias=False)
            self.skip_bn = BatchNorm(out_ch)
        else:
            self.skip_conv = None
            self.skip_bn = None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError("residual_block", x.shape, (x.shape[0] if x.ndim else 0, self.in_ch),
                             detail="channel mismatch")
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.skip_conv is None else self.skip_bn(self.skip_conv(x))
        return F.relu(F.add(h, skip))


def gap(x: Tensor) -> Tensor:
    """Global average pooling N×C×H×W -> N×C."""
    return F.global_avg_pool(x)


@dataclass(frozen=True)
class InitPolicy:
    seed: int = 0
    conv: str = "he_normal"
    linear: str = "uniform_fan_in"


def init_params(model: Module, policy: InitPolicy) -> None:
    """Fill every parameter deterministically from ``policy.seed``.

    Convs: He-normal, std sqrt(2 / (in·k·k)); conv biases zero.
    Linear: uniform in ±sqrt(1/fan_in) for weight and bias.
    BatchNorm: gamma 1, beta 0, running mean 0, running var 1.
    """
    rng = np.random.default_rng(policy.seed)
    for _, mod in model.named_modules():
        if isinstance(mod, ConvBlock):
            out_ch, in_ch, k, _ = mod.weight.shape
            std = np.sqrt(2.0 / (in_ch * k * k))
            mod.weight.data[...] = rng.normal(0.0, std, size=mod.weight.shape)
            if mod.bias is not None:
                mod.bias.data[...] = 0.0
        elif isinstance(mod, Linear):
            bound = np.sqrt(1.0 / mod.weight.shape[1])
            mod.weight.data[...] = rng.uniform(-bound, bound, size=mod.weight.shape)
            mod.bias.data[...] = rng.uniform(-bound, bound, size=mod.bias.shape)
        elif isinstance(mod, BatchNorm):
            mod.gamma.data[...] = 1.0
            mod.beta.data[...] = 0.0
            mod.running_mean[...] = 0.0
            mod.running_var[...] = 1.0
