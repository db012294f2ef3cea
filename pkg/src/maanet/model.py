"""MAA-Net: shared backbone, 7-map attention branch, six attribute streams and a
malignancy head that sees only the attribute features."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from maanet.autodiff import Tensor
from maanet.autodiff import functional as F
from maanet.errors import ConfigError, NumericError
from maanet.imageops import bilinear_resize
from maanet.nn import BatchNorm, ConvBlock, ConvBnRelu, InitPolicy, Linear, Module, ResidualBlock, gap, init_params

ATTRIBUTES = ("calc", "shape", "ratio", "boundary", "margin", "echo")
HEADS = ("malig",) + ATTRIBUTES
NUM_HEADS = 7
# attention channels: 0..5 feed the attribute streams, 6 is the localization map
LOCALIZATION_CHANNEL = 6
_CHANNEL_OF_HEAD = {"malig": LOCALIZATION_CHANNEL, **{a: i for i, a in enumerate(ATTRIBUTES)}}
_AUX_ORDER = [_CHANNEL_OF_HEAD[h] for h in HEADS]


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    tap_stride: int = 16
    stream_width: int = 64
    attributes: tuple = ATTRIBUTES
    attr_branch: bool = True
    attn_branch: bool = True
    malignancy_from: str = "features"  # or "logits": concat of the scalar stream outputs

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if self.tap_stride < 2 or self.tap_stride & (self.tap_stride - 1):
            raise ConfigError(f"tap stride must be a power of two >= 2, got {self.tap_stride}")
        if self.input_size % self.tap_stride:
            raise ConfigError(f"input size {self.input_size} is not divisible by tap stride {self.tap_stride}")
        if not self.stage_channels:
            raise ConfigError("stage channel plan is empty")
        if self.stem_downsamples < 0:
            raise ConfigError(f"{len(self.stage_channels)} stages exceed tap stride {self.tap_stride}")
        unknown = set(self.attributes) - set(ATTRIBUTES)
        if unknown:
            raise ConfigError(f"unknown attributes {sorted(unknown)}")
        if self.attr_branch and not self.attributes:
            raise ConfigError("attribute branch enabled with no attributes")
        if self.attn_branch and not self.attr_branch:
            raise ConfigError("the attention branch requires the attribute branch")
        if self.malignancy_from not in ("features", "logits"):
            raise ConfigError(f"malignancy_from must be 'features' or 'logits', got {self.malignancy_from!r}")

    @property
    def stem_downsamples(self) -> int:
        return int(math.log2(self.tap_stride)) - (len(self.stage_channels) - 1)

    @property
    def map_size(self) -> int:
        return self.input_size // self.tap_stride

    @property
    def heads(self) -> tuple:
        if not self.attr_branch:
            return ("malig",)
        return ("malig",) + tuple(a for a in ATTRIBUTES if a in self.attributes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["attributes"] = list(self.attributes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from None

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class ModelOutput:
    attr_logits: Tensor            # N × len(heads), column 0 is malignancy
    heads: tuple
    attn_logits: Tensor | None     # N × 7 in head order, or None without attention
    maps: Tensor | None            # N × 7 × h × w post-sigmoid, channel order ATTRIBUTES + localization
    features: Tensor               # backbone f(I)
    stream_inputs: dict = field(default_factory=dict)
    stream_features: dict = field(default_factory=dict)

    def map_for(self, head: str) -> np.ndarray:
        if self.maps is None:
            raise ConfigError("model has no attention branch")
        return self.maps.data[:, _CHANNEL_OF_HEAD[head]]

    @property
    def map7(self) -> Tensor:
        return self.maps[:, LOCALIZATION_CHANNEL]


class Backbone(Module):
    """Residual feature extractor down to ``tap_stride``.

    Stem: 3×3 conv-BN-ReLU blocks, the first ``stem_downsamples`` with stride
    2. Stage 0 is a stride-1 residual block, every later stage halves the size.
    """

    def __init__(self, cfg: ModelConfig):
        n_down = cfg.stem_downsamples
        stem = []
        in_ch = 1
        for i in range(max(n_down, 1)):
            stem.append(ConvBnRelu(in_ch, cfg.stem_channels, stride=2 if i < n_down else 1))
            in_ch = cfg.stem_channels
        self.stem = stem
        stages = []
        for i, ch in enumerate(cfg.stage_channels):
            stages.append(ResidualBlock(in_ch, ch, stride=1 if i == 0 else 2))
            in_ch = ch
        self.stages = stages
        self.out_channels = in_ch

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.stem:
            x = blk(x)
        for blk in self.stages:
            x = blk(x)
        return x


class AttentionBranch(Module):
    def __init__(self, channels: int):
        self.conv = ConvBlock(channels, channels, 3, 1, bias=False)
        self.bn = BatchNorm(channels)
        self.proj = ConvBlock(channels, NUM_HEADS, 1, 1, bias=True)

    def forward(self, f: Tensor) -> Tensor:
        """Returns the 7 pre-sigmoid maps."""
        return self.proj(F.relu(self.bn(self.conv(f))))


class ResidualStage(Module):
    """Three residual blocks, the first at stride 2, then global average pooling."""

    def __init__(self, in_ch: int, width: int):
        self.blocks = [ResidualBlock(in_ch, width, 2), ResidualBlock(width, width, 1),
                       ResidualBlock(width, width, 1)]

    def features(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return gap(x)


class AttributeStream(ResidualStage):
    def __init__(self, in_ch: int, width: int):
        super().__init__(in_ch, width)
        self.fc = Linear(width, 1)


class MAANet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        ch = self.backbone.out_channels
        if cfg.attn_branch:
            self.attention = AttentionBranch(ch)
        if cfg.attr_branch:
            self.streams = {a: AttributeStream(ch, cfg.stream_width) for a in ATTRIBUTES if a in cfg.attributes}
            k = len(self.streams)
            self.malignancy_fc = Linear(k * cfg.stream_width if cfg.malignancy_from == "features" else k, 1)
        else:
            # the plain classifier keeps the final residual stage the streams replicate
            self.head_stage = ResidualStage(ch, cfg.stream_width)
            self.malignancy_fc = Linear(cfg.stream_width, 1)

    def forward(self, x, attention_override=None) -> ModelOutput:
        """Run the network on an N×1×S×S batch.

        ``attention_override`` replaces the six stream maps by a constant (or
        an N×7×h×w array); ``"off"`` skips the multiply entirely.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        cfg = self.cfg
        f = self.backbone(x)
        maps = attn_logits = None
        if cfg.attn_branch:
            pre = self.attention(f)
            maps = F.sigmoid(pre)
            attn_logits = gap(pre)[:, _AUX_ORDER]
        out = ModelOutput(attr_logits=None, heads=cfg.heads, attn_logits=attn_logits, maps=maps, features=f)
        if not cfg.attr_branch:
            out.attr_logits = self.malignancy_fc(self.head_stage.features(f))
            return self._checked(out)

        stream_maps = maps
        skip_multiply = isinstance(attention_override, str) and attention_override == "off"
        if attention_override is not None and not skip_multiply:
            n, _, h, w = f.shape
            stream_maps = Tensor(np.broadcast_to(np.asarray(attention_override, dtype=f.dtype),
                                                 (n, NUM_HEADS, h, w)).copy(), dtype=f.dtype)
        logits, feats = [], []
        for attr, stream in self.streams.items():
            if stream_maps is not None and not skip_multiply:
                c = _CHANNEL_OF_HEAD[attr]
                fc_in = F.mul(stream_maps[:, c:c + 1], f)
            else:
                fc_in = f
            g = stream.features(fc_in)
            out.stream_inputs[attr] = fc_in
            out.stream_features[attr] = g
            feats.append(g)
            logits.append(stream.fc(g))
        if cfg.malignancy_from == "features":
            malig = self.malignancy_fc(F.concat(feats, axis=1))
        else:
            malig = self.malignancy_fc(F.concat(logits, axis=1))
        out.attr_logits = F.concat([malig] + logits, axis=1)
        return self._checked(out)

    @staticmethod
    def _checked(out: ModelOutput) -> ModelOutput:
        if not np.isfinite(out.attr_logits.data).all():
            raise NumericError("non-finite logits")
        return out


def build(cfg: ModelConfig, policy: InitPolicy | None = None) -> MAANet:
    model = MAANet(cfg)
    init_params(model, policy or InitPolicy())
    return model


def parameter_checksum(model: Module) -> str:
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def predict_probs(logits) -> np.ndarray:
    """Sigmoid per head; logits are clamped to ±88 so saturation never yields NaN."""
    from maanet.autodiff.functional import sigmoid_array
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return sigmoid_array(np.clip(z, -88.0, 88.0))


def localization_map(output: ModelOutput, target_size: int) -> np.ndarray:
    """Map 7 bilinearly upsampled to target_size × target_size, values in [0, 1]."""
    m = output.map_for("malig")
    if target_size < m.shape[-1]:
        raise ConfigError(f"target size {target_size} is smaller than the map size {m.shape[-1]}")
    return np.clip(bilinear_resize(m, target_size, target_size), 0.0, 1.0)
