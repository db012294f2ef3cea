"""Procedural ultrasound-like nodule images with known attributes and masks.

Each of the six attributes is drawn as a binary class first, then its
rendering parameter is sampled from a class-conditional band. The bands never
overlap, so the label is a threshold function of the stored parameters and is
visible in the pixels. Malignancy is a counting rule over the six attributes.

Lengths given "at S=64" are scaled linearly with the image size.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, special

from maanet.errors import ConfigError, DataError

ATTRIBUTES = ("calc", "shape", "ratio", "boundary", "margin", "echo")
LABEL_ORDER = ("malignancy",) + ATTRIBUTES

# class-conditional bands: (negative band, positive band)
SHAPE_BANDS = ((0.0, 0.02), (0.18, 0.28))       # RMS radial deviation / radius
MARGIN_BANDS = ((0.0, 0.01), (0.14, 0.22))
ECHO_BANDS = ((0.0, 0.015), (0.08, 0.13))
BOUNDARY_BANDS_64 = ((0.4, 0.8), (1.6, 2.4))        # px at S=64
ASPECT_BANDS = ((0.50, 0.70), (1.40, 1.80))          # vertical / horizontal semi-axis
CALC_COUNT = (1, 4)
SHAPE_HARMONICS = (3, 4)        # low-frequency lobes; k=2 would read as elongation
MARGIN_HARMONICS = (8, 16)      # high-frequency roughness

SHAPE_THRESHOLD = 0.10
MARGIN_THRESHOLD = 0.075
ECHO_THRESHOLD = 0.05
BOUNDARY_THRESHOLD_64 = 1.2

BACKGROUND_MEAN = 0.45
BACKGROUND_SD = 0.12
INTERIOR_SPECKLE_SD = 0.03
INTERIOR_LEVEL = (0.06, 0.20)
MIN_SUPPORT_PX = 16
MIN_RADIUS_FACTOR = 0.35


@dataclass
class GenConfig:
    image_size: int = 64
    seed: int = 0
    positive_rates: tuple = (0.5,) * 6
    speckle_sigma: float = 0.8
    malignancy_k: int = 3

    def __post_init__(self):
        self.positive_rates = tuple(float(p) for p in self.positive_rates)
        if len(self.positive_rates) != 6 or any(not 0 <= p <= 1 for p in self.positive_rates):
            raise ConfigError(f"positive_rates must be six probabilities, got {self.positive_rates}")
        if self.image_size < 16:
            raise ConfigError(f"image size {self.image_size} is too small")
        if not 0 <= self.malignancy_k <= 6:
            raise ConfigError(f"malignancy_k must lie in 0..6, got {self.malignancy_k}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positive_rates"] = list(self.positive_rates)
        return d


@dataclass
class NoduleSpec:
    image_size: int
    cx: float
    cy: float
    a: float                    # horizontal semi-axis before rotation, fraction of S
    b: float                    # vertical semi-axis before rotation, fraction of S
    theta: float                # rotation, radians
    shape_irregularity: float   # RMS radial deviation over harmonics 3-4, fraction of radius
    margin_roughness: float     # RMS radial deviation over harmonics 8-16
    boundary_sigma: float       # px
    n_calcifications: int
    echo_heterogeneity: float
    interior_level: float
    gain: float = 1.0
    offset: float = 0.0
    # contour terms [k, unit-RMS weight, phase], scaled by the two amplitudes above
    shape_terms: list = field(default_factory=list)
    margin_terms: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoduleSpec":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Sample:
    image: np.ndarray           # S×S float in [0, 1]
    mask: np.ndarray            # S×S uint8 in {0, 1}
    labels: np.ndarray          # 7 ints, LABEL_ORDER
    spec: NoduleSpec
    id: str = ""
    meta: dict = field(default_factory=dict)


def bbox_aspect(a: float, b: float, theta: float) -> float:
    """Height / width of the axis-aligned box around the rotated ellipse."""
    c, s = math.cos(theta), math.sin(theta)
    w = math.sqrt((a * c) ** 2 + (b * s) ** 2)
    h = math.sqrt((a * s) ** 2 + (b * c) ** 2)
    return h / w


def malignancy_rule(attrs, k: int = 3) -> int:
    return int(sum(int(v) for v in attrs) >= k)


def derive_labels(spec: NoduleSpec, k: int = 3) -> np.ndarray:
    """Labels as a pure function of the rendering parameters."""
    scale = spec.image_size / 64.0
    attrs = [
        int(spec.n_calcifications >= 1),
        int(spec.shape_irregularity > SHAPE_THRESHOLD),
        int(bbox_aspect(spec.a, spec.b, spec.theta) > 1.0),
        int(spec.boundary_sigma > BOUNDARY_THRESHOLD_64 * scale),
        int(spec.margin_roughness > MARGIN_THRESHOLD),
        int(spec.echo_heterogeneity > ECHO_THRESHOLD),
    ]
    return np.array([malignancy_rule(attrs, k)] + attrs, dtype=np.int64)


def _band(rng, bands, positive):
    lo, hi = bands[int(positive)]
    return float(rng.uniform(lo, hi))


def sample_spec(config: GenConfig, rng: np.random.Generator) -> tuple[NoduleSpec, np.ndarray]:
    S = config.image_size
    scale = S / 64.0
    pos = [bool(rng.random() < p) for p in config.positive_rates]
    calc, shape, ratio, boundary, margin, echo = pos

    radius = float(rng.uniform(0.12, 0.18))
    aspect = _band(rng, ASPECT_BANDS, ratio)
    a = radius / math.sqrt(aspect)
    b = radius * math.sqrt(aspect)
    theta = float(rng.uniform(-0.35, 0.35))
    s_irr = _band(rng, SHAPE_BANDS, shape)
    m_rough = _band(rng, MARGIN_BANDS, margin)
    sigma = _band(rng, BOUNDARY_BANDS_64, boundary) * scale
    n_calc = int(rng.integers(CALC_COUNT[0], CALC_COUNT[1] + 1)) if calc else 0
    echo_h = _band(rng, ECHO_BANDS, echo)
    level = float(rng.uniform(*INTERIOR_LEVEL))

    # redraw the contour until it neither pinches in nor outgrows the frame
    for _ in range(200):
        shape_terms = _harmonics(rng, *SHAPE_HARMONICS, 2)
        margin_terms = _harmonics(rng, *MARGIN_HARMONICS, 3)
        factor = 1.0 + _radial(s_irr, shape_terms, m_rough, margin_terms, np.linspace(0, 2 * np.pi, 720))
        extent = max(a, b) * factor.max()
        if factor.min() >= MIN_RADIUS_FACTOR and extent + 3.0 / S < 0.5:
            break
    else:
        raise DataError(f"no contour fits a {S}px frame after 200 draws")
    margin_frac = extent + 3.0 / S
    cx = float(rng.uniform(margin_frac, 1 - margin_frac))
    cy = float(rng.uniform(margin_frac, 1 - margin_frac))
    gain = float(rng.uniform(0.9, 1.1))
    offset = float(rng.uniform(-0.05, 0.05))
    spec = NoduleSpec(S, cx, cy, a, b, theta, s_irr, m_rough, sigma, n_calc, echo_h, level, gain, offset,
                      shape_terms, margin_terms)
    return spec, derive_labels(spec, config.malignancy_k)


def _unit_field(rng, shape, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    sd = field_.std()
    return field_ / sd if sd > 0 else field_


def _harmonics(rng, kmin, kmax, count) -> list:
    ks = rng.choice(np.arange(kmin, kmax + 1), size=count, replace=False)
    w = rng.uniform(0.3, 1.0, size=count)
    w /= math.sqrt((w ** 2).sum() / 2)      # unit RMS over the angle
    phases = rng.uniform(0, 2 * np.pi, size=count)
    return [[int(k), float(wk), float(p)] for k, wk, p in zip(ks, w, phases)]


def _radial(s_amp, s_terms, m_amp, m_terms, phi):
    pert = np.zeros_like(phi)
    for amp, terms in ((s_amp, s_terms), (m_amp, m_terms)):
        for k, wk, p in terms:
            pert += amp * wk * np.cos(k * phi + p)
    return pert


def support_mask(spec: NoduleSpec) -> np.ndarray:
    """Binary nodule support: a rotated ellipse with radial perturbations."""
    S = spec.image_size
    coords = (np.arange(S) + 0.5) / S
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - spec.cx, yy - spec.cy
    c, s = math.cos(spec.theta), math.sin(spec.theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    rho = np.sqrt((u / spec.a) ** 2 + (v / spec.b) ** 2)
    phi = np.arctan2(v / spec.b, u / spec.a)
    pert = _radial(spec.shape_irregularity, spec.shape_terms, spec.margin_roughness, spec.margin_terms, phi)
    return (rho <= 1.0 + pert).astype(np.uint8)


def edge_profile(mask: np.ndarray, sigma: float) -> np.ndarray:
    """Interior weight: Gaussian CDF of the signed distance to the support edge.

    Softens the edge across the boundary only, so the contour (lobes, margin
    bumps) stays at the 0.5 level set however blurry the boundary is.
    """
    inside = mask.astype(bool)
    d = np.where(inside, ndimage.distance_transform_edt(inside) - 0.5,
                 0.5 - ndimage.distance_transform_edt(~inside))
    return 0.5 * (1.0 + special.erf(d / (sigma * math.sqrt(2.0))))


def render(spec: NoduleSpec, config: GenConfig, rng: np.random.Generator) -> Sample:
    S = spec.image_size
    scale = S / 64.0
    mask = support_mask(spec)
    if mask.sum() < MIN_SUPPORT_PX:
        raise DataError(f"degenerate nodule support ({int(mask.sum())} px)")

    background = BACKGROUND_MEAN + BACKGROUND_SD * _unit_field(rng, (S, S), config.speckle_sigma * scale)
    blotch = np.clip(_unit_field(rng, (S, S), 1.5 * scale), -3, 3)
    speck = np.clip(_unit_field(rng, (S, S), 0.6 * scale), -3, 3)
    interior = spec.interior_level + spec.echo_heterogeneity * blotch + INTERIOR_SPECKLE_SD * speck
    alpha = edge_profile(mask, spec.boundary_sigma)
    img = background * (1 - alpha) + interior * alpha
    img = np.clip(img * spec.gain + spec.offset, 0.0, 1.0)

    if spec.n_calcifications:
        # keep specks clear of the boundary blur
        inner = ndimage.binary_erosion(mask, iterations=max(2, int(math.ceil(2 * scale))))
        cand = np.argwhere(inner)
        if len(cand) == 0:
            cand = np.argwhere(mask)
        yy, xx = np.mgrid[0:S, 0:S]
        for _ in range(spec.n_calcifications):
            cy, cx = cand[rng.integers(len(cand))]
            r = rng.uniform(1.0, 2.0) * scale
            disc = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & (mask > 0)
            img[disc] = rng.uniform(0.9, 1.0)
    labels = derive_labels(spec, config.malignancy_k)
    return Sample(image=img.astype(np.float32), mask=mask, labels=labels, spec=spec)


def sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def generate_sample(config: GenConfig, index: int) -> Sample:
    """Sample ``index`` of the stream defined by ``config.seed``; reproducible in isolation."""
    rng = np.random.default_rng(sample_seed(config.seed, index))
    spec, _ = sample_spec(config, rng)
    sample = render(spec, config, rng)
    sample.id = f"s{index:06d}"
    return sample


def split_assignment(n: int, seed: int, ratios=(0.6, 0.2, 0.2)) -> list[str]:
    """60/20/20 train/val/test tags over a seeded shuffle of the indices."""
    if n < 10:
        raise ConfigError(f"need at least 10 samples, got {n}")
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B1]))
    perm = order.permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    tags = [""] * n
    for rank, idx in enumerate(perm):
        tags[idx] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return tags


def generate_dataset(config: GenConfig, n: int, out_dir):
    """Render ``n`` samples into ``out_dir`` in the on-disk dataset format."""
    from maanet.data import write_dataset
    tags = split_assignment(n, config.seed)
    samples = (generate_sample(config, i) for i in range(n))
    return write_dataset(out_dir, samples, tags, config)
