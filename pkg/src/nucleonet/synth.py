"""Procedural nucleus images with exact labels, plus a hand-crafted feature
extractor that stands in for a pretrained network's activations.

Each image is a pure function of ``(seed, index)``: a textured eosin-pink
background and, unless the image is a "no nucleus" case, a centered
hematoxylin-purple nucleus whose minor/major axis ratio encodes the shape
class. Attributes add visual modifiers (halo ring, dark fill, nucleoli dots,
crease, extra nuclei, condensed band, apoptotic bodies, enlarged cytoplasm).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import (
    ATTRIBUTES,
    NO_NUCLEUS_ATTR,
    NO_NUCLEUS_SHAPE,
    SHAPES,
    REFERENCE_POSITIVES,
    REFERENCE_TOTAL,
    LabelVector,
    load_manifest,
    write_manifest,
    write_ppm,
)
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

# Axis-ratio ranges per shape class. Class boundaries are 0.9 / 0.75 / 0.55 / 0.4;
# sampling stays a little inside them so the rendered ratio stays on the right side.
RATIO_RANGES = {
    "round": (0.92, 1.0),
    "close_round": (0.78, 0.87),
    "oval": (0.58, 0.72),
    "elongated": (0.25, 0.37),
    "irregular": (0.6, 0.95),
}
RATIO_BOUNDS = (("round", 0.9), ("close_round", 0.75), ("oval", 0.55), ("elongated", 0.0))

_n = REFERENCE_TOTAL - REFERENCE_POSITIVES[NO_NUCLEUS_ATTR]
# shape mix in SHAPES order (the five shapes and no-nucleus are mutually exclusive)
REFERENCE_SHAPE_MIX = tuple(c / REFERENCE_TOTAL for c in REFERENCE_POSITIVES[10:] + (REFERENCE_POSITIVES[NO_NUCLEUS_ATTR],))
# attribute rates among images that do contain a nucleus
REFERENCE_ATTR_RATES = tuple(c / _n for c in REFERENCE_POSITIVES[:NO_NUCLEUS_ATTR])

BACKGROUND = np.array([0.93, 0.74, 0.82])
NUCLEUS = np.array([0.45, 0.30, 0.60])
DARK_NUCLEUS = np.array([0.18, 0.07, 0.28])
HALO = np.array([0.99, 0.98, 0.99])
CYTOPLASM = np.array([0.95, 0.45, 0.62])
NUCLEOLUS = np.array([0.92, 0.12, 0.28])
CONDENSED = np.array([0.03, 0.01, 0.06])
GROOVE = np.array([0.85, 0.78, 0.90])


@dataclass
class SynthParams:
    seed: int = 0
    count: int = 2078
    side: int = 50
    shape_mix: tuple = REFERENCE_SHAPE_MIX
    attribute_rates: tuple = REFERENCE_ATTR_RATES
    noise: float = 0.02

    def __post_init__(self):
        self.shape_mix = tuple(float(v) for v in self.shape_mix)
        self.attribute_rates = tuple(float(v) for v in self.attribute_rates)
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.side < 32:
            raise ConfigError("side must be >= 32 so the 32x32 network crop fits")
        if len(self.shape_mix) != len(SHAPES) or min(self.shape_mix) < 0:
            raise ConfigError(f"shape_mix needs {len(SHAPES)} non-negative proportions")
        if abs(sum(self.shape_mix) - 1.0) > 1e-9:
            raise ConfigError(f"shape_mix must sum to 1, got {sum(self.shape_mix)}")
        if len(self.attribute_rates) != NO_NUCLEUS_ATTR or not all(0 <= r <= 1 for r in self.attribute_rates):
            raise ConfigError(f"attribute_rates needs {NO_NUCLEUS_ATTR} rates in [0, 1]")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


def apportion(total: int, proportions) -> np.ndarray:
    """Largest-remainder rounding of ``total * proportions`` to integers summing to ``total``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def assign_labels(params: SynthParams) -> list[LabelVector]:
    """Exact class counts, randomly placed; a pure function of the seed."""
    rng = np.random.default_rng([params.seed, 0xC1A55])
    counts = apportion(params.count, params.shape_mix)
    shapes = np.repeat(np.arange(len(SHAPES)), counts)
    rng.shuffle(shapes)
    attrs = np.zeros((params.count, len(ATTRIBUTES)), dtype=np.int8)
    attrs[:, NO_NUCLEUS_ATTR] = shapes == NO_NUCLEUS_SHAPE
    with_nucleus = np.flatnonzero(shapes != NO_NUCLEUS_SHAPE)
    for a, rate in enumerate(params.attribute_rates):
        k = int(round(rate * len(with_nucleus)))
        attrs[rng.choice(with_nucleus, size=k, replace=False), a] = 1
    return [LabelVector(tuple(attrs[i]), int(shapes[i])) for i in range(params.count)]


def shape_from_ratio(ratio: float) -> str:
    for name, lo in RATIO_BOUNDS:
        if ratio >= lo:
            return name
    return "elongated"


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _grid(side, ss):
    c = (np.arange(side * ss) + 0.5) / ss
    return np.meshgrid(c, c, indexing="ij")


def soft_ellipse(side, cy, cx, a, b, theta, lobes=None, ss=4):
    """Anti-aliased coverage mask of a rotated ellipse (optionally with a
    sinusoidally perturbed boundary ``lobes = [(amp, freq, phase), ...]``)."""
    yy, xx = _grid(side, ss)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    limit = 1.0
    if lobes:
        phi = np.arctan2(v / b, u / a)
        limit = 1.0 + sum(amp * np.sin(freq * phi + ph) for amp, freq, ph in lobes)
    inside = (rho <= limit).astype(np.float64)
    return inside.reshape(side, ss, side, ss).mean(axis=(1, 3))


def soft_band(side, cy, cx, theta, half_len, half_width, ss=4):
    """Anti-aliased rotated rectangle centered at (cy, cx), long axis along theta."""
    yy, xx = _grid(side, ss)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    inside = ((np.abs(u) <= half_len) & (np.abs(v) <= half_width)).astype(np.float64)
    return inside.reshape(side, ss, side, ss).mean(axis=(1, 3))


def _paint(img, mask, color, alpha=1.0):
    m = (alpha * mask)[..., None]
    img *= 1.0 - m
    img += m * color


def measure_axis_ratio(mask: np.ndarray) -> float:
    """Minor/major axis ratio from the second moments of a (soft) mask."""
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    m = mask.sum()
    cy, cx = (mask * yy).sum() / m, (mask * xx).sum() / m
    cov = np.array(
        [
            [(mask * (yy - cy) ** 2).sum(), (mask * (yy - cy) * (xx - cx)).sum()],
            [(mask * (yy - cy) * (xx - cx)).sum(), (mask * (xx - cx) ** 2).sum()],
        ]
    ) / m
    lo, hi = np.linalg.eigvalsh(cov)
    return float(np.sqrt(max(lo, 0.0) / hi))


def render(labels: LabelVector, rng: np.random.Generator, side=50, noise=0.02):
    """Draw one image. Returns ``(uint8 HxWx3, primary-nucleus mask, axis ratio)``;
    the mask is all zero and the ratio NaN for no-nucleus images."""
    att = dict(zip(ATTRIBUTES, labels.attributes))
    shape = SHAPES[labels.shape]

    texture = gaussian_filter(rng.standard_normal((side, side, 3)), sigma=(3.0, 3.0, 0)) * 0.25
    img = np.clip(BACKGROUND + texture * 0.3, 0, 1)
    # faint fibrous streaks so the background is not trivially flat
    for _ in range(rng.integers(2, 5)):
        band = soft_band(side, *rng.uniform(0, side, 2), rng.uniform(0, np.pi), rng.uniform(8, 20), 0.7, ss=2)
        _paint(img, band, BACKGROUND * 0.9, alpha=0.5)

    mask = np.zeros((side, side))
    ratio = float("nan")
    if shape != "no_nucleus":
        c0 = side / 2.0
        cy, cx = c0 + rng.uniform(-1, 1, size=2)
        theta = rng.uniform(0, np.pi)
        lo, hi = RATIO_RANGES[shape]
        ratio = rng.uniform(lo, hi)
        a = rng.uniform(8.5, 10.5) if shape == "elongated" else rng.uniform(6.5, 8.5)
        b = a * ratio
        lobes = None
        if shape == "irregular":
            lobes = [
                (rng.uniform(0.16, 0.24), int(rng.integers(3, 6)), rng.uniform(0, 2 * np.pi)),
                (rng.uniform(0.05, 0.1), int(rng.integers(6, 9)), rng.uniform(0, 2 * np.pi)),
            ]
        r_eff = np.sqrt(a * b)

        if att["gemistocyte"]:
            gy, gx = cy + rng.uniform(-2, 2), cx + rng.uniform(-2, 2)
            rc = min(r_eff * 1.9, 14.0)
            _paint(img, soft_ellipse(side, gy, gx, rc, rc * rng.uniform(0.8, 1.0), rng.uniform(0, np.pi)), CYTOPLASM)
        if att["halo"]:
            outer = soft_ellipse(side, cy, cx, a * 1.45 + 1.5, b * 1.45 + 1.5, theta, lobes)
            _paint(img, outer, HALO)
        if att["overlapping"]:
            ang = rng.uniform(0, 2 * np.pi)
            a2 = rng.uniform(5.5, 7.5)
            d = (r_eff + a2) * 0.7
            oy, ox = cy + d * np.sin(ang), cx + d * np.cos(ang)
            other = soft_ellipse(side, oy, ox, a2, a2 * rng.uniform(0.7, 1.0), rng.uniform(0, np.pi))
            _paint(img, other, NUCLEUS * 0.8)
        if att["multinucleation"]:
            ang = rng.uniform(0, 2 * np.pi)
            for k in range(2):
                r2 = rng.uniform(2.8, 3.8)
                d = r_eff + r2 + 1.5
                phi = ang + k * rng.uniform(2.0, 3.0)
                _paint(img, soft_ellipse(side, cy + d * np.sin(phi), cx + d * np.cos(phi), r2, r2, 0.0), NUCLEUS)

        mask = soft_ellipse(side, cy, cx, a, b, theta, lobes)
        base = DARK_NUCLEUS if att["hyperchromasia"] else NUCLEUS
        chromatin = 1.0 + 0.12 * gaussian_filter(rng.standard_normal((side, side)), 1.0)[..., None]
        fill = np.clip(base * chromatin, 0, 1)
        m = mask[..., None]
        img = img * (1 - m) + fill * m

        if att["overlapping"]:
            # overlap region reads darker where the two nuclei stack
            _paint(img, mask * other, CONDENSED, alpha=0.5)
        if att["grooved"]:
            crease = soft_band(side, cy, cx, theta, a * 0.85, 0.7) * mask
            _paint(img, crease, GROOVE)
        if att["nucleoli"]:
            for _ in range(int(rng.integers(1, 3))):
                rr = rng.uniform(0, 0.45) * b
                ph = rng.uniform(0, 2 * np.pi)
                dot = soft_ellipse(side, cy + rr * np.sin(ph), cx + rr * np.cos(ph), 1.7, 1.7, 0.0)
                _paint(img, dot * mask, NUCLEOLUS)
        if att["mitosis"]:
            plate = soft_band(side, cy, cx, theta + np.pi / 2, b * 0.9, 1.6) * mask
            _paint(img, plate, CONDENSED)
            speck = (rng.random((side, side)) < 0.25) * mask
            _paint(img, speck, CONDENSED, alpha=0.7)
        if att["apoptosis"]:
            for _ in range(int(rng.integers(4, 7))):
                phi = rng.uniform(0, 2 * np.pi)
                d = r_eff + rng.uniform(2.0, 4.5)
                rb = rng.uniform(1.0, 1.7)
                _paint(img, soft_ellipse(side, cy + d * np.sin(phi), cx + d * np.cos(phi), rb, rb, 0.0), CONDENSED)

    img = img + rng.normal(0.0, noise, img.shape)
    rgb = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return rgb, mask, ratio


def render_index(params: SynthParams, index: int, labels: LabelVector):
    rng = np.random.default_rng([params.seed, index])
    return render(labels, rng, side=params.side, noise=params.noise)


def gen_synthetic(params: SynthParams, out_dir):
    """Write ``images/NNNNN.ppm`` and ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from None
    labels = assign_labels(params)
    width = max(5, len(str(params.count - 1)))
    paths = []
    for i, lv in enumerate(labels):
        rel = f"images/{i:0{width}d}.ppm"
        rgb, _, _ = render_index(params, i, lv)
        write_ppm(out_dir / rel, rgb)
        paths.append(rel)
    write_manifest(out_dir / "manifest.csv", paths, labels)
    log.info("wrote %d synthetic images to %s", params.count, out_dir)
    return load_manifest(out_dir / "manifest.csv")


# ---------------------------------------------------------------------------
# Stand-in injected features
# ---------------------------------------------------------------------------

HIST_BINS = 16
RADIAL_BINS = 16


def standin_features(image: np.ndarray) -> np.ndarray:
    """Raw descriptor of one [3, H, W] image in [0, 1]: per-channel intensity
    histograms, 3x3 block mean/variance grid, radial grey-level profile."""
    c, h, w = image.shape
    hists = [
        np.histogram(np.clip(image[ch], 0, 1), bins=HIST_BINS, range=(0.0, 1.0))[0] / (h * w)
        for ch in range(c)
    ]
    blocks = []
    for rows in np.array_split(np.arange(h), 3):
        for cols in np.array_split(np.arange(w), 3):
            patch = image[:, rows][:, :, cols]
            blocks.append(patch.mean(axis=(1, 2)))
            blocks.append(patch.var(axis=(1, 2)))
    grey = image.mean(axis=0)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    r = np.hypot(yy - h / 2, xx - w / 2)
    ring = np.minimum((r / r.max() * RADIAL_BINS).astype(int), RADIAL_BINS - 1)
    sums = np.bincount(ring.ravel(), weights=grey.ravel(), minlength=RADIAL_BINS)
    counts = np.bincount(ring.ravel(), minlength=RADIAL_BINS)
    radial = sums / np.maximum(counts, 1)
    return np.concatenate([np.concatenate(hists), np.concatenate(blocks), radial])


def extract_standin_features(images, dim: int) -> np.ndarray:
    """Feature matrix (N, dim): descriptors zero-padded or truncated to ``dim``."""
    if dim < 1:
        raise ConfigError("feature dim must be >= 1")
    out = np.zeros((len(images), dim), dtype=np.float32)
    for i, img in enumerate(images):
        f = standin_features(np.asarray(img, dtype=np.float64))
        k = min(dim, f.size)
        out[i, :k] = f[:k]
    return out
