"""Reconstruction and classification losses.

Each loss returns ``(value, gradient)`` where the gradient is taken with
respect to its second (prediction) argument. Batched inputs carry a leading
batch axis; losses sum within a sample and average over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class WeightMatrixSpec:
    """Center-window weighting: the central ``c x c`` pixels of a ``d x d``
    image count ``w`` times, everything else once."""

    d: int
    c: int
    w: float = 5.0

    def __post_init__(self):
        if not 0 < self.c <= self.d:
            raise ConfigError(f"need 0 < c <= d, got c={self.c}, d={self.d}")
        if self.w < 1:
            raise ConfigError(f"center weight w must be >= 1, got {self.w}")
        if (self.d - self.c) % 2:
            raise ConfigError(
                f"d - c must be even so the c x c window is centered exactly (d={self.d}, c={self.c})"
            )

    @property
    def window(self) -> slice:
        start = (self.d - self.c) // 2
        return slice(start, start + self.c)


def weight_matrix(spec: WeightMatrixSpec, dtype=np.float64) -> np.ndarray:
    W = np.ones((spec.d, spec.d), dtype=dtype)
    W[spec.window, spec.window] = spec.w
    return W


def wmse(x, r, spec: WeightMatrixSpec):
    """Weighted squared reconstruction error of ``r`` against ``x``.

    ``x`` and ``r`` are ``[C, d, d]`` or ``[N, C, d, d]``; the same 2-D weight
    matrix applies to every channel. Returns the per-image weighted sum
    averaged over the batch, and its gradient with respect to ``r``.
    """
    x, r = np.asarray(x), np.asarray(r)
    if x.shape != r.shape:
        raise ConfigError(f"wmse shape mismatch: x {x.shape} vs r {r.shape}")
    if x.shape[-2:] != (spec.d, spec.d):
        raise ConfigError(f"wmse expects trailing {spec.d}x{spec.d} images, got {x.shape}")
    n = x.shape[0] if x.ndim == 4 else 1
    W = weight_matrix(spec, dtype=r.dtype)
    diff = r - x
    loss = float(np.sum(W * diff * diff)) / n
    grad = (2.0 / n) * W * diff
    return loss, grad


def _check_binary(targets):
    t = np.asarray(targets)
    if not np.all((t == 0) | (t == 1)):
        raise DataError("multi-label targets must be 0 or 1")
    return t


def bce_multilabel(probs, targets):
    """Binary cross-entropy summed over labels, averaged over the batch."""
    p = np.asarray(probs)
    y = _check_binary(targets).astype(p.dtype)
    if p.shape != y.shape:
        raise ConfigError(f"bce shape mismatch: probs {p.shape} vs targets {y.shape}")
    n = p.shape[0] if p.ndim == 2 else 1
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -float(np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))) / n
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    grad = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0).astype(p.dtype) / n
    return loss, grad


def ce_singlelabel(probs, target):
    """Negative log-likelihood of the target class under a probability simplex."""
    p = np.asarray(probs)
    single = p.ndim == 1
    pb = p[None] if single else p
    t = np.atleast_1d(np.asarray(target))
    if t.dtype.kind not in "iu":
        raise DataError(f"class targets must be integers, got dtype {t.dtype}")
    if t.shape[0] != pb.shape[0]:
        raise ConfigError(f"{t.shape[0]} targets for {pb.shape[0]} probability rows")
    s = pb.shape[1]
    if np.any((t < 0) | (t >= s)):
        raise DataError(f"class index out of range [0, {s})")
    n = pb.shape[0]
    rows = np.arange(n)
    pt = pb[rows, t]
    pc = np.clip(pt, PROB_EPS, 1.0 - PROB_EPS)
    loss = -float(np.sum(np.log(pc))) / n
    grad = np.zeros_like(pb)
    inside = (pt > PROB_EPS) & (pt < 1.0 - PROB_EPS)
    grad[rows, t] = np.where(inside, -1.0 / pc, 0.0) / n
    return loss, (grad[0] if single else grad)


@dataclass
class MultiTaskLoss:
    l_ml: float
    l_sl: float
    m: float
    total: float
    grad_ml: Optional[np.ndarray] = None
    grad_sl: Optional[np.ndarray] = None


def combined_loss(l_ml, l_sl, m=0.6, grad_ml=None, grad_sl=None) -> MultiTaskLoss:
    """Mix the attribute (multi-label) and shape (single-label) losses:
    ``m * l_ml + (1 - m) * l_sl``. Branch gradients, when given, are scaled
    by the same weights."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"mixing weight m must be in [0, 1], got {m}")
    total = m * l_ml + (1.0 - m) * l_sl
    return MultiTaskLoss(
        l_ml=l_ml,
        l_sl=l_sl,
        m=m,
        total=total,
        grad_ml=None if grad_ml is None else m * grad_ml,
        grad_sl=None if grad_sl is None else (1.0 - m) * grad_sl,
    )
