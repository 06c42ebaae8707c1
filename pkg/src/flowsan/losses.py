"""The three semi-adversarial loss terms and their weighted combination.

All functions accept Tensors (for training graphs) or plain arrays/scalars
and return a Tensor; probabilities are clamped to [CLAMP_EPS, 1-CLAMP_EPS]
before any log.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, ShapeError
from .nn import Tensor, clip, log, mean, sum_

CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 1.0
    match: float = 1.0
    gender: float = 1.0

    def validate(self) -> None:
        values = (self.pixel, self.match, self.gender)
        if not all(np.isfinite(v) and v >= 0 for v in values):
            raise ConfigurationError(f"loss weights must be finite and non-negative: {values}")
        if all(v == 0 for v in values):
            raise ConfigurationError("at least one loss weight must be positive")


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def binary_cross_entropy(target, prob) -> Tensor:
    """Elementwise H(p, q) = -(p log q + (1-p) log(1-q)), q clamped."""
    p = _tensor(target)
    q = clip(_tensor(prob), CLAMP_EPS, 1.0 - CLAMP_EPS)
    return -(p * log(q) + (1.0 - p) * log(1.0 - q))


def loss_pixelwise(i_orig, i_out) -> Tensor:
    """Mean per-pixel cross-entropy between a reference image (as soft target)
    and the reconstruction from the same-gender prototype."""
    a, b = _tensor(i_orig), _tensor(i_out)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return mean(binary_cross_entropy(a, b))


def loss_matching(r_orig, r_out) -> Tensor:
    """Squared L2 distance between representation vectors; batch inputs
    ([N, d]) are averaged over the batch."""
    a, b = _tensor(r_orig), _tensor(r_out)
    if a.shape != b.shape:
        raise ShapeError(f"representation shapes differ: {a.shape} vs {b.shape}")
    sq = (a - b) ** 2.0
    if a.ndim <= 1:
        return sum_(sq)
    return mean(sum_(sq, axis=1))


def loss_gender(y, g_sm, g_op) -> Tensor:
    """Semi-adversarial gender term: the same-prototype output keeps the true
    label, the opposite-prototype output targets the flipped label. Batched
    inputs are averaged."""
    y = _tensor(y)
    return mean(binary_cross_entropy(y, g_sm)) + mean(binary_cross_entropy(1.0 - y, g_op))


def loss_total(weights: LossWeights, j_pixel, j_match, j_gender) -> Tensor:
    weights.validate()
    return (weights.pixel * _tensor(j_pixel)
            + weights.match * _tensor(j_match)
            + weights.gender * _tensor(j_gender))
