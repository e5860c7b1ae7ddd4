"""Feature-wise complementary masks for the two training views."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class MaskPair:
    m1_target: np.ndarray
    m2_target: np.ndarray
    m1_reference: np.ndarray
    m2_reference: np.ndarray
    alpha: float
    beta: float
    seed: object


def _n_masked(ratio, width):
    # guard against 0.29 * 100 == 28.999999999999996
    return min(width, int(math.floor(ratio * width + 1e-9)))


def _row_masks(rng, rows, width, ratio):
    k = _n_masked(ratio, width)
    keep = np.ones((rows, width), dtype=np.float64)
    if k and rows:
        picked = np.argsort(rng.random((rows, width)), axis=1)[:, :k]
        np.put_along_axis(keep, picked, 0.0, axis=1)
    return keep


def make_complementary_masks(n, m, d, dM, alpha, beta, seed) -> MaskPair:
    """Per node, zero a random ``floor(ratio * width)`` features in view 1.

    View 2 is the exact complement of view 1, so every feature is visible
    in exactly one view. Target rows use ``alpha`` over width ``d``;
    reference rows use ``beta`` over width ``dM``.
    """
    for name, r in (("alpha", alpha), ("beta", beta)):
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"{name}={r} outside [0, 1]")
    rng = np.random.default_rng(seed)
    m1_t = _row_masks(rng, n, d, alpha)
    m1_r = _row_masks(rng, m, dM, beta)
    return MaskPair(m1_t, 1.0 - m1_t, m1_r, 1.0 - m1_r, alpha, beta, seed)


def apply_masks(features, mask):
    features = np.asarray(features)
    if features.shape != np.shape(mask):
        raise DimensionError(f"mask shape {np.shape(mask)} does not match features {features.shape}")
    return features * mask
