"""Synthetic slides with a planted embedding-to-expression map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bundle import Dataset, Slide
from .errors import ConfigError
from .graph import build_ts_edges
from .metrics import pcc_mean
from .preprocess import CPM_SCALE

LIBRARY_SIZE = 1e4
SMOOTH_NEIGHBORS = 4
FILLER_GENE = "OTHER"


@dataclass(frozen=True)
class SynthConfig:
    n_slides: int = 6
    spots_per_slide: int = 200
    d: int = 32
    M: int = 20
    noise_sigma: float = 0.1
    smoothing: float = 0.3
    seed: int = 7

    def __post_init__(self):
        if min(self.n_slides, self.spots_per_slide, self.d, self.M) < 1:
            raise ConfigError("synthetic dataset sizes must be at least 1")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ConfigError("smoothing weight must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


def softplus(x):
    return np.logaddexp(0.0, x)


def jittered_grid(n, rng, jitter=0.25):
    side = math.ceil(math.sqrt(n))
    ij = np.array([(i, j) for i in range(side) for j in range(side)][:n], dtype=np.float64)
    return ij + rng.uniform(-jitter, jitter, size=ij.shape)


def neighbor_average(values, coords, k=SMOOTH_NEIGHBORS):
    k = min(k, len(coords) - 1)
    if k < 1:
        return values.copy()
    edges = build_ts_edges(coords, k)
    return values[edges[:, 1]].reshape(len(coords), k, -1).mean(axis=1)


def counts_from_expression(y):
    """Raw counts whose log-CPM reproduces ``y``, plus one filler column.

    The filler absorbs the rest of each spot's million so the normalized
    planted genes come back unchanged; every spot totals LIBRARY_SIZE.
    """
    cpm = np.expm1(y)
    filler = CPM_SCALE - cpm.sum(axis=1, keepdims=True)
    if np.any(filler <= 0):
        raise ConfigError("planted expression too large to encode as counts")
    return np.hstack([cpm, filler]) * (LIBRARY_SIZE / CPM_SCALE)


def generate(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset; see the module docstring.

    Per slide: jittered-grid coordinates, standard-normal embeddings
    (rounded to float32 so bundles round-trip exactly), expression
    ``softplus(z W)`` blended with its 4-neighbor spatial average,
    Gaussian noise, clipped at zero.
    """
    rng = np.random.default_rng(cfg.seed)
    W = rng.normal(0.0, 1.0 / math.sqrt(cfg.d), size=(cfg.d, cfg.M))
    genes = [f"G{g:03d}" for g in range(cfg.M)]
    slides = []
    for s in range(cfg.n_slides):
        n = cfg.spots_per_slide
        coords = jittered_grid(n, rng)
        z = rng.standard_normal((n, cfg.d)).astype(np.float32).astype(np.float64)
        y0 = softplus(z @ W)
        y = (1.0 - cfg.smoothing) * y0 + cfg.smoothing * neighbor_average(y0, coords) if n > 1 else y0
        if cfg.noise_sigma > 0:
            y = y + rng.normal(0.0, cfg.noise_sigma, size=y.shape)
        y = np.maximum(y, 0.0)
        slides.append(
            Slide(
                slide_id=f"slide{s}",
                spot_ids=[f"spot{i:04d}" for i in range(n)],
                coords=coords,
                counts=counts_from_expression(y),
                embeddings=z,
                gene_names=genes + [FILLER_GENE],
                expression=y,
                expression_genes=list(genes),
            )
        )
    return Dataset(slides, list(genes))


def ridge_fit(Z, Y, lam=1e-2):
    """Closed-form ridge with an unpenalized intercept; returns (W, b)."""
    Z, Y = np.asarray(Z, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    zm, ym = Z.mean(axis=0), Y.mean(axis=0)
    Zc = Z - zm
    W = np.linalg.solve(Zc.T @ Zc + lam * np.eye(Z.shape[1]), Zc.T @ (Y - ym))
    return W, ym - zm @ W


def ridge_baseline(Z_train, Y_train, Z_test, Y_test=None, lam=1e-2):
    """Ridge predictions for ``Z_test`` and, given truth, the mean per-gene PCC.

    Returns ``(predictions, mean_pcc, n_skipped)``; the last two are None
    when ``Y_test`` is omitted.
    """
    W, b = ridge_fit(Z_train, Y_train, lam)
    pred = np.asarray(Z_test, dtype=np.float64) @ W + b
    if Y_test is None:
        return pred, None, None
    mean, skipped = pcc_mean(Y_test, pred)
    return pred, mean, skipped
