"""Expression normalization and shared highly-variable-gene selection."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .bundle import Dataset, Slide
from .errors import ConfigError, DegenerateError, EmptyGenesetError

CPM_SCALE = 1e6


def normalize_expression(counts):
    """log1p of counts-per-million, spot by spot.

    Raises DegenerateError if any spot has zero total count.
    """
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    bad = np.flatnonzero(totals[:, 0] <= 0)
    if bad.size:
        raise DegenerateError(f"{bad.size} spot(s) with zero total count, first at row {bad[0]}")
    return np.log1p(counts / totals * CPM_SCALE)


def drop_empty_spots(slide: Slide) -> tuple[Slide, int]:
    keep = slide.counts.sum(axis=1) > 0
    dropped = int((~keep).sum())
    if not dropped:
        return slide, 0
    ids = [s for s, k in zip(slide.spot_ids, keep) if k]
    return (
        replace(
            slide,
            spot_ids=ids,
            coords=slide.coords[keep],
            counts=slide.counts[keep],
            embeddings=slide.embeddings[keep],
            expression=None if slide.expression is None else slide.expression[keep],
        ),
        dropped,
    )


def top_variable_genes(expression, n_top):
    """Indices of the ``n_top`` highest-variance columns; lower index wins ties."""
    var = np.var(expression, axis=0)
    order = np.lexsort((np.arange(var.size), -var))
    return order[:n_top]


def select_shared_hvgs(dataset: Dataset, n_top: int = 1000) -> list[str]:
    """Intersect per-slide top-variance gene sets and project every slide onto it.

    Each slide must already carry normalized ``expression`` over its own
    ``gene_names``. Slides are updated in place with the projected matrix;
    the shared list is returned in lexicographic order.
    """
    shared = None
    for slide in dataset.slides:
        if slide.expression is None:
            raise ConfigError(f"{slide.slide_id}: normalize before selecting genes")
        genes = slide.expression_genes or slide.gene_names
        if n_top > len(genes):
            raise ConfigError(f"{slide.slide_id}: n_top={n_top} exceeds {len(genes)} genes")
        picked = {genes[i] for i in top_variable_genes(slide.expression, n_top)}
        shared = picked if shared is None else shared & picked
    if not shared:
        raise EmptyGenesetError("no gene is highly variable on every slide")
    ordered = sorted(shared)
    for slide in dataset.slides:
        genes = slide.expression_genes or slide.gene_names
        col = {g: i for i, g in enumerate(genes)}
        slide.expression = slide.expression[:, [col[g] for g in ordered]]
        slide.expression_genes = list(ordered)
    dataset.shared_genes = ordered
    return ordered


def preprocess(dataset: Dataset, n_top: int = 1000) -> tuple[Dataset, dict[str, int]]:
    """Drop zero-total spots, normalize, and restrict to shared HVGs.

    Returns the dataset and the number of spots dropped per slide.
    """
    dropped = {}
    slides = []
    for slide in dataset.slides:
        slide, n = drop_empty_spots(slide)
        dropped[slide.slide_id] = n
        slide.expression = normalize_expression(slide.counts)
        slide.expression_genes = list(slide.gene_names)
        slides.append(slide)
    dataset = Dataset(slides)
    select_shared_hvgs(dataset, n_top)
    return dataset, dropped
