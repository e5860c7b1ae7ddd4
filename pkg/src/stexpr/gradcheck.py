"""Finite-difference check of the full training loss on a tiny random graph."""

from __future__ import annotations

import numpy as np

from .graph import GraphConfig, HetGraph, build_cs_edges, build_rs_edges, build_ts_edges
from .masking import make_complementary_masks
from .errors import DegenerateError
from .model import ModelConfig, init_params
from .tensor import grad_check
from .training import encode_target_view, step_losses

TINY = dict(n_target=4, n_reference=6, embed_dim=3, n_genes=2, d_prime=4)


def tiny_problem(seed, n_target=4, n_reference=6, embed_dim=3, n_genes=2, d_prime=4, n_layers=4, n_heads=4):
    """Random graph, truth, parameters and masks small enough for finite differences."""
    rng = np.random.default_rng(seed)
    z_t = rng.standard_normal((n_target, embed_dim))
    z_r = rng.standard_normal((n_reference, embed_dim))
    y_r = rng.uniform(0.0, 2.0, size=(n_reference, n_genes))
    h_r = np.hstack([z_r, y_r])
    coords = rng.uniform(0.0, 5.0, size=(n_target, 2))
    cfg = GraphConfig(Q=2, K=2)
    graph = HetGraph(
        target_features=z_t,
        reference_features=h_r,
        ts_edges=build_ts_edges(coords, cfg.Q),
        cs_edges=build_cs_edges(z_t, z_r, cfg.K),
        rs_edges=build_rs_edges(h_r, cfg.K),
        reference_slide_of=["ref"] * n_reference,
        target_slide="target",
        n_genes=n_genes,
    )
    y = rng.uniform(0.0, 2.0, size=(n_target, n_genes))
    mcfg = ModelConfig(embed_dim, n_genes, d_prime, n_layers, n_heads)
    masks = make_complementary_masks(n_target, n_reference, embed_dim, embed_dim + n_genes, 0.5, 0.5, seed)
    # narrow ReLU stacks can die at init (constant output, zero embedding
    # rows); redraw until the training loss is defined
    for attempt in range(100):
        params = init_params(mcfg, seed=[seed, attempt])
        try:
            step_losses(graph, y, params, masks)
            break
        except DegenerateError:
            continue
    else:
        raise DegenerateError(f"no usable initialization found for seed {seed}")
    return graph, y, params, masks


def model_grad_error(seed, h=1e-5, supervise="full", per_tensor=2, **sizes) -> float:
    """Max relative error of the tape gradient of the total training loss.

    Every parameter tensor is probed (``per_tensor`` coordinates each, or
    all with None). The stop-gradient view is encoded once and held fixed,
    matching what the analytic gradient treats as constant.
    """
    graph, y, params, masks = tiny_problem(seed, **sizes)
    view2 = encode_target_view(graph, params, masks)
    loss = lambda _: step_losses(graph, y, params, masks, supervise, view2)[0]  # noqa: E731
    return grad_check(loss, params.values(), h, per_tensor=per_tensor, seed=seed)
