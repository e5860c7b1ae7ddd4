"""Losses, the Adam optimizer, and the two-view training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateError, DimensionError, DivergenceError, NumericError
from .graph import HetGraph
from .masking import make_complementary_masks
from .model import ModelConfig, ModelParams, encode_view, init_params
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

VAR_EPS = 1e-8
SUPERVISE_MODES = ("full", "view1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 0.8
    beta: float = 0.9
    seed: int = 0
    d_prime: int = 512
    n_layers: int = 4
    n_heads: int = 4
    Q: int = 5
    K: int = 7
    dtype: str = "float64"
    resample_masks: bool = True
    supervise: str = "full"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.supervise not in SUPERVISE_MODES:
            raise ConfigError(f"supervise must be one of {SUPERVISE_MODES}, got {self.supervise!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def model_config(self, embed_dim, n_genes):
        return ModelConfig(embed_dim, n_genes, self.d_prime, self.n_layers, self.n_heads)


@dataclass
class LossReport:
    l_mse: float
    l_pcc: float
    l_con_t: float
    l_con_r: float
    l_total: float


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


# -- losses -------------------------------------------------------------------------


def _const(y):
    return y.data if isinstance(y, Tensor) else np.asarray(y)


def loss_mse(y, y_hat):
    """Mean over spots of the squared L2 norm of each residual row."""
    y = _const(y)
    if y.shape != y_hat.shape:
        raise DimensionError(f"loss_mse: {y.shape} vs {y_hat.shape}")
    r = T.sub(y_hat, y.astype(y_hat.dtype, copy=False))
    return T.scale(T.sum_all(T.mul(r, r)), 1.0 / y.shape[0])


def loss_pcc(y, y_hat):
    """1 - mean per-gene Pearson r between truth and prediction.

    Genes where either side has variance <= 1e-8 are skipped.
    """
    y = _const(y)
    if y.shape != y_hat.shape:
        raise DimensionError(f"loss_pcc: {y.shape} vs {y_hat.shape}")
    keep = (y.var(axis=0) > VAR_EPS) & (y_hat.data.var(axis=0) > VAR_EPS)
    if not keep.any():
        raise DegenerateError("every gene is constant in truth or prediction")
    cols = np.flatnonzero(keep)
    if cols.size < y.shape[1]:
        select = np.zeros((y.shape[1], cols.size), dtype=y_hat.dtype)
        select[cols, np.arange(cols.size)] = 1.0
        y_hat = T.matmul(y_hat, select)
        y = y[:, cols]
    n = y.shape[0]
    yc = (y - y.mean(axis=0)).astype(y_hat.dtype)
    pc = T.sub(y_hat, T.mean_axis(y_hat, 0, keepdims=True))
    cov = T.scale(T.sum_axis(T.mul(pc, yc), 0), 1.0 / n)
    sd_p = T.sqrt(T.scale(T.sum_axis(T.mul(pc, pc), 0), 1.0 / n))
    sd_y = np.sqrt((yc**2).sum(axis=0) / n)
    r = T.div(cov, T.mul(sd_p, sd_y))
    return T.sub(1.0, T.mean_all(r))


def loss_contrastive(e1, e2):
    """Mean of 2 - 2 cos(e1_j, e2_j); ``e2`` is treated as a constant."""
    e2 = _const(e2)
    cos = T.cosine_rows(e1, Tensor(e2.astype(e1.dtype, copy=False)))
    return T.sub(2.0, T.scale(T.mean_all(cos), 2.0))


# -- optimizer ---------------------------------------------------------------------


def adam_step(params: dict, state: AdamState, cfg: TrainConfig):
    """One Adam update with decoupled weight decay, in place on ``params``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.learning_rate * cfg.weight_decay * p.data
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


# -- training loop -----------------------------------------------------------------


def encode_target_view(graph: HetGraph, params: ModelParams, masks):
    """View 2 encoded without recording; its fused embeddings are the contrastive targets."""
    dtype = params["proj_t.W"].dtype
    z = graph.target_features.astype(dtype, copy=False)
    h = graph.reference_features.astype(dtype, copy=False)
    with T.no_grad():
        return encode_view(graph, z * masks.m2_target.astype(dtype), h * masks.m2_reference.astype(dtype), params)


def step_losses(graph: HetGraph, y, params: ModelParams, masks, supervise="full", view2=None) -> tuple[Tensor, LossReport]:
    """Build both views, encode them, and return the total loss on the tape.

    Must be called inside an active :class:`Tape`; view 2 is encoded with
    recording suspended so no gradient reaches it. The regression losses
    use an extra unmasked pass when ``supervise == "full"`` and view 1's
    prediction when ``supervise == "view1"``. A precomputed ``view2`` may be
    passed to hold the contrastive targets fixed.
    """
    dtype = params["proj_t.W"].dtype
    z = graph.target_features.astype(dtype, copy=False)
    h = graph.reference_features.astype(dtype, copy=False)
    if view2 is None:
        view2 = encode_target_view(graph, params, masks)
    view1 = encode_view(graph, z * masks.m1_target.astype(dtype), h * masks.m1_reference.astype(dtype), params)
    y_hat = encode_view(graph, z, h, params).y_hat if supervise == "full" else view1.y_hat
    parts = [
        loss_mse(y, y_hat),
        loss_pcc(y, y_hat),
        loss_contrastive(view1.Lhat_t, view2.Lhat_t.data),
        loss_contrastive(view1.Lhat_r, view2.Lhat_r.data),
    ]
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    values = [float(p.data) for p in parts]
    return total, LossReport(*values, l_total=float(total.data))


def _as_tasks(graphs, targets):
    if isinstance(graphs, HetGraph):
        return [(graphs, np.asarray(targets))]
    graphs, targets = list(graphs), list(targets)
    if len(graphs) != len(targets):
        raise ConfigError("one target expression matrix per graph required")
    return [(g, np.asarray(y)) for g, y in zip(graphs, targets)]


def train_fold(
    graphs: HetGraph | Sequence[HetGraph],
    targets,
    cfg: TrainConfig,
    params: ModelParams | None = None,
    on_epoch=None,
) -> tuple[ModelParams, list[LossReport]]:
    """Train on one or more (graph, target expression) pairs.

    Each epoch visits every pair once in order, taking one optimizer step
    per pair. Masks are redrawn every epoch from ``cfg.seed + epoch``
    unless ``cfg.resample_masks`` is off. Returns the trained parameters
    and the per-epoch mean loss report.
    """
    tasks = _as_tasks(graphs, targets)
    g0, y0 = tasks[0]
    if params is None:
        mcfg = cfg.model_config(g0.embed_dim, y0.shape[1])
        params = init_params(mcfg, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    for g, y in tasks:
        if y.shape != (g.n_target, params.config.n_genes):
            raise DimensionError(f"target expression {y.shape} does not match graph ({g.n_target} spots)")
    state = AdamState()
    history: list[LossReport] = []
    for epoch in range(cfg.epochs):
        mask_epoch = epoch if cfg.resample_masks else 0
        reports = []
        for k, (g, y) in enumerate(tasks):
            masks = make_complementary_masks(
                g.n_target,
                g.n_reference,
                g.embed_dim,
                g.reference_features.shape[1],
                cfg.alpha,
                cfg.beta,
                seed=[cfg.seed + mask_epoch, k],
            )
            params.zero_grad()
            try:
                with Tape() as tape:
                    total, report = step_losses(g, y, params, masks, cfg.supervise)
                tape.backward(total)
            except NumericError as exc:
                raise DivergenceError(epoch, str(exc)) from exc
            adam_step(params.tensors, state, cfg)
            reports.append(report)
        mean = LossReport(*(float(np.mean([getattr(r, f) for r in reports])) for f in LossReport.__dataclass_fields__))
        history.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
        log.debug("epoch %d total %.6f", epoch, mean.l_total)
    return params, history


def write_history_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "l_mse", "l_pcc", "l_con_t", "l_con_r", "l_total"])
        for i, r in enumerate(history):
            w.writerow([i, repr(r.l_mse), repr(r.l_pcc), repr(r.l_con_t), repr(r.l_con_r), repr(r.l_total)])
