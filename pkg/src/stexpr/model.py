"""The graph network: GraphSAGE stacks, cross-node dual attention (CNDA),
cross-node attention pooling (CNAP), and the residual MLP head.

Attention in CNDA and CNAP is restricted to CS edges: a target spot only
attends over its own retrieved reference spots, and a reference spot only
over the target spots that retrieved it.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, StructuralError
from .graph import HetGraph
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SPAHGCP1"


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int
    n_genes: int
    d_prime: int = 512
    n_layers: int = 4
    n_heads: int = 4

    def __post_init__(self):
        if self.d_prime % self.n_heads:
            raise ConfigError(f"d_prime={self.d_prime} is not divisible by n_heads={self.n_heads}")
        if min(self.embed_dim, self.n_genes, self.d_prime, self.n_layers, self.n_heads) < 1:
            raise ConfigError("model dimensions must be positive")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    seed: int = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def values(self):
        return list(self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self):
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
            self.seed,
        )


@dataclass
class ForwardState:
    L_t: Tensor
    L_r: Tensor
    Lbar_t: Tensor | None
    Lbar_r: Tensor | None
    Lhat_t: Tensor
    Lhat_r: Tensor
    Hhat_t: Tensor
    y_hat: Tensor
    attention: dict = field(default_factory=dict)


def param_shapes(cfg: ModelConfig):
    """Ordered (name, shape, fan_in) for every learnable tensor."""
    dp, d, M = cfg.d_prime, cfg.embed_dim, cfg.n_genes
    dh = dp // cfg.n_heads
    out = [
        ("proj_t.W", (d, dp), d),
        ("proj_t.b", (dp,), d),
        ("proj_r.W", (d + M, dp), d + M),
        ("proj_r.b", (dp,), d + M),
    ]
    for side in ("t", "r"):
        for layer in range(cfg.n_layers):
            p = f"sage_{side}.{layer}."
            out += [(p + "W_self", (dp, dp), dp), (p + "W_neigh", (dp, dp), dp), (p + "bias", (dp,), dp)]
    for layer in range(cfg.n_layers):
        for name in ("Wq_t", "Wk_r", "Wv_r", "Wq_r", "Wk_t", "Wv_t"):
            out.append((f"cnda.{layer}.{name}", (dp, dp), dp))
    for head in range(cfg.n_heads):
        for name in ("Wq", "Wk", "Wv"):
            out.append((f"cnap.{head}.{name}", (dp, dh), dp))
    out += [
        ("cnap.Wo", (dp, dp), dp),
        ("head.W1", (dp, dp), dp),
        ("head.b1", (dp,), dp),
        ("head.W2", (dp, M), dp),
        ("head.b2", (M,), dp),
    ]
    return out


def init_params(cfg: ModelConfig, seed=0, dtype=np.float64) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor, biases included."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in param_shapes(cfg):
        bound = 1.0 / math.sqrt(fan_in)
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)
    return ModelParams(cfg, tensors, seed)


def linear(x, W, b=None):
    y = T.matmul(x, W)
    return y if b is None else T.add(y, b)


def graphsage_layer(h, edges, W_self, W_neigh, bias):
    """ReLU(h W_self + mean_{(i,j)} h_j W_neigh + b); no out-edges -> zero mean."""
    neigh = T.neighbor_mean(h, edges, h.shape[0])
    return T.relu(T.add(T.add(T.matmul(h, W_self), T.matmul(neigh, W_neigh)), bias))


def edge_attention(q, k, v, query_idx, key_idx, n_query, temperature):
    """Softmax attention of each query over the keys it shares an edge with.

    Returns the attended values (``n_query`` rows, zeros for queries with
    no edge) and the per-edge weights.
    """
    scores = T.scale(T.edge_dot(q, k, query_idx, key_idx), 1.0 / temperature)
    w = T.segment_softmax(scores, query_idx, n_query)
    return T.edge_weighted_sum(w, v, query_idx, key_idx, n_query), w


def _require_cs_coverage(cs_edges, n_target):
    covered = np.bincount(cs_edges[:, 0], minlength=n_target) if len(cs_edges) else np.zeros(n_target)
    if np.any(covered == 0):
        raise StructuralError(f"target spot {int(np.flatnonzero(covered == 0)[0])} has no CS edge")


def cnda_forward(x_t, x_r, cs_edges, params: ModelParams, layer: int):
    """Bidirectional attention along CS edges; returns (Lbar_t, Lbar_r)."""
    cs_edges = np.asarray(cs_edges, dtype=np.int64).reshape(-1, 2)
    n, m = x_t.shape[0], x_r.shape[0]
    _require_cs_coverage(cs_edges, n)
    p = lambda name: params[f"cnda.{layer}.{name}"]  # noqa: E731
    temp = math.sqrt(params.config.d_prime)
    ti, rj = cs_edges[:, 0], cs_edges[:, 1]
    lbar_t, w_t = edge_attention(
        T.matmul(x_t, p("Wq_t")), T.matmul(x_r, p("Wk_r")), T.matmul(x_r, p("Wv_r")), ti, rj, n, temp
    )
    lbar_r, w_r = edge_attention(
        T.matmul(x_r, p("Wq_r")), T.matmul(x_t, p("Wk_t")), T.matmul(x_t, p("Wv_t")), rj, ti, m, temp
    )
    return lbar_t, lbar_r, (w_t, w_r)


def fuse(L, Lbar):
    """Node-wise mean of the local and cross-attended embeddings."""
    return T.scale(T.add(L, Lbar), 0.5)


def cnap_forward(lhat_t, lhat_r, cs_edges, params: ModelParams):
    """Multi-head attention pooling of reference spots into target spots."""
    cfg = params.config
    cs_edges = np.asarray(cs_edges, dtype=np.int64).reshape(-1, 2)
    n = lhat_t.shape[0]
    _require_cs_coverage(cs_edges, n)
    temp = math.sqrt(cfg.d_prime / cfg.n_heads)
    heads, weights = [], []
    for i in range(cfg.n_heads):
        out, w = edge_attention(
            T.matmul(lhat_t, params[f"cnap.{i}.Wq"]),
            T.matmul(lhat_r, params[f"cnap.{i}.Wk"]),
            T.matmul(lhat_r, params[f"cnap.{i}.Wv"]),
            cs_edges[:, 0],
            cs_edges[:, 1],
            n,
            temp,
        )
        heads.append(out)
        weights.append(w)
    return T.matmul(T.concat_cols(heads), params["cnap.Wo"]), weights


def predict_head(lhat_t, hhat_t, params: ModelParams):
    x = T.add(lhat_t, hhat_t)
    hidden = T.relu(linear(x, params["head.W1"], params["head.b1"]))
    return linear(hidden, params["head.W2"], params["head.b2"])


def encode_view(graph: HetGraph, z_t, h_r, params: ModelParams) -> ForwardState:
    """Run the full network on one (possibly masked) view of the graph.

    With an empty CS edge set the cross-node modules are skipped entirely:
    fusion passes local embeddings through and the pooled term is zero.
    """
    cfg = params.config
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    h_r = h_r if isinstance(h_r, Tensor) else Tensor(h_r)
    if z_t.shape != (graph.n_target, cfg.embed_dim) or h_r.shape != (graph.n_reference, cfg.embed_dim + cfg.n_genes):
        raise ConfigError("feature shapes do not match the graph and model configuration")
    cross = len(graph.cs_edges) > 0
    x_t = linear(z_t, params["proj_t.W"], params["proj_t.b"])
    x_r = linear(h_r, params["proj_r.W"], params["proj_r.b"])
    lbar_t = lbar_r = None
    attn = {}
    for layer in range(cfg.n_layers):
        st, sr = f"sage_t.{layer}.", f"sage_r.{layer}."
        L_t = graphsage_layer(x_t, graph.ts_edges, params[st + "W_self"], params[st + "W_neigh"], params[st + "bias"])
        L_r = graphsage_layer(x_r, graph.rs_edges, params[sr + "W_self"], params[sr + "W_neigh"], params[sr + "bias"])
        if cross:
            lbar_t, lbar_r, attn[f"cnda.{layer}"] = cnda_forward(x_t, x_r, graph.cs_edges, params, layer)
            x_t, x_r = fuse(L_t, lbar_t), fuse(L_r, lbar_r)
        else:
            x_t, x_r = L_t, L_r
    if cross:
        hhat, attn["cnap"] = cnap_forward(x_t, x_r, graph.cs_edges, params)
    else:
        hhat = Tensor(np.zeros_like(x_t.data))
    y_hat = predict_head(x_t, hhat, params)
    return ForwardState(L_t, L_r, lbar_t, lbar_r, x_t, x_r, hhat, y_hat, attn)


def predict(params: ModelParams, graph: HetGraph) -> np.ndarray:
    """Single unmasked forward pass, no gradient recording."""
    dtype = params["proj_t.W"].dtype
    state = encode_view(
        graph,
        graph.target_features.astype(dtype, copy=False),
        graph.reference_features.astype(dtype, copy=False),
        params,
    )
    return state.y_hat.data


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(params: ModelParams, path, extra=None):
    """Magic, u32 LE header length, JSON header, then f32 LE tensors in header order."""
    header = {
        "config": asdict(params.config),
        "seed": params.seed,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float64) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    cfg = ModelConfig(**header["config"])
    expected = [(n, tuple(s)) for n, s, _ in param_shapes(cfg)]
    declared = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    if declared != expected:
        raise FormatError(f"{path}: tensor manifest does not match the model configuration")
    offset = 12 + hlen
    tensors = {}
    for name, shape in declared:
        count = int(np.prod(shape))
        chunk = raw[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise FormatError(f"{path}: truncated payload at {name}")
        tensors[name] = Tensor(np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(dtype), requires_grad=True)
        offset += 4 * count
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes after payload")
    return ModelParams(cfg, tensors, header.get("seed", 0)), header.get("extra", {})
