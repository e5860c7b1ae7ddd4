"""Heterogeneous spot graph over one target slide and a reference bank.

Three edge families, all stored directed as ``(node, neighbor)`` pairs:

* TS: target spot -> its Q spatially nearest target spots
* CS: target spot -> its K most cosine-similar reference spots (embeddings)
* RS: reference spot -> its K most cosine-similar other reference spots
  (embedding and expression concatenated)

Ties always go to the lower index, so every builder is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import Slide
from .errors import ConfigError, DegenerateError, SchemaError

FAMILIES = ("ts", "cs", "rs")


@dataclass(frozen=True)
class GraphConfig:
    Q: int = 5
    K: int = 7
    excluded_slides: frozenset = frozenset()
    drop: frozenset = frozenset()  # edge families left empty, for ablations

    def __post_init__(self):
        if self.Q < 1 or self.K < 1:
            raise ConfigError("Q and K must be at least 1")
        unknown = set(self.drop) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown edge families {sorted(unknown)}")
        object.__setattr__(self, "excluded_slides", frozenset(self.excluded_slides))
        object.__setattr__(self, "drop", frozenset(self.drop))


@dataclass
class HetGraph:
    target_features: np.ndarray
    reference_features: np.ndarray
    ts_edges: np.ndarray
    cs_edges: np.ndarray
    rs_edges: np.ndarray
    reference_slide_of: list[str]
    target_slide: str = ""
    n_genes: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_target(self):
        return self.target_features.shape[0]

    @property
    def n_reference(self):
        return self.reference_features.shape[0]

    @property
    def embed_dim(self):
        return self.target_features.shape[1]

    def edges(self, family):
        return {"ts": self.ts_edges, "cs": self.cs_edges, "rs": self.rs_edges}[family]

    def without(self, *families):
        """Copy of the graph with the named edge families emptied."""
        empty = np.zeros((0, 2), dtype=np.int64)
        kw = {f"{f}_edges": empty if f in families else self.edges(f) for f in FAMILIES}
        return HetGraph(
            self.target_features,
            self.reference_features,
            reference_slide_of=self.reference_slide_of,
            target_slide=self.target_slide,
            n_genes=self.n_genes,
            meta=dict(self.meta),
            **kw,
        )


def _topk_rows(score, k):
    # stable sort keeps the lower column first among equal scores
    order = np.argsort(score, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(score.shape[0]), k)
    return np.column_stack([rows, order.reshape(-1)]).astype(np.int64)


def _unit_rows(x, what):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise DegenerateError(f"zero-norm {what} row {int(np.flatnonzero(norms == 0)[0])}")
    return x / norms[:, None]


def pairwise_distances(coords):
    c = np.asarray(coords, dtype=np.float64)
    diff = c[:, None, :] - c[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def build_ts_edges(coords, Q):
    """Each target spot linked to its Q nearest other spots."""
    n = len(coords)
    if n < 2 or Q > n - 1:
        raise ConfigError(f"need Q <= n-1 spatial neighbors, got Q={Q} with n={n}")
    dist = pairwise_distances(coords)
    np.fill_diagonal(dist, np.inf)
    return _topk_rows(dist, Q)


def build_cs_edges(z_t, z_r, K, reference_slide_of=None, excluded_slides=()):
    """Each target spot linked to its K most similar eligible reference spots."""
    sim = _unit_rows(z_t, "target embedding") @ _unit_rows(z_r, "reference embedding").T
    eligible = np.ones(sim.shape[1], dtype=bool)
    if reference_slide_of is not None and excluded_slides:
        banned = set(excluded_slides)
        eligible = np.array([s not in banned for s in reference_slide_of], dtype=bool)
    if eligible.sum() < K:
        raise ConfigError(f"only {int(eligible.sum())} eligible reference spots for K={K}")
    score = np.where(eligible[None, :], -sim, np.inf)
    return _topk_rows(score, K)


def build_rs_edges(h_r, K):
    """Each reference spot linked to its K most similar peers (itself excluded)."""
    m = len(h_r)
    if m < K + 1:
        raise ConfigError(f"need at least K+1={K + 1} reference spots, got {m}")
    score = -(_unit_rows(h_r, "reference feature") @ _unit_rows(h_r, "reference feature").T)
    np.fill_diagonal(score, np.inf)
    return _topk_rows(score, K)


def reference_features(slide: Slide):
    if slide.expression is None:
        raise SchemaError(f"{slide.slide_id}: reference slides need normalized expression")
    return np.hstack([slide.embeddings, slide.expression])


def assemble_graph(target: Slide, references, cfg: GraphConfig) -> HetGraph:
    """Build the three edge families for ``target`` against a reference bank.

    The bank is every reference slide not in ``cfg.excluded_slides``; the
    target's own slide is always excluded.
    """
    excluded = set(cfg.excluded_slides) | {target.slide_id}
    bank, seen = [], set()
    for ref in references:
        if ref.slide_id in excluded or ref.slide_id in seen:
            continue
        seen.add(ref.slide_id)
        bank.append(ref)
    if not bank:
        raise ConfigError(f"no eligible reference slide for target {target.slide_id}")
    genes = bank[0].expression_genes
    for ref in bank:
        if ref.expression_genes != genes:
            raise SchemaError(f"{ref.slide_id}: gene list differs from {bank[0].slide_id}")
        if ref.embed_dim != target.embed_dim:
            raise SchemaError(f"{ref.slide_id}: embedding width {ref.embed_dim} != {target.embed_dim}")
    if target.expression is not None and target.expression_genes != genes:
        raise SchemaError(f"{target.slide_id}: gene list differs from the reference bank")

    z_t = np.asarray(target.embeddings, dtype=np.float64)
    z_r = np.vstack([r.embeddings for r in bank])
    h_r = np.vstack([reference_features(r) for r in bank])
    slide_of = [r.slide_id for r in bank for _ in range(r.n_spots)]

    empty = np.zeros((0, 2), dtype=np.int64)
    ts = empty if "ts" in cfg.drop else build_ts_edges(target.coords, cfg.Q)
    cs = empty if "cs" in cfg.drop else build_cs_edges(z_t, z_r, cfg.K, slide_of, excluded)
    rs = empty if "rs" in cfg.drop else build_rs_edges(h_r, cfg.K)
    return HetGraph(
        target_features=z_t,
        reference_features=h_r,
        ts_edges=ts,
        cs_edges=cs,
        rs_edges=rs,
        reference_slide_of=slide_of,
        target_slide=target.slide_id,
        n_genes=len(genes),
        meta={"Q": cfg.Q, "K": cfg.K, "excluded_slides": sorted(excluded), "drop": sorted(cfg.drop)},
    )


def graph_to_json(graph: HetGraph, path, target_bundle=None, reference_bundles=()):
    doc = {
        "n_target": graph.n_target,
        "n_reference": graph.n_reference,
        "target_slide": graph.target_slide,
        "target_bundle": None if target_bundle is None else str(target_bundle),
        "reference_bundles": [str(p) for p in reference_bundles],
        "reference_slide_of": list(graph.reference_slide_of),
        "config": graph.meta,
        "edges": {f: graph.edges(f).tolist() for f in FAMILIES},
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")
    return doc


def graph_from_json(path, slides_by_id) -> HetGraph:
    """Rebuild a graph from its JSON export and already-loaded slides."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    target = slides_by_id[doc["target_slide"]]
    order = list(dict.fromkeys(doc["reference_slide_of"]))
    bank = [slides_by_id[s] for s in order]
    h_r = np.vstack([reference_features(r) for r in bank])
    edges = {f: np.asarray(doc["edges"][f], dtype=np.int64).reshape(-1, 2) for f in FAMILIES}
    graph = HetGraph(
        target_features=np.asarray(target.embeddings, dtype=np.float64),
        reference_features=h_r,
        ts_edges=edges["ts"],
        cs_edges=edges["cs"],
        rs_edges=edges["rs"],
        reference_slide_of=list(doc["reference_slide_of"]),
        target_slide=doc["target_slide"],
        n_genes=len(bank[0].expression_genes),
        meta=doc.get("config", {}),
    )
    if graph.n_target != doc["n_target"] or graph.n_reference != doc["n_reference"]:
        raise SchemaError(f"{path}: node counts do not match the bundles")
    return graph
