"""Nested leave-one-slide-out evaluation with leakage-safe reference banks."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bundle import Dataset
from .errors import ConfigError, DegenerateError
from .graph import GraphConfig, HetGraph, assemble_graph
from .metrics import ari, kmeans_cluster, pcc_mean, per_gene_pcc, rmse
from .model import ModelParams, predict
from .training import TrainConfig, train_fold

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["fold", "slide", "mean_pcc", "rmse", "ari", "n_genes_skipped"]


@dataclass(frozen=True)
class InnerFold:
    validation: str
    train: tuple[str, ...]
    excluded: frozenset


@dataclass(frozen=True)
class OuterFold:
    index: int
    test: str
    train: tuple[str, ...]
    excluded: frozenset
    inner: tuple[InnerFold, ...]


@dataclass
class FoldPlan:
    outer: list[OuterFold]

    def n_inner(self):
        return sum(len(o.inner) for o in self.outer)

    def to_dict(self):
        return {
            "outer": [
                {
                    "index": o.index,
                    "test": o.test,
                    "train": list(o.train),
                    "excluded": sorted(o.excluded),
                    "inner": [
                        {"validation": i.validation, "train": list(i.train), "excluded": sorted(i.excluded)}
                        for i in o.inner
                    ],
                }
                for o in self.outer
            ]
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            [
                OuterFold(
                    o["index"],
                    o["test"],
                    tuple(o["train"]),
                    frozenset(o["excluded"]),
                    tuple(InnerFold(i["validation"], tuple(i["train"]), frozenset(i["excluded"])) for i in o["inner"]),
                )
                for o in doc["outer"]
            ]
        )


def plan_nested_loocv(slide_ids) -> FoldPlan:
    """Each slide is the test slide once; inside, each remaining slide validates once."""
    ids = list(slide_ids)
    if len(ids) < 3:
        raise ConfigError(f"nested LOOCV needs at least 3 slides, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ConfigError("slide ids must be unique")
    outer = []
    for k, test in enumerate(ids):
        train = tuple(s for s in ids if s != test)
        inner = tuple(
            InnerFold(val, tuple(s for s in train if s != val), frozenset({test, val})) for val in train
        )
        outer.append(OuterFold(k, test, train, frozenset({test}), inner))
    return FoldPlan(outer)


@dataclass
class MetricsReport:
    fold: int
    slide: str
    per_gene_pcc: list[float]
    mean_pcc: float
    rmse: float
    n_genes_skipped: int
    ari: float | None = None
    wilcoxon_p: float | None = None


def fold_graphs(dataset: Dataset, train_ids, excluded, graph_cfg: GraphConfig):
    """One training graph per training slide, each slide acting as target.

    Every slide of the dataset is offered as a reference; the exclusion set
    (plus the target itself) decides which ones enter the bank.
    """
    cfg = replace(graph_cfg, excluded_slides=frozenset(excluded) | graph_cfg.excluded_slides)
    graphs, targets = [], []
    for sid in train_ids:
        slide = dataset.by_id(sid)
        graphs.append(assemble_graph(slide, dataset.slides, cfg))
        targets.append(slide.expression)
    return graphs, targets


def eval_graph(dataset: Dataset, target_id, excluded, graph_cfg: GraphConfig) -> HetGraph:
    cfg = replace(graph_cfg, excluded_slides=frozenset(excluded) | graph_cfg.excluded_slides)
    return assemble_graph(dataset.by_id(target_id), dataset.slides, cfg)


def leaked_cs_endpoints(graph: HetGraph, banned) -> int:
    """Count CS edges whose reference endpoint lies on a banned slide."""
    banned = set(banned)
    return sum(graph.reference_slide_of[j] in banned for j in graph.cs_edges[:, 1])


def cluster_agreement(Y, Y_hat, k, seed=0):
    """ARI between k-means clusterings of predicted and measured expression."""
    if k < 2 or len(Y) < k:
        return None
    try:
        return ari(kmeans_cluster(Y_hat, k, seed), kmeans_cluster(Y, k, seed))
    except DegenerateError:
        return None


def evaluate_fold(params: ModelParams, graph: HetGraph, truth, fold=0, ari_k=0, seed=0, y_hat=None) -> MetricsReport:
    """Unmasked forward pass on the held-out target, then metrics."""
    if y_hat is None:
        y_hat = predict(params, graph)
    r = per_gene_pcc(truth, y_hat)
    mean, skipped = pcc_mean(truth, y_hat)
    return MetricsReport(
        fold=fold,
        slide=graph.target_slide,
        per_gene_pcc=[float(v) for v in r],
        mean_pcc=mean,
        rmse=rmse(truth, y_hat),
        n_genes_skipped=skipped,
        ari=cluster_agreement(truth, y_hat, ari_k, seed) if ari_k else None,
    )


def train_and_evaluate(dataset, train_ids, target_id, excluded, graph_cfg, train_cfg, fold=0, ari_k=0):
    graphs, targets = fold_graphs(dataset, train_ids, excluded, graph_cfg)
    params, history = train_fold(graphs, targets, train_cfg)
    test_graph = eval_graph(dataset, target_id, excluded, graph_cfg)
    report = evaluate_fold(params, test_graph, dataset.by_id(target_id).expression, fold, ari_k, train_cfg.seed)
    return params, history, report


def default_grid(train_cfg: TrainConfig):
    return [{"d_prime": train_cfg.d_prime, "learning_rate": train_cfg.learning_rate}]


def make_grid(d_primes, learning_rates):
    return [{"d_prime": d, "learning_rate": lr} for d, lr in itertools.product(d_primes, learning_rates)]


@dataclass
class FoldResult:
    outer: MetricsReport
    selected: dict
    inner: list[tuple[dict, MetricsReport]] = field(default_factory=list)
    history: list = field(default_factory=list)


def run_outer_fold(dataset, fold: OuterFold, graph_cfg, train_cfg, grid=None, ari_k=0) -> FoldResult:
    """Select hyperparameters on the inner folds, then train and test once."""
    grid = grid or default_grid(train_cfg)
    inner_results = []
    selected = grid[0]
    if len(grid) > 1:
        if any(len(inner.train) < 2 for inner in fold.inner):
            # an inner training slide needs another non-excluded slide as its bank
            raise ConfigError("hyperparameter search needs at least 4 slides")
        scores = []
        for cand in grid:
            cfg = replace(train_cfg, **cand)
            vals = []
            for inner in fold.inner:
                _, _, rep = train_and_evaluate(
                    dataset, inner.train, inner.validation, inner.excluded, graph_cfg, cfg, fold.index
                )
                inner_results.append((cand, rep))
                vals.append(rep.mean_pcc)
            scores.append(np.nanmean(vals))
        selected = grid[int(np.nanargmax(scores))]
    cfg = replace(train_cfg, **selected)
    _, history, report = train_and_evaluate(
        dataset, fold.train, fold.test, fold.excluded, graph_cfg, cfg, fold.index, ari_k
    )
    log.info("fold %d (%s): mean PCC %.4f, RMSE %.4f", fold.index, fold.test, report.mean_pcc, report.rmse)
    return FoldResult(report, selected, inner_results, history)


def _run_outer(args):
    return run_outer_fold(*args)


def run_nested_loocv(dataset: Dataset, graph_cfg, train_cfg, grid=None, ari_k=0, jobs=1):
    plan = plan_nested_loocv(dataset.slide_ids)
    work = [(dataset, fold, graph_cfg, train_cfg, grid, ari_k) for fold in plan.outer]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_outer, work))
    else:
        results = [_run_outer(w) for w in work]
    return plan, results


def _num(x):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return repr(float(x))


def write_report_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.fold, r.slide, _num(r.mean_pcc), _num(r.rmse), _num(r.ari), r.n_genes_skipped])


def write_folds_json(plan: FoldPlan, path):
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2) + "\n", encoding="utf-8")
