"""Command-line interface.

Every subcommand accepts ``--config FILE`` (a flat JSON object keyed by the
subcommand's option names, e.g. ``{"epochs": 50, "learning_rate": 0.003}``);
explicit flags override file values and unknown keys are rejected.

Exit codes: 0 success, 1 usage or validation error, 2 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import Dataset, bundle_dirs, load_dataset, read_expression_csv, save_bundle, write_expression_csv
from .errors import ConfigError, FormatError, StexprError, ValidationError
from .graph import FAMILIES, GraphConfig, assemble_graph, graph_to_json
from .gradcheck import model_grad_error
from .loocv import (
    MetricsReport,
    cluster_agreement,
    fold_graphs,
    make_grid,
    run_nested_loocv,
    write_folds_json,
    write_report_csv,
)
from .metrics import pcc_mean, per_gene_pcc, rmse, wilcoxon_signed_rank
from .model import load_checkpoint, predict, save_checkpoint
from .preprocess import preprocess
from .synth import SynthConfig, generate
from .training import SUPERVISE_MODES, TrainConfig, train_fold, write_history_csv

log = logging.getLogger("stexpr")

GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors by raising instead of exiting 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- option registry ----------------------------------------------------------------
#
# Options that may also come from --config are registered with a None
# default so that "not given on the command line" is detectable; their real
# defaults live in the parser's ``settable`` map.


def _opt(parser, *flags, default=None, **kw):
    action = parser.add_argument(*flags, default=None, **kw)
    if default is not None and kw.get("help"):
        action.help = f"{kw['help']} (default: {default})"
    parser.settable[action.dest] = default
    return action


def _new_sub(subs, name, help_text):
    p = subs.add_parser(name, help=help_text, description=help_text)
    p.settable = {}
    p.add_argument("--config", type=Path, help="JSON file with option values; flags take precedence")
    _opt(p, "--seed", type=int, default=0, help="base random seed for every stage")
    p.add_argument("--quiet", action="store_true", help="suppress log messages on stderr")
    return p


def _data_opt(p, required=True):
    _opt(p, "--data", nargs="+", required=False, help="bundle directories, or directories containing bundles")
    p.data_required = required


def _graph_opts(p):
    _opt(p, "--Q", type=int, default=5, help="spatial neighbors per target spot (TS edges)")
    _opt(p, "--K", type=int, default=7, help="retrieved neighbors per spot (CS and RS edges)")
    _opt(p, "--drop", nargs="*", choices=FAMILIES, default=[], help="edge families to leave empty (ablation)")


def _train_opts(p):
    _graph_opts(p)
    d = TrainConfig()
    _opt(p, "--epochs", type=int, default=d.epochs, help="training epochs")
    _opt(p, "--lr", dest="learning_rate", type=float, default=d.learning_rate, help="Adam learning rate")
    _opt(p, "--weight-decay", type=float, default=d.weight_decay, help="decoupled weight decay")
    _opt(p, "--alpha", type=float, default=d.alpha, help="target feature masking ratio")
    _opt(p, "--beta", type=float, default=d.beta, help="reference feature masking ratio")
    _opt(p, "--d-prime", type=int, default=d.d_prime, help="hidden width")
    _opt(p, "--n-layers", type=int, default=d.n_layers, help="GraphSAGE/cross-attention layers")
    _opt(p, "--n-heads", type=int, default=d.n_heads, help="attention-pooling heads")
    _opt(p, "--supervise", choices=SUPERVISE_MODES, default=d.supervise, help="which pass the regression losses use")
    _opt(p, "--dtype", choices=("float64", "float32"), default=d.dtype, help="parameter precision")


def build_parser():
    parser = Parser(prog="stexpr", description="Spatial gene expression prediction on heterogeneous spot graphs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    subs.required = True

    p = _new_sub(subs, "synth", "Generate synthetic slide bundles with a planted expression map.")
    _opt(p, "--out", type=Path, help="output directory (one bundle per slide)")
    s = SynthConfig()
    _opt(p, "--slides", dest="n_slides", type=int, default=s.n_slides, help="number of slides")
    _opt(p, "--spots", dest="spots_per_slide", type=int, default=s.spots_per_slide, help="spots per slide")
    _opt(p, "--dim", dest="d", type=int, default=s.d, help="embedding dimension")
    _opt(p, "--genes", dest="M", type=int, default=s.M, help="number of planted genes")
    _opt(p, "--noise", dest="noise_sigma", type=float, default=s.noise_sigma, help="Gaussian noise sigma")
    _opt(p, "--smoothing", type=float, default=s.smoothing, help="spatial smoothing weight in [0, 1]")
    p.required_opts = ["out"]

    p = _new_sub(subs, "preprocess", "Normalize counts (log1p CPM) and keep the shared highly variable genes.")
    _data_opt(p)
    _opt(p, "--out", type=Path, help="output directory for the processed bundles")
    _opt(p, "--n-top", type=int, default=1000, help="top-variance genes per slide before intersecting")
    p.required_opts = ["out"]

    p = _new_sub(subs, "build-graph", "Assemble the heterogeneous graph for one target slide and emit JSON.")
    _data_opt(p)
    _opt(p, "--target", help="target slide id")
    _opt(p, "--exclude", nargs="*", default=[], help="slide ids barred from the reference bank")
    _graph_opts(p)
    _opt(p, "--out", type=Path, help="graph JSON path")
    p.required_opts = ["target", "out"]

    p = _new_sub(subs, "train", "Train one fold: every non-held-out slide serves as a target in turn.")
    _data_opt(p)
    _opt(p, "--test", help="held-out slide id, excluded from training and the reference bank")
    _train_opts(p)
    _opt(p, "--checkpoint", type=Path, help="where to write the trained model")
    _opt(p, "--history", type=Path, help="optional per-epoch loss CSV")
    p.required_opts = ["checkpoint"]

    p = _new_sub(subs, "loocv", "Nested leave-one-slide-out evaluation; writes folds.json and report.csv.")
    _data_opt(p)
    _train_opts(p)
    _opt(p, "--out", type=Path, help="output directory")
    _opt(p, "--grid-d-prime", nargs="+", type=int, help="inner-fold grid over hidden width")
    _opt(p, "--grid-lr", dest="grid_learning_rate", nargs="+", type=float, help="inner-fold grid over learning rate")
    _opt(p, "--ari-k", type=int, default=0, help="clusters for the ARI column (0 leaves it empty)")
    _opt(p, "--jobs", type=int, default=1, help="outer folds run in parallel")
    p.required_opts = ["out"]

    p = _new_sub(subs, "predict", "Predict expression for a target slide from a checkpoint.")
    _data_opt(p)
    _opt(p, "--checkpoint", type=Path, help="trained model")
    _opt(p, "--target", help="target slide id")
    _opt(p, "--exclude", nargs="*", help="slide ids barred from the reference bank (default: as trained)")
    _opt(p, "--Q", type=int, help="spatial neighbors (default: as trained)")
    _opt(p, "--K", type=int, help="retrieved neighbors (default: as trained)")
    _opt(p, "--out", type=Path, help="prediction CSV (spot_id, genes...)")
    p.required_opts = ["checkpoint", "target", "out"]

    p = _new_sub(subs, "eval", "Score a prediction CSV against a truth CSV.")
    _opt(p, "--pred", type=Path, help="predicted expression CSV")
    _opt(p, "--truth", type=Path, help="measured expression CSV")
    _opt(p, "--baseline", type=Path, help="second prediction CSV; adds a signed-rank p-value on per-gene PCC")
    _opt(p, "--ari-k", type=int, default=0, help="clusters for ARI between predicted and measured (0 skips)")
    _opt(p, "--out", type=Path, help="optional JSON output (metrics are always printed)")
    p.required_opts = ["pred", "truth"]

    p = _new_sub(subs, "grad-check", "Finite-difference check of the full training loss on tiny random graphs.")
    _opt(p, "--seeds", type=int, default=20, help="number of random instances")
    _opt(p, "--per-tensor", type=int, default=2, help="coordinates probed per parameter tensor (0 = all)")
    _opt(p, "--step", type=float, default=1e-5, help="central-difference step")

    p = _new_sub(subs, "plot-data", "Emit per-spot gene values with coordinates for external plotting.")
    _data_opt(p)
    _opt(p, "--slide", help="slide id")
    _opt(p, "--genes", nargs="+", help="genes to export (default: all)")
    _opt(p, "--pred", type=Path, help="optional prediction CSV to add a predicted column")
    _opt(p, "--out", type=Path, help="output CSV")
    p.required_opts = ["slide", "out"]

    return parser


def resolve(parser, sub, ns):
    """Merge defaults, the --config file, and explicit flags (in that order)."""
    values = dict(sub.settable)
    if ns.config is not None:
        try:
            doc = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{ns.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ValidationError(f"{ns.config}: expected a JSON object")
        unknown = sorted(set(doc) - set(sub.settable))
        if unknown:
            raise ValidationError(f"{ns.config}: unknown keys {unknown}")
        values.update(doc)
    for key in sub.settable:
        v = getattr(ns, key)
        if v is not None:
            values[key] = v
    missing = [k for k in getattr(sub, "required_opts", []) if values.get(k) is None]
    if getattr(sub, "data_required", False) and not values.get("data"):
        missing.insert(0, "data")
    if missing:
        raise UsageError(f"{sub.prog}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    out = argparse.Namespace(**values)
    out.command, out.quiet = ns.command, ns.quiet
    return out


# -- helpers ------------------------------------------------------------------------


def _load(paths, need_expression=True) -> Dataset:
    dirs = []
    for p in paths:
        root = Path(p)
        if not root.is_dir():
            raise FileNotFoundError(f"{root}: not a directory")
        found = bundle_dirs(root)
        if not found:
            raise FileNotFoundError(f"{root}: no bundle (manifest.json) found")
        dirs.extend(found)
    ds = load_dataset(dirs)
    if need_expression:
        lacking = [s.slide_id for s in ds.slides if s.expression is None]
        if lacking:
            raise ValidationError(f"slides without normalized expression (run preprocess): {lacking}")
    return ds


def _slide(ds: Dataset, slide_id):
    try:
        return ds.by_id(slide_id)
    except KeyError:
        raise ValidationError(f"unknown slide id {slide_id!r}; have {ds.slide_ids}") from None


def _train_config(a) -> TrainConfig:
    return TrainConfig(
        epochs=a.epochs,
        learning_rate=a.learning_rate,
        weight_decay=a.weight_decay,
        alpha=a.alpha,
        beta=a.beta,
        seed=a.seed,
        d_prime=a.d_prime,
        n_layers=a.n_layers,
        n_heads=a.n_heads,
        Q=a.Q,
        K=a.K,
        dtype=a.dtype,
        supervise=a.supervise,
    )


def _graph_config(a, excluded=()) -> GraphConfig:
    return GraphConfig(Q=a.Q, K=a.K, excluded_slides=frozenset(excluded), drop=frozenset(a.drop or ()))


def _aligned(path_a, path_b):
    ids_a, genes_a, A = read_expression_csv(path_a)
    ids_b, genes_b, B = read_expression_csv(path_b)
    if genes_a != genes_b:
        raise ValidationError(f"{path_a} and {path_b} have different gene columns")
    if sorted(ids_a) != sorted(ids_b):
        raise ValidationError(f"{path_a} and {path_b} cover different spots")
    if ids_a != ids_b:
        pos = {s: i for i, s in enumerate(ids_b)}
        B = B[[pos[s] for s in ids_a]]
    return ids_a, genes_a, A, B


# -- subcommands --------------------------------------------------------------------


def cmd_synth(a):
    cfg = SynthConfig(a.n_slides, a.spots_per_slide, a.d, a.M, a.noise_sigma, a.smoothing, a.seed)
    ds = generate(cfg)
    out = Path(a.out)
    for slide in ds.slides:
        save_bundle(slide, out / slide.slide_id)
    log.info("wrote %d bundles to %s", len(ds.slides), out)
    return 0


def cmd_preprocess(a):
    ds, dropped = preprocess(_load(a.data, need_expression=False), a.n_top)
    for sid, n in dropped.items():
        if n:
            log.warning("%s: dropped %d spot(s) with zero total count", sid, n)
    out = Path(a.out)
    for slide in ds.slides:
        save_bundle(slide, out / slide.slide_id)
    log.info("kept %d shared genes across %d slides", len(ds.shared_genes), len(ds.slides))
    return 0


def cmd_build_graph(a):
    ds = _load(a.data)
    graph = assemble_graph(_slide(ds, a.target), ds.slides, _graph_config(a, a.exclude or ()))
    graph_to_json(graph, a.out)
    log.info("graph: %d target, %d reference nodes", graph.n_target, graph.n_reference)
    return 0


def cmd_train(a):
    ds = _load(a.data)
    excluded = {a.test} if a.test else set()
    if a.test:
        _slide(ds, a.test)
    train_ids = [s for s in ds.slide_ids if s not in excluded]
    cfg = _train_config(a)
    graphs, targets = fold_graphs(ds, train_ids, excluded, _graph_config(a))
    params, history = train_fold(graphs, targets, cfg, on_epoch=_progress(cfg.epochs))
    extra = {
        "Q": a.Q,
        "K": a.K,
        "drop": sorted(a.drop or ()),
        "excluded": sorted(excluded),
        "genes": ds.slides[0].expression_genes,
        "train_slides": train_ids,
    }
    save_checkpoint(params, a.checkpoint, extra)
    if a.history:
        write_history_csv(history, a.history)
    log.info("trained on %s, final loss %.6f", train_ids, history[-1].l_total if history else float("nan"))
    return 0


def _progress(epochs):
    step = max(1, epochs // 10)

    def report(epoch, losses):
        if (epoch + 1) % step == 0 or epoch + 1 == epochs:
            log.info("epoch %d/%d loss %.5f", epoch + 1, epochs, losses.l_total)

    return report


def cmd_loocv(a):
    ds = _load(a.data)
    cfg = _train_config(a)
    grid = None
    if a.grid_d_prime or a.grid_learning_rate:
        grid = make_grid(a.grid_d_prime or [cfg.d_prime], a.grid_learning_rate or [cfg.learning_rate])
    plan, results = run_nested_loocv(ds, _graph_config(a), cfg, grid, a.ari_k, a.jobs)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_folds_json(plan, out / "folds.json")
    for res in results:
        write_history_csv(res.history, out / f"history_fold{res.outer.fold}.csv")
    reports = [r.outer for r in results]
    write_report_csv(reports, out / "report.csv")
    mean = float(np.nanmean([r.mean_pcc for r in reports]))
    print(f"mean held-out PCC over {len(reports)} folds: {mean:.4f}")
    return 0


def cmd_predict(a):
    params, extra = load_checkpoint(a.checkpoint)
    ds = _load(a.data, need_expression=False)
    target = _slide(ds, a.target)
    refs = [s for s in ds.slides if s.expression is not None]
    gcfg = GraphConfig(
        Q=a.Q or extra.get("Q", 5),
        K=a.K or extra.get("K", 7),
        excluded_slides=frozenset(extra.get("excluded", []) if a.exclude is None else a.exclude),
        drop=frozenset(extra.get("drop", [])),
    )
    graph = assemble_graph(target, refs, gcfg)
    if graph.embed_dim != params.config.embed_dim or graph.n_genes != params.config.n_genes:
        raise ValidationError("checkpoint dimensions do not match the bundles")
    genes = extra.get("genes") or refs[0].expression_genes
    write_expression_csv(a.out, target.spot_ids, genes, predict(params, graph))
    log.info("wrote predictions for %d spots to %s", target.n_spots, a.out)
    return 0


def cmd_eval(a):
    _, genes, Y_hat, Y = _aligned(a.pred, a.truth)
    mean, skipped = pcc_mean(Y, Y_hat)
    report = MetricsReport(
        fold=0,
        slide=str(a.truth),
        per_gene_pcc=[None if np.isnan(v) else float(v) for v in per_gene_pcc(Y, Y_hat)],
        mean_pcc=mean,
        rmse=rmse(Y, Y_hat),
        n_genes_skipped=skipped,
        ari=cluster_agreement(Y, Y_hat, a.ari_k, a.seed) if a.ari_k else None,
    )
    if a.baseline:
        _, _, B, Y2 = _aligned(a.baseline, a.truth)
        delta = per_gene_pcc(Y, Y_hat) - per_gene_pcc(Y2, B)
        report.wilcoxon_p = wilcoxon_signed_rank(delta[~np.isnan(delta)])
    doc = {
        "genes": genes,
        "per_gene_pcc": report.per_gene_pcc,
        "mean_pcc": None if np.isnan(report.mean_pcc) else report.mean_pcc,
        "rmse": report.rmse,
        "n_genes_skipped": report.n_genes_skipped,
        "ari": report.ari,
        "wilcoxon_p": report.wilcoxon_p,
    }
    text = json.dumps(doc, indent=2)
    print(text)
    if a.out:
        Path(a.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_grad_check(a):
    if a.seeds < 1:
        raise ValidationError("--seeds must be at least 1")
    per_tensor = a.per_tensor or None
    worst = 0.0
    for s in range(a.seed, a.seed + a.seeds):
        err = model_grad_error(s, h=a.step, per_tensor=per_tensor)
        log.info("seed %d: max relative error %.3e", s, err)
        worst = max(worst, err)
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < GRAD_TOLERANCE else 1


def cmd_plot_data(a):
    ds = _load(a.data)
    slide = _slide(ds, a.slide)
    genes = list(a.genes or slide.expression_genes)
    col = {g: i for i, g in enumerate(slide.expression_genes)}
    unknown = [g for g in genes if g not in col]
    if unknown:
        raise ValidationError(f"genes not in {slide.slide_id}: {unknown}")
    pred = None
    if a.pred:
        ids, pgenes, P = read_expression_csv(a.pred)
        if ids != slide.spot_ids:
            raise ValidationError(f"{a.pred}: spots do not match slide {slide.slide_id}")
        pcol = {g: i for i, g in enumerate(pgenes)}
        missing = [g for g in genes if g not in pcol]
        if missing:
            raise ValidationError(f"{a.pred}: missing genes {missing}")
        pred = (P, pcol)
    header = ["spot_id", "x", "y", "gene", "measured"] + (["predicted"] if pred else [])
    with open(a.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for g in genes:
            for i, sid in enumerate(slide.spot_ids):
                row = [sid, repr(float(slide.coords[i, 0])), repr(float(slide.coords[i, 1])), g]
                row.append(repr(float(slide.expression[i, col[g]])))
                if pred:
                    row.append(repr(float(pred[0][i, pred[1][g]])))
                w.writerow(row)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "loocv": cmd_loocv,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[ns.command]
        args = resolve(parser, sub, ns)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StexprError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return COMMANDS[args.command](args)
    except (OSError, FormatError) as exc:
        log.error("%s", exc)
        return 2
    except (StexprError, ConfigError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
