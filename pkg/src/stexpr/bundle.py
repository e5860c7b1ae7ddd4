"""Slide bundles: one directory per tissue section.

Layout::

    manifest.json   {slide_id, n_spots, n_genes, embed_dim, files: {...}}
    coords.csv      spot_id,x,y
    counts.csv      spot_id,<gene>,...   (raw counts, rows in coords order)
    embed.bin       b"SPAHGCF1", u32 rows, u32 cols, f32 row-major (all LE)
    expression.csv  optional, normalized values for the shared gene set
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

EMBED_MAGIC = b"SPAHGCF1"


@dataclass
class Slide:
    slide_id: str
    spot_ids: list[str]
    coords: np.ndarray
    counts: np.ndarray
    embeddings: np.ndarray
    gene_names: list[str]
    expression: np.ndarray | None = None
    expression_genes: list[str] | None = None

    @property
    def n_spots(self):
        return self.coords.shape[0]

    @property
    def embed_dim(self):
        return self.embeddings.shape[1]

    def validate(self):
        n = len(self.spot_ids)
        if self.coords.shape != (n, 2):
            raise FormatError(f"{self.slide_id}: coords must be {n}x2, got {self.coords.shape}")
        if self.counts.shape != (n, len(self.gene_names)):
            raise FormatError(f"{self.slide_id}: counts shape {self.counts.shape} does not match")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise FormatError(f"{self.slide_id}: embeddings have {self.embeddings.shape[0]} rows, expected {n}")
        if len(set(self.gene_names)) != len(self.gene_names):
            raise ValidationError(f"{self.slide_id}: duplicate gene names")
        if len(set(self.spot_ids)) != n:
            raise ValidationError(f"{self.slide_id}: duplicate spot ids")
        if np.any(self.counts < 0):
            raise ValidationError(f"{self.slide_id}: negative count")
        for name, arr in (("coords", self.coords), ("counts", self.counts), ("embeddings", self.embeddings)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{self.slide_id}: non-finite {name}")
        if self.expression is not None:
            genes = self.expression_genes or []
            if self.expression.shape != (n, len(genes)):
                raise FormatError(f"{self.slide_id}: expression does not match its gene list")
        return self


@dataclass
class Dataset:
    slides: list[Slide]
    shared_genes: list[str] = field(default_factory=list)

    def by_id(self, slide_id):
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(slide_id)

    @property
    def slide_ids(self):
        return [s.slide_id for s in self.slides]


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, ids, matrix):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for sid, row in zip(ids, matrix):
            w.writerow([sid, *map(_fmt, row)])


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    ids = [r[0] for r in body]
    try:
        values = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if any(len(r) != len(header) for r in body):
        raise FormatError(f"{path}: ragged rows")
    return header, ids, values.reshape(len(body), len(header) - 1)


def write_embeddings(path, emb):
    emb = np.ascontiguousarray(emb, dtype="<f4")
    rows, cols = emb.shape
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(emb.tobytes())


def read_embeddings(path):
    raw = Path(path).read_bytes()
    if raw[:8] != EMBED_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    rows, cols = struct.unpack("<II", raw[8:16])
    payload = raw[16:]
    if len(payload) != rows * cols * 4:
        raise FormatError(f"{path}: expected {rows}x{cols} floats, found {len(payload) // 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


def write_expression_csv(path, spot_ids, genes, values):
    _write_csv(path, ["spot_id", *genes], spot_ids, values)


def read_expression_csv(path):
    header, ids, values = _read_csv(path)
    if header[0] != "spot_id":
        raise FormatError(f"{path}: first column must be spot_id")
    return ids, header[1:], values


def save_bundle(slide: Slide, path):
    """Write ``slide`` as a bundle directory (created if missing)."""
    if slide.n_spots == 0:
        raise ValidationError("cannot save a slide with no spots")
    slide.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = {"coords": "coords.csv", "counts": "counts.csv", "embed": "embed.bin"}
    _write_csv(root / files["coords"], ["spot_id", "x", "y"], slide.spot_ids, slide.coords)
    _write_csv(root / files["counts"], ["spot_id", *slide.gene_names], slide.spot_ids, slide.counts)
    write_embeddings(root / files["embed"], slide.embeddings)
    if slide.expression is not None:
        files["expression"] = "expression.csv"
        write_expression_csv(root / files["expression"], slide.spot_ids, slide.expression_genes, slide.expression)
    manifest = {
        "slide_id": slide.slide_id,
        "n_spots": slide.n_spots,
        "n_genes": len(slide.gene_names),
        "embed_dim": slide.embed_dim,
        "files": files,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_bundle(path) -> Slide:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root}/manifest.json: {exc}") from None
    missing = {"slide_id", "n_spots", "n_genes", "embed_dim", "files"} - set(manifest)
    if missing:
        raise FormatError(f"{root}: manifest lacks {sorted(missing)}")
    files = manifest["files"]
    header, spot_ids, coords = _read_csv(root / files["coords"])
    if header != ["spot_id", "x", "y"]:
        raise FormatError(f"{root}: coords.csv header must be spot_id,x,y")
    header, count_ids, counts = _read_csv(root / files["counts"])
    if header[0] != "spot_id":
        raise FormatError(f"{root}: counts.csv must start with spot_id")
    if count_ids != spot_ids:
        raise FormatError(f"{root}: counts.csv rows are not aligned with coords.csv")
    emb = read_embeddings(root / files["embed"])

    n, g, d = manifest["n_spots"], manifest["n_genes"], manifest["embed_dim"]
    if len(spot_ids) != n or counts.shape != (n, g):
        raise FormatError(f"{root}: table shapes disagree with manifest ({n} spots, {g} genes)")
    if emb.shape != (n, d):
        raise FormatError(f"{root}: embed.bin is {emb.shape}, manifest says ({n}, {d})")

    slide = Slide(
        slide_id=str(manifest["slide_id"]),
        spot_ids=spot_ids,
        coords=coords,
        counts=counts,
        embeddings=emb,
        gene_names=header[1:],
    )
    if "expression" in files:
        ids, genes, values = read_expression_csv(root / files["expression"])
        if ids != spot_ids:
            raise FormatError(f"{root}: expression.csv rows are not aligned with coords.csv")
        slide.expression, slide.expression_genes = values, genes
    return slide.validate()


def load_dataset(paths) -> Dataset:
    slides = [load_bundle(p) for p in paths]
    shared = slides[0].expression_genes if slides and slides[0].expression is not None else []
    return Dataset(slides, list(shared or []))


def bundle_dirs(root):
    """Sub-directories of ``root`` holding a manifest, sorted by name."""
    root = Path(root)
    if (root / "manifest.json").exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
