import json
import struct

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stexpr.bundle import (
    EMBED_MAGIC,
    Dataset,
    Slide,
    bundle_dirs,
    load_bundle,
    read_embeddings,
    save_bundle,
    write_embeddings,
)
from stexpr.errors import DegenerateError, EmptyGenesetError, FormatError, ValidationError
from stexpr.preprocess import normalize_expression, preprocess, select_shared_hvgs, top_variable_genes

from conftest import make_slide


def assert_slides_equal(a: Slide, b: Slide):
    assert a.slide_id == b.slide_id
    assert a.spot_ids == b.spot_ids
    assert a.gene_names == b.gene_names
    np.testing.assert_array_equal(a.coords, b.coords)
    np.testing.assert_array_equal(a.counts, b.counts)
    np.testing.assert_array_equal(a.embeddings.astype(np.float32), b.embeddings.astype(np.float32))


class TestBundleRoundTrip:
    def test_three_spot_bundle(self, tmp_path):
        s = make_slide("a", n=3, with_expression=False)
        save_bundle(s, tmp_path / "a")
        back = load_bundle(tmp_path / "a")
        assert back.n_spots == 3
        assert_slides_equal(s, back)
        assert back.expression is None

    def test_one_spot_bundle(self, tmp_path):
        s = make_slide("one", n=1, with_expression=False)
        save_bundle(s, tmp_path / "one")
        assert load_bundle(tmp_path / "one").n_spots == 1

    def test_expression_round_trip(self, tmp_path):
        s = make_slide("a", n=5)
        save_bundle(s, tmp_path / "a")
        back = load_bundle(tmp_path / "a")
        np.testing.assert_array_equal(back.expression, s.expression)
        assert back.expression_genes == s.expression_genes

    def test_empty_slide_rejected(self, tmp_path):
        s = make_slide("a", n=3, with_expression=False)
        empty = Slide("e", [], np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 4)), list("ABC"))
        with pytest.raises(ValidationError):
            save_bundle(empty, tmp_path / "e")
        assert s.n_spots == 3

    def test_manifest_and_layout(self, tmp_path):
        s = make_slide("x", n=4, d=3, with_expression=False)
        save_bundle(s, tmp_path / "x")
        man = json.loads((tmp_path / "x" / "manifest.json").read_text())
        assert man == {
            "slide_id": "x",
            "n_spots": 4,
            "n_genes": 3,
            "embed_dim": 3,
            "files": {"coords": "coords.csv", "counts": "counts.csv", "embed": "embed.bin"},
        }
        raw = (tmp_path / "x" / "embed.bin").read_bytes()
        assert raw[:8] == b"SPAHGCF1"
        assert struct.unpack("<II", raw[8:16]) == (4, 3)
        assert raw[16:] == s.embeddings.astype("<f4").tobytes()
        text = (tmp_path / "x" / "coords.csv").read_bytes()
        assert text.startswith(b"spot_id,x,y\n") and b"\r" not in text and b'"' not in text

    def test_bundle_dirs(self, tmp_path):
        for sid in ("b", "a"):
            save_bundle(make_slide(sid, with_expression=False), tmp_path / sid)
        (tmp_path / "junk").mkdir()
        assert [p.name for p in bundle_dirs(tmp_path)] == ["a", "b"]
        assert bundle_dirs(tmp_path / "a") == [tmp_path / "a"]

    @given(
        n=st.integers(1, 8),
        d=st.integers(1, 5),
        g=st.integers(1, 4),
        seed=st.integers(0, 2**16),
    )
    def test_random_round_trip(self, tmp_path_factory, n, d, g, seed):
        s = make_slide("r", n=n, d=d, genes=[f"g{i}" for i in range(g)], seed=seed, with_expression=False)
        path = tmp_path_factory.mktemp("rt")
        save_bundle(s, path)
        assert_slides_equal(s, load_bundle(path))


class TestBundleErrors:
    def save(self, tmp_path, **kw):
        s = make_slide("a", n=3, with_expression=False, **kw)
        save_bundle(s, tmp_path)
        return s

    def test_missing_file(self, tmp_path):
        self.save(tmp_path)
        (tmp_path / "counts.csv").unlink()
        with pytest.raises(OSError):
            load_bundle(tmp_path)

    def test_embedding_rows_mismatch(self, tmp_path):
        self.save(tmp_path)
        write_embeddings(tmp_path / "embed.bin", np.zeros((2, 4)))
        with pytest.raises(FormatError):
            load_bundle(tmp_path)

    def test_bad_magic(self, tmp_path):
        self.save(tmp_path)
        raw = (tmp_path / "embed.bin").read_bytes()
        (tmp_path / "embed.bin").write_bytes(b"XXXXXXXX" + raw[8:])
        with pytest.raises(FormatError):
            load_bundle(tmp_path)

    def test_truncated_payload(self, tmp_path):
        self.save(tmp_path)
        raw = (tmp_path / "embed.bin").read_bytes()
        (tmp_path / "embed.bin").write_bytes(raw[:-4])
        with pytest.raises(FormatError):
            read_embeddings(tmp_path / "embed.bin")

    def test_manifest_shape_mismatch(self, tmp_path):
        self.save(tmp_path)
        man = json.loads((tmp_path / "manifest.json").read_text())
        man["n_genes"] = 7
        (tmp_path / "manifest.json").write_text(json.dumps(man))
        with pytest.raises(FormatError):
            load_bundle(tmp_path)

    def test_negative_count(self, tmp_path):
        self.save(tmp_path)
        lines = (tmp_path / "counts.csv").read_text().splitlines()
        cells = lines[1].split(",")
        cells[1] = "-1.0"
        lines[1] = ",".join(cells)
        (tmp_path / "counts.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError):
            load_bundle(tmp_path)

    def test_misaligned_rows(self, tmp_path):
        self.save(tmp_path)
        lines = (tmp_path / "counts.csv").read_text().splitlines()
        lines[1], lines[2] = lines[2], lines[1]
        (tmp_path / "counts.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError):
            load_bundle(tmp_path)

    def test_duplicate_genes(self):
        with pytest.raises(ValidationError):
            make_slide("a", genes=("A", "A"), with_expression=False).validate()

    def test_magic_constant(self):
        assert EMBED_MAGIC == b"SPAHGCF1"


def mp_normalize(counts):
    mpmath.mp.dps = 40
    out = np.empty(counts.shape)
    for i, row in enumerate(counts):
        total = mpmath.fsum(mpmath.mpf(float(c)) for c in row)
        for g, c in enumerate(row):
            out[i, g] = float(mpmath.log1p(mpmath.mpf(float(c)) / total * 10**6))
    return out


class TestNormalize:
    def test_cpm_arithmetic(self):
        out = normalize_expression([[1, 1, 2]])
        np.testing.assert_allclose(np.expm1(out), [[250000, 250000, 500000]], rtol=1e-12)

    def test_zero_total_spot(self):
        with pytest.raises(DegenerateError):
            normalize_expression([[1, 2], [0, 0]])

    def test_against_mpmath(self, rng):
        counts = rng.integers(0, 500, size=(10, 8)).astype(float)
        counts[:, 0] += 1
        np.testing.assert_allclose(normalize_expression(counts), mp_normalize(counts), rtol=0, atol=1e-12)

    @given(st.lists(st.floats(0.01, 1e4), min_size=2, max_size=12))
    def test_monotone_and_cpm_sums(self, row):
        counts = np.array([row])
        out = normalize_expression(counts)
        assert np.array_equal(np.argsort(out[0], kind="stable"), np.argsort(counts[0], kind="stable"))
        cpm = counts / counts.sum() * 1e6
        assert abs(cpm.sum() - 1e6) < 1e-6


def brute_force_hvgs(slides, n_top):
    sets = []
    for s in slides:
        genes = s.expression_genes
        var = [(-float(np.var(s.expression[:, g])), g) for g in range(len(genes))]
        sets.append({genes[g] for _, g in sorted(var)[:n_top]})
    return sorted(set.intersection(*sets))


def normalized_slide(sid, genes, seed, n=30):
    rng = np.random.default_rng(seed)
    s = make_slide(sid, n=n, genes=genes, seed=seed)
    s.counts = rng.poisson(rng.uniform(1, 30, size=len(genes)), size=(n, len(genes))).astype(float) + 1
    s.expression = normalize_expression(s.counts)
    return s


class TestHVG:
    def test_ties_go_to_lower_index(self):
        x = np.array([[0.0, 1.0, 0.0], [2.0, 3.0, 2.0]])
        assert list(top_variable_genes(x, 2)) == [0, 1]

    def test_single_slide_all_genes(self):
        s = normalized_slide("a", list("DCBA"), 0)
        assert select_shared_hvgs(Dataset([s]), n_top=4) == ["A", "B", "C", "D"]
        assert s.expression_genes == ["A", "B", "C", "D"]

    def test_projection_reorders_columns(self):
        s = normalized_slide("a", list("BA"), 0)
        before = s.expression.copy()
        select_shared_hvgs(Dataset([s]), n_top=2)
        np.testing.assert_array_equal(s.expression, before[:, [1, 0]])

    def test_disjoint_top_sets(self):
        a = make_slide("a", genes=("X", "Y"))
        b = make_slide("b", genes=("X", "Y"))
        a.expression = np.array([[0.0, 1.0], [5.0, 1.0]] * 3)
        b.expression = np.array([[1.0, 0.0], [1.0, 5.0]] * 3)
        with pytest.raises(EmptyGenesetError):
            select_shared_hvgs(Dataset([a, b]), n_top=1)

    def test_matches_brute_force(self):
        genes = [f"g{i:02d}" for i in range(50)]
        slides = [normalized_slide(f"s{k}", genes, k) for k in range(3)]
        expected = brute_force_hvgs(slides, 10)
        assert select_shared_hvgs(Dataset(slides), n_top=10) == expected

    def test_independent_of_slide_order(self):
        genes = [f"g{i:02d}" for i in range(20)]
        a = select_shared_hvgs(Dataset([normalized_slide(f"s{k}", genes, k) for k in range(3)]), 12)
        b = select_shared_hvgs(Dataset([normalized_slide(f"s{k}", genes, k) for k in (2, 0, 1)]), 12)
        assert a == b

    def test_preprocess_drops_empty_spots(self):
        s = make_slide("a", n=4, with_expression=False)
        s.counts[2] = 0
        ds, dropped = preprocess(Dataset([s]), n_top=3)
        assert dropped == {"a": 1}
        assert ds.slides[0].n_spots == 3
        assert "s2" not in ds.slides[0].spot_ids
