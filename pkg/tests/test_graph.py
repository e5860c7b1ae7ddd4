import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import make_slide
from stexpr.errors import ConfigError, DegenerateError, SchemaError
from stexpr.graph import (
    GraphConfig,
    assemble_graph,
    build_cs_edges,
    build_rs_edges,
    build_ts_edges,
    graph_from_json,
    graph_to_json,
)


class TestTSEdges:
    def test_line_example(self):
        edges = build_ts_edges([(0, 0), (1, 0), (3, 0)], 1)
        assert oracles.as_set(edges) == {(0, 1), (1, 0), (2, 1)}

    def test_two_nodes(self):
        assert oracles.as_set(build_ts_edges([(0, 0), (5, 5)], 1)) == {(0, 1), (1, 0)}

    def test_too_many_neighbors(self):
        with pytest.raises(ConfigError):
            build_ts_edges([(0, 0), (1, 0)], 2)

    def test_duplicate_coordinates_tie_to_lower_index(self):
        edges = build_ts_edges([(0, 0), (1, 0), (1, 0), (1, 0)], 1)
        assert oracles.as_set(edges) == {(0, 1), (1, 2), (2, 1), (3, 1)}

    def test_sorted_by_distance_within_node(self):
        coords = np.array([(0, 0), (3, 0), (1, 0), (2, 0)])
        edges = build_ts_edges(coords, 3)
        assert edges[:3, 1].tolist() == [2, 3, 1]

    def test_random_vs_brute_force(self, rng):
        coords = rng.uniform(0, 10, size=(100, 2))
        edges = build_ts_edges(coords, 5)
        assert oracles.as_set(edges) == oracles.ts_edges(coords.tolist(), 5)
        assert len(edges) == 500


class TestCSEdges:
    def test_example(self):
        edges = build_cs_edges(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]), 2)
        assert oracles.as_set(edges) == {(0, 0), (0, 2)}

    def test_single_eligible_reference(self):
        z_r = np.array([[1.0, 0.0], [-1.0, 0.0]])
        edges = build_cs_edges(np.array([[1.0, 0.0]]), z_r, 1, ["a", "b"], {"a"})
        assert oracles.as_set(edges) == {(0, 1)}

    def test_all_excluded(self):
        with pytest.raises(ConfigError):
            build_cs_edges(np.ones((2, 2)), np.ones((3, 2)), 1, ["a"] * 3, {"a"})

    def test_zero_norm(self):
        with pytest.raises(DegenerateError):
            build_cs_edges(np.array([[0.0, 0.0]]), np.ones((3, 2)), 1)

    def test_random_vs_brute_force(self, rng):
        z_t, z_r = rng.standard_normal((20, 6)), rng.standard_normal((40, 6))
        slide_of = [f"s{j % 4}" for j in range(40)]
        edges = build_cs_edges(z_t, z_r, 7, slide_of, {"s1"})
        assert oracles.as_set(edges) == oracles.cs_edges(z_t.tolist(), z_r.tolist(), 7, slide_of, {"s1"})

    @given(st.integers(0, 1000), st.floats(0.01, 100.0))
    def test_positive_scaling_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        z_t, z_r = rng.standard_normal((5, 4)), rng.standard_normal((9, 4))
        base = build_cs_edges(z_t, z_r, 3)
        z_t[2] *= c
        z_r[4] *= c
        assert oracles.as_set(build_cs_edges(z_t, z_r, 3)) == oracles.as_set(base)


class TestRSEdges:
    def test_two_nodes(self):
        assert oracles.as_set(build_rs_edges(np.array([[1.0, 2.0], [3.0, 1.0]]), 1)) == {(0, 1), (1, 0)}

    def test_identical_rows(self):
        edges = build_rs_edges(np.ones((3, 4)), 2)
        assert oracles.as_set(edges) == {(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)}

    def test_too_few_rows(self):
        with pytest.raises(ConfigError):
            build_rs_edges(np.ones((3, 2)), 3)

    def test_random_vs_brute_force(self, rng):
        h = rng.standard_normal((60, 5))
        assert oracles.as_set(build_rs_edges(h, 7)) == oracles.rs_edges(h.tolist(), 7)

    def test_permutation_equivariance(self, rng):
        h = rng.standard_normal((15, 4))
        perm = rng.permutation(15)
        base = oracles.as_set(build_rs_edges(h, 3))
        permuted = oracles.as_set(build_rs_edges(h[perm], 3))
        assert {(int(perm[a]), int(perm[b])) for a, b in permuted} == base


class TestAssemble:
    def test_counts(self):
        t = make_slide("t", n=4, seed=1)
        r = make_slide("r", n=10, seed=2)
        g = assemble_graph(t, [r], GraphConfig(Q=2, K=3))
        assert (len(g.ts_edges), len(g.cs_edges), len(g.rs_edges)) == (8, 12, 30)
        assert g.reference_features.shape == (10, 4 + 3)
        np.testing.assert_array_equal(g.reference_features[:, 4:], r.expression)

    def test_degree_regularity(self):
        t = make_slide("t", n=9, seed=1)
        refs = [make_slide(f"r{k}", n=8, seed=k + 2) for k in range(3)]
        g = assemble_graph(t, refs, GraphConfig(Q=3, K=4))
        assert np.all(np.bincount(g.ts_edges[:, 0], minlength=9) == 3)
        assert np.all(np.bincount(g.cs_edges[:, 0], minlength=9) == 4)
        assert np.all(np.bincount(g.rs_edges[:, 0], minlength=24) == 4)
        assert not np.any(g.ts_edges[:, 0] == g.ts_edges[:, 1])
        assert not np.any(g.rs_edges[:, 0] == g.rs_edges[:, 1])

    def test_excluded_and_target_slides_never_endpoints(self):
        t = make_slide("t", n=5, seed=1)
        refs = [t, make_slide("a", n=6, seed=2), make_slide("b", n=6, seed=3), make_slide("a", n=6, seed=2)]
        g = assemble_graph(t, refs, GraphConfig(Q=2, K=3, excluded_slides={"b"}))
        assert set(g.reference_slide_of) == {"a"}
        assert g.n_reference == 6
        assert all(g.reference_slide_of[j] == "a" for j in g.cs_edges[:, 1])

    def test_gene_mismatch(self):
        t = make_slide("t", seed=1)
        r = make_slide("r", seed=2, genes=("A", "B", "D"))
        with pytest.raises(SchemaError):
            assemble_graph(t, [r], GraphConfig(Q=2, K=2))

    def test_drop_family(self):
        t, r = make_slide("t", seed=1), make_slide("r", n=8, seed=2)
        g = assemble_graph(t, [r], GraphConfig(Q=2, K=2, drop={"cs"}))
        assert g.cs_edges.shape == (0, 2) and len(g.ts_edges) == 12

    def test_end_to_end_vs_independent_script(self):
        slides = [make_slide(f"s{k}", n=12, seed=k) for k in range(3)]
        g = assemble_graph(slides[0], slides, GraphConfig(Q=3, K=4))
        bank = slides[1:]
        z_r = np.vstack([s.embeddings for s in bank])
        h_r = np.vstack([np.hstack([s.embeddings, s.expression]) for s in bank])
        assert oracles.as_set(g.ts_edges) == oracles.ts_edges(slides[0].coords.tolist(), 3)
        assert oracles.as_set(g.cs_edges) == oracles.cs_edges(slides[0].embeddings.tolist(), z_r.tolist(), 4)
        assert oracles.as_set(g.rs_edges) == oracles.rs_edges(h_r.tolist(), 4)

    def test_json_round_trip(self, tmp_path):
        slides = [make_slide(f"s{k}", n=7, seed=k) for k in range(3)]
        g = assemble_graph(slides[1], slides, GraphConfig(Q=2, K=3, excluded_slides={"s2"}))
        graph_to_json(g, tmp_path / "g.json")
        back = graph_from_json(tmp_path / "g.json", {s.slide_id: s for s in slides})
        for f in ("ts", "cs", "rs"):
            np.testing.assert_array_equal(back.edges(f), g.edges(f))
        np.testing.assert_array_equal(back.reference_features, g.reference_features)
        assert back.reference_slide_of == g.reference_slide_of


class TestGraphConfig:
    def test_defaults(self):
        cfg = GraphConfig()
        assert (cfg.Q, cfg.K) == (5, 7)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            GraphConfig(Q=0)
        with pytest.raises(ConfigError):
            GraphConfig(drop={"xx"})
