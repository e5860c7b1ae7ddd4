import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stexpr.errors import ConfigError, DimensionError
from stexpr.masking import apply_masks, make_complementary_masks

ratios = st.floats(0.0, 1.0)


class TestMakeMasks:
    def test_alpha_zero(self):
        mp = make_complementary_masks(5, 4, 6, 9, 0.0, 0.5, seed=1)
        assert np.all(mp.m1_target == 1) and np.all(mp.m2_target == 0)

    def test_alpha_one(self):
        mp = make_complementary_masks(5, 4, 6, 9, 1.0, 0.5, seed=1)
        assert np.all(mp.m1_target == 0) and np.all(mp.m2_target == 1)

    def test_row_counts(self):
        mp = make_complementary_masks(20, 7, 10, 13, 0.8, 0.9, seed=3)
        assert np.all((mp.m1_target == 0).sum(axis=1) == 8)
        assert np.all((mp.m2_target == 0).sum(axis=1) == 2)
        assert np.all((mp.m1_reference == 0).sum(axis=1) == math.floor(0.9 * 13))

    def test_float_rounding_edge(self):
        mp = make_complementary_masks(3, 3, 100, 100, 0.29, 0.57, seed=0)
        assert np.all((mp.m1_target == 0).sum(axis=1) == 29)
        assert np.all((mp.m1_reference == 0).sum(axis=1) == 57)

    @pytest.mark.parametrize("alpha,beta", [(-0.1, 0.5), (0.5, 1.01)])
    def test_out_of_range(self, alpha, beta):
        with pytest.raises(ConfigError):
            make_complementary_masks(2, 2, 3, 4, alpha, beta, seed=0)

    def test_empty_node_sets(self):
        mp = make_complementary_masks(0, 0, 3, 4, 0.5, 0.5, seed=0)
        assert mp.m1_target.shape == (0, 3) and mp.m1_reference.shape == (0, 4)

    def test_determinism(self):
        a = make_complementary_masks(6, 5, 8, 10, 0.5, 0.7, seed=42)
        b = make_complementary_masks(6, 5, 8, 10, 0.5, 0.7, seed=42)
        np.testing.assert_array_equal(a.m1_target, b.m1_target)
        np.testing.assert_array_equal(a.m1_reference, b.m1_reference)

    def test_seeds_differ(self):
        for s in range(100):
            a = make_complementary_masks(4, 4, 8, 8, 0.5, 0.5, seed=2 * s)
            b = make_complementary_masks(4, 4, 8, 8, 0.5, 0.5, seed=2 * s + 1)
            assert np.any(a.m1_target != b.m1_target) or np.any(a.m1_reference != b.m1_reference)

    def test_positions_roughly_uniform(self):
        mp = make_complementary_masks(4000, 0, 5, 1, 0.4, 0.0, seed=9)
        freq = (mp.m1_target == 0).mean(axis=0)
        np.testing.assert_allclose(freq, 0.4, atol=0.03)

    @given(
        n=st.integers(0, 12),
        m=st.integers(0, 12),
        d=st.integers(1, 16),
        dM=st.integers(1, 20),
        alpha=ratios,
        beta=ratios,
        seed=st.integers(0, 2**32 - 1),
    )
    def test_complementarity(self, n, m, d, dM, alpha, beta, seed):
        mp = make_complementary_masks(n, m, d, dM, alpha, beta, seed)
        for m1, m2, width, r in (
            (mp.m1_target, mp.m2_target, d, alpha),
            (mp.m1_reference, mp.m2_reference, dM, beta),
        ):
            assert np.array_equal(m1 + m2, np.ones_like(m1))
            assert not np.any(m1 * m2)
            assert set(np.unique(m1)) <= {0.0, 1.0}
            assert np.all((m1 == 0).sum(axis=1) == math.floor(r * width + 1e-9))


class TestApplyMasks:
    def test_identity_and_zero(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(apply_masks(x, np.ones((3, 4))), x)
        np.testing.assert_array_equal(apply_masks(x, np.zeros((3, 4))), np.zeros((3, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            apply_masks(np.ones((3, 4)), np.ones((4, 3)))

    @given(st.integers(0, 2**16), st.floats(0.0, 1.0))
    def test_reconstruction(self, seed, alpha):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((5, 7)) * 1e3
        mp = make_complementary_masks(5, 1, 7, 1, alpha, 0.0, seed)
        assert np.array_equal(apply_masks(x, mp.m1_target) + apply_masks(x, mp.m2_target), x)
