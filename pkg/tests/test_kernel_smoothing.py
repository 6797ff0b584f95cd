from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from prte_dml.kernel_smoothing import (
    Bandwidths,
    InvalidBandwidth,
    central_difference,
    epanechnikov,
    kde,
    nw_regress,
    product_kernel_weights,
    scaled_kernel,
)

finite = st.floats(-50, 50, allow_nan=False)


class TestBandwidths:
    def test_defaults(self):
        bw = Bandwidths()
        assert (bw.h1, bw.h2, bw.delta, bw.alpha) == (2.5, 0.25, 0.01, 0.25)

    @pytest.mark.parametrize("field", ["h1", "h2", "delta"])
    @pytest.mark.parametrize("value", [0.0, -1.0, np.nan, np.inf])
    def test_rejects_nonpositive(self, field, value):
        with pytest.raises(InvalidBandwidth):
            Bandwidths(**{field: value})

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_rejects_alpha_out_of_range(self, alpha):
        with pytest.raises(InvalidBandwidth):
            Bandwidths(alpha=alpha)

    def test_rho_fixes_one(self):
        assert Bandwidths().rho(1.0) == 1.0

    @given(st.floats(1e-6, 1e6), st.floats(0.01, 0.99))
    def test_rho_lies_between_ratio_and_one(self, x, alpha):
        r = Bandwidths(alpha=alpha).rho(x)
        assert min(x, 1.0) - 1e-12 <= r <= max(x, 1.0) + 1e-12

    @given(st.floats(1e-6, 1e3), st.floats(1e-6, 1e3), st.floats(0.01, 1.0))
    def test_rho_is_increasing(self, x, y, alpha):
        lo, hi = sorted((x, y))
        rho = Bandwidths(alpha=alpha).rho
        assert rho(lo) <= rho(hi)


class TestKernel:
    @pytest.mark.parametrize("u, expected", [(0.0, 0.75), (1.0, 0.0), (2.0, 0.0)])
    def test_epanechnikov_values(self, u, expected):
        assert epanechnikov(u) == expected

    @pytest.mark.parametrize("u, h, expected", [(0.0, 2.0, 0.375), (2.0, 2.0, 0.0),
                                                (0.5, 0.25, 0.0)])
    def test_scaled_kernel_values(self, u, h, expected):
        assert scaled_kernel(u, h) == expected

    @given(finite)
    def test_epanechnikov_is_even(self, u):
        assert epanechnikov(u) == epanechnikov(-u)

    def test_epanechnikov_integrates_to_one(self):
        val, _ = integrate.quad(epanechnikov, -1, 1, epsabs=1e-12)
        assert abs(val - 1.0) < 1e-8

    def test_scaled_kernel_rejects_bad_bandwidth(self):
        with pytest.raises(InvalidBandwidth):
            scaled_kernel(0.0, 0.0)


class TestNadarayaWatson:
    def test_single_point_returns_its_target(self):
        assert nw_regress([[0.3, 0.1]], [7.5], [0.2, 0.0], 1.0) == 7.5

    def test_constant_targets(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(30, 2))
        out = nw_regress(x, np.full(30, -2.25), x[:5], 5.0)
        np.testing.assert_allclose(out, -2.25, rtol=0, atol=1e-15)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=(5, 2))
        y = rng.normal(size=5)
        q = np.array([0.1, -0.2])
        h = 3.0
        num = den = 0.0
        for j in range(5):
            w = 1.0
            for k in range(2):
                w *= 0.75 * (1 - ((x[j, k] - q[k]) / h) ** 2) / h
            num += w * y[j]
            den += w
        assert abs(nw_regress(x, y, q, h) - num / den) < 1e-14

    def test_vector_targets_share_weights(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=40)
        t = rng.normal(size=(40, 3))
        q = np.array([0.0, 0.4])
        joint = nw_regress(x, t, q, 0.8)
        for k in range(3):
            np.testing.assert_allclose(joint[:, k], nw_regress(x, t[:, k], q, 0.8), rtol=1e-14)

    def test_empty_neighbourhood_falls_back_to_mean(self):
        diag = Counter()
        out = nw_regress([0.0, 0.1], [1.0, 3.0], 10.0, 0.5, diag)
        assert out == 2.0
        assert diag["empty_neighborhood"] == 1

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.floats(-3, 3), st.sampled_from([0.0, 1.0])), min_size=1,
                    max_size=30), st.floats(-3, 3), st.floats(0.05, 5))
    def test_binary_targets_give_probability(self, pts, q, h):
        x = np.array([p[0] for p in pts])
        s = np.array([p[1] for p in pts])
        val = nw_regress(x, s, q, h)
        assert -1e-12 <= val <= 1 + 1e-12

    @settings(max_examples=50)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_invariant_to_weight_rescaling(self, seed, scale):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(20, 2))
        y = rng.normal(size=20)
        q = rng.normal(size=(4, 2)) * 0.3
        w = product_kernel_weights(x, q, 4.0)
        plain = (w @ y) / w.sum(axis=1)
        scaled = ((scale * w) @ y) / (scale * w).sum(axis=1)
        np.testing.assert_allclose(nw_regress(x, y, q, 4.0), plain, rtol=1e-12)
        np.testing.assert_allclose(scaled, plain, rtol=1e-12)


class TestKde:
    def test_peak(self):
        assert kde([0.4], 0.4, 1.0, normalizer=1) == 0.75

    def test_compact_support(self):
        assert kde([0.0, 0.2], 5.0, 1.0) == 0.0

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(11)
        u = rng.uniform(0, 1, 10)
        direct = sum(max(0.0, 1 - ((v - 0.5) / 0.25) ** 2) * 0.75 / 0.25 for v in u) / 10
        assert abs(kde(u, 0.5, 0.25) - direct) < 1e-14

    @given(st.integers(1, 500))
    def test_scales_with_normalizer(self, n):
        rng = np.random.default_rng(n)
        u = rng.normal(size=25)
        q = np.linspace(-1, 1, 5)
        np.testing.assert_allclose(kde(u, q, 0.7, normalizer=n), kde(u, q, 0.7, normalizer=1) / n,
                                   rtol=1e-14)

    def test_integrates_to_one(self):
        u = np.random.default_rng(5).normal(size=15)
        # integrate piecewise between the kernel support edges, where kde is smooth
        edges = np.unique(np.concatenate([u - 0.6, u + 0.6]))
        val = sum(integrate.quad(lambda q: kde(u, q, 0.6), lo, hi, epsabs=1e-13)[0]
                  for lo, hi in zip(edges[:-1], edges[1:]))
        assert abs(val - 1.0) < 1e-10


class TestCentralDifference:
    @given(finite, st.floats(1e-4, 1.0))
    def test_affine_exact(self, p, delta):
        assert abs(central_difference(lambda x: 3 * x + 1, p, delta) - 3.0) < 1e-8

    @given(st.floats(-10, 10), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5),
           st.floats(1e-3, 1.0))
    def test_quadratic_exact(self, p, a, b, c, delta):
        f = lambda x: a * x * x + b * x + c  # noqa: E731
        assert abs(central_difference(f, p, delta) - (2 * a * p + b)) < 1e-7 * (1 + abs(a) + abs(b)) / delta

    def test_square_at_two(self):
        assert abs(central_difference(lambda x: x * x, 2.0, 0.3) - 4.0) < 1e-13

    def test_cubic_error_is_delta_squared(self):
        assert abs(central_difference(lambda x: x ** 3, 1.0, 0.01) - 3.0001) < 1e-10

    def test_vector_valued(self):
        out = central_difference(lambda x: np.array([x, x * x]), 1.5, 0.1)
        np.testing.assert_allclose(out, [1.0, 3.0], rtol=1e-12)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(InvalidBandwidth):
            central_difference(lambda x: x, 0.0, 0.0)
