import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cstatgof.cstat import c_function, c_gradient, c_per_bin, score
from cstatgof.errors import DomainError
from cstatgof.models import BinnedDataset, Constant, PowerLaw


def c_reference(N, s):
    """Deviance term evaluated in 50-digit arithmetic."""
    with mpmath.workdps(50):
        N, s = mpmath.mpf(int(N)), mpmath.mpf(float(s))
        nlogn = N * mpmath.log(N) if N > 0 else mpmath.mpf(0)
        return float(2 * (s - N * mpmath.log(s) - N + nlogn))


class TestPerBin:
    def test_zero_at_match(self):
        assert c_per_bin(3, 3.0) == 0.0

    def test_zero_count(self):
        assert c_per_bin(0, 2.0) == 4.0

    def test_known_value(self):
        assert c_per_bin(2, 1.0) == pytest.approx(2 * (-1 + 2 * math.log(2)), rel=1e-15)
        assert round(c_per_bin(2, 1.0), 7) == 0.7725887

    @pytest.mark.parametrize("s", [0.0, -1.0, float("nan"), float("inf")])
    def test_rejects_bad_rate(self, s):
        with pytest.raises(DomainError):
            c_per_bin(1, s)

    def test_vectorized(self):
        out = c_per_bin(np.array([0, 1, 2]), np.array([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(out, [2.0, 0.0, 2 * (-1 + 2 * math.log(2))], atol=1e-16)

    def test_near_match_keeps_relative_accuracy(self):
        for N, s in [(100, 100.001), (10**4, 10**4 * (1 + 1e-9)), (7, 6.9999)]:
            assert c_per_bin(N, s) == pytest.approx(c_reference(N, s), rel=1e-12)

    def test_non_negative_on_grid(self):
        N = np.arange(0, 10_001, 37)
        s = np.geomspace(1e-6, 1e4, 301)
        out = c_per_bin(N[:, None], s[None, :])
        assert np.all(out >= 0)

    @pytest.mark.parametrize("k", [1, 2, 5, 50, 1000])
    def test_zero_only_at_match(self, k):
        assert c_per_bin(k, float(k)) == 0.0
        for s in (k + 1.0, k + 0.5, k - 0.5, k * (1 + 1e-6)):
            assert c_per_bin(k, s) > 0


class TestCFunction:
    def test_perfect_fit(self):
        assert c_function(BinnedDataset.on_grid([1, 2]), [1.0, 2.0]).total == 0.0

    def test_swapped(self):
        value = c_function(BinnedDataset.on_grid([2, 1]), [1.0, 2.0])
        assert value.total == pytest.approx(2 * math.log(2), rel=1e-14)

    def test_all_zero(self):
        value = c_function(np.zeros(3, dtype=int), [0.5, 1.5, 4.0])
        assert value.total == pytest.approx(12.0)

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            c_function(BinnedDataset.on_grid([1, 2]), [1.0])

    def test_total_is_sum_of_terms(self, rng):
        N = rng.poisson(3.0, size=100_000)
        s = rng.uniform(0.01, 50, size=N.size)
        value = c_function(N, s)
        assert np.all(value.per_bin >= 0)
        assert abs(value.total - math.fsum(value.per_bin)) == 0.0
        assert abs(value.total - value.per_bin.sum()) < 1e-10 * N.size


class TestGradient:
    def test_zero_at_saturation(self):
        X = np.random.default_rng(0).normal(size=(4, 2))
        s = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(c_gradient(s.astype(int), s, X), 0.0)

    def test_constant_model_at_mean(self):
        g = c_gradient(np.array([1, 2, 3]), np.full(3, 2.0), np.ones((3, 1)))
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_score_identity(self, rng):
        for _ in range(50):
            n, d = rng.integers(2, 40), rng.integers(1, 4)
            s = rng.uniform(0.05, 30, n)
            N = rng.poisson(s)
            X = rng.normal(size=(n, d))
            g = c_gradient(N, s, X)
            np.testing.assert_allclose(g, -2 * score(N, s, X), rtol=1e-12, atol=1e-12)

    def test_matches_finite_differences(self, rng):
        model = PowerLaw.on_grid(30)
        for _ in range(20):
            theta = np.array([rng.uniform(0.5, 20), rng.uniform(-3, 3)])
            N = rng.poisson(model.expected_counts(theta))
            g = c_gradient(N, model.expected_counts(theta), model.gradient(theta))
            fd = np.empty(2)
            for k in range(2):
                h = 1e-6 * (1 + abs(theta[k]))
                up, dn = theta.copy(), theta.copy()
                up[k] += h
                dn[k] -= h
                fd[k] = (c_function(N, model.expected_counts(up)).total
                         - c_function(N, model.expected_counts(dn)).total) / (2 * h)
            np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-7)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-6, 1e4))
def test_per_bin_matches_high_precision(N, s):
    ref = c_reference(N, s)
    got = c_per_bin(N, s)
    assert got >= 0
    assert got == pytest.approx(ref, rel=1e-12, abs=1e-300)
