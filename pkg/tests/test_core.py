import math

import numpy as np
import pytest

from nhppmix.basis import BasisSpec, DomainError, evaluate_basis, integrate_basis
from nhppmix.core import (
    EventSeries,
    NonPositiveRateError,
    PooledObjective,
    RateModel,
    cumulative_intensity,
    log_likelihood,
    objective,
    objective_gradient,
    objective_hessian,
    rate_at,
    scaled_event_matrix,
)

from conftest import random_instance, scipy_design


def naive_objective(basis, c, series):
    """f(c) from the scipy basis and the knot-span integral identity, summed with fsum."""
    k = basis.order
    integrals = (basis.knots[k:] - basis.knots[:-k]) / k
    lam = scipy_design(basis, series.times) @ c
    return math.fsum((integrals * c).tolist()) - math.fsum(math.log(v) for v in lam)


class TestEventSeries:
    def test_valid(self):
        s = EventSeries([0.1, 0.5, 1.0], 1.0, "a")
        assert len(s) == 3
        assert not s.times.flags.writeable

    def test_empty_allowed(self):
        assert len(EventSeries([], 2.0)) == 0

    @pytest.mark.parametrize("times", [[0.0, 0.5], [0.5, 1.5], [0.3, 0.2], [0.2, 0.2]])
    def test_invalid(self, times):
        with pytest.raises(ValueError):
            EventSeries(times, 1.0)


class TestRate:
    def test_unit_coefficients_give_unit_rate(self, cubic_unit, rng):
        m = RateModel(cubic_unit, np.ones(10))
        np.testing.assert_allclose(rate_at(m, rng.uniform(0, 1, 100)), 1.0, atol=1e-14)

    def test_zero(self, cubic_unit):
        assert rate_at(RateModel(cubic_unit, np.zeros(10)), 0.3) == 0.0

    def test_dot_product_oracle(self, rng):
        basis = BasisSpec.uniform(100, 4, 2 * np.pi)
        c = rng.uniform(0, 50, 100)
        B = evaluate_basis(basis, np.pi)
        direct = 0.0
        for m in range(100):
            direct += c[m] * B[m]
        assert rate_at(RateModel(basis, c), np.pi) == pytest.approx(direct, rel=1e-13)

    def test_domain_checked(self, cubic_unit):
        with pytest.raises(DomainError):
            rate_at(RateModel(cubic_unit, np.ones(10)), 1.5)

    def test_coefficient_count_checked(self, cubic_unit):
        with pytest.raises(ValueError):
            RateModel(cubic_unit, np.ones(9))


class TestCumulativeIntensity:
    def test_unit_rate(self):
        basis = BasisSpec.uniform(12, 4, 10.0)
        assert cumulative_intensity(RateModel(basis, np.ones(12))) == pytest.approx(10.0, rel=1e-14)

    def test_zero(self, cubic_unit):
        assert cumulative_intensity(RateModel(cubic_unit, np.zeros(10))) == 0.0

    def test_grid_quadrature_oracle(self, rng):
        basis = BasisSpec.uniform(20, 4, 3.0)
        m = RateModel(basis, rng.uniform(0, 5, 20))
        grid = np.linspace(0, 3.0, 100_001)
        oracle = np.trapezoid(rate_at(m, grid), grid)
        assert cumulative_intensity(m) == pytest.approx(oracle, rel=1e-8)


class TestLogLikelihood:
    def test_empty_series(self):
        basis = BasisSpec.uniform(6, 4, 5.0)
        m = RateModel(basis, np.ones(6))
        assert log_likelihood(m, EventSeries([], 5.0)) == pytest.approx(-5.0, rel=1e-14)

    def test_single_event_unit_rate(self, cubic_unit):
        m = RateModel(cubic_unit, np.ones(10))
        assert log_likelihood(m, EventSeries([0.37], 1.0)) == pytest.approx(-1.0, abs=1e-14)

    def test_piecewise_constant_by_hand(self):
        # spans [0,1), [1,2), [2,3] with rates 2, 0.5, 3
        basis = BasisSpec(1, [0.0, 1.0, 2.0, 3.0], 3.0)
        m = RateModel(basis, [2.0, 0.5, 3.0])
        s = EventSeries([0.2, 1.5, 2.9], 3.0)
        expected = -(2.0 + 0.5 + 3.0) + math.log(2.0) + math.log(0.5) + math.log(3.0)
        assert log_likelihood(m, s) == pytest.approx(expected, rel=1e-14)

    def test_zero_rate_at_event_is_minus_inf(self):
        basis = BasisSpec(1, [0.0, 0.5, 1.0], 1.0)
        m = RateModel(basis, [0.0, 1.0])
        assert log_likelihood(m, EventSeries([0.25, 0.75], 1.0)) == -np.inf

    def test_window_mismatch(self, cubic_unit):
        with pytest.raises(DomainError):
            log_likelihood(RateModel(cubic_unit, np.ones(10)), EventSeries([0.5], 2.0))

    def test_equals_negative_objective(self, rng):
        for _ in range(10):
            basis, c, s = random_instance(rng)
            m = RateModel(basis, c)
            assert log_likelihood(m, s) == -objective(m, s)

    def test_naive_oracle(self, rng):
        for _ in range(10):
            basis, c, s = random_instance(rng)
            assert objective(RateModel(basis, c), s) == pytest.approx(naive_objective(basis, c, s), rel=1e-12)

    def test_many_events_stay_finite(self):
        # 10,000 events at rate ~1e-3 would underflow a product of rates
        T = 1e7
        basis = BasisSpec.uniform(8, 4, T)
        s = EventSeries(np.linspace(1.0, T, 10_000), T)
        ll = log_likelihood(RateModel(basis, np.full(8, 1e-3)), s)
        assert ll == pytest.approx(-1e4 + 1e4 * math.log(1e-3), rel=1e-12)


class TestGradient:
    def test_empty_series(self, cubic_unit):
        g = objective_gradient(RateModel(cubic_unit, np.ones(10)), EventSeries([], 1.0))
        np.testing.assert_array_equal(g, integrate_basis(cubic_unit))

    def test_unit_rate_single_event(self, cubic_unit):
        t = 0.41
        g = objective_gradient(RateModel(cubic_unit, np.ones(10)), EventSeries([t], 1.0))
        np.testing.assert_allclose(g, integrate_basis(cubic_unit) - evaluate_basis(cubic_unit, t), atol=1e-15)

    def test_central_differences(self, rng):
        h = 1e-6
        for _ in range(20):
            basis, c, s = random_instance(rng)
            g = objective_gradient(RateModel(basis, c), s)
            fd = np.empty_like(c)
            for j in range(c.size):
                e = np.zeros_like(c)
                e[j] = h
                fd[j] = (naive_objective(basis, c + e, s) - naive_objective(basis, c - e, s)) / (2 * h)
            assert np.all(np.abs(g - fd) <= 1e-6 * np.abs(fd) + 1e-8), (g, fd)

    def test_zero_rate_is_error(self):
        basis = BasisSpec(1, [0.0, 0.5, 1.0], 1.0)
        with pytest.raises(NonPositiveRateError):
            objective_gradient(RateModel(basis, [0.0, 1.0]), EventSeries([0.25], 1.0))


class TestHessian:
    def test_empty_series_is_zero(self, cubic_unit):
        H = objective_hessian(RateModel(cubic_unit, np.ones(10)), EventSeries([], 1.0))
        np.testing.assert_array_equal(H, np.zeros((10, 10)))

    def test_explicit_factorization(self, rng):
        for _ in range(20):
            basis, c, s = random_instance(rng)
            H = objective_hessian(RateModel(basis, c), s)
            X = scipy_design(basis, s.times) / (scipy_design(basis, s.times) @ c)[:, None]
            np.testing.assert_allclose(H, X.T @ X, rtol=1e-10, atol=1e-10 * max(1.0, np.abs(H).max()))
            np.testing.assert_allclose(H, scaled_event_matrix(RateModel(basis, c), s).T @ X, rtol=1e-10, atol=1e-12)

    def test_symmetric_psd(self, rng):
        for _ in range(20):
            basis, c, s = random_instance(rng, max_events=60)
            H = objective_hessian(RateModel(basis, c), s)
            assert np.max(np.abs(H - H.T)) <= 1e-12 * max(1.0, np.abs(H).max())
            w = np.linalg.eigvalsh(H)
            assert w.min() >= -1e-8 * max(w.max(), 0.0) - 1e-300

    def test_finite_differences_of_gradient(self, rng):
        h = 1e-6
        for _ in range(10):
            basis, c, s = random_instance(rng)
            m = RateModel(basis, c)
            H = objective_hessian(m, s)
            fd = np.empty_like(H)
            for j in range(c.size):
                e = np.zeros_like(c)
                e[j] = h
                fd[:, j] = (
                    objective_gradient(RateModel(basis, c + e), s) - objective_gradient(RateModel(basis, c - e), s)
                ) / (2 * h)
            scale = max(1.0, np.abs(H).max())
            np.testing.assert_allclose(H, fd, rtol=1e-4, atol=1e-4 * scale)


def test_convexity_probe(rng):
    for _ in range(20):
        basis, c1, s = random_instance(rng)
        c2 = rng.uniform(0.1, 4.0, c1.size)
        f = lambda c: objective(RateModel(basis, c), s)
        for theta in rng.uniform(0, 1, 10):
            assert f(theta * c1 + (1 - theta) * c2) <= theta * f(c1) + (1 - theta) * f(c2) + 1e-9


def test_pooled_weights_match_sum(rng):
    basis = BasisSpec.uniform(8, 3, 2.0)
    c = rng.uniform(0.5, 2, 8)
    series = [EventSeries(np.sort(rng.uniform(0, 2, n)), 2.0) for n in (3, 0, 7)]
    w = np.array([0.2, 1.5, 3.0])
    pooled = PooledObjective(basis, series, w)
    singles = [PooledObjective(basis, [s]) for s in series]
    assert pooled.value(c) == pytest.approx(sum(wi * p.value(c) for wi, p in zip(w, singles)), rel=1e-13)
    np.testing.assert_allclose(pooled.gradient(c), sum(wi * p.gradient(c) for wi, p in zip(w, singles)), rtol=1e-12)
    np.testing.assert_allclose(pooled.hessian(c), sum(wi * p.hessian(c) for wi, p in zip(w, singles)), rtol=1e-12)
