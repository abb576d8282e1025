import math

import numpy as np
import pytest

from nhppmix import cluster
from nhppmix.basis import BasisSpec
from nhppmix.classify import LabeledDataset, train
from nhppmix.cluster import (
    ComponentCollapseError,
    EMConfig,
    EMFailure,
    MixtureModel,
    e_step,
    fit_em,
    m_step,
    observed_log_likelihood,
    random_labels,
)
from nhppmix.core import EventSeries
from nhppmix.evaluate import clustering_accuracy, match_components
from nhppmix.optimize import FitConfig, fit_mle
from nhppmix.simulate import make_synthetic_dataset, synthetic_rates

from conftest import scipy_design

UNIT = BasisSpec(order=1, knots=[0.0, 1.0], domain_end=1.0)
TWO_PI = 2 * np.pi


def naive_responsibilities(model, series):
    X = scipy_design(model.basis, series.times)
    k = model.basis.order
    integrals = (model.basis.knots[k:] - model.basis.knots[:-k]) / k
    joint = []
    for tau, c in zip(model.mixing_weights, model.coefficients):
        value = tau * math.exp(-float(integrals @ c))
        for lam in X @ c:
            value *= lam
        joint.append(value)
    return np.array(joint) / sum(joint)


@pytest.fixture(scope="module")
def small_set1():
    return make_synthetic_dataset(1, observations_per_class=10, rng_seed=0)


@pytest.fixture(scope="module")
def basis20():
    return BasisSpec.uniform(20, 4, TWO_PI)


@pytest.fixture(scope="module")
def three_way(small_set1, basis20):
    return fit_em(small_set1.observations, basis20, EMConfig(k=3, restarts=4, rng_seed=7))


class TestEStep:
    def test_single_component(self):
        m = MixtureModel(UNIT, [[2.0]], [1.0])
        R = e_step(m, [EventSeries([0.3], 1.0), EventSeries([], 1.0)])
        np.testing.assert_array_equal(R.matrix, 1.0)

    def test_identical_components(self):
        m = MixtureModel(UNIT, [[2.0], [2.0]], [0.5, 0.5])
        R = e_step(m, [EventSeries([0.3, 0.4], 1.0)])
        np.testing.assert_allclose(R.matrix, 0.5, atol=1e-15)

    def test_hand_computed(self):
        m = MixtureModel(UNIT, [[1.0], [2.0]], [0.5, 0.5])
        R = e_step(m, [EventSeries([0.5], 1.0)])
        expected = math.exp(-1) / (math.exp(-1) + 2 * math.exp(-2))
        assert R.matrix[0, 0] == pytest.approx(expected, rel=1e-14)

    def test_naive_products(self, rng):
        for _ in range(200):
            k = int(rng.integers(1, 4))
            basis = BasisSpec.uniform(int(rng.integers(4, 8)), 4, float(rng.uniform(0.5, 3)))
            tau = rng.dirichlet(np.ones(k))
            tau[-1] = 1.0 - tau[:-1].sum()
            m = MixtureModel(basis, rng.uniform(0.2, 3.0, (k, basis.n_basis)), tau)
            T = basis.domain_end
            s = EventSeries(np.unique(T * (1 - rng.random(int(rng.integers(0, 6))))), T)
            np.testing.assert_allclose(e_step(m, [s]).matrix[0], naive_responsibilities(m, s), rtol=1e-10, atol=0)

    def test_degenerate_row(self):
        basis = BasisSpec(1, [0.0, 0.5, 1.0], 1.0)
        m = MixtureModel(basis, [[0.0, 1.0], [0.0, 3.0]], [0.3, 0.7])
        R = e_step(m, [EventSeries([0.2], 1.0), EventSeries([0.7], 1.0)])
        np.testing.assert_array_equal(R.degenerate, [True, False])
        np.testing.assert_array_equal(R.matrix[0], [0.5, 0.5])

    def test_permutation_symmetry(self, small_set1, basis20, rng):
        C = rng.uniform(1, 80, (3, 20))
        m = MixtureModel(basis20, C, [0.2, 0.3, 0.5])
        base = observed_log_likelihood(m, small_set1.observations)
        for order in ([1, 0, 2], [2, 1, 0], [1, 2, 0]):
            moved = observed_log_likelihood(m.permuted(order), small_set1.observations)
            assert abs(moved - base) <= 1e-12 * abs(base)


class TestMStep:
    def test_hard_responsibilities_match_classifier(self, small_set1, basis20):
        R = np.eye(2)[small_set1.labels]
        model, _ = m_step(R, small_set1.observations, basis20)
        clf = train(small_set1, basis20)
        np.testing.assert_allclose(model.coefficients, clf.coefficients, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(model.mixing_weights, [0.5, 0.5])

    def test_uniform_responsibilities(self, small_set1, basis20):
        R = np.full((len(small_set1.observations), 2), 0.5)
        model, _ = m_step(R, small_set1.observations, basis20)
        np.testing.assert_allclose(model.coefficients[0], model.coefficients[1], rtol=0, atol=1e-12)
        np.testing.assert_array_equal(model.mixing_weights, [0.5, 0.5])

    def test_mixing_weights_are_mean_responsibilities(self, small_set1, basis20, rng):
        R = rng.dirichlet(np.ones(3), size=len(small_set1.observations))
        model, _ = m_step(R, small_set1.observations, basis20)
        np.testing.assert_allclose(model.mixing_weights, R.mean(axis=0), rtol=1e-12)
        assert abs(model.mixing_weights.sum() - 1.0) <= 1e-12

    def test_collapse(self, small_set1, basis20):
        R = np.zeros((len(small_set1.observations), 2))
        R[:, 0] = 1.0
        with pytest.raises(ComponentCollapseError):
            m_step(R, small_set1.observations, basis20)

    def test_shape_mismatch(self, small_set1, basis20):
        with pytest.raises(ValueError):
            m_step(np.full((3, 2), 0.5), small_set1.observations, basis20)


class TestMixtureModel:
    @pytest.mark.parametrize("tau", [[0.5, 0.6], [1.2, -0.2], [0.5]])
    def test_invalid_weights(self, tau):
        with pytest.raises(ValueError):
            MixtureModel(UNIT, [[1.0], [2.0]], tau)


def test_random_labels_cover_every_class(rng):
    for n, k in [(2, 2), (5, 4), (40, 4), (3, 1)]:
        for _ in range(20):
            labels = random_labels(n, k, rng)
            assert set(labels.tolist()) == set(range(k))
    with pytest.raises(ValueError):
        random_labels(2, 3, rng)


class TestFitEM:
    def test_single_component_is_pooled_fit(self, small_set1, basis20):
        result = fit_em(small_set1.observations, basis20, EMConfig(k=1, restarts=1))
        ref = fit_mle(list(small_set1.observations), basis20)
        np.testing.assert_allclose(result.model.coefficients[0], ref.coefficients, rtol=1e-6, atol=1e-9)
        assert len(result.log_likelihood_trace) == 2
        assert result.converged

    def test_set1_perfect_assignment(self, small_set1):
        basis = BasisSpec.uniform(100, 4, TWO_PI)
        model, resp, trace = fit_em(small_set1.observations, basis, EMConfig(k=2, restarts=3, rng_seed=0))
        assert clustering_accuracy(resp.hard_assignments(), small_set1.labels) == 1.0
        assert np.all(np.abs(model.mixing_weights - 0.5) < 1e-3)

    def test_ascent_and_normalization(self, basis20):
        cfg = EMConfig(k=2, restarts=1)
        for seed in range(10):
            data = make_synthetic_dataset(2, observations_per_class=6, rng_seed=100 + seed)
            design_obs = data.observations
            rng = np.random.default_rng(seed)
            labels = random_labels(len(design_obs), 2, rng)
            model = MixtureModel(
                basis20, train(LabeledDataset(design_obs, labels, ("1", "2")), basis20).coefficients, [0.5, 0.5]
            )
            previous = -np.inf
            for _ in range(15):
                resp = e_step(model, design_obs)
                assert np.all(np.abs(resp.matrix.sum(axis=1) - 1.0) <= 1e-12)
                ll = observed_log_likelihood(model, design_obs)
                assert ll >= previous - 1e-6 * abs(ll)
                previous = ll
                model, _ = m_step(resp, design_obs, basis20, cfg.fit, warm_start=model)
                assert abs(model.mixing_weights.sum() - 1.0) <= 1e-12

    def test_restart_traces_ascend(self, three_way):
        for r in three_way.restarts:
            trace = np.asarray(r.log_likelihood_trace)
            assert np.all(np.diff(trace) >= -1e-6 * np.abs(trace[1:]))

    def test_best_restart_wins(self, three_way):
        result = three_way
        finals = [r.final_log_likelihood for r in result.restarts if r.model is not None]
        assert result.log_likelihood == max(finals)
        assert result.restarts[result.best_restart].final_log_likelihood == max(finals)

    def test_fixed_point(self, small_set1, basis20):
        cfg = EMConfig(k=2, restarts=1, rng_seed=3)
        model, resp, trace = fit_em(small_set1.observations, basis20, cfg)
        again, _ = m_step(resp, small_set1.observations, basis20, cfg.fit, warm_start=model)
        assert abs(observed_log_likelihood(again, small_set1.observations) - trace[-1]) < cfg.convergence_threshold

    def test_deterministic(self, small_set1, basis20):
        cfg = EMConfig(k=2, restarts=2, rng_seed=11)
        a = fit_em(small_set1.observations, basis20, cfg)
        b = fit_em(small_set1.observations, basis20, cfg)
        for ra, rb in zip(a.restarts, b.restarts):
            assert ra.initial_labels.tobytes() == rb.initial_labels.tobytes()
        assert a.model.coefficients.tobytes() == b.model.coefficients.tobytes()
        assert abs(a.log_likelihood - b.log_likelihood) <= 1e-9 * abs(a.log_likelihood)

    def test_threaded_matches_serial(self, small_set1, basis20):
        serial = fit_em(small_set1.observations, basis20, EMConfig(k=2, restarts=2, rng_seed=5, workers=1))
        threaded = fit_em(small_set1.observations, basis20, EMConfig(k=2, restarts=2, rng_seed=5, workers=4))
        assert serial.model.coefficients.tobytes() == threaded.model.coefficients.tobytes()

    def test_too_few_observations(self, basis20):
        with pytest.raises(ValueError):
            fit_em([EventSeries([1.0], TWO_PI)], basis20, EMConfig(k=2))

    def test_all_restarts_collapse(self, small_set1, basis20, monkeypatch):
        def collapse(*args, **kwargs):
            raise ComponentCollapseError(1, 0.0)

        monkeypatch.setattr(cluster, "m_step", collapse)
        with pytest.raises(EMFailure, match="collapsed"):
            fit_em(small_set1.observations, basis20, EMConfig(k=2, restarts=2))

    def test_collapsed_restart_is_skipped(self, small_set1, basis20, monkeypatch):
        calls = []
        real = cluster.m_step

        def first_call_collapses(*args, **kwargs):
            calls.append(1)
            if len(calls) == 1:
                raise ComponentCollapseError(0, 1e-9)
            return real(*args, **kwargs)

        monkeypatch.setattr(cluster, "m_step", first_call_collapses)
        result = fit_em(small_set1.observations, basis20, EMConfig(k=2, restarts=2, workers=1))
        assert result.restarts[0].model is None and "collapsed" in result.restarts[0].error
        assert result.best_restart == 1

    @pytest.mark.parametrize("kwargs", [dict(k=0), dict(restarts=0), dict(convergence_threshold=0.0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            EMConfig(**kwargs)


@pytest.mark.slow
def test_set3_components_recovered():
    data = make_synthetic_dataset(3, observations_per_class=20, rng_seed=0)
    basis = BasisSpec.uniform(100, 4, TWO_PI)
    result = fit_em(data.observations, basis, EMConfig(k=4, restarts=3, rng_seed=0))
    assert clustering_accuracy(result.responsibilities.hard_assignments(), data.labels) == 1.0
    estimates = [result.model.component(i) for i in range(4)]
    order, errors = match_components(estimates, synthetic_rates(3), TWO_PI)
    assert errors[np.arange(4), order].max() < 0.2
