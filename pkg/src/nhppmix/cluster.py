"""Clustering by EM over a finite mixture of NHPPs.

E-step: membership probabilities from mixing weights and per-component
likelihoods (log space).  M-step: mixing weights are the mean
responsibilities; each component's coefficients are the
responsibility-weighted maximum-likelihood fit.  Each restart begins from
per-class fits to a random labelling with uniform mixing weights, and the
restart with the largest observed-data log-likelihood is kept.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from ._workers import parallel_map
from .basis import BasisSpec
from .classify import LabeledDataset, argmax_lowest, class_log_likelihoods, normalize_log_rows, train
from .core import EventDesign, EventSeries, RateModel
from .optimize import FitConfig, FitReport, fit_mle

logger = logging.getLogger(__name__)

_COLLAPSE_MASS = 1e-8


class ComponentCollapseError(RuntimeError):
    """A component received (almost) no responsibility mass."""

    def __init__(self, component: int, mass: float) -> None:
        super().__init__(f"component {component} collapsed (total responsibility {mass:.3g})")
        self.component = component
        self.mass = mass


class EMFailure(RuntimeError):
    """Every restart failed."""


@dataclass(frozen=True, eq=False)
class MixtureModel:
    basis: BasisSpec
    coefficients: NDArray[np.float64]  # (k, n_basis)
    mixing_weights: NDArray[np.float64]

    def __post_init__(self) -> None:
        C = np.array(self.coefficients, dtype=float, ndmin=2)
        tau = np.array(self.mixing_weights, dtype=float).reshape(-1)
        if C.shape != (tau.size, self.basis.n_basis):
            raise ValueError(f"coefficients shape {C.shape} does not match {tau.size} components")
        if np.any(tau < 0) or np.any(tau > 1) or abs(tau.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixing weights must be a probability vector, got {tau}")
        C.setflags(write=False)
        tau.setflags(write=False)
        object.__setattr__(self, "coefficients", C)
        object.__setattr__(self, "mixing_weights", tau)

    @property
    def k(self) -> int:
        return self.mixing_weights.size

    def component(self, index: int) -> RateModel:
        return RateModel(self.basis, self.coefficients[index])

    def permuted(self, order: Sequence[int]) -> "MixtureModel":
        order = list(order)
        return MixtureModel(self.basis, self.coefficients[order], self.mixing_weights[order])


@dataclass(frozen=True)
class Responsibilities:
    matrix: NDArray[np.float64]  # (n, k)
    degenerate: NDArray[np.bool_]

    def hard_assignments(self) -> NDArray[np.intp]:
        return argmax_lowest(self.matrix)


@dataclass(frozen=True)
class EMConfig:
    k: int = 2
    restarts: int = 3
    convergence_threshold: float = 1e-4
    max_em_iterations: int = 200
    rng_seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)
    workers: int | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.convergence_threshold <= 0:
            raise ValueError("convergence_threshold must be positive")
        if self.max_em_iterations < 1:
            raise ValueError("max_em_iterations must be >= 1")


@dataclass
class RestartResult:
    index: int
    model: MixtureModel | None
    responsibilities: Responsibilities | None
    log_likelihood_trace: list[float]
    converged: bool
    initial_labels: NDArray[np.intp]
    error: str | None = None

    @property
    def final_log_likelihood(self) -> float:
        return self.log_likelihood_trace[-1] if self.log_likelihood_trace else -np.inf


@dataclass
class EMResult:
    model: MixtureModel
    responsibilities: Responsibilities
    log_likelihood_trace: list[float]
    converged: bool
    best_restart: int
    restarts: list[RestartResult]

    @property
    def log_likelihood(self) -> float:
        return self.log_likelihood_trace[-1]

    def __iter__(self):
        # allows ``model, resp, trace = fit_em(...)``
        return iter((self.model, self.responsibilities, self.log_likelihood_trace))


def _as_design(data: Sequence[EventSeries] | EventDesign, basis: BasisSpec) -> EventDesign:
    return data if isinstance(data, EventDesign) else EventDesign.build(basis, list(data))


def _weighted_log_likelihoods(model: MixtureModel, design: EventDesign) -> NDArray[np.float64]:
    with np.errstate(divide="ignore"):
        log_tau = np.log(model.mixing_weights)
    return class_log_likelihoods(model.coefficients, model.basis, design) + log_tau


def observed_log_likelihood(model: MixtureModel, data: Sequence[EventSeries] | EventDesign) -> float:
    """``sum_l log sum_q tau_q L_q(series_l)``."""
    logp = _weighted_log_likelihoods(model, _as_design(data, model.basis))
    return float(np.sum(logsumexp(logp, axis=1)))


def _e_step(model: MixtureModel, design: EventDesign) -> tuple[Responsibilities, float]:
    logp = _weighted_log_likelihoods(model, design)
    matrix, degenerate = normalize_log_rows(logp)
    if np.any(degenerate):
        logger.warning("%d observation(s) have zero likelihood under every component", degenerate.sum())
    return Responsibilities(matrix, degenerate), float(np.sum(logsumexp(logp, axis=1)))


def e_step(model: MixtureModel, data: Sequence[EventSeries] | EventDesign) -> Responsibilities:
    """Membership probabilities of every observation for every component."""
    return _e_step(model, _as_design(data, model.basis))[0]


def m_step(
    responsibilities: Responsibilities | NDArray[np.float64],
    data: Sequence[EventSeries] | EventDesign,
    basis: BasisSpec,
    config: FitConfig | None = None,
    warm_start: MixtureModel | None = None,
    workers: int | None = None,
) -> tuple[MixtureModel, list[FitReport]]:
    """Mixing weights and weighted coefficient fits from responsibilities.

    ``warm_start`` seeds each component's solver with its previous
    coefficients instead of the configured initial values.
    """
    R = responsibilities.matrix if isinstance(responsibilities, Responsibilities) else np.asarray(responsibilities)
    design = _as_design(data, basis)
    n, k = R.shape
    if n != design.n_series:
        raise ValueError(f"responsibilities have {n} rows for {design.n_series} observations")
    mass = R.sum(axis=0)
    for nu in range(k):
        if mass[nu] < _COLLAPSE_MASS:
            raise ComponentCollapseError(nu, float(mass[nu]))
    tau = mass / n
    tau = tau / tau.sum()
    config = config or FitConfig()

    def fit_component(nu: int) -> FitReport:
        cfg = config if warm_start is None else config.with_initial(warm_start.coefficients[nu])
        return fit_mle(design, basis, cfg, weights=R[:, nu])

    reports = parallel_map(fit_component, range(k), workers)
    model = MixtureModel(basis, np.vstack([r.coefficients for r in reports]), tau)
    return model, reports


def random_labels(n: int, k: int, rng: np.random.Generator) -> NDArray[np.intp]:
    """Uniformly random labelling in which every label occurs at least once."""
    if n < k:
        raise ValueError(f"cannot label {n} observations with {k} non-empty classes")
    labels = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
    return rng.permutation(labels)


def _run_restart(
    index: int,
    seed: np.random.SeedSequence,
    series: list[EventSeries],
    design: EventDesign,
    basis: BasisSpec,
    config: EMConfig,
) -> RestartResult:
    rng = np.random.default_rng(seed)
    n, k = design.n_series, config.k
    labels = random_labels(n, k, rng)
    names = tuple(str(i + 1) for i in range(k))
    init = train(LabeledDataset(tuple(series), labels, names), basis, config.fit, workers=config.workers)
    model = MixtureModel(basis, init.coefficients, np.full(k, 1.0 / k))

    resp, ll = _e_step(model, design)
    trace = [ll]
    converged = False
    try:
        for _ in range(config.max_em_iterations):
            model, _ = m_step(resp, design, basis, config.fit, warm_start=model, workers=config.workers)
            resp, ll = _e_step(model, design)
            trace.append(ll)
            if abs(trace[-1] - trace[-2]) < config.convergence_threshold:
                converged = True
                break
    except ComponentCollapseError as exc:
        logger.info("restart %d: %s", index, exc)
        return RestartResult(index, None, None, trace, False, labels, error=str(exc))
    return RestartResult(index, model, resp, trace, converged, labels)


def fit_em(
    data: Sequence[EventSeries],
    basis: BasisSpec,
    config: EMConfig | None = None,
) -> EMResult:
    """Fit a k-component NHPP mixture by EM with random restarts.

    Returns an :class:`EMResult`; it also unpacks as
    ``(model, responsibilities, log_likelihood_trace)``.
    """
    config = config or EMConfig()
    series = list(data)
    n, k = len(series), config.k
    if n < k:
        raise ValueError(f"need at least k={k} observations, got {n}")
    design = EventDesign.build(basis, series)
    seeds = np.random.SeedSequence(config.rng_seed).spawn(config.restarts)
    results = parallel_map(
        lambda i: _run_restart(i, seeds[i], series, design, basis, config),
        range(config.restarts),
        config.workers,
    )
    ok = [r for r in results if r.model is not None]
    if not ok:
        detail = "; ".join(f"restart {r.index}: {r.error}" for r in results)
        raise EMFailure(f"all {len(results)} restarts collapsed ({detail})")
    # max() keeps the first (lowest index) restart among equal likelihoods
    best = max(ok, key=lambda r: r.final_log_likelihood)
    return EMResult(
        model=best.model,
        responsibilities=best.responsibilities,
        log_likelihood_trace=best.log_likelihood_trace,
        converged=best.converged,
        best_restart=best.index,
        restarts=results,
    )
