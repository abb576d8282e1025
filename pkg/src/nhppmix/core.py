"""NHPP likelihood for spline rate functions.

For a series of event times on (0, T] and rate ``lam(t) = sum_m c_m B_m(t)``
the log-likelihood is ``-M(T) + sum_i log lam(t_i)`` with ``M(T)`` the
integral of the rate over the window.  The optimizer minimizes the negated
value ``f(c)``; its gradient and Hessian are provided analytically.

:class:`PooledObjective` evaluates a weighted sum of ``f`` over many series in
one pass and is what the solver, classifier and EM code use.  The
single-series functions below are thin wrappers over it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .basis import BasisSpec, DomainError, design_matrix, local_basis


class NonPositiveRateError(ArithmeticError):
    """The rate is zero (or negative) at an observed event."""


@dataclass(frozen=True, eq=False)
class EventSeries:
    """One observation: strictly increasing event times on (0, window_end]."""

    times: NDArray[np.float64]
    window_end: float
    id: str = ""

    def __post_init__(self) -> None:
        times = np.array(self.times, dtype=float).reshape(-1)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        T = float(self.window_end)
        object.__setattr__(self, "window_end", T)
        if not np.isfinite(T) or T <= 0:
            raise ValueError(f"window_end must be positive and finite, got {T}")
        if not np.all(np.isfinite(times)):
            raise ValueError(f"series {self.id!r}: non-finite event time")
        if times.size and (times[0] <= 0.0 or times[-1] > T):
            raise DomainError(f"series {self.id!r}: event times must lie in (0, {T}]")
        if np.any(np.diff(times) <= 0):
            raise ValueError(f"series {self.id!r}: event times must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size


@dataclass(frozen=True, eq=False)
class RateModel:
    basis: BasisSpec
    coeffs: NDArray[np.float64]

    def __post_init__(self) -> None:
        c = np.array(self.coeffs, dtype=float).reshape(-1)
        if c.size != self.basis.n_basis:
            raise ValueError(f"expected {self.basis.n_basis} coefficients, got {c.size}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def __call__(self, t: ArrayLike) -> NDArray[np.float64]:
        return rate_at(self, t)


def _check_series(basis: BasisSpec, series: EventSeries) -> None:
    if series.window_end != basis.domain_end:
        raise DomainError(
            f"series {series.id!r} has window {series.window_end}, basis has {basis.domain_end}"
        )


@dataclass(frozen=True, eq=False)
class EventDesign:
    """Basis values at every event of a collection of series, stacked.

    ``first``/``values`` hold the local (``order``-wide) basis rows and
    ``owner`` the index of the series each event came from.
    """

    basis: BasisSpec
    first: NDArray[np.intp]
    values: NDArray[np.float64]
    owner: NDArray[np.intp]
    n_series: int
    _cols: NDArray[np.intp] = field(repr=False)

    @classmethod
    def build(cls, basis: BasisSpec, series: Sequence[EventSeries]) -> "EventDesign":
        for s in series:
            _check_series(basis, s)
        times = np.concatenate([s.times for s in series]) if series else np.empty(0)
        owner = np.repeat(np.arange(len(series)), [len(s) for s in series])
        first, values = local_basis(basis, times)
        cols = first[:, None] + np.arange(basis.order)
        return cls(basis, first, values, owner, len(series), cols)

    @property
    def n_events(self) -> int:
        return self.first.size

    def rates(self, coeffs: NDArray[np.float64]) -> NDArray[np.float64]:
        """Rate at every stacked event."""
        return np.einsum("ij,ij->i", self.values, coeffs[self._cols])

    def series_log_rate_sums(self, coeffs: NDArray[np.float64]) -> NDArray[np.float64]:
        """``sum_i log lam(t_i)`` per series; ``-inf`` where the rate hits zero."""
        lam = self.rates(coeffs)
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(lam > 0, np.log(np.where(lam > 0, lam, 1.0)), -np.inf)
        out = np.zeros(self.n_series)
        np.add.at(out, self.owner, logs)
        return out

    def series_log_likelihoods(self, coeffs: ArrayLike) -> NDArray[np.float64]:
        """Log-likelihood of each series under one coefficient vector."""
        c = np.asarray(coeffs, dtype=float)
        return self.series_log_rate_sums(c) - float(c @ self.basis.integrals)


class PooledObjective:
    """``F(c) = sum_l w_l f_l(c)`` over weighted series, with derivatives.

    ``f_l`` is the negative log-likelihood of series ``l``.  Weights must be
    nonnegative; series with zero weight do not contribute.
    """

    def __init__(
        self,
        basis: BasisSpec,
        series: Sequence[EventSeries] | EventDesign,
        weights: ArrayLike | None = None,
    ) -> None:
        design = series if isinstance(series, EventDesign) else EventDesign.build(basis, series)
        if design.basis != basis:
            raise ValueError("design was built for a different basis")
        w = np.ones(design.n_series) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (design.n_series,):
            raise ValueError(f"expected {design.n_series} weights, got shape {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        self.basis = basis
        self.design = design
        self.weights = w
        self.total_weight = float(w.sum())
        ew = w[design.owner]
        keep = ew > 0
        self._first = design.first[keep]
        self._values = design.values[keep]
        self._cols = design._cols[keep]
        self._ew = ew[keep]
        k, nb = basis.order, basis.n_basis
        self._hidx = (self._cols[:, :, None] * nb + self._cols[:, None, :]).ravel()
        self._pairs = (self._values[:, :, None] * self._values[:, None, :]).reshape(-1, k * k)

    def event_rates(self, c: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.einsum("ij,ij->i", self._values, c[self._cols])

    def value(self, c: NDArray[np.float64]) -> float:
        lam = self.event_rates(c)
        if np.any(lam <= 0):
            return np.inf
        return self.total_weight * float(c @ self.basis.integrals) - float(self._ew @ np.log(lam))

    def _checked_rates(self, c: NDArray[np.float64]) -> NDArray[np.float64]:
        lam = self.event_rates(c)
        if np.any(lam <= 0):
            raise NonPositiveRateError(f"rate is {lam.min()!r} at an observed event")
        return lam

    def gradient(self, c: NDArray[np.float64]) -> NDArray[np.float64]:
        lam = self._checked_rates(c)
        coef = self._ew / lam
        g = np.bincount(
            self._cols.ravel(),
            weights=(self._values * coef[:, None]).ravel(),
            minlength=self.basis.n_basis,
        )
        return self.total_weight * self.basis.integrals - g

    def hessian(self, c: NDArray[np.float64]) -> NDArray[np.float64]:
        lam = self._checked_rates(c)
        coef = self._ew / lam**2
        nb = self.basis.n_basis
        h = np.bincount(self._hidx, weights=(self._pairs * coef[:, None]).ravel(), minlength=nb * nb)
        return h.reshape(nb, nb)

    def hessian_factor(self, c: NDArray[np.float64]) -> NDArray[np.float64]:
        """Dense ``X`` with ``X.T @ X`` equal to :meth:`hessian`."""
        lam = self._checked_rates(c)
        X = np.zeros((lam.size, self.basis.n_basis))
        rows = np.arange(lam.size)[:, None]
        X[rows, self._cols] = self._values * (np.sqrt(self._ew) / lam)[:, None]
        return X


def rate_at(model: RateModel, t: ArrayLike) -> NDArray[np.float64] | float:
    """``lam(t)``; scalar in, scalar out."""
    scalar = np.ndim(t) == 0
    first, values = local_basis(model.basis, t)
    cols = first[:, None] + np.arange(model.basis.order)
    out = np.einsum("ij,ij->i", values, model.coeffs[cols])
    return float(out[0]) if scalar else out


def cumulative_intensity(model: RateModel) -> float:
    """``M(T)``, the expected number of events on the window."""
    return float(model.coeffs @ model.basis.integrals)


def log_likelihood(model: RateModel, series: EventSeries) -> float:
    """``-M(T) + sum_i log lam(t_i)``; ``-inf`` if the rate vanishes at an event."""
    _check_series(model.basis, series)
    return -objective(model, series)


def objective(model: RateModel, series: EventSeries) -> float:
    return PooledObjective(model.basis, [series]).value(model.coeffs)


def objective_gradient(model: RateModel, series: EventSeries) -> NDArray[np.float64]:
    return PooledObjective(model.basis, [series]).gradient(model.coeffs)


def objective_hessian(model: RateModel, series: EventSeries) -> NDArray[np.float64]:
    return PooledObjective(model.basis, [series]).hessian(model.coeffs)


def scaled_event_matrix(model: RateModel, series: EventSeries) -> NDArray[np.float64]:
    """Rows ``B(t_i) / lam(t_i)``; the Hessian equals ``X.T @ X``."""
    X = design_matrix(model.basis, series.times)
    lam = X @ model.coeffs
    if np.any(lam <= 0):
        raise NonPositiveRateError("rate is not positive at every event")
    return X / lam[:, None]
