"""Constrained maximum-likelihood fitting of spline rate coefficients.

Minimizes ``F(c) = sum_l w_l f_l(c)`` subject to a nonnegative rate with a
log-barrier interior-point method.  Each barrier level is centred by damped
Newton steps using the analytic Hessian; the barrier weight then shrinks
geometrically until the projected-gradient KKT residual is below tolerance.

Two constraint forms are supported:

``"coefficients"`` (default)
    ``c_m >= floor`` for every m.  B-splines are nonnegative, so this keeps
    the rate nonnegative everywhere.  Newton systems are solved in the
    affine-scaled variables ``u = (c - floor) * ...`` which keeps them well
    conditioned as coefficients approach the floor.
``"grid"``
    ``lam(t_g) >= floor`` on a uniform grid of the window; coefficients may
    go negative as long as the sampled rate does not.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from .basis import BasisSpec, design_matrix
from .core import EventDesign, EventSeries, PooledObjective

logger = logging.getLogger(__name__)

_CONDITION_LIMIT = 1e12
_CENTERING_TOL = 1e-24
# below this decrement function values are dominated by roundoff; take pure Newton steps
_QUADRATIC_REGION = 1e-10
_MIN_BARRIER = 1e-24
_ARMIJO = 1e-4
# duals are kept within this factor of their central value mu / slack
_DUAL_SPREAD = 1e3
_BARRIER_TO_TOLERANCE = 1e-2


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-8
    barrier_initial: float = 1.0
    barrier_shrink: float = 0.2
    coefficient_floor: float = 1e-10
    initial_coefficients: tuple[float, ...] | None = None
    constraint: str = "coefficients"
    constraint_grid_size: int = 1001

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.gradient_tolerance <= 0 or self.barrier_initial <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.barrier_shrink < 1:
            raise ValueError("barrier_shrink must lie in (0, 1)")
        if self.coefficient_floor < 0:
            raise ValueError("coefficient_floor must be >= 0")
        if self.constraint not in ("coefficients", "grid"):
            raise ValueError(f"unknown constraint form {self.constraint!r}")
        if self.initial_coefficients is not None:
            object.__setattr__(
                self, "initial_coefficients", tuple(float(x) for x in self.initial_coefficients)
            )

    def with_initial(self, coeffs: ArrayLike | None) -> "FitConfig":
        init = None if coeffs is None else tuple(np.asarray(coeffs, dtype=float).tolist())
        return dataclasses.replace(self, initial_coefficients=init)


@dataclass
class FitReport:
    coefficients: NDArray[np.float64]
    final_objective: float
    objective_trace: list[float]
    iterations: int
    converged: bool
    kkt_residual: float = np.nan
    barrier_final: float = np.nan
    gradient_fallbacks: int = 0


class _Barrier:
    """Log-barrier term ``-mu * sum log(A c - floor)`` with A = I or a grid design."""

    def __init__(self, basis: BasisSpec, config: FitConfig) -> None:
        self.floor = config.coefficient_floor
        if config.constraint == "grid":
            grid = np.linspace(0.0, basis.domain_end, config.constraint_grid_size)
            self.A: NDArray[np.float64] | None = design_matrix(basis, grid)
        else:
            self.A = None

    def slack(self, c: NDArray[np.float64]) -> NDArray[np.float64]:
        return (c if self.A is None else self.A @ c) - self.floor

    def direction_slack(self, d: NDArray[np.float64]) -> NDArray[np.float64]:
        return d if self.A is None else self.A @ d


def _max_step(s: NDArray[np.float64], ds: NDArray[np.float64]) -> float:
    neg = ds < 0
    if not np.any(neg):
        return np.inf
    with np.errstate(over="ignore"):
        return float(np.min(-s[neg] / ds[neg]))


def _solve_spd(
    M: NDArray[np.float64], r: NDArray[np.float64], regularize: bool = False
) -> NDArray[np.float64] | None:
    """Solve ``M x = r`` after diagonal equilibration; None if ill-conditioned.

    With ``regularize`` the equilibrated matrix is shifted by a multiple of
    the identity that caps its condition number near the limit, which gives
    a direction between Newton and scaled steepest descent.
    """
    d = np.sqrt(np.diag(M))
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        return None
    Ms = M / np.outer(d, d)
    if regularize:
        # unit diagonal, so the largest eigenvalue is at most n
        Ms[np.diag_indices_from(Ms)] += 10.0 * Ms.shape[0] / _CONDITION_LIMIT
    try:
        L, low = scipy.linalg.cho_factor(Ms, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    diag = np.abs(np.diag(L))
    if not regularize and (diag.max() / diag.min()) ** 2 > _CONDITION_LIMIT:
        return None
    return scipy.linalg.cho_solve((L, low), r / d, check_finite=False) / d


def _solve_factored(J: NDArray[np.float64], r: NDArray[np.float64]) -> NDArray[np.float64] | None:
    """Solve ``J.T J x = r`` through a QR factor of ``J``; None if ill-conditioned.

    The condition estimate is taken on the triangular factor, whose
    condition number is the square root of that of ``J.T J``.
    """
    norms = np.linalg.norm(J, axis=0)
    if np.any(~np.isfinite(norms)) or np.any(norms <= 0):
        return None
    R = scipy.linalg.qr(J / norms, mode="r", check_finite=False)[0][: J.shape[1]]
    diag = np.abs(np.diag(R))
    if diag.min() <= 0 or diag.max() / diag.min() > _CONDITION_LIMIT:
        return None
    y = scipy.linalg.solve_triangular(R, r / norms, trans="T", check_finite=False)
    return scipy.linalg.solve_triangular(R, y, check_finite=False) / norms


def _fallback_direction(M: NDArray[np.float64], r: NDArray[np.float64]) -> NDArray[np.float64]:
    """Damped direction for an ill-conditioned Newton system, else ``-r``."""
    d = _solve_spd(M, -r, regularize=True)
    return -r if d is None or not np.all(np.isfinite(d)) else d


def projected_gradient(c: NDArray[np.float64], g: NDArray[np.float64], floor: float) -> NDArray[np.float64]:
    """``c - P(c - g)`` with P the projection onto ``c >= floor``."""
    return c - np.maximum(c - g, floor)


def fit_mle(
    series: Sequence[EventSeries] | EventDesign,
    basis: BasisSpec,
    config: FitConfig | None = None,
    weights: ArrayLike | None = None,
) -> FitReport:
    """Weighted maximum-likelihood spline coefficients.

    Parameters
    ----------
    series :
        Observations (or a prebuilt :class:`EventDesign` for them).
    basis :
        Basis shared by every series.
    config :
        Solver settings; defaults to :class:`FitConfig()`.
    weights :
        One nonnegative weight per series, default all ones.  Only the
        relative weights matter: the objective is normalized by their sum
        internally, so scaling every weight leaves the fit unchanged.

    Returns
    -------
    FitReport
        ``final_objective`` and ``objective_trace`` are on the unnormalized
        scale ``sum_l w_l f_l(c)``.
    """
    config = config or FitConfig()
    obj = PooledObjective(basis, series, weights)
    if obj.total_weight <= 0:
        raise ValueError("at least one series must have positive weight")
    scale = obj.total_weight
    nb = basis.n_basis

    if config.initial_coefficients is None:
        c = np.ones(nb)
    else:
        c = np.array(config.initial_coefficients, dtype=float)
        if c.shape != (nb,):
            raise ValueError(f"initial_coefficients must have length {nb}")
    barrier = _Barrier(basis, config)
    if np.any(barrier.slack(c) <= 0):
        raise ValueError("initial coefficients violate the nonnegativity constraint")
    if not np.isfinite(obj.value(c)):
        raise ValueError("initial coefficients give a zero rate at an observed event")

    def phi(x: NDArray[np.float64], mu: float) -> float:
        s = barrier.slack(x)
        if np.any(s <= 0):
            return np.inf
        return obj.value(x) / scale - mu * float(np.sum(np.log(s)))

    mu = config.barrier_initial
    z = mu / barrier.slack(c)  # dual estimates for the constraints
    trace = [obj.value(c)]
    steps = 0
    fallbacks = 0
    converged = False
    kkt = np.inf

    while True:
        # centre on the barrier path for the current mu (primal-dual Newton)
        prev_decrement = np.inf
        centred = False
        while steps < config.max_iterations:
            newton = True
            g = obj.gradient(c) / scale
            H = obj.hessian(c) / scale
            s = barrier.slack(c)
            if barrier.A is None:
                # affine scaling: c = floor + s, step d = s * u
                r = s * g - mu
                M = (s[:, None] * H) * s[None, :]
                M[np.diag_indices_from(M)] += s * z
                u = _solve_spd(M, -r)
                if u is None:
                    fallbacks += 1
                    newton = False
                    u = _fallback_direction(M, r)
                decrement = float(-r @ u)
                d = s * u
            else:
                # M = J.T J is formed only for the fallback; the step itself
                # comes from a QR factor of J, which squares less of the
                # barrier's ill-conditioning into the solve
                A = barrier.A
                r = g - A.T @ (mu / s)
                J = np.vstack([obj.hessian_factor(c) / np.sqrt(scale), np.sqrt(z / s)[:, None] * A])
                d = _solve_factored(J, -r)
                if d is None:
                    M = J.T @ J
                    fallbacks += 1
                    newton = False
                    d = _fallback_direction(M, r)
                decrement = float(-r @ d)

            if decrement / 2 <= _CENTERING_TOL:
                centred = True
                break
            ds = barrier.direction_slack(d)
            alpha = min(1.0, 0.99 * _max_step(s, ds))
            alpha = min(alpha, 0.99 * _max_step(obj.event_rates(c), obj.event_rates(d)))
            steps += 1
            if newton and decrement < _QUADRATIC_REGION and alpha == 1.0:
                trial = c + d
                stalled = decrement > 0.25 * prev_decrement
                prev_decrement = decrement
            else:
                phi0 = phi(c, mu)
                accepted = False
                for _ in range(60):
                    trial = c + alpha * d
                    if phi(trial, mu) <= phi0 - _ARMIJO * alpha * decrement:
                        accepted = True
                        break
                    alpha *= 0.5
                if not accepted:
                    # no representable decrease left at this barrier level
                    centred = True
                    break
                stalled = False
            if newton:
                dz = (mu - s * z - z * ds) / s
                z = z + min(1.0, 0.99 * _max_step(z, dz)) * dz
            c = trial
            s = barrier.slack(c)
            z = np.clip(z, mu / (_DUAL_SPREAD * s), _DUAL_SPREAD * mu / s) if newton else mu / s
            if stalled:
                centred = True
                break  # roundoff floor: no longer converging quadratically

        trace.append(obj.value(c))
        g = obj.gradient(c) / scale
        if barrier.A is None:
            kkt = float(np.linalg.norm(projected_gradient(c, g, config.coefficient_floor)))
            # an interior coefficient sits about mu / c_m away from its
            # optimum, which a flat objective does not reveal in g, so the
            # barrier must also be small against the tolerance
            done = kkt < config.gradient_tolerance and mu <= _BARRIER_TO_TOLERANCE * config.gradient_tolerance
        else:
            # at a centred point the duality gap is at most mu per constraint;
            # the stationarity residual itself is dominated by roundoff in
            # the nearly active slacks, so the gap is the usable certificate
            kkt = mu * barrier.A.shape[0]
            done = centred and kkt < config.gradient_tolerance
        if done:
            converged = True
            break
        if steps >= config.max_iterations or mu < _MIN_BARRIER:
            break
        mu *= config.barrier_shrink

    if not converged:
        logger.warning("fit_mle stopped after %d steps, KKT residual %.3g", steps, kkt)
    return FitReport(
        coefficients=c,
        final_objective=trace[-1],
        objective_trace=trace,
        iterations=steps,
        converged=converged,
        kkt_residual=kkt,
        barrier_final=mu,
        gradient_fallbacks=fallbacks,
    )
