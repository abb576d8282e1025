"""Thinning-based NHPP simulation and the synthetic benchmark rates.

Candidates are drawn from a homogeneous process at the ceiling rate and each
is kept with probability ``lam(t) / ceiling``.

Built-in rates (``T`` is the window end)::

    sinusoidal-1   100 sin^2(t / 2)
    sinusoidal-2   100 sin^2(t)
    step-up        20, 40, 60, 80 on the four quarters of [0, T]
    step-down      80, 60, 40, 20 on the four quarters of [0, T]
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.integrate import quad

from .classify import LabeledDataset
from .core import EventSeries, RateModel, rate_at

DEFAULT_WINDOW = 2 * math.pi
SeedLike = int | np.random.SeedSequence | np.random.Generator | None


class CeilingViolationError(ValueError):
    """The rate exceeded its declared ceiling at a candidate point."""


@dataclass(frozen=True, eq=False)
class RateSpec:
    kind: str
    func: Callable[[NDArray[np.float64]], NDArray[np.float64]] = field(repr=False)
    domain_end: float
    ceiling: float
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.domain_end <= 0:
            raise ValueError("domain_end must be positive")
        if self.ceiling < 0 or not np.isfinite(self.ceiling):
            raise ValueError("ceiling must be finite and nonnegative")

    def __call__(self, t: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(self.func(np.asarray(t, dtype=float)), dtype=float)

    def integral(self, a: float = 0.0, b: float | None = None) -> float:
        """Integral of the rate over [a, b] by adaptive quadrature."""
        b = self.domain_end if b is None else b
        points = self.params.get("breakpoints")
        inside = [p for p in (points or ()) if a < p < b] or None
        val, _ = quad(lambda x: float(self(np.array([x]))[0]), a, b, points=inside, limit=200)
        return val


def sinusoidal_1(domain_end: float = DEFAULT_WINDOW, amplitude: float = 100.0) -> RateSpec:
    return RateSpec(
        "sinusoidal-1",
        lambda t: amplitude * np.sin(t / 2) ** 2,
        domain_end,
        amplitude,
        {"amplitude": amplitude},
    )


def sinusoidal_2(domain_end: float = DEFAULT_WINDOW, amplitude: float = 100.0) -> RateSpec:
    return RateSpec(
        "sinusoidal-2",
        lambda t: amplitude * np.sin(t) ** 2,
        domain_end,
        amplitude,
        {"amplitude": amplitude},
    )


def _quarter_steps(kind: str, levels: tuple[float, ...], domain_end: float) -> RateSpec:
    T = float(domain_end)
    breaks = (T / 4, T / 2, 3 * T / 4)
    lv = np.asarray(levels, dtype=float)

    def func(t: NDArray[np.float64]) -> NDArray[np.float64]:
        return lv[np.searchsorted(breaks, t, side="right")]

    return RateSpec(kind, func, T, float(lv.max()), {"levels": list(levels), "breakpoints": list(breaks)})


def step_up(domain_end: float = DEFAULT_WINDOW) -> RateSpec:
    return _quarter_steps("step-up", (20.0, 40.0, 60.0, 80.0), domain_end)


def step_down(domain_end: float = DEFAULT_WINDOW) -> RateSpec:
    return _quarter_steps("step-down", (80.0, 60.0, 40.0, 20.0), domain_end)


def constant(level: float, domain_end: float) -> RateSpec:
    return RateSpec("constant", lambda t: np.full(np.shape(t), float(level)), domain_end, float(level))


def _grid_ceiling(func, domain_end: float) -> float:
    grid = np.linspace(0.0, domain_end, 10_000)
    return 1.01 * float(np.max(func(grid)))


def from_model(model: RateModel) -> RateSpec:
    """Spline rate; ceiling from a 10^4-point grid with 1% headroom."""
    func = lambda t: np.asarray(rate_at(model, t))
    return RateSpec("spline", func, model.basis.domain_end, _grid_ceiling(func, model.basis.domain_end))


def from_table(times: ArrayLike, values: ArrayLike) -> RateSpec:
    """Piecewise-linear rate through ``(times, values)`` spanning [0, T]."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.ndim != 1 or t.shape != v.shape or t.size < 2:
        raise ValueError("times and values must be 1-d arrays of equal length >= 2")
    if t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise ValueError("table times must start at 0 and increase strictly")
    if np.any(v < 0):
        raise ValueError("table rates must be nonnegative")
    func = lambda x: np.interp(x, t, v)
    return RateSpec("table", func, float(t[-1]), _grid_ceiling(func, float(t[-1])), {"breakpoints": t[1:-1].tolist()})


BUILTIN_RATES: dict[str, Callable[[float], RateSpec]] = {
    "sinusoidal-1": sinusoidal_1,
    "sinusoidal-2": sinusoidal_2,
    "step-up": step_up,
    "step-down": step_down,
}

SYNTHETIC_SETS: dict[int, tuple[str, ...]] = {
    1: ("sinusoidal-1", "sinusoidal-2"),
    2: ("step-up", "step-down"),
    3: ("sinusoidal-1", "sinusoidal-2", "step-up", "step-down"),
}


def thin(rate: RateSpec, rng_seed: SeedLike = None, id: str = "") -> EventSeries:
    """One NHPP realisation on (0, T] by thinning."""
    rng = np.random.default_rng(rng_seed)
    T, ceiling = rate.domain_end, rate.ceiling
    n = rng.poisson(ceiling * T)
    # 1 - U lies in (0, 1], so candidates lie in (0, T]
    candidates = np.sort(T * (1.0 - rng.random(n)))
    u = rng.random(n)
    lam = rate(candidates)
    if np.any(lam > ceiling):
        worst = int(np.argmax(lam))
        raise CeilingViolationError(
            f"rate {lam[worst]!r} at t={candidates[worst]!r} exceeds ceiling {ceiling!r}"
        )
    if np.any(lam < 0):
        raise ValueError("rate is negative at a candidate point")
    kept = candidates[u * ceiling < lam]
    # ties have probability zero but would break strict ordering
    kept = np.unique(kept)
    return EventSeries(kept, T, id)


def make_synthetic_dataset(
    which: int,
    observations_per_class: int = 20,
    rng_seed: int = 0,
    domain_end: float = DEFAULT_WINDOW,
) -> LabeledDataset:
    """Synthetic benchmark set 1, 2 or 3.

    Observations are ordered class by class; ids are ``"c<class>_<j>"``.
    Every observation draws from its own child of ``SeedSequence(rng_seed)``.
    """
    if which not in SYNTHETIC_SETS:
        raise ValueError(f"synthetic set must be 1, 2 or 3, got {which!r}")
    if observations_per_class < 0:
        raise ValueError("observations_per_class must be >= 0")
    kinds = SYNTHETIC_SETS[which]
    rates = [BUILTIN_RATES[k](domain_end) for k in kinds]
    seeds = np.random.SeedSequence(rng_seed).spawn(len(rates) * observations_per_class)
    obs, labels = [], []
    for nu, rate in enumerate(rates):
        for j in range(observations_per_class):
            seed = seeds[nu * observations_per_class + j]
            obs.append(thin(rate, seed, id=f"c{nu + 1}_{j + 1:03d}"))
            labels.append(nu)
    names = tuple(str(i + 1) for i in range(len(rates)))
    if not obs:
        return _empty_dataset(names)
    return LabeledDataset(tuple(obs), np.asarray(labels), names)


def _empty_dataset(names: tuple[str, ...]) -> LabeledDataset:
    return LabeledDataset((), np.empty(0, dtype=np.intp), names)


def synthetic_rates(which: int, domain_end: float = DEFAULT_WINDOW) -> list[RateSpec]:
    """Generating rates of a synthetic set, in class order."""
    return [BUILTIN_RATES[k](domain_end) for k in SYNTHETIC_SETS[which]]
