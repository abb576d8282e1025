"""Clamped B-spline bases on an observation window [0, T].

Every rate function in the package is a nonnegative combination of the
functions defined here.  Evaluation uses the Cox-de Boor triangle, which
returns only the ``order`` functions that can be nonzero at a point; dense
rows are built from those local values when callers need them.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray


class DomainError(ValueError):
    """Raised when a time lies outside the basis window [0, T]."""


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """A clamped B-spline family.

    Parameters
    ----------
    order :
        Polynomial degree plus one (cubic = 4).
    knots :
        Nondecreasing knot vector with ``order``-fold knots at 0 and T.
    domain_end :
        Right end T of the window.
    """

    order: int
    knots: NDArray[np.float64]
    domain_end: float

    def __post_init__(self) -> None:
        knots = np.array(self.knots, dtype=float)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "domain_end", float(self.domain_end))
        object.__setattr__(self, "order", int(self.order))

        k, T = self.order, self.domain_end
        if k < 1:
            raise ValueError(f"order must be >= 1, got {k}")
        if not np.isfinite(T) or T <= 0:
            raise ValueError(f"domain_end must be positive and finite, got {T}")
        if knots.ndim != 1 or knots.size < 2 * k:
            raise ValueError(f"need at least {2 * k} knots for order {k}")
        if not np.all(np.isfinite(knots)) or np.any(np.diff(knots) < 0):
            raise ValueError("knots must be finite and nondecreasing")
        if np.any(knots[:k] != 0.0) or np.any(knots[-k:] != T):
            raise ValueError(f"end knots must be repeated {k} times at 0 and {T}")
        interior = knots[k:-k]
        if np.any(interior <= 0.0) or np.any(interior >= T):
            raise ValueError("interior knots must lie strictly inside (0, T)")
        # repeated interior knots would make the rate discontinuous (or a basis
        # function vanish); order 1 is piecewise constant by construction
        limit = max(k - 1, 1)
        if interior.size:
            _, counts = np.unique(interior, return_counts=True)
            if counts.max() > limit:
                raise ValueError(f"interior knot multiplicity must be <= {limit}")

    @classmethod
    def uniform(cls, n_basis: int = 100, order: int = 4, domain_end: float = 1.0) -> "BasisSpec":
        """Clamped basis with ``n_basis - order`` equally spaced interior knots."""
        n_interior = n_basis - order
        if n_interior < 0:
            raise ValueError(f"n_basis ({n_basis}) must be >= order ({order})")
        T = float(domain_end)
        interior = np.linspace(0.0, T, n_interior + 2)[1:-1]
        knots = np.concatenate([np.zeros(order), interior, np.full(order, T)])
        return cls(order=order, knots=knots, domain_end=T)

    @property
    def n_basis(self) -> int:
        return self.knots.size - self.order

    @property
    def degree(self) -> int:
        return self.order - 1

    @cached_property
    def breakpoints(self) -> NDArray[np.float64]:
        """Distinct knot values, i.e. the edges of the polynomial pieces."""
        return np.unique(self.knots)

    @cached_property
    def integrals(self) -> NDArray[np.float64]:
        b = _span_quadrature(self)
        b.setflags(write=False)
        return b

    def to_dict(self) -> dict:
        return {"order": self.order, "knots": self.knots.tolist(), "domain_end": self.domain_end}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(order=d["order"], knots=np.asarray(d["knots"], dtype=float), domain_end=d["domain_end"])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BasisSpec):
            return NotImplemented
        return (
            self.order == other.order
            and self.domain_end == other.domain_end
            and np.array_equal(self.knots, other.knots)
        )

    __hash__ = None  # type: ignore[assignment]


def _check_domain(spec: BasisSpec, t: NDArray[np.float64]) -> None:
    bad = ~((t >= 0.0) & (t <= spec.domain_end))
    if np.any(bad):
        raise DomainError(
            f"{int(bad.sum())} time(s) outside [0, {spec.domain_end}], e.g. {t[bad][0]!r}"
        )


def local_basis(spec: BasisSpec, t: ArrayLike) -> tuple[NDArray[np.intp], NDArray[np.float64]]:
    """Nonzero basis values at each time.

    Returns
    -------
    first :
        Index of the first possibly-nonzero basis function for each time.
    values :
        Array of shape ``(len(t), order)``; ``values[i, a]`` is
        ``B_{first[i] + a}(t[i])``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    _check_domain(spec, t)
    k, knots = spec.order, spec.knots
    # t == T is folded into the last nonempty span so the basis is right-closed
    span = np.searchsorted(knots, t, side="right") - 1
    span = np.clip(span, k - 1, spec.n_basis - 1)

    n = t.size
    values = np.zeros((n, k))
    values[:, 0] = 1.0
    left = np.empty((n, k))
    right = np.empty((n, k))
    for j in range(1, k):
        left[:, j] = t - knots[span + 1 - j]
        right[:, j] = knots[span + j] - t
        saved = np.zeros(n)
        for r in range(j):
            temp = values[:, r] / (right[:, r + 1] + left[:, j - r])
            values[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        values[:, j] = saved
    return span - (k - 1), values


def design_matrix(spec: BasisSpec, t: ArrayLike) -> NDArray[np.float64]:
    """Dense ``(len(t), n_basis)`` matrix of basis values."""
    first, values = local_basis(spec, t)
    out = np.zeros((first.size, spec.n_basis))
    rows = np.arange(first.size)[:, None]
    out[rows, first[:, None] + np.arange(spec.order)] = values
    return out


def evaluate_basis(spec: BasisSpec, t: float) -> NDArray[np.float64]:
    """Vector ``(B_1(t), ..., B_nb(t))`` at a single time."""
    return design_matrix(spec, [t])[0]


def integrate_basis(spec: BasisSpec) -> NDArray[np.float64]:
    """Integrals of every basis function over [0, T]."""
    return spec.integrals.copy()


def _span_quadrature(spec: BasisSpec) -> NDArray[np.float64]:
    # order-point Gauss-Legendre integrates degree 2*order-1 exactly per span
    nodes, weights = np.polynomial.legendre.leggauss(spec.order)
    edges = spec.breakpoints
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    t = (0.5 * (a + b))[:, None] + half[:, None] * nodes[None, :]
    w = half[:, None] * weights[None, :]
    first, values = local_basis(spec, t.ravel())
    idx = first[:, None] + np.arange(spec.order)
    return np.bincount(
        idx.ravel(), weights=(values * w.ravel()[:, None]).ravel(), minlength=spec.n_basis
    )
