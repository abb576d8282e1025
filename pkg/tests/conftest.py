import numpy as np
import pytest
from scipy.interpolate import BSpline

from nhppmix.basis import BasisSpec
from nhppmix.core import EventSeries


def scipy_design(basis: BasisSpec, t) -> np.ndarray:
    """Reference basis matrix from scipy's B-spline implementation."""
    t = np.asarray(t, dtype=float)
    if t.size == 0:
        return np.zeros((0, basis.n_basis))
    return BSpline.design_matrix(t, basis.knots, basis.degree, extrapolate=False).toarray()


def random_instance(rng: np.random.Generator, max_events: int = 30):
    """A random basis, strictly positive coefficients and an event series."""
    order = int(rng.integers(1, 5))
    n_basis = int(rng.integers(order, order + 9))
    T = float(rng.uniform(0.5, 5.0))
    basis = BasisSpec.uniform(n_basis, order, T)
    c = rng.uniform(0.5, 3.0, size=n_basis)
    times = np.unique(T * (1.0 - rng.random(int(rng.integers(0, max_events + 1)))))
    return basis, c, EventSeries(times, T)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def cubic_unit():
    return BasisSpec.uniform(10, 4, 1.0)


def pytest_terminal_summary(terminalreporter):
    lines = [
        value
        for reports in terminalreporter.stats.values()
        for rep in reports
        if getattr(rep, "when", None) in ("call", "setup")
        for key, value in getattr(rep, "user_properties", ())
        if key == "acceptance"
    ]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(lines)):
            terminalreporter.write_line(line)
