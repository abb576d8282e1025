"""Supervised classification of event-time observations.

One rate function is fitted per class by pooled maximum likelihood over the
class's training observations; a new observation is scored by the Bayes
posterior over classes, evaluated in log space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from ._workers import parallel_map
from .basis import BasisSpec
from .core import EventDesign, EventSeries, RateModel
from .optimize import FitConfig, FitReport, fit_mle


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Observations with integer class indices ``0 .. k-1``.

    ``class_names`` maps indices to the labels used in files (``"1"``,
    ``"2"``, ... for the synthetic sets).
    """

    observations: tuple[EventSeries, ...]
    labels: NDArray[np.intp]
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        obs = tuple(self.observations)
        labels = np.asarray(self.labels, dtype=np.intp).reshape(-1)
        names = tuple(str(n) for n in self.class_names)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)
        if labels.size != len(obs):
            raise ValueError(f"{len(obs)} observations but {labels.size} labels")
        k = len(names)
        if k < 1:
            raise ValueError("need at least one class")
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"labels must lie in 0..{k - 1}")
        windows = {s.window_end for s in obs}
        if len(windows) > 1:
            raise ValueError(f"observations have different windows: {sorted(windows)}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def window_end(self) -> float:
        return self.observations[0].window_end

    def class_counts(self) -> NDArray[np.intp]:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, index: ArrayLike) -> "LabeledDataset":
        idx = np.asarray(index, dtype=np.intp)
        return LabeledDataset(
            tuple(self.observations[i] for i in idx), self.labels[idx], self.class_names
        )


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    basis: BasisSpec
    coefficients: NDArray[np.float64]  # (k, n_basis)
    class_names: tuple[str, ...]
    priors: NDArray[np.float64] | None = None
    fit_reports: tuple[FitReport, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        C = np.array(self.coefficients, dtype=float, ndmin=2)
        if C.shape != (len(self.class_names), self.basis.n_basis):
            raise ValueError(f"coefficients shape {C.shape} does not match classes/basis")
        C.setflags(write=False)
        object.__setattr__(self, "coefficients", C)
        if self.priors is not None:
            p = np.asarray(self.priors, dtype=float)
            if p.shape != (C.shape[0],) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise ValueError("priors must be a probability vector over the classes")
            object.__setattr__(self, "priors", p)

    @property
    def n_classes(self) -> int:
        return self.coefficients.shape[0]

    def rate_model(self, index: int) -> RateModel:
        return RateModel(self.basis, self.coefficients[index])


@dataclass(frozen=True)
class Prediction:
    posteriors: NDArray[np.float64]  # (n, k)
    labels: NDArray[np.intp]
    degenerate: NDArray[np.bool_]


def train(
    data: LabeledDataset,
    basis: BasisSpec,
    config: FitConfig | None = None,
    priors: ArrayLike | str | None = None,
    workers: int | None = None,
) -> ClassifierModel:
    """Fit one rate per class.

    ``priors`` is ``None`` (uniform), ``"empirical"`` (training class
    frequencies) or an explicit probability vector.
    """
    counts = data.class_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        names = [data.class_names[i] for i in empty]
        raise ValueError(f"classes without training observations: {names}")

    def fit_class(nu: int) -> FitReport:
        members = [s for s, g in zip(data.observations, data.labels) if g == nu]
        return fit_mle(members, basis, config)

    reports = parallel_map(fit_class, range(data.n_classes), workers)
    if isinstance(priors, str):
        if priors != "empirical":
            raise ValueError(f"unknown priors option {priors!r}")
        priors = counts / counts.sum()
    return ClassifierModel(
        basis=basis,
        coefficients=np.vstack([r.coefficients for r in reports]),
        class_names=data.class_names,
        priors=None if priors is None else np.asarray(priors, dtype=float),
        fit_reports=tuple(reports),
    )


def class_log_likelihoods(
    coefficients: NDArray[np.float64], basis: BasisSpec, design: EventDesign
) -> NDArray[np.float64]:
    """``(n_series, k)`` matrix of per-class log-likelihoods."""
    return np.column_stack([design.series_log_likelihoods(c) for c in coefficients])


def normalize_log_rows(logp: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Row-wise softmax of log weights; rows that are all ``-inf`` become uniform."""
    degenerate = np.all(np.isneginf(logp), axis=1)
    safe = np.where(degenerate[:, None], 0.0, logp)
    probs = np.exp(safe - logsumexp(safe, axis=1, keepdims=True))
    return probs, degenerate


def argmax_lowest(probs: NDArray[np.float64]) -> NDArray[np.intp]:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(probs, axis=1)


def predict(model: ClassifierModel, series: Sequence[EventSeries]) -> Prediction:
    design = EventDesign.build(model.basis, list(series))
    logp = class_log_likelihoods(model.coefficients, model.basis, design)
    if model.priors is not None:
        with np.errstate(divide="ignore"):
            logp = logp + np.log(model.priors)
    probs, degenerate = normalize_log_rows(logp)
    labels = argmax_lowest(probs)
    labels[degenerate] = 0
    return Prediction(probs, labels, degenerate)


def posterior(model: ClassifierModel, series: EventSeries) -> NDArray[np.float64]:
    """Class membership probabilities for one observation."""
    return predict(model, [series]).posteriors[0]


def assign(model: ClassifierModel, series: EventSeries) -> int:
    """Most probable class index (ties and degenerate posteriors give 0)."""
    return int(predict(model, [series]).labels[0])
