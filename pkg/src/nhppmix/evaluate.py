"""Evaluation harness: repeated cross-validation, clustering accuracy, rate recovery."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import linear_sum_assignment

from ._workers import parallel_map
from .basis import BasisSpec
from .classify import LabeledDataset, predict, train
from .optimize import FitConfig

_EXHAUSTIVE_MAX_K = 8


@dataclass(frozen=True)
class CVConfig:
    folds: int = 5
    repeats: int = 100
    rng_seed: int = 0
    stratified: bool = True
    workers: int | None = None

    def __post_init__(self) -> None:
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class FoldResult:
    repeat: int
    fold: int
    accuracy: float
    per_class_tpr: list[float]
    confusion: list[list[int]]
    n_test: int


@dataclass
class MetricsReport:
    accuracy: float
    accuracy_std: float
    per_class_tpr: list[float]
    per_class_tpr_std: list[float]
    confusion_matrix: list[list[int]]
    class_names: list[str]
    folds: list[FoldResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def fold_rows(self) -> list[dict]:
        """Flat per-fold records, one column per class TPR."""
        rows = []
        for f in self.folds:
            row = {"repeat": f.repeat, "fold": f.fold, "n_test": f.n_test, "accuracy": f.accuracy}
            for name, tpr in zip(self.class_names, f.per_class_tpr):
                row[f"tpr_{name}"] = tpr
            rows.append(row)
        return rows


def confusion_matrix(truth: ArrayLike, predicted: ArrayLike, k: int) -> NDArray[np.int64]:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(truth, dtype=np.intp)
    p = np.asarray(predicted, dtype=np.intp)
    if t.shape != p.shape:
        raise ValueError("truth and predictions differ in length")
    return np.bincount(t * k + p, minlength=k * k).reshape(k, k)


def accuracy_and_tpr(confusion: NDArray[np.int64]) -> tuple[float, NDArray[np.float64]]:
    """Accuracy and per-class TPR; a class absent from the truth gets NaN."""
    total = confusion.sum()
    acc = float(np.trace(confusion) / total) if total else np.nan
    rows = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        tpr = np.where(rows > 0, np.diag(confusion) / np.where(rows > 0, rows, 1), np.nan)
    return acc, tpr


def fold_partition(
    labels: NDArray[np.intp], folds: int, rng: np.random.Generator, stratified: bool = True
) -> NDArray[np.intp]:
    """Fold index for every observation.

    Stratified partitions shuffle each class and deal its members round-robin,
    continuing the deal from where the previous class stopped so fold sizes
    stay balanced overall.
    """
    n = labels.size
    fold_of = np.empty(n, dtype=np.intp)
    if not stratified:
        fold_of[rng.permutation(n)] = np.arange(n) % folds
        return fold_of
    offset = 0
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        fold_of[members] = (offset + np.arange(members.size)) % folds
        offset += members.size
    return fold_of


def cross_validate(
    data: LabeledDataset,
    basis: BasisSpec,
    fit_config: FitConfig | None = None,
    cv: CVConfig | None = None,
) -> MetricsReport:
    """Repeated k-fold cross-validation of the NHPP classifier."""
    cv = cv or CVConfig()
    k = data.n_classes
    counts = data.class_counts()
    if cv.stratified and counts.min() < cv.folds:
        small = [data.class_names[i] for i in np.flatnonzero(counts < cv.folds)]
        raise ValueError(f"classes {small} have fewer than {cv.folds} members")
    if not cv.stratified and data.labels.size < cv.folds:
        raise ValueError(f"need at least {cv.folds} observations")

    # partitions are drawn up front so results do not depend on scheduling
    rng = np.random.default_rng(cv.rng_seed)
    partitions = [fold_partition(data.labels, cv.folds, rng, cv.stratified) for _ in range(cv.repeats)]
    jobs = [(r, f) for r in range(cv.repeats) for f in range(cv.folds)]

    def run(job: tuple[int, int]) -> FoldResult:
        r, f = job
        test = partitions[r] == f
        model = train(data.subset(np.flatnonzero(~test)), basis, fit_config, workers=1)
        test_idx = np.flatnonzero(test)
        pred = predict(model, [data.observations[i] for i in test_idx])
        cm = confusion_matrix(data.labels[test_idx], pred.labels, k)
        acc, tpr = accuracy_and_tpr(cm)
        return FoldResult(r, f, acc, tpr.tolist(), cm.tolist(), int(test_idx.size))

    results = parallel_map(run, jobs, cv.workers)
    accs = np.array([x.accuracy for x in results])
    tprs = np.array([x.per_class_tpr for x in results], dtype=float)
    total = np.sum([x.confusion for x in results], axis=0)
    return MetricsReport(
        accuracy=float(accs.mean()),
        accuracy_std=float(accs.std()),
        per_class_tpr=np.nanmean(tprs, axis=0).tolist(),
        per_class_tpr_std=np.nanstd(tprs, axis=0).tolist(),
        confusion_matrix=np.asarray(total, dtype=int).tolist(),
        class_names=list(data.class_names),
        folds=results,
    )


def best_label_map(assignments: ArrayLike, truth: ArrayLike) -> dict[int, int]:
    """Injective cluster -> class relabelling maximizing agreement."""
    a = np.asarray(assignments)
    t = np.asarray(truth)
    if a.shape != t.shape:
        raise ValueError(f"length mismatch: {a.size} assignments vs {t.size} labels")
    clusters, a_idx = np.unique(a, return_inverse=True)
    classes, t_idx = np.unique(t, return_inverse=True)
    table = np.zeros((clusters.size, classes.size), dtype=np.int64)
    np.add.at(table, (a_idx, t_idx), 1)

    if max(table.shape) <= _EXHAUSTIVE_MAX_K:
        # exhaustive search over injective maps of the smaller side into the larger
        best, best_pairs = -1, []
        if clusters.size <= classes.size:
            for perm in itertools.permutations(range(classes.size), clusters.size):
                score = table[np.arange(clusters.size), perm].sum()
                if score > best:
                    best, best_pairs = score, list(zip(range(clusters.size), perm))
        else:
            for perm in itertools.permutations(range(clusters.size), classes.size):
                score = table[perm, np.arange(classes.size)].sum()
                if score > best:
                    best, best_pairs = score, list(zip(perm, range(classes.size)))
    else:
        rows, cols = linear_sum_assignment(-table)
        best_pairs = list(zip(rows, cols))
    return {clusters[i].item(): classes[j].item() for i, j in best_pairs}


def clustering_accuracy(assignments: ArrayLike, truth: ArrayLike) -> float:
    """Accuracy after the best relabelling of cluster ids to class ids."""
    a = np.asarray(assignments)
    t = np.asarray(truth)
    if a.shape != t.shape:
        raise ValueError(f"length mismatch: {a.size} assignments vs {t.size} labels")
    if a.size == 0:
        return np.nan
    mapping = best_label_map(a, t)
    hits = sum(1 for x, y in zip(a.tolist(), t.tolist()) if mapping.get(x) == y)
    return hits / a.size


def relative_l2_error(
    estimate: Callable[[NDArray[np.float64]], ArrayLike],
    truth: Callable[[NDArray[np.float64]], ArrayLike],
    domain_end: float,
    n_grid: int = 2001,
) -> float:
    """``||est - truth|| / ||truth||`` over a uniform grid on [0, T]."""
    grid = np.linspace(0.0, domain_end, n_grid)
    e = np.asarray(estimate(grid), dtype=float)
    t = np.asarray(truth(grid), dtype=float)
    return float(np.linalg.norm(e - t) / np.linalg.norm(t))


def match_components(
    estimates: list[Callable], truths: list[Callable], domain_end: float, n_grid: int = 2001
) -> tuple[list[int], NDArray[np.float64]]:
    """Pair each true rate with a distinct estimate minimizing total relative L2 error.

    Returns the estimate index chosen for each truth and the error matrix
    (rows = truths, columns = estimates).
    """
    err = np.array([[relative_l2_error(e, t, domain_end, n_grid) for e in estimates] for t in truths])
    rows, cols = linear_sum_assignment(err)
    order = [0] * len(truths)
    for r, c in zip(rows, cols):
        order[r] = int(c)
    return order, err
