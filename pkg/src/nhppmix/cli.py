"""Command-line interface.

Exit codes: 0 success, 2 invalid arguments or input, 3 numerical failure
(non-convergence with ``--strict``, or every EM restart collapsing),
4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .basis import BasisSpec
from .classify import ClassifierModel, predict, train
from .cluster import EMConfig, EMFailure, MixtureModel, fit_em
from .core import RateModel, rate_at
from .evaluate import CVConfig, clustering_accuracy, cross_validate
from .optimize import FitConfig, fit_mle
from .simulate import DEFAULT_WINDOW, make_synthetic_dataset

log = logging.getLogger("nhppmix")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class NumericalFailure(RuntimeError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def _add_data_args(p: argparse.ArgumentParser, labels: str | None = None) -> None:
    p.add_argument("--events", type=Path, required=True, help="event CSV (observation_id,event_time)")
    p.add_argument("--meta", type=Path, help="metadata JSON sidecar (default: metadata.json beside --events)")
    p.add_argument("--jitter", action="store_true", help="separate exactly duplicated event times by <= 1e-9*T")
    if labels == "required":
        p.add_argument("--labels", type=Path, required=True, help="labels CSV (observation_id,label)")
    elif labels == "optional":
        p.add_argument("--labels", type=Path, help="labels CSV (observation_id,label)")


def _add_fit_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-basis", type=int, default=100)
    p.add_argument("--order", type=int, default=4, help="spline order (4 = cubic)")
    p.add_argument("--max-iterations", type=int, default=FitConfig.max_iterations)
    p.add_argument("--gradient-tolerance", type=float, default=FitConfig.gradient_tolerance)
    p.add_argument("--constraint", choices=("coefficients", "grid"), default="coefficients")
    p.add_argument("--strict", action="store_true", help="exit 3 if any solver fails to converge")


def _fit_config(args: argparse.Namespace) -> FitConfig:
    return FitConfig(
        max_iterations=args.max_iterations,
        gradient_tolerance=args.gradient_tolerance,
        constraint=args.constraint,
    )


def _basis(args: argparse.Namespace, T: float) -> BasisSpec:
    return BasisSpec.uniform(args.n_basis, args.order, T)


def _load_events(args: argparse.Namespace) -> io.EventTable:
    table = io.read_events(args.events, args.meta, jitter=args.jitter)
    if table.jittered:
        print(f"jittered {table.jittered} duplicate event time(s)")
    return table


def _check_converged(args: argparse.Namespace, reports) -> None:
    bad = [i for i, r in enumerate(reports) if not r.converged]
    if bad:
        msg = f"{len(bad)} fit(s) did not converge"
        if args.strict:
            raise NumericalFailure(msg)
        log.warning(msg)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_simulate(args: argparse.Namespace) -> int:
    data = make_synthetic_dataset(args.set, args.per_class, args.seed, args.window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_events(out / "events.csv", data.observations, window_end=args.window, metadata_path=out / "metadata.json")
    io.write_labels(
        out / "labels.csv",
        [s.id for s in data.observations],
        [data.class_names[g] for g in data.labels],
    )
    counts = [len(s) for s in data.observations]
    print(
        f"synthetic set {args.set}: {len(data.observations)} observations, "
        f"{data.n_classes} labels, {sum(counts)} events -> {out}"
    )
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    table = _load_events(args)
    basis = _basis(args, table.window_end)
    report = fit_mle(table.series, basis, _fit_config(args))
    _check_converged(args, [report])
    diag = {
        "n_observations": len(table.series),
        "converged": report.converged,
        "iterations": report.iterations,
        "final_objective": report.final_objective,
        "kkt_residual": report.kkt_residual,
    }
    io.save_model(args.out, RateModel(basis, report.coefficients), diag)
    print(f"fitted pooled rate over {len(table.series)} observations -> {args.out}")
    return EXIT_OK


def cmd_classify(args: argparse.Namespace) -> int:
    table = _load_events(args)
    if args.model:
        model = io.load_model(args.model)
        if not isinstance(model, ClassifierModel):
            raise io.FormatError(f"{args.model} is not a classifier model")
        if model.basis.domain_end != table.window_end:
            raise io.FormatError("model window does not match the event metadata")
    else:
        if not args.labels:
            raise io.FormatError("classify needs --labels to train or --model to predict")
        data = io.labeled_dataset(table, io.read_labels(args.labels))
        basis = _basis(args, table.window_end)
        priors = None if args.priors == "uniform" else "empirical"
        model = train(data, basis, _fit_config(args), priors=priors)
        _check_converged(args, model.fit_reports)
        if args.model_out:
            diag = {
                "class_sizes": data.class_counts().tolist(),
                "converged": [r.converged for r in model.fit_reports],
            }
            io.save_model(args.model_out, model, diag)
            print(f"trained {model.n_classes}-class model -> {args.model_out}")

    pred = predict(model, table.series)
    header = ["observation_id"] + [f"p_{n}" for n in model.class_names] + ["label", "degenerate"]
    rows = [
        [s.id, *map(_fmt, p), model.class_names[g], int(d)]
        for s, p, g, d in zip(table.series, pred.posteriors, pred.labels, pred.degenerate)
    ]
    _write_csv(args.out, header, rows)
    if args.labels and args.model:
        truth = io.labeled_dataset(table, io.read_labels(args.labels))
        names = [model.class_names[g] for g in pred.labels]
        acc = np.mean([a == truth.class_names[t] for a, t in zip(names, truth.labels)])
        print(f"accuracy {acc:.4f}")
    print(f"posteriors for {len(table.series)} observations -> {args.out}")
    return EXIT_OK


def cmd_cluster(args: argparse.Namespace) -> int:
    table = _load_events(args)
    n = len(table.series)
    if n < args.k:
        raise ValueError(f"need at least k={args.k} observations, got {n}")
    basis = _basis(args, table.window_end)
    config = EMConfig(
        k=args.k,
        restarts=args.restarts,
        convergence_threshold=args.threshold,
        max_em_iterations=args.max_em_iterations,
        rng_seed=args.seed,
        fit=_fit_config(args),
    )
    try:
        result = fit_em(table.series, basis, config)
    except EMFailure as exc:
        raise NumericalFailure(str(exc)) from exc
    if args.strict and not result.converged:
        raise NumericalFailure("EM did not converge within --max-em-iterations")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    diag = {
        "log_likelihood": result.log_likelihood,
        "log_likelihood_trace": result.log_likelihood_trace,
        "converged": result.converged,
        "best_restart": result.best_restart,
        "restart_log_likelihoods": [r.final_log_likelihood for r in result.restarts],
    }
    io.save_model(out / "mixture.json", result.model, diag)
    R = result.responsibilities
    _write_csv(
        out / "responsibilities.csv",
        ["observation_id"] + [f"r_{i + 1}" for i in range(args.k)],
        [[s.id, *map(_fmt, row)] for s, row in zip(table.series, R.matrix)],
    )
    hard = R.hard_assignments()
    _write_csv(out / "assignments.csv", ["observation_id", "cluster"], [[s.id, g + 1] for s, g in zip(table.series, hard)])
    print(f"EM k={args.k}: log-likelihood {result.log_likelihood:.6f}, converged={result.converged} -> {out}")
    if args.labels:
        truth = io.labeled_dataset(table, io.read_labels(args.labels))
        print(f"clustering accuracy {clustering_accuracy(hard, truth.labels):.4f}")
    return EXIT_OK


def cmd_crossval(args: argparse.Namespace) -> int:
    table = _load_events(args)
    data = io.labeled_dataset(table, io.read_labels(args.labels))
    basis = _basis(args, table.window_end)
    cv = CVConfig(folds=args.folds, repeats=args.repeats, rng_seed=args.seed, stratified=not args.unstratified)
    report = cross_validate(data, basis, _fit_config(args), cv)
    io.write_json(args.out, report.to_dict())
    if args.csv:
        rows = report.fold_rows()
        _write_csv(args.csv, list(rows[0]), [[_fmt(v) if isinstance(v, float) else v for v in r.values()] for r in rows])
    tprs = ", ".join(f"{n}: {t:.3f}" for n, t in zip(report.class_names, report.per_class_tpr))
    print(f"mean accuracy {report.accuracy:.4f} (sd {report.accuracy_std:.4f}); TPR {tprs}")
    return EXIT_OK


def cmd_plotdata(args: argparse.Namespace) -> int:
    model = io.load_model(args.model)
    if isinstance(model, RateModel):
        basis, C, names = model.basis, model.coeffs[None, :], ["1"]
    elif isinstance(model, ClassifierModel):
        basis, C, names = model.basis, model.coefficients, list(model.class_names)
    else:
        assert isinstance(model, MixtureModel)
        basis, C, names = model.basis, model.coefficients, [str(i + 1) for i in range(model.k)]
    if args.grid < 2:
        raise ValueError("--grid must be >= 2")
    grid = np.linspace(0.0, basis.domain_end, args.grid)
    curves = [np.maximum(rate_at(RateModel(basis, c), grid), 0.0) for c in C]
    rows = [[_fmt(t), *(_fmt(v[i]) for v in curves)] for i, t in enumerate(grid)]
    _write_csv(args.out, ["t"] + [f"rate_{n}" for n in names], rows)
    print(f"{len(names)} curve(s) on {args.grid} points -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nhppmix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic data set by thinning")
    p.add_argument("--set", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=float, default=DEFAULT_WINDOW, help="window end T (default 2*pi)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one pooled rate function")
    _add_data_args(p)
    _add_fit_args(p)
    p.add_argument("--out", type=Path, required=True, help="model JSON")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("classify", help="train a classifier (with --labels) or predict (with --model)")
    _add_data_args(p, labels="optional")
    _add_fit_args(p)
    p.add_argument("--model", type=Path, help="trained classifier model to predict with")
    p.add_argument("--model-out", type=Path, help="where to save the trained model")
    p.add_argument("--priors", choices=("uniform", "empirical"), default="uniform")
    p.add_argument("--out", type=Path, required=True, help="posterior CSV")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("cluster", help="EM clustering with a k-component NHPP mixture")
    _add_data_args(p, labels="optional")
    _add_fit_args(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--max-em-iterations", type=int, default=200)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("crossval", help="repeated stratified k-fold cross-validation")
    _add_data_args(p, labels="required")
    _add_fit_args(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unstratified", action="store_true")
    p.add_argument("--out", type=Path, required=True, help="metrics JSON")
    p.add_argument("--csv", type=Path, help="per-fold CSV")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("plotdata", help="sample fitted rate functions on a grid")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--grid", type=int, default=1001)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
