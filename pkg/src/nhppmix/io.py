"""File formats.

Event table
    CSV ``observation_id,event_time``, one row per event.
Labels
    CSV ``observation_id,label``.
Metadata sidecar
    JSON ``{"window_end": T, "observation_ids": [...]}``.  ``observation_ids``
    is optional; when present it fixes the observation order and lets series
    with no events exist.
Model file
    JSON with ``schema_version``, ``kind`` (``rate``, ``classifier`` or
    ``mixture``), ``basis``, ``components`` and ``diagnostics``.

Floats are written with ``repr`` so every value round-trips exactly.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .basis import BasisSpec
from .classify import ClassifierModel, LabeledDataset
from .cluster import MixtureModel
from .core import EventSeries, RateModel

SCHEMA_VERSION = 1
EVENT_HEADER = ["observation_id", "event_time"]
LABEL_HEADER = ["observation_id", "label"]


class FormatError(ValueError):
    """Malformed or inconsistent input file."""


@dataclass
class EventTable:
    series: list[EventSeries]
    window_end: float
    jittered: int = 0

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.series]


def default_metadata_path(events_path: Path) -> Path:
    return Path(events_path).with_name("metadata.json")


def read_metadata(path: Path) -> dict:
    with open(path) as fh:
        meta = json.load(fh)
    T = meta.get("window_end")
    if not isinstance(T, (int, float)) or not math.isfinite(T) or T <= 0:
        raise FormatError(f"{path}: window_end must be a positive number, got {T!r}")
    return meta


def _jitter_duplicates(times: np.ndarray, T: float) -> tuple[np.ndarray, int]:
    """Spread runs of exactly equal times by at most 1e-9 * T."""
    out = times.copy()
    moved = 0
    i = 0
    while i < out.size:
        j = i
        while j + 1 < out.size and times[j + 1] == times[i]:
            j += 1
        run = j - i + 1
        if run > 1:
            step = 1e-9 * T / run
            # move towards the interior so times stay inside (0, T]
            sign = -1.0 if times[i] > T / 2 else 1.0
            out[i + 1 : j + 1] = times[i] + sign * step * np.arange(1, run)
            moved += run - 1
        i = j + 1
    return np.sort(out), moved


def read_events(
    path: Path,
    metadata: Path | dict | None = None,
    jitter: bool = False,
) -> EventTable:
    """Read an event table and its metadata sidecar.

    Rows outside (0, T] are rejected with their line number; exact duplicate
    times within an observation are an error unless ``jitter`` is set.
    """
    path = Path(path)
    meta = metadata if isinstance(metadata, dict) else read_metadata(metadata or default_metadata_path(path))
    T = float(meta["window_end"])
    listed = meta.get("observation_ids")
    grouped: dict[str, list[float]] = {str(i): [] for i in listed} if listed is not None else {}

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != EVENT_HEADER:
            raise FormatError(f"{path}: expected header {','.join(EVENT_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            obs, raw = row[0].strip(), row[1].strip()
            if not obs:
                raise FormatError(f"{path}:{lineno}: empty observation_id")
            try:
                t = float(raw)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: event_time {raw!r} is not a number") from None
            if not math.isfinite(t) or not 0.0 < t <= T:
                raise FormatError(f"{path}:{lineno}: event_time {raw} outside (0, {T}]")
            if obs not in grouped:
                if listed is not None:
                    raise FormatError(f"{path}:{lineno}: observation {obs!r} not listed in metadata")
                grouped[obs] = []
            grouped[obs].append(t)

    series, jittered = [], 0
    for obs, values in grouped.items():
        times = np.sort(np.asarray(values, dtype=float))
        dup = np.diff(times) == 0
        if np.any(dup):
            if not jitter:
                raise FormatError(
                    f"{path}: observation {obs!r} has {int(dup.sum())} duplicate event time(s); "
                    "use --jitter to separate them"
                )
            times, moved = _jitter_duplicates(times, T)
            jittered += moved
            if np.any(np.diff(times) <= 0):
                raise FormatError(f"{path}: observation {obs!r}: jitter could not separate duplicates")
        series.append(EventSeries(times, T, obs))
    return EventTable(series, T, jittered)


def write_events(
    path: Path,
    series: Sequence[EventSeries],
    window_end: float | None = None,
    metadata_path: Path | None = None,
) -> None:
    """Write the event CSV and its metadata sidecar (``metadata.json`` next to it by default)."""
    path = Path(path)
    windows = {s.window_end for s in series}
    if window_end is not None:
        windows.add(float(window_end))
    if len(windows) != 1:
        raise ValueError("need exactly one window_end for all series")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for s in series:
            for t in s.times.tolist():
                w.writerow([s.id, repr(t)])
    write_json(
        metadata_path or default_metadata_path(path),
        {"window_end": windows.pop(), "observation_ids": [s.id for s in series]},
    )


def read_labels(path: Path) -> dict[str, str]:
    labels: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABEL_HEADER:
            raise FormatError(f"{path}: expected header {','.join(LABEL_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or not row[0].strip() or not row[1].strip():
                raise FormatError(f"{path}:{lineno}: expected observation_id,label")
            obs = row[0].strip()
            if obs in labels:
                raise FormatError(f"{path}:{lineno}: duplicate label for {obs!r}")
            labels[obs] = row[1].strip()
    return labels


def write_labels(path: Path, ids: Sequence[str], labels: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        w.writerows(zip(ids, labels))


def _label_sort_key(name: str) -> tuple:
    try:
        return (0, float(name), name)
    except ValueError:
        return (1, 0.0, name)


def labeled_dataset(table: EventTable, labels: dict[str, str]) -> LabeledDataset:
    """Join events with labels; every label id must name an observation and vice versa."""
    ids = set(table.ids)
    extra = sorted(set(labels) - ids)
    if extra:
        raise FormatError(f"labels reference unknown observations: {extra[:5]}")
    missing = [i for i in table.ids if i not in labels]
    if missing:
        raise FormatError(f"observations without labels: {missing[:5]}")
    names = tuple(sorted(set(labels.values()), key=_label_sort_key))
    index = {n: i for i, n in enumerate(names)}
    y = np.array([index[labels[i]] for i in table.ids], dtype=np.intp)
    return LabeledDataset(tuple(table.series), y, names)


def write_json(path: Path, doc: Any) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, allow_nan=True)
        fh.write("\n")


def _floats(a: np.ndarray) -> list[float]:
    return [float(x) for x in np.asarray(a, dtype=float).ravel()]


def model_document(model: RateModel | ClassifierModel | MixtureModel, diagnostics: dict | None = None) -> dict:
    if isinstance(model, RateModel):
        kind, basis = "rate", model.basis
        components = [{"name": "1", "coefficients": _floats(model.coeffs)}]
        extra: dict = {}
    elif isinstance(model, ClassifierModel):
        kind, basis = "classifier", model.basis
        components = [
            {"name": n, "coefficients": _floats(c)} for n, c in zip(model.class_names, model.coefficients)
        ]
        extra = {"priors": None if model.priors is None else _floats(model.priors)}
    elif isinstance(model, MixtureModel):
        kind, basis = "mixture", model.basis
        components = [{"name": str(i + 1), "coefficients": _floats(c)} for i, c in enumerate(model.coefficients)]
        extra = {"mixing_weights": _floats(model.mixing_weights)}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "basis": basis.to_dict(),
        "components": components,
        **extra,
        "diagnostics": diagnostics or {},
    }


def model_from_document(doc: dict) -> RateModel | ClassifierModel | MixtureModel:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise FormatError(f"model schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
    try:
        basis = BasisSpec.from_dict(doc["basis"])
        comps = doc["components"]
        C = np.array([c["coefficients"] for c in comps], dtype=float)
        names = tuple(str(c["name"]) for c in comps)
        kind = doc["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model file: {exc}") from exc
    if C.ndim != 2 or C.shape[1] != basis.n_basis:
        raise FormatError(f"coefficient vectors must have {basis.n_basis} entries")
    if kind == "rate":
        return RateModel(basis, C[0])
    if kind == "classifier":
        priors = doc.get("priors")
        return ClassifierModel(basis, C, names, None if priors is None else np.asarray(priors, dtype=float))
    if kind == "mixture":
        return MixtureModel(basis, C, np.asarray(doc["mixing_weights"], dtype=float))
    raise FormatError(f"unknown model kind {kind!r}")


def save_model(path: Path, model, diagnostics: dict | None = None) -> None:
    write_json(path, model_document(model, diagnostics))


def load_model(path: Path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_document(doc)
