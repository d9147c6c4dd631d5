"""CSV/JSON serialisation of datasets.

A dataset directory holds three files:

``subjects.csv``
    ``id, treatment, x_1..x_q, tc, t1_time, t1_event`` followed by one column
    ``<variable>_<j>`` per longitudinal variable and visit; an empty cell is a
    missing value.
``events.csv``
    ``id, event_time`` rows for the recurrent-event variable.
``schema.json``
    ``{"variables": [{"name", "kind", "terminal"}], "grid": [...],
    "baseline": [...]}``.

Floats are written with ``repr`` so a save/load round trip is exact.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, IntervalGrid, VariableSpec, validate_dataset

SUBJECTS = "subjects.csv"
EVENTS = "events.csv"
SCHEMA = "schema.json"


class DataFormatError(ValueError):
    """A data file could not be parsed."""


class DatasetValidationError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n".join(f"  {v}" for v in self.violations[:20])
        more = "" if len(self.violations) <= 20 else f"\n  ... {len(self.violations) - 20} more"
        super().__init__(f"{len(self.violations)} validation failure(s):\n{lines}{more}")


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def _long_columns(d_or_schema, J):
    specs = d_or_schema if isinstance(d_or_schema, (list, tuple)) else d_or_schema.longitudinal_specs
    return [(s.name, j, f"{s.name}_{j}") for s in specs if s.kind in ("continuous", "binary")
            for j in range(J + 1)]


def schema_dict(d: Dataset) -> dict:
    return {
        "variables": [{"name": s.name, "kind": s.kind, "terminal": s.terminal} for s in d.schema],
        "grid": list(d.grid.times),
        "baseline": list(d.baseline_names),
    }


def save_dataset(d: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cols = _long_columns(d, d.grid.J)
    with open(directory / SUBJECTS, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "treatment", *d.baseline_names, "tc", "t1_time", "t1_event",
                    *(c for _, _, c in cols)])
        for i in range(d.n):
            w.writerow([d.ids[i], int(d.treatment[i]), *(fmt(v) for v in d.baseline[i]),
                        fmt(d.censor_time[i]), fmt(d.t1_time[i]), int(d.t1_event[i]),
                        *(fmt(d.longitudinal[name][i, j]) for name, j, _ in cols)])
    with open(directory / EVENTS, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "event_time"])
        for s, t in zip(d.rec_subject, d.rec_time):
            w.writerow([d.ids[s], fmt(t)])
    with open(directory / SCHEMA, "w") as fh:
        json.dump(schema_dict(d), fh, indent=2)
        fh.write("\n")
    return directory


def _number(cell, where, column, integer=False, allow_empty=False):
    cell = cell.strip()
    if cell == "":
        if allow_empty:
            return math.nan
        raise DataFormatError(f"{where}, column {column!r}: empty cell")
    try:
        value = float(cell)
    except ValueError:
        raise DataFormatError(f"{where}, column {column!r}: cannot parse {cell!r} as a number") from None
    if integer:
        if value != int(value):
            raise DataFormatError(f"{where}, column {column!r}: expected an integer, got {cell!r}")
        return int(value)
    return value


def load_schema(schema_file):
    try:
        with open(schema_file) as fh:
            raw = json.load(fh)
        schema = tuple(VariableSpec(v["name"], v["kind"], bool(v.get("terminal", False)))
                       for v in raw["variables"])
        grid = IntervalGrid(tuple(raw["grid"]))
        baseline = tuple(raw.get("baseline", ()))
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"{schema_file}: invalid schema ({e})") from e
    return schema, grid, baseline


def load_dataset(subjects_file, events_file, schema_file, validate: bool = True) -> Dataset:
    schema, grid, baseline = load_schema(schema_file)
    with open(subjects_file, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{subjects_file}: empty file")
    header = [h.strip() for h in rows[0]]
    if not baseline:
        baseline = tuple(h for h in header if h.startswith("x_"))
    long_cols = _long_columns(list(schema), grid.J)
    expected = ["id", "treatment", *baseline, "tc", "t1_time", "t1_event", *(c for _, _, c in long_cols)]
    missing = [c for c in expected if c not in header]
    if missing:
        raise DataFormatError(f"{subjects_file}: missing columns {missing}")
    pos = {c: header.index(c) for c in expected}
    n = len(rows) - 1
    ids, trt, tc, t1, ev = [], [], [], [], []
    base = np.zeros((n, len(baseline)))
    long = {s.name: np.full((n, grid.J + 1), np.nan) for s in schema if s.kind in ("continuous", "binary")}
    for r, row in enumerate(rows[1:]):
        line = f"{subjects_file} line {r + 2}"
        if len(row) != len(header):
            raise DataFormatError(f"{line}: expected {len(header)} cells, found {len(row)}")
        ids.append(row[pos["id"]].strip())
        trt.append(_number(row[pos["treatment"]], line, "treatment", integer=True))
        for k, b in enumerate(baseline):
            base[r, k] = _number(row[pos[b]], line, b)
        tc.append(_number(row[pos["tc"]], line, "tc"))
        t1.append(_number(row[pos["t1_time"]], line, "t1_time"))
        ev.append(_number(row[pos["t1_event"]], line, "t1_event", integer=True))
        for name, j, col in long_cols:
            long[name][r, j] = _number(row[pos[col]], line, col, allow_empty=True)
    index = {sid: i for i, sid in enumerate(ids)}
    if len(index) != len(ids):
        raise DataFormatError(f"{subjects_file}: duplicate subject ids")
    rec_s, rec_t = [], []
    events_file = Path(events_file)
    if events_file.exists():
        with open(events_file, newline="") as fh:
            erows = list(csv.reader(fh))
        if erows:
            eh = [h.strip() for h in erows[0]]
            if eh[:2] != ["id", "event_time"]:
                raise DataFormatError(f"{events_file}: header must be id,event_time")
            for r, row in enumerate(erows[1:]):
                line = f"{events_file} line {r + 2}"
                if not row:
                    continue
                sid = row[0].strip()
                if sid not in index:
                    raise DataFormatError(f"{line}: unknown subject {sid!r}")
                rec_s.append(index[sid])
                rec_t.append(_number(row[1] if len(row) > 1 else "", line, "event_time"))
    rec_s = np.asarray(rec_s, dtype=np.int64)
    rec_t = np.asarray(rec_t, dtype=float)
    order = np.argsort(rec_s, kind="stable")
    d = Dataset(schema=schema, grid=grid, ids=ids, treatment=trt, baseline=base,
                censor_time=tc, t1_time=t1, t1_event=ev, rec_subject=rec_s[order],
                rec_time=rec_t[order], longitudinal=long, baseline_names=baseline)
    if validate:
        report = validate_dataset(d)
        if report:
            raise DatasetValidationError(report)
    return d


def load_dataset_dir(directory, validate: bool = True) -> Dataset:
    directory = Path(directory)
    return load_dataset(directory / SUBJECTS, directory / EVENTS, directory / SCHEMA, validate)


def save_imputations(datasets: Sequence[Dataset], directory) -> list[Path]:
    directory = Path(directory)
    width = max(3, len(str(len(datasets))))
    return [save_dataset(d, directory / f"imp_{i:0{width}d}")
            for i, d in enumerate(datasets, start=1)]
