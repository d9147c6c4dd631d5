"""Dataset representation for monotone-missing longitudinal trial data.

A :class:`Dataset` is stored column-wise: one array per subject-level field,
one ``(n, J+1)`` array per longitudinal variable (NaN marks a missing visit)
and a flat ``(subject index, time)`` table for recurrent events.  Per-subject
:class:`SubjectRecord` objects are available for ingestion and inspection, but
the imputation engine works on the arrays.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

KINDS = ("continuous", "binary", "tte", "ttre")
LONGITUDINAL_KINDS = ("continuous", "binary")

# tolerance used when comparing event/censoring times to grid points
TIME_TOL = 1e-12


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str
    terminal: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if self.terminal and self.kind != "tte":
            raise ValueError("only a tte variable can be terminal")


@dataclass(frozen=True)
class IntervalGrid:
    """Partition ``0 = t_0 < t_1 < ... < t_J = t_max`` of the study period."""

    times: tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        if len(times) < 2:
            raise ValueError("grid needs at least two time points")
        if times[0] != 0.0:
            raise ValueError("grid must start at 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("grid times must be strictly increasing")

    @property
    def J(self) -> int:
        return len(self.times) - 1

    @property
    def t_max(self) -> float:
        return self.times[-1]

    @property
    def widths(self) -> np.ndarray:
        return np.diff(np.asarray(self.times))

    def width(self, j: int) -> float:
        return self.times[j] - self.times[j - 1]

    def last_index_at_or_before(self, t):
        """Largest ``j`` with ``t_j <= t`` (vectorised over ``t``)."""
        idx = np.searchsorted(np.asarray(self.times), np.asarray(t) + TIME_TOL, side="right") - 1
        return idx if np.ndim(idx) else int(idx)

    def interval_of(self, t):
        """Index ``j`` of the half-open interval ``(t_{j-1}, t_j]`` holding ``t``."""
        idx = np.searchsorted(np.asarray(self.times), np.asarray(t) - TIME_TOL, side="left")
        return idx if np.ndim(idx) else int(idx)


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    treatment: int
    baseline: tuple[float, ...]
    censor_time: float
    tte: tuple[float, int]
    recurrent_times: tuple[float, ...] = ()
    longitudinal: dict[str, tuple[Optional[float], ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class IntervalView:
    subject: str
    j: int
    z1: Optional[tuple[float, int]]
    z1_star: int
    z2: tuple[float, ...]
    z2_star: int
    zk: dict[str, Optional[float]]


@dataclass(frozen=True)
class Violation:
    subject: Optional[str]
    reason: str

    def __str__(self):
        who = "dataset" if self.subject is None else f"subject {self.subject}"
        return f"{who}: {self.reason}"


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, immutable trial dataset.

    Attributes:
        schema: variable declarations; exactly one ``tte`` variable.
        grid: visit / interval grid.
        ids: subject identifiers (strings).
        treatment: 0/1 arm indicator.
        baseline: ``(n, q)`` baseline covariates.
        censor_time: last time each subject is in the study (``T_c``).
        t1_time, t1_event: the time-to-event outcome.
        rec_subject, rec_time: recurrent events as a flat table, grouped by
            subject index and time-ordered within subject.
        longitudinal: name -> ``(n, J+1)`` array, NaN where missing.
        baseline_names: column labels for ``baseline``.
    """

    schema: tuple[VariableSpec, ...]
    grid: IntervalGrid
    ids: np.ndarray
    treatment: np.ndarray
    baseline: np.ndarray
    censor_time: np.ndarray
    t1_time: np.ndarray
    t1_event: np.ndarray
    rec_subject: np.ndarray
    rec_time: np.ndarray
    longitudinal: dict
    baseline_names: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.ids)
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "ids", _frozen([str(i) for i in self.ids], dtype=object))
        object.__setattr__(self, "treatment", _frozen(self.treatment, dtype=np.int64))
        base = np.asarray(self.baseline, dtype=float)
        if base.ndim == 1:
            base = base.reshape(n, -1)
        object.__setattr__(self, "baseline", _frozen(base))
        for name in ("censor_time", "t1_time", "rec_time"):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype=float))
        object.__setattr__(self, "t1_event", _frozen(self.t1_event, dtype=np.int64))
        object.__setattr__(self, "rec_subject", _frozen(self.rec_subject, dtype=np.int64))
        long = {}
        for spec in self.schema:
            if spec.kind in LONGITUDINAL_KINDS:
                arr = np.asarray(self.longitudinal[spec.name], dtype=float)
                if arr.shape != (n, self.grid.J + 1):
                    raise ValueError(f"longitudinal {spec.name!r} has shape {arr.shape}")
                long[spec.name] = _frozen(arr)
        object.__setattr__(self, "longitudinal", long)
        names = tuple(self.baseline_names) or tuple(f"x_{k + 1}" for k in range(base.shape[1]))
        if len(names) != base.shape[1]:
            raise ValueError("baseline_names does not match baseline columns")
        object.__setattr__(self, "baseline_names", names)
        if len(self.rec_subject) != len(self.rec_time):
            raise ValueError("rec_subject and rec_time differ in length")

    # -- schema helpers -------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def tte_spec(self) -> VariableSpec:
        return next(s for s in self.schema if s.kind == "tte")

    @property
    def ttre_spec(self) -> Optional[VariableSpec]:
        return next((s for s in self.schema if s.kind == "ttre"), None)

    @property
    def longitudinal_specs(self) -> list[VariableSpec]:
        return [s for s in self.schema if s.kind in LONGITUDINAL_KINDS]

    def index_of(self, subject_id) -> int:
        hits = np.flatnonzero(self.ids == str(subject_id))
        if len(hits) == 0:
            raise KeyError(f"unknown subject {subject_id!r}")
        return int(hits[0])

    def recurrent_times(self, i: int) -> np.ndarray:
        return self.rec_time[self.rec_subject == i]

    def replace(self, **changes) -> "Dataset":
        return dataclasses.replace(self, **changes)

    # -- record-level access ----------------------------------------------
    def subject(self, i: int) -> SubjectRecord:
        long = {
            name: tuple(None if np.isnan(v) else float(v) for v in arr[i])
            for name, arr in self.longitudinal.items()
        }
        return SubjectRecord(
            id=str(self.ids[i]),
            treatment=int(self.treatment[i]),
            baseline=tuple(float(v) for v in self.baseline[i]),
            censor_time=float(self.censor_time[i]),
            tte=(float(self.t1_time[i]), int(self.t1_event[i])),
            recurrent_times=tuple(float(t) for t in self.recurrent_times(i)),
            longitudinal=long,
        )

    def subjects(self) -> Iterator[SubjectRecord]:
        for i in range(self.n):
            yield self.subject(i)

    @classmethod
    def from_subjects(cls, schema: Sequence[VariableSpec], grid: IntervalGrid,
                      subjects: Iterable[SubjectRecord], baseline_names=()) -> "Dataset":
        subjects = list(subjects)
        n = len(subjects)
        q = len(subjects[0].baseline) if subjects else len(baseline_names)
        rec_s, rec_t = [], []
        for i, s in enumerate(subjects):
            rec_s.extend([i] * len(s.recurrent_times))
            rec_t.extend(s.recurrent_times)
        long = {}
        for spec in schema:
            if spec.kind in LONGITUDINAL_KINDS:
                arr = np.full((n, grid.J + 1), np.nan)
                for i, s in enumerate(subjects):
                    vals = s.longitudinal.get(spec.name, ())
                    for j, v in enumerate(vals):
                        if v is not None:
                            arr[i, j] = v
                long[spec.name] = arr
        return cls(
            schema=tuple(schema),
            grid=grid,
            ids=[s.id for s in subjects],
            treatment=[s.treatment for s in subjects],
            baseline=np.array([s.baseline for s in subjects], dtype=float).reshape(n, q),
            censor_time=[s.censor_time for s in subjects],
            t1_time=[s.tte[0] for s in subjects],
            t1_event=[s.tte[1] for s in subjects],
            rec_subject=np.array(rec_s, dtype=np.int64),
            rec_time=np.array(rec_t, dtype=float),
            longitudinal=long,
            baseline_names=tuple(baseline_names),
        )

    def subset(self, rows) -> "Dataset":
        """Dataset restricted to ``rows`` (indices or boolean mask), in order."""
        rows = np.arange(self.n)[rows]
        remap = np.full(self.n, -1)
        remap[rows] = np.arange(len(rows))
        keep = np.isin(self.rec_subject, rows)
        new_s = remap[self.rec_subject[keep]]
        order = np.argsort(new_s, kind="stable")
        return self.replace(
            ids=self.ids[rows],
            treatment=self.treatment[rows],
            baseline=self.baseline[rows],
            censor_time=self.censor_time[rows],
            t1_time=self.t1_time[rows],
            t1_event=self.t1_event[rows],
            rec_subject=new_s[order],
            rec_time=self.rec_time[keep][order],
            longitudinal={k: v[rows] for k, v in self.longitudinal.items()},
        )

    def same_as(self, other: "Dataset") -> bool:
        """Structural equality (NaN-aware)."""
        if self.schema != other.schema or self.grid != other.grid:
            return False
        if self.baseline_names != other.baseline_names:
            return False
        pairs = [
            (self.ids, other.ids), (self.treatment, other.treatment),
            (self.baseline, other.baseline), (self.censor_time, other.censor_time),
            (self.t1_time, other.t1_time), (self.t1_event, other.t1_event),
            (self.rec_subject, other.rec_subject), (self.rec_time, other.rec_time),
        ]
        for a, b in pairs:
            if a.shape != b.shape or not np.array_equal(a, b):
                return False
        if self.longitudinal.keys() != other.longitudinal.keys():
            return False
        return all(
            np.array_equal(self.longitudinal[k], other.longitudinal[k], equal_nan=True)
            for k in self.longitudinal
        )


def _schema_violations(schema) -> list[Violation]:
    out = []
    names = [s.name for s in schema]
    if len(set(names)) != len(names):
        out.append(Violation(None, "variable names are not unique"))
    n_tte = sum(s.kind == "tte" for s in schema)
    if n_tte != 1:
        out.append(Violation(None, f"expected exactly one tte variable, found {n_tte}"))
    if sum(s.kind == "ttre" for s in schema) > 1:
        out.append(Violation(None, "at most one ttre variable is supported"))
    return out


def validate_dataset(d: Dataset) -> list[Violation]:
    """Check every dataset invariant; an empty list means the data are valid."""
    report = _schema_violations(d.schema)
    grid = np.asarray(d.grid.times)
    t_max = d.grid.t_max
    rec_by_subject = np.split(d.rec_time, np.cumsum(np.bincount(d.rec_subject, minlength=d.n))[:-1]) \
        if d.n else []
    if len(d.rec_subject) and np.any(np.diff(d.rec_subject) < 0):
        report.append(Violation(None, "recurrent events are not grouped by subject"))
    if len(d.rec_subject) and (d.rec_subject.min() < 0 or d.rec_subject.max() >= d.n):
        report.append(Violation(None, "recurrent event refers to an unknown subject"))
        rec_by_subject = [np.empty(0)] * d.n
    ids = list(d.ids)
    if len(set(ids)) != len(ids):
        report.append(Violation(None, "subject ids are not unique"))

    for i in range(d.n):
        sid = str(d.ids[i])
        bad = lambda reason: report.append(Violation(sid, reason))  # noqa: E731
        tc, t1, ev = d.censor_time[i], d.t1_time[i], d.t1_event[i]
        if d.treatment[i] not in (0, 1):
            bad("treatment must be 0 or 1")
        if not np.all(np.isfinite(d.baseline[i])):
            bad("non-finite baseline covariate")
        if not (np.isfinite(tc) and 0 < tc <= t_max + 1e-9):
            bad(f"censoring time {tc} outside (0, {t_max}]")
            continue
        if ev not in (0, 1):
            bad("event indicator must be 0 or 1")
        if not (np.isfinite(t1) and t1 > 0):
            bad("tte time must be positive")
        elif t1 > tc + 1e-9:
            bad("tte time after censoring")
        elif ev == 0 and abs(t1 - tc) > 1e-9:
            bad("censored tte time differs from censoring time")
        rec = rec_by_subject[i]
        if len(rec):
            if np.any(~np.isfinite(rec)) or np.any(rec <= 0):
                bad("recurrent event time must be positive")
            if np.any(np.diff(rec) <= 0):
                bad("recurrent event times not strictly increasing")
            if np.any(rec > tc + 1e-9):
                bad("event after censoring")
        observable = grid <= tc + 1e-9
        for spec in d.longitudinal_specs:
            vals = d.longitudinal[spec.name][i]
            present = ~np.isnan(vals)
            if np.any(np.isinf(vals)):
                bad(f"{spec.name}: non-finite value")
            if spec.kind == "binary" and np.any(~np.isin(vals[present], (0.0, 1.0))):
                bad(f"{spec.name}: binary value not in {{0, 1}}")
            if np.any(present[1:] & ~present[:-1]):
                bad(f"{spec.name}: non-monotone longitudinal pattern")
            elif np.any(present & ~observable):
                bad(f"{spec.name}: value observed after censoring")
            elif np.any(~present & observable):
                bad(f"{spec.name}: value missing at or before censoring")
    return report


def last_observed_interval(d: Dataset, subject) -> int:
    """Largest ``j`` with ``t_j <= T_c``; imputation starts at ``j + 1``."""
    i = d.index_of(subject)
    return d.grid.last_index_at_or_before(d.censor_time[i])


def interval_view(d: Dataset, subject, j: int) -> IntervalView:
    """Relative-time representation of one subject's data in interval ``j``.

    ``z1`` is ``(min(T_1 - t_{j-1}, dt_j), event in (t_{j-1}, t_j])`` and is
    ``None`` when the event time is at or before ``t_{j-1}``.  ``z2`` holds the
    recurrent times inside the interval relative to ``t_{j-1}``.
    """
    i = d.index_of(subject)
    if not 1 <= j <= d.grid.J:
        raise IndexError(f"interval index {j} outside 1..{d.grid.J}")
    lo, hi = d.grid.times[j - 1], d.grid.times[j]
    t1, ev = float(d.t1_time[i]), int(d.t1_event[i])
    z1 = None
    if t1 > lo:
        z1 = (min(t1 - lo, hi - lo), int(ev == 1 and t1 <= hi))
    z1_star = int(ev == 1 and t1 <= hi)
    rec = d.recurrent_times(i)
    inside = rec[(rec > lo) & (rec <= hi)]
    zk = {}
    for name, arr in d.longitudinal.items():
        v = arr[i, j]
        zk[name] = None if np.isnan(v) else float(v)
    return IntervalView(
        subject=str(d.ids[i]), j=j, z1=z1, z1_star=z1_star,
        z2=tuple(float(t - lo) for t in inside), z2_star=len(inside), zk=zk,
    )
