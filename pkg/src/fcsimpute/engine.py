"""Sequential interval-by-interval imputation of monotone-missing data.

For each interval ``j = 1..J`` every variable gets a conditional model fitted
on the subjects observed through that interval, given the (observed or
already imputed) history up to ``t_{j-1}``.  One parameter draw is made per
(variable, interval, imputation) and shared by all subjects; residual noise,
Bernoulli outcomes and event gaps are drawn per subject.

Variables are handled in the fixed order: time-to-event, recurrent events,
then longitudinal variables in schema order.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import TIME_TOL, Dataset, LONGITUDINAL_KINDS
from .fitters import (DesignMatrix, FitError, FittedModel, ParameterDraw, draw_glm_params,
                      draw_linear_params, fit_exp_hazard, fit_linear, fit_logistic, fit_negbin)
from .rng import StreamKey, draw_bernoulli, draw_exponential

HISTORY_MODES = ("full", "composite")
DEPENDENCIES = ("full", "reduced")
TTRE_RATE_MODES = ("as_paper", "offset_consistent")
COUNT_SCALES = ("raw", "log1p")
# a drawn recurrent-event rate implying more events than this in one interval
# is treated as a diverged model rather than generated gap by gap
MAX_EXPECTED_EVENTS = 1e4


@dataclass(frozen=True)
class ImputationConfig:
    """Settings for the imputation engine.

    ``dependency="reduced"`` drops longitudinal history from the
    time-to-event/recurrent-event models and clinical-event history from the
    longitudinal models.  ``history_mode="composite"`` conditions on summary
    history only (event-so-far flag, cumulative event count, last value).
    """

    m: int = 5
    by_group: bool = False
    history_mode: str = "full"
    dependency: str = "full"
    ttre_rate_mode: str = "offset_consistent"
    master_seed: int = 0
    include_treatment: bool = True
    # an interval fit with n <= rank + min_extra_rows switches to composite history
    min_extra_rows: int = 2
    # how recurrent-event counts enter a design: as counts or as log(1 + count)
    count_scale: str = "raw"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.history_mode not in HISTORY_MODES:
            raise ValueError(f"history_mode must be one of {HISTORY_MODES}")
        if self.dependency not in DEPENDENCIES:
            raise ValueError(f"dependency must be one of {DEPENDENCIES}")
        if self.ttre_rate_mode not in TTRE_RATE_MODES:
            raise ValueError(f"ttre_rate_mode must be one of {TTRE_RATE_MODES}")
        if self.count_scale not in COUNT_SCALES:
            raise ValueError(f"count_scale must be one of {COUNT_SCALES}")

    def with_(self, **changes) -> "ImputationConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class HistoryVector:
    values: np.ndarray
    labels: tuple[str, ...]


class ImputationState:
    """Mutable working copy of a dataset during one imputation run."""

    def __init__(self, d: Dataset):
        self.d = d
        self.times = np.asarray(d.grid.times)
        self.J = d.grid.J
        self.t_max = d.grid.t_max
        self.C = d.censor_time
        self.t1 = d.t1_time.copy()
        self.ev1 = d.t1_event.copy()
        # TTE still unknown: censored without event before the end of study
        self.pending = (self.ev1 == 0) & (self.C < self.t_max - TIME_TOL)
        self.long = {k: v.copy() for k, v in d.longitudinal.items()}
        self.counts = np.zeros((d.n, self.J + 1), dtype=np.int64)
        if len(d.rec_time):
            np.add.at(self.counts, (d.rec_subject, d.grid.interval_of(d.rec_time)), 1)
        self.new_subject: list[np.ndarray] = []
        self.new_time: list[np.ndarray] = []

    def event_by(self, l: int) -> np.ndarray:
        return ((self.ev1 == 1) & (self.t1 <= self.times[l] + TIME_TOL)).astype(float)

    def missing_at(self, j: int) -> np.ndarray:
        return self.C < self.times[j] - TIME_TOL

    def completed(self) -> Dataset:
        d = self.d
        t1 = np.where(self.pending, self.t_max, self.t1)
        ev1 = np.where(self.pending, 0, self.ev1)
        s = np.concatenate([d.rec_subject] + self.new_subject)
        t = np.concatenate([d.rec_time] + self.new_time)
        order = np.lexsort((t, s))
        return d.replace(
            censor_time=np.full(d.n, self.t_max),
            t1_time=t1, t1_event=ev1,
            rec_subject=s[order], rec_time=t[order],
            longitudinal={k: v.copy() for k, v in self.long.items()},
        )


def _scale_count(count, cfg: ImputationConfig) -> np.ndarray:
    count = np.asarray(count, dtype=float)
    return np.log1p(count) if cfg.count_scale == "log1p" else count


def history_columns(state: ImputationState, rows, j: int, kind: str,
                    cfg: ImputationConfig, mode: Optional[str] = None) -> DesignMatrix:
    """Design for the interval-``j`` model of a ``kind`` variable.

    Full mode stacks ``1, X, [A], y_k(t_0)`` and, for each earlier interval
    ``l``, the event-so-far flag, the interval event count and the visit-``l``
    values.  The time-to-event model never sees the event-so-far flags.
    """
    mode = mode or cfg.history_mode
    d = state.d
    rows = np.asarray(rows)
    tte = d.tte_spec.name
    ttre = d.ttre_spec.name if d.ttre_spec else None
    reduced = cfg.dependency == "reduced"
    use_clinical = not (reduced and kind in LONGITUDINAL_KINDS)
    use_long = not (reduced and kind in ("tte", "ttre"))
    with_tte = use_clinical and kind != "tte"
    with_ttre = use_clinical and ttre is not None

    labels = ["(intercept)"] + list(d.baseline_names)
    cols = [np.ones(len(rows))] + [d.baseline[rows, k] for k in range(d.baseline.shape[1])]
    if cfg.include_treatment and not cfg.by_group:
        labels.append("treatment")
        cols.append(d.treatment[rows].astype(float))
    long_names = [s.name for s in d.longitudinal_specs] if use_long else []

    if mode == "full":
        for l in range(j):
            if l >= 1:
                if with_tte:
                    labels.append(f"{tte}*[{l}]")
                    cols.append(state.event_by(l)[rows])
                if with_ttre:
                    labels.append(f"{ttre}#[{l}]")
                    cols.append(_scale_count(state.counts[rows, l], cfg))
            for name in long_names:
                labels.append(f"{name}[{l}]")
                cols.append(state.long[name][rows, l])
    elif mode == "composite":
        if j >= 2:
            if with_tte:
                labels.append(f"{tte}*[<={j - 1}]")
                cols.append(state.event_by(j - 1)[rows])
            if with_ttre:
                labels.append(f"{ttre}#[<={j - 1}]")
                cols.append(_scale_count(state.counts[rows, 1:j].sum(axis=1), cfg))
        for name in long_names:
            labels.append(f"{name}[{j - 1}]")
            cols.append(state.long[name][rows, j - 1])
    else:
        raise ValueError(f"unknown history mode {mode!r}")
    values = np.column_stack(cols) if cols else np.zeros((len(rows), 0))
    if np.isnan(values).any():
        raise RuntimeError(f"history for interval {j} contains a missing value")
    return DesignMatrix(values, tuple(labels))


def build_history(d: Dataset, subject, j: int, kind: str, mode: str = "full",
                  cfg: Optional[ImputationConfig] = None) -> HistoryVector:
    cfg = cfg or ImputationConfig()
    i = d.index_of(subject)
    X = history_columns(ImputationState(d), [i], j, kind, cfg, mode)
    return HistoryVector(X.values[0], X.labels)


def bias_adjusted_rate(theta_tilde, w, V):
    """``exp(w'theta - w'V w / 2)``; ``w`` may be a matrix of row vectors."""
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    w = np.asarray(w, dtype=float)
    V = np.asarray(V, dtype=float)
    if w.shape[-1] != theta_tilde.size or V.shape != (theta_tilde.size, theta_tilde.size):
        raise ValueError("dimension mismatch")
    quad = np.einsum("...i,ij,...j->...", w, V, w)
    with np.errstate(over="ignore"):
        rate = np.exp(w @ theta_tilde - 0.5 * quad)
    if np.any(~np.isfinite(rate)):
        raise FloatingPointError("bias-adjusted rate is not finite")
    return float(rate) if rate.ndim == 0 else rate


def _exp_gaps(rng, rate):
    z = np.full(rate.shape, np.inf)
    pos = rate > 0
    if pos.any():
        z[pos] = draw_exponential(rng, rate[pos])
    return z


def impute_continuous(state, name, j, draw: ParameterDraw, rng, rows, W: DesignMatrix):
    mean = W.values @ draw.beta_tilde
    sd = np.sqrt(draw.sigma2_tilde or 0.0)
    vals = mean + sd * rng.standard_normal(len(rows)) if len(rows) else mean
    state.long[name][rows, j] = vals
    return vals


def impute_binary(state, name, j, draw: ParameterDraw, rng, rows, W: DesignMatrix):
    p = expit(W.values @ draw.beta_tilde)
    vals = draw_bernoulli(rng, p).astype(float)
    state.long[name][rows, j] = vals
    return vals


def impute_tte(state, j, fit: FittedModel, draw: ParameterDraw, rng, rows, W: DesignMatrix,
               rate=None):
    """Exponential event times from ``max(T_c, t_{j-1})``; unresolved rows carry over."""
    if fit is None and rate is None:
        raise FitError(f"no time-to-event fit for interval {j}")
    lo, hi = state.times[j - 1], state.times[j]
    if rate is None:
        rate = bias_adjusted_rate(draw.beta_tilde, W.values, fit.cov_beta)
    rate = np.broadcast_to(np.asarray(rate, dtype=float), (len(rows),))
    start = np.maximum(state.C[rows], lo)
    z = _exp_gaps(rng, rate)
    hit = z < hi - start
    r = rows[hit]
    state.t1[r] = start[hit] + z[hit]
    state.ev1[r] = 1
    state.pending[r] = False
    return hit


def impute_ttre(state, j, fit: FittedModel, draw: ParameterDraw, rng, rows, W: DesignMatrix,
                mode: str = "offset_consistent", rate=None):
    """Append recurrent events in ``(max(T_c, t_{j-1}), t_j]`` gap by gap."""
    if fit is None and rate is None:
        raise FitError(f"no recurrent-event fit for interval {j}")
    lo, hi = state.times[j - 1], state.times[j]
    if rate is None:
        rate = bias_adjusted_rate(draw.beta_tilde, W.values, fit.cov_beta)
        if mode == "as_paper":
            rate = rate / (hi - lo)
        elif mode != "offset_consistent":
            raise ValueError(f"unknown ttre rate mode {mode!r}")
    rate = np.broadcast_to(np.asarray(rate, dtype=float), (len(rows),))
    cur = np.maximum(state.C[rows], lo)
    expected = rate * (hi - cur)
    if np.any(expected > MAX_EXPECTED_EVENTS):
        raise FitError(f"interval {j}: drawn recurrent-event rate implies {float(expected.max()):.3g} "
                       f"expected events for one subject; the count model has diverged")
    active = np.arange(len(rows))
    added_s, added_t = [], []
    while active.size:
        z = _exp_gaps(rng, rate[active])
        hit = z < hi - cur[active]
        active = active[hit]
        if active.size == 0:
            break
        cur[active] = cur[active] + z[hit]
        added_s.append(rows[active])
        added_t.append(cur[active].copy())
    if added_s:
        s = np.concatenate(added_s)
        t = np.concatenate(added_t)
        state.new_subject.append(s)
        state.new_time.append(t)
        np.add.at(state.counts, (s, np.full(len(s), j)), 1)
        return len(s)
    return 0


def truncate_after_terminal(d: Dataset) -> Dataset:
    """Remove data after a terminal event; identity for non-terminal schemas."""
    if not d.tte_spec.terminal:
        return d
    term = np.where(d.t1_event == 1, d.t1_time, np.inf)
    tc = np.minimum(d.censor_time, term)
    if np.all(tc == d.censor_time):
        return d
    grid = np.asarray(d.grid.times)
    seen = grid[None, :] <= tc[:, None] + TIME_TOL
    keep = d.rec_time <= tc[d.rec_subject] + TIME_TOL
    return d.replace(
        censor_time=tc,
        rec_subject=d.rec_subject[keep],
        rec_time=d.rec_time[keep],
        longitudinal={k: np.where(seen, v, np.nan) for k, v in d.longitudinal.items()},
    )


def _fit_interval(state, fit_rows, j, kind, cfg, fitter):
    """Fit with the configured history, falling back to composite history.

    The fallback applies when the full design leaves too few spare rows or
    the full-history fit separates (its ridge-stabilised covariance would
    make the parameter draws meaningless).
    """
    mode = cfg.history_mode
    X = history_columns(state, fit_rows, j, kind, cfg, mode)
    if mode == "full" and X.n <= X.rank + cfg.min_extra_rows:
        mode = "composite"
        X = history_columns(state, fit_rows, j, kind, cfg, mode)
    fit = fitter(X)
    if mode == "full" and "separation_ridge" in fit.notes:
        mode = "composite"
        fit = fitter(history_columns(state, fit_rows, j, kind, cfg, mode))
    return fit, mode


def _groups(d: Dataset, cfg: ImputationConfig):
    if cfg.by_group:
        return [(g, d.treatment == g) for g in (0, 1)]
    return [(0, np.ones(d.n, dtype=bool))]


def _impute_interval(state: ImputationState, j: int, cfg: ImputationConfig, key: StreamKey):
    d = state.d
    lo, hi = state.times[j - 1], state.times[j]
    missing = state.missing_at(j)
    for vi, spec in enumerate(d.schema):
        for g, in_group in _groups(d, cfg):
            vkey = key.child("variable", vi).child("group", g)
            try:
                _impute_variable(state, j, spec, in_group, missing, lo, hi, cfg, vkey)
            except FitError as e:
                raise type(e)(f"interval {j}, variable {spec.name!r}, group {g}: {e}") from e


def _impute_variable(state, j, spec, in_group, missing, lo, hi, cfg, vkey):
    d = state.d
    kind = spec.kind
    param_rng = vkey.child("param").stream
    noise_rng = vkey.child("noise").stream
    if kind == "tte":
        imp_rows = np.flatnonzero(in_group & state.pending & missing)
        if imp_rows.size == 0:
            return
        t1_obs = d.t1_time
        fit_rows = np.flatnonzero(in_group & (state.C > lo + TIME_TOL) & (t1_obs > lo + TIME_TOL))
        exposure = np.minimum(t1_obs[fit_rows], hi) - lo
        event = ((d.t1_event[fit_rows] == 1) & (t1_obs[fit_rows] <= hi + TIME_TOL)).astype(float)
        fit, mode = _fit_interval(state, fit_rows, j, kind, cfg,
                                  lambda X: fit_exp_hazard(X, exposure, event))
        draw = draw_glm_params(fit, param_rng())
        W = history_columns(state, imp_rows, j, kind, cfg, mode)
        impute_tte(state, j, fit, draw, noise_rng(), imp_rows, W)
    elif kind == "ttre":
        imp_rows = np.flatnonzero(in_group & missing)
        if imp_rows.size == 0:
            return
        fit_rows = np.flatnonzero(in_group & (state.C > lo + TIME_TOL))
        exposure = np.minimum(hi, state.C[fit_rows]) - lo
        count = state.counts[fit_rows, j].astype(float)
        fit, mode = _fit_interval(state, fit_rows, j, kind, cfg,
                                  lambda X: fit_negbin(X, count, np.log(exposure)))
        draw = draw_glm_params(fit, param_rng())
        W = history_columns(state, imp_rows, j, kind, cfg, mode)
        impute_ttre(state, j, fit, draw, noise_rng(), imp_rows, W, cfg.ttre_rate_mode)
    else:
        imp_rows = np.flatnonzero(in_group & missing)
        if imp_rows.size == 0:
            return
        fit_rows = np.flatnonzero(in_group & ~missing)
        y = state.long[spec.name][fit_rows, j]
        if kind == "continuous":
            fit, mode = _fit_interval(state, fit_rows, j, kind, cfg, lambda X: fit_linear(X, y))
            draw = draw_linear_params(fit, param_rng())
            W = history_columns(state, imp_rows, j, kind, cfg, mode)
            impute_continuous(state, spec.name, j, draw, noise_rng(), imp_rows, W)
        else:
            fit, mode = _fit_interval(state, fit_rows, j, kind, cfg, lambda X: fit_logistic(X, y))
            draw = draw_glm_params(fit, param_rng())
            W = history_columns(state, imp_rows, j, kind, cfg, mode)
            impute_binary(state, spec.name, j, draw, noise_rng(), imp_rows, W)


def run_single_imputation(d: Dataset, cfg: ImputationConfig, imputation_index: int,
                          key: Optional[StreamKey] = None) -> Dataset:
    """One completed dataset; randomness comes from the path (seed, imputation index)."""
    key = (key or StreamKey(cfg.master_seed)).child("imputation", imputation_index)
    state = ImputationState(d)
    for j in range(1, d.grid.J + 1):
        _impute_interval(state, j, cfg, key.child("interval", j))
    return truncate_after_terminal(state.completed())


def _single(args):
    d, cfg, i, key = args
    return run_single_imputation(d, cfg, i, key)


def run_multiple_imputation(d: Dataset, cfg: ImputationConfig, workers: int = 1,
                            key: Optional[StreamKey] = None) -> list[Dataset]:
    jobs = [(d, cfg, i, key) for i in range(1, cfg.m + 1)]
    if workers <= 1 or cfg.m == 1:
        return [_single(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_single, jobs))
