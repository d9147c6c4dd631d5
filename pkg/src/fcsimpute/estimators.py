"""Complete-data estimators and Rubin's-rule pooling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function with a variance attached to each step."""

    times: np.ndarray
    values: np.ndarray
    variances: np.ndarray
    initial: float = 0.0

    def __call__(self, t):
        return self.at(t)[0]

    def at(self, t):
        """Value and variance at ``t`` (last jump at or before ``t``)."""
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.times, t, side="right")
        vals = np.concatenate([[self.initial], self.values])[k]
        var = np.concatenate([[0.0], self.variances])[k]
        if vals.ndim == 0:
            return float(vals), float(var)
        return vals, var


@dataclass(frozen=True)
class PooledEstimate:
    theta_bar: float
    v_within: float
    v_between: float
    v_pooled: float
    ci: tuple[float, float]
    m: int
    df: float = float("inf")
    single_imputation: bool = False

    @property
    def se(self) -> float:
        return float(np.sqrt(self.v_pooled))


def kaplan_meier(times, events) -> StepFunction:
    """Product-limit survival estimate with Greenwood variance.

    Events at a time precede censorings at the same time.  Where the estimate
    reaches zero the variance is reported as zero.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=np.int64)
    if times.size == 0:
        raise ValueError("kaplan_meier needs at least one observation")
    if times.shape != events.shape:
        raise ValueError("times and events differ in length")
    if np.any(times <= 0):
        raise ValueError("times must be positive")
    ev_times, d = np.unique(times[events == 1], return_counts=True)
    if ev_times.size == 0:
        return StepFunction(np.zeros(0), np.zeros(0), np.zeros(0), initial=1.0)
    sorted_times = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_times, ev_times, side="left")
    surv = np.cumprod(1.0 - d / at_risk)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = d / (at_risk * (at_risk - d))
        gw = np.cumsum(terms)
        var = np.where(surv > 0, surv**2 * gw, 0.0)
    return StepFunction(ev_times, surv, var, initial=1.0)


def nelson_aalen_mcf(events: Sequence[Sequence[float]], censor_times) -> StepFunction:
    """Mean cumulative function of a recurrent-event process.

    ``events[i]`` holds subject ``i``'s event times.  Increments are
    ``d(t) / n(t)`` with ``n(t)`` the number of subjects whose follow-up
    reaches ``t``; the variance is the counting-process sum ``d(t) / n(t)^2``.
    """
    censor_times = np.asarray(censor_times, dtype=float)
    if censor_times.size == 0:
        raise ValueError("nelson_aalen_mcf needs at least one subject")
    if len(events) != censor_times.size:
        raise ValueError("one event list per subject is required")
    flat = np.concatenate([np.asarray(e, dtype=float) for e in events]) if len(events) else np.zeros(0)
    owner = np.repeat(np.arange(len(events)), [len(e) for e in events])
    if flat.size and np.any(flat > censor_times[owner] + 1e-12):
        raise ValueError("event time after the subject's censoring time")
    return mcf_from_flat(flat, censor_times)


def mcf_from_flat(event_times, censor_times) -> StepFunction:
    """Same estimator from a flat array of all event times."""
    event_times = np.asarray(event_times, dtype=float)
    censor_times = np.asarray(censor_times, dtype=float)
    if event_times.size == 0:
        return StepFunction(np.zeros(0), np.zeros(0), np.zeros(0), initial=0.0)
    ev_times, d = np.unique(event_times, return_counts=True)
    sorted_c = np.sort(censor_times)
    at_risk = censor_times.size - np.searchsorted(sorted_c, ev_times - 1e-12, side="left")
    return StepFunction(ev_times, np.cumsum(d / at_risk), np.cumsum(d / at_risk**2.0), initial=0.0)


def marginal_estimate(values, kind: str = "mean") -> tuple[float, float]:
    """Sample mean with ``s^2 / n``, or a proportion with ``p (1 - p) / n``."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n == 0:
        raise ValueError("marginal_estimate needs at least one value")
    est = float(values.mean())
    if kind == "mean":
        var = float(values.var(ddof=1)) / n if n > 1 else 0.0
    elif kind == "proportion":
        if np.any((values != 0) & (values != 1)):
            raise ValueError("proportion inputs must be 0/1")
        var = est * (1.0 - est) / n
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return est, var


def rubin_pool(estimates, variances, df_mode: str = "normal", level: float = 0.95,
               df_complete: float = np.inf) -> PooledEstimate:
    """Combine per-imputation estimates: ``T = W + (1 + 1/m) B``.

    ``df_mode="barnard_rubin"`` uses the small-sample degrees of freedom with
    complete-data degrees of freedom ``df_complete``.
    """
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    if q.shape != u.shape or q.ndim != 1:
        raise ValueError("estimates and variances must be 1-d and equally long")
    m = q.size
    if m == 0:
        raise ValueError("nothing to pool")
    theta = float(q.mean())
    w = float(u.mean())
    b = float(q.var(ddof=1)) if m > 1 else 0.0
    total = w + (1.0 + 1.0 / m) * b
    df = np.inf
    if df_mode == "barnard_rubin" and m > 1 and b > 0:
        lam = (1.0 + 1.0 / m) * b / total
        df_old = (m - 1) / lam**2
        if np.isfinite(df_complete):
            df_obs = (df_complete + 1) / (df_complete + 3) * df_complete * (1 - lam)
            df = df_old * df_obs / (df_old + df_obs)
        else:
            df = df_old
    elif df_mode not in ("normal", "barnard_rubin"):
        raise ValueError(f"unknown df_mode {df_mode!r}")
    quant = stats.norm.ppf(0.5 + level / 2) if not np.isfinite(df) else stats.t.ppf(0.5 + level / 2, df)
    half = quant * np.sqrt(total)
    return PooledEstimate(theta, w, b, total, (theta - half, theta + half), m, float(df),
                          single_imputation=m == 1)
