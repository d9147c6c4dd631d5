"""Synthetic two-arm trial generator.

Each subject gets a treatment arm, a normal baseline covariate and a pair of
correlated random effects.  Two longitudinal outcomes follow an exponential
saturation mean curve (continuous ``y3`` and a thresholded binary ``y4``);
a time-to-event ``y1`` and a recurrent-event process ``y2`` have hazards that
depend on the longitudinal mean curves.  Event times are drawn by inverting
the cumulative hazard numerically.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, ndtr

from .data import Dataset, IntervalGrid, VariableSpec
from .rng import StreamKey, draw_mvn

PANEL_WIDTH = 1.0
GL_NODES, GL_WEIGHTS = np.polynomial.legendre.leggauss(10)
ROOT_TOL = 1e-12
HORIZON_FACTOR = 10.0

SCHEMA = (
    VariableSpec("y1", "tte"),
    VariableSpec("y2", "ttre"),
    VariableSpec("y3", "continuous"),
    VariableSpec("y4", "binary"),
)


@dataclass(frozen=True)
class Censoring:
    """Visit-level dropout: fixed per-visit probabilities or a logistic model.

    ``kind="independent"`` uses ``probabilities[j-1]`` at visit ``j``;
    ``kind="dependent"`` uses ``logit(pi_j) = c0 + c3 * y3_j + c4 * y4_j``
    with ``coefficients = (c0, c3, c4)``.
    """

    kind: str = "independent"
    probabilities: tuple[float, ...] = (0.15, 0.2, 0.25, 0.4)
    coefficients: tuple[float, float, float] = (-1.0, 0.8, -0.5)

    def __post_init__(self):
        if self.kind not in ("independent", "dependent"):
            raise ValueError(f"unknown censoring kind {self.kind!r}")
        if any(not 0.0 <= p <= 1.0 for p in self.probabilities):
            raise ValueError("censoring probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 500
    grid: tuple[float, ...] = (0.0, 3.0, 6.0, 9.0, 12.0)
    mu_x: float = 0.0
    sigma_x: float = 1.0
    beta3: tuple[float, float, float] = (0.0, 1.0, -0.5)
    beta4: tuple[float, float, float] = (0.0, 1.0, -0.5)
    kappa3: float = 0.5
    kappa4: float = 0.15
    sigma2_3s: float = 0.1
    sigma2_4s: float = 0.1
    rho: float = 0.5
    # residual variances of (y3*, y4*); 0.16 = 0.4**2 reproduces the published
    # no-censoring reference values
    sigma2_eps: tuple[float, float] = (0.16, 0.16)
    lambda10: float = 0.08
    lambda20: float = 0.13
    alpha1: tuple[float, float, float, float] = (-0.7, 0.5, 0.5, -0.5)
    alpha2: tuple[float, float, float, float] = (-0.7, 0.5, 0.5, -0.5)
    censoring: Censoring = field(default_factory=Censoring)
    p_treatment: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(float(t) for t in self.grid))
        if isinstance(self.censoring, dict):
            object.__setattr__(self, "censoring", Censoring(**self.censoring))
        for name in ("sigma_x", "sigma2_3s", "sigma2_4s", "kappa3", "kappa4"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(v <= 0 for v in self.sigma2_eps):
            raise ValueError("residual variances must be positive")
        if abs(self.rho) > 1:
            raise ValueError("rho must lie in [-1, 1]")
        if self.censoring.kind == "independent" and \
                len(self.censoring.probabilities) != len(self.grid) - 1:
            raise ValueError("need one censoring probability per post-baseline visit")

    @property
    def interval_grid(self) -> IntervalGrid:
        return IntervalGrid(self.grid)

    @property
    def t_max(self) -> float:
        return self.grid[-1]

    def with_(self, **changes) -> "SimulationConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        d = dict(d)
        if "censoring" in d and isinstance(d["censoring"], dict):
            d["censoring"] = Censoring(**{k: tuple(v) if isinstance(v, list) else v
                                          for k, v in d["censoring"].items()})
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _paper_main(censoring="independent") -> SimulationConfig:
    return SimulationConfig(censoring=Censoring(kind=censoring))


def _paper_reduced_dependency(censoring="dependent") -> SimulationConfig:
    return SimulationConfig(
        alpha1=(-0.2, 0.0, -0.5, 1.5),
        alpha2=(-0.2, 0.0, -0.5, 1.5),
        censoring=Censoring(kind=censoring, coefficients=(-1.0, 1.8, 0.5)),
    )


PRESETS = {
    "paper_main": _paper_main,
    "paper_reduced_dependency": _paper_reduced_dependency,
}


def preset(name: str, censoring: Optional[str] = None, **overrides) -> SimulationConfig:
    try:
        make = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    cfg = make() if censoring is None else make(censoring)
    return cfg.with_(**overrides) if overrides else cfg


@dataclass(frozen=True)
class SubjectEffects:
    a: np.ndarray
    x: np.ndarray
    s3: np.ndarray
    s4: np.ndarray

    def __len__(self):
        return len(self.x)

    def take(self, rows) -> "SubjectEffects":
        return SubjectEffects(self.a[rows], self.x[rows], self.s3[rows], self.s4[rows])


def draw_effects(cfg: SimulationConfig, n: int, key: StreamKey) -> SubjectEffects:
    a = (key.child("treatment").stream().random(n) < cfg.p_treatment).astype(np.int64)
    x = cfg.mu_x + cfg.sigma_x * key.child("covariate").stream().standard_normal(n)
    sd3, sd4 = np.sqrt(cfg.sigma2_3s), np.sqrt(cfg.sigma2_4s)
    cov = np.array([[sd3**2, cfg.rho * sd3 * sd4], [cfg.rho * sd3 * sd4, sd4**2]])
    s = draw_mvn(key.child("effects").stream(), np.zeros(2), cov, size=n)
    return SubjectEffects(a, x, s[:, 0], s[:, 1])


def itp_mean(t, k: int, effects: SubjectEffects, cfg: SimulationConfig):
    """Longitudinal mean ``b0 + b1 x + (b2 a + s_k)(1 - exp(-kappa_k t))``."""
    if k == 3:
        b, kappa, s = cfg.beta3, cfg.kappa3, effects.s3
    elif k == 4:
        b, kappa, s = cfg.beta4, cfg.kappa4, effects.s4
    else:
        raise ValueError("k must be 3 or 4")
    t = np.asarray(t, dtype=float)
    return b[0] + b[1] * effects.x + (b[2] * effects.a + s) * -np.expm1(-kappa * t)


class HazardProcess:
    """Per-subject hazard ``base * exp(c3 (1 - e^{-k3 v}) + c4 (1 - e^{-k4 v}))``.

    The cumulative hazard is integrated by composite Gauss-Legendre quadrature
    on unit panels and inverted by a bracketed Newton iteration.
    """

    def __init__(self, base, c3, c4, kappa3, kappa4, horizon):
        self.base = np.asarray(base, dtype=float)
        self.c3 = np.asarray(c3, dtype=float)
        self.c4 = np.asarray(c4, dtype=float)
        self.kappa3, self.kappa4 = float(kappa3), float(kappa4)
        self.horizon = float(horizon)
        edges = np.arange(0.0, self.horizon, PANEL_WIDTH)
        self.edges = np.append(edges, self.horizon)
        lo = np.broadcast_to(self.edges[:-1], (len(self.base), len(self.edges) - 1))
        hi = np.broadcast_to(self.edges[1:], lo.shape)
        panels = self._integrate(np.arange(len(self.base))[:, None], lo, hi)
        self.cum = np.concatenate([np.zeros((len(self.base), 1)), np.cumsum(panels, axis=1)], axis=1)

    @classmethod
    def from_effects(cls, effects: SubjectEffects, cfg: SimulationConfig, which: str,
                     horizon: Optional[float] = None):
        if which == "tte":
            lam0, al = cfg.lambda10, cfg.alpha1
        elif which == "ttre":
            lam0, al = cfg.lambda20, cfg.alpha2
        else:
            raise ValueError("which must be 'tte' or 'ttre'")
        b3, b4 = cfg.beta3, cfg.beta4
        lin = (al[0] * effects.a + al[1] * effects.x
               + al[2] * (b3[0] + b3[1] * effects.x) + al[3] * (b4[0] + b4[1] * effects.x))
        base = lam0 * np.exp(lin)
        c3 = al[2] * (b3[2] * effects.a + effects.s3)
        c4 = al[3] * (b4[2] * effects.a + effects.s4)
        if horizon is None:
            horizon = HORIZON_FACTOR * cfg.t_max
        return cls(base, c3, c4, cfg.kappa3, cfg.kappa4, horizon)

    def __len__(self):
        return len(self.base)

    def rate(self, v, rows=slice(None)):
        v = np.asarray(v, dtype=float)
        r = (lambda a: a[rows])
        # one row per subject; extra time axes broadcast after the first
        shape = (-1,) + (1,) * max(v.ndim - 1, 0)
        c3, c4, base = r(self.c3).reshape(shape), r(self.c4).reshape(shape), r(self.base).reshape(shape)
        return base * np.exp(-c3 * np.expm1(-self.kappa3 * v) - c4 * np.expm1(-self.kappa4 * v))

    def _integrate(self, rows, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        half = 0.5 * (hi - lo)
        v = (lo + half)[..., None] + half[..., None] * GL_NODES
        base = self.base[rows][..., None]
        c3 = self.c3[rows][..., None]
        c4 = self.c4[rows][..., None]
        vals = base * np.exp(-c3 * np.expm1(-self.kappa3 * v) - c4 * np.expm1(-self.kappa4 * v))
        return half * (vals @ GL_WEIGHTS)

    def cumulative(self, t, rows=None):
        """``Lambda(t)`` per subject; ``t`` broadcast against the subject axis."""
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        t = np.broadcast_to(np.asarray(t, dtype=float), rows.shape)
        if np.any(t > self.horizon + 1e-12) or np.any(t < 0):
            raise ValueError("time outside [0, horizon]")
        k = np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, len(self.edges) - 2)
        return self.cum[rows, k] + self._integrate(rows, self.edges[k], t)

    def invert(self, target, rows=None):
        """Solve ``Lambda(t) = target``; ``inf`` where the root lies beyond the horizon."""
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        target = np.broadcast_to(np.asarray(target, dtype=float), rows.shape)
        out = np.full(rows.shape, np.inf)
        cum = self.cum[rows]
        inside = target < cum[:, -1]
        if not np.any(inside):
            return out
        r, tg, cm = rows[inside], target[inside], cum[inside]
        k = np.minimum(np.sum(cm[:, 1:] <= tg[:, None], axis=1), len(self.edges) - 2)
        edge = self.edges[k]
        lo, hi = edge.copy(), self.edges[k + 1].copy()
        c_lo = cm[np.arange(len(k)), k]
        c_hi = cm[np.arange(len(k)), k + 1]
        t = lo + (tg - c_lo) / np.maximum(c_hi - c_lo, 1e-300) * (hi - lo)
        t = np.clip(t, lo, hi)
        active = np.ones(len(t), dtype=bool)
        for _ in range(100):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            ti = t[idx]
            f = c_lo[idx] + self._integrate(r[idx], edge[idx], ti) - tg[idx]
            hi[idx] = np.where(f > 0, ti, hi[idx])
            lo[idx] = np.where(f <= 0, ti, lo[idx])
            step = f / self.rate(ti, r[idx])
            new = ti - step
            bad = (new <= lo[idx]) | (new >= hi[idx]) | ~np.isfinite(new)
            new = np.where(bad, 0.5 * (lo[idx] + hi[idx]), new)
            done = (np.abs(new - ti) < ROOT_TOL) | (hi[idx] - lo[idx] < ROOT_TOL)
            t[idx] = new
            active[idx[done]] = False
        out[inside] = t
        return out


def sample_event_time(effects: SubjectEffects, cfg: SimulationConfig, which: str, rng,
                      start=0.0, horizon: Optional[float] = None):
    """Draw the next event time after ``start`` by inverting the survival function.

    Solves ``Lambda(t) - Lambda(start) = -log(u)``; returns ``inf`` when the
    event falls beyond the horizon (default ten times the study length).
    """
    proc = HazardProcess.from_effects(effects, cfg, which, horizon)
    start = np.broadcast_to(np.asarray(start, dtype=float), (len(proc),))
    u = 1.0 - rng.random(len(proc))
    return proc.invert(proc.cumulative(start) - np.log(u))


def _recurrent_times(proc: HazardProcess, rng):
    """Nonhomogeneous Poisson event times on (0, horizon]; flat (subject, time) arrays."""
    n = len(proc)
    end = proc.cum[:, -1]
    current = np.zeros(n)
    rows = np.arange(n)
    subj, times = [], []
    while rows.size:
        current = current - np.log(1.0 - rng.random(rows.size))
        hit = current < end[rows]
        rows, current = rows[hit], current[hit]
        if rows.size == 0:
            break
        subj.append(rows)
        times.append(proc.invert(current, rows))
    if not subj:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    s = np.concatenate(subj)
    t = np.concatenate(times)
    order = np.lexsort((t, s))
    return s[order], t[order]


def _longitudinal(effects, cfg, key):
    times = np.asarray(cfg.grid)[None, :]
    n = len(effects)
    e3 = np.sqrt(cfg.sigma2_eps[0]) * key.child("residual", 3).stream().standard_normal((n, len(cfg.grid)))
    e4 = np.sqrt(cfg.sigma2_eps[1]) * key.child("residual", 4).stream().standard_normal((n, len(cfg.grid)))
    eff = SubjectEffects(*(v[:, None] for v in (effects.a, effects.x, effects.s3, effects.s4)))
    y3 = itp_mean(times, 3, eff, cfg) + e3
    y4_star = itp_mean(times, 4, eff, cfg) + e4
    return y3, (y4_star >= 0).astype(float)


def simulate_uncensored(cfg: SimulationConfig, key: StreamKey) -> Dataset:
    n = cfg.n
    effects = draw_effects(cfg, n, key)
    y3, y4 = _longitudinal(effects, cfg, key)
    tte = HazardProcess.from_effects(effects, cfg, "tte", horizon=cfg.t_max)
    u = 1.0 - key.child("tte").stream().random(n)
    t1_star = tte.invert(-np.log(u))
    event = np.isfinite(t1_star)
    t1 = np.where(event, t1_star, cfg.t_max)
    ttre = HazardProcess.from_effects(effects, cfg, "ttre", horizon=cfg.t_max)
    rec_s, rec_t = _recurrent_times(ttre, key.child("ttre").stream())
    width = max(4, len(str(n)))
    return Dataset(
        schema=SCHEMA,
        grid=cfg.interval_grid,
        ids=[f"S{i + 1:0{width}d}" for i in range(n)],
        treatment=effects.a,
        baseline=effects.x[:, None],
        censor_time=np.full(n, cfg.t_max),
        t1_time=t1,
        t1_event=event.astype(np.int64),
        rec_subject=rec_s,
        rec_time=rec_t,
        longitudinal={"y3": y3, "y4": y4},
        baseline_names=("x_1",),
    )


def censor_at(d: Dataset, censor_time) -> Dataset:
    """Truncate a complete dataset at per-subject censoring times."""
    tc = np.minimum(np.asarray(censor_time, dtype=float), d.censor_time)
    grid = np.asarray(d.grid.times)
    seen = grid[None, :] <= tc[:, None] + 1e-12
    long = {k: np.where(seen, v, np.nan) for k, v in d.longitudinal.items()}
    keep = d.rec_time <= tc[d.rec_subject] + 1e-12
    after = d.t1_time > tc
    return d.replace(
        censor_time=tc,
        t1_time=np.where(after, tc, d.t1_time),
        t1_event=np.where(after, 0, d.t1_event),
        rec_subject=d.rec_subject[keep],
        rec_time=d.rec_time[keep],
        longitudinal=long,
    )


def apply_censoring(d: Dataset, cfg: SimulationConfig, rng) -> Dataset:
    """Visit-level dropout; the first triggered visit becomes ``T_c``."""
    J = d.grid.J
    u = rng.random((d.n, J))
    cens = cfg.censoring
    if cens.kind == "independent":
        prob = np.broadcast_to(np.asarray(cens.probabilities, dtype=float), (d.n, J))
    else:
        c0, c3, c4 = cens.coefficients
        prob = expit(c0 + c3 * d.longitudinal["y3"][:, 1:] + c4 * d.longitudinal["y4"][:, 1:])
    hit = u < prob
    first = np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, J)
    tc = np.asarray(d.grid.times)[first]
    return censor_at(d, tc)


def simulate_trial(cfg: SimulationConfig, key: StreamKey) -> tuple[Dataset, Dataset]:
    """Return ``(uncensored, censored)`` datasets sharing all pre-censoring data."""
    full = simulate_uncensored(cfg, key.child("generate"))
    return full, apply_censoring(full, cfg, key.child("censor").stream())


def reference_values(cfg: SimulationConfig, t: float, n_ref: int = 10**6, key=None,
                     chunk: int = 100_000) -> dict:
    """Large-sample estimand values per arm.

    Conditional expectations given the subject effects are averaged over
    ``n_ref`` effect draws, once per arm: ``E exp(-Lambda1(t))``,
    ``E Lambda2(t)``, ``E m3*(t)`` and ``E Phi(m4*(t) / sd)``.
    """
    key = key or StreamKey(20240101).child("reference")
    sd4 = np.sqrt(cfg.sigma2_eps[1])
    sums = {g: np.zeros(4) for g in (0, 1)}
    done = 0
    c = 0
    while done < n_ref:
        m = min(chunk, n_ref - done)
        eff = draw_effects(cfg, m, key.child("chunk", c))
        for g in (0, 1):
            e = SubjectEffects(np.full(m, g), eff.x, eff.s3, eff.s4)
            h1 = HazardProcess.from_effects(e, cfg, "tte", horizon=t)
            h2 = HazardProcess.from_effects(e, cfg, "ttre", horizon=t)
            sums[g] += [
                np.exp(-h1.cum[:, -1]).sum(),
                h2.cum[:, -1].sum(),
                itp_mean(t, 3, e, cfg).sum(),
                ndtr(itp_mean(t, 4, e, cfg) / sd4).sum(),
            ]
        done += m
        c += 1
    names = ("survival", "mcf", "mean_y3", "prop_y4")
    return {(name, g): float(sums[g][k] / n_ref) for g in (0, 1) for k, name in enumerate(names)}
