"""Replicated simulation study: simulate, estimate, impute, pool, summarise.

Each replicate simulates one trial and estimates four per-arm quantities at a
fixed time from

* ``nocens``: the uncensored dataset,
* ``naive``: the censored dataset without imputation (Kaplan-Meier, MCF and
  available-case means),
* ``mi`` / ``mi_reduced``: the censored dataset after multiple imputation with
  full or reduced dependency, pooled across imputations.

Coverage is judged against a large-sample reference value computed once per
simulation configuration and cached on disk.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Dataset
from .engine import ImputationConfig, run_single_imputation
from .estimators import kaplan_meier, marginal_estimate, mcf_from_flat, rubin_pool
from .io import fmt
from .rng import StreamKey
from .simgen import SimulationConfig, reference_values, simulate_trial

ESTIMANDS = ("survival", "mcf", "mean_y3", "prop_y4")
GROUPS = (0, 1)


@dataclass(frozen=True)
class StudyConfig:
    """One simulation study.

    ``dependencies`` lists the imputation models to run; ``"full"`` is reported
    as method ``mi`` and ``"reduced"`` as ``mi_reduced``.
    """

    replicates: int = 200
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    imputation: ImputationConfig = field(default_factory=lambda: ImputationConfig(m=20))
    estimand_time: float = 12.0
    dependencies: tuple[str, ...] = ("full",)
    output_dir: Optional[str] = None
    n_ref: int = 10**6
    seed: int = 1
    workers: int = 1
    curve_step: float = 0.25
    df_mode: str = "normal"

    def __post_init__(self):
        object.__setattr__(self, "dependencies", tuple(self.dependencies))
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not any(abs(self.estimand_time - t) < 1e-12 for t in self.simulation.grid[1:]):
            raise ValueError("estimand_time must be a post-baseline grid time")
        bad = set(self.dependencies) - {"full", "reduced"}
        if bad or not self.dependencies:
            raise ValueError("dependencies must be a non-empty subset of ('full', 'reduced')")

    def with_(self, **changes) -> "StudyConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["dependencies"] = list(self.dependencies)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        if "simulation" in d and isinstance(d["simulation"], dict):
            d["simulation"] = SimulationConfig.from_dict(d["simulation"])
        if "imputation" in d and isinstance(d["imputation"], dict):
            d["imputation"] = ImputationConfig(**d["imputation"])
        if "dependencies" in d:
            d["dependencies"] = tuple(d["dependencies"])
        return cls(**d)


def method_name(dependency: str) -> str:
    return "mi" if dependency == "full" else "mi_reduced"


# -- per-dataset estimates ------------------------------------------------

def dataset_estimates(d: Dataset, t: float, observed_only: bool = False) -> dict:
    """``{(estimand, group): (estimate, variance)}`` at time ``t``.

    With ``observed_only`` the longitudinal estimands use the subjects whose
    value at ``t`` is observed.
    """
    j = int(np.argmin(np.abs(np.asarray(d.grid.times) - t)))
    out = {}
    for g in GROUPS:
        rows = np.flatnonzero(d.treatment == g)
        km = kaplan_meier(d.t1_time[rows], d.t1_event[rows])
        out["survival", g] = km.at(t)
        in_g = np.isin(d.rec_subject, rows)
        mcf = mcf_from_flat(d.rec_time[in_g], d.censor_time[rows])
        out["mcf", g] = mcf.at(t)
        for name, key, kind in (("y3", "mean_y3", "mean"), ("y4", "prop_y4", "proportion")):
            v = d.longitudinal[name][rows, j]
            if observed_only:
                v = v[~np.isnan(v)]
            out[key, g] = marginal_estimate(v, kind)
    return out


def dataset_curves(d: Dataset, times: np.ndarray, j_values=None) -> dict:
    """KM and MCF curves per arm on ``times``, plus per-visit longitudinal means."""
    out = {}
    for g in GROUPS:
        rows = np.flatnonzero(d.treatment == g)
        out["km", g] = kaplan_meier(d.t1_time[rows], d.t1_event[rows]).at(times)[0]
        in_g = np.isin(d.rec_subject, rows)
        out["mcf", g] = mcf_from_flat(d.rec_time[in_g], d.censor_time[rows]).at(times)[0]
        for name in ("y3", "y4"):
            out[name, g] = np.nanmean(d.longitudinal[name][rows], axis=0)
    return out


@dataclass
class ReplicateResult:
    replicate: int
    rows: list  # (method, estimand, group, estimate, se, lower, upper, covered)
    curves: dict  # method -> {(curve, group): array}


def _interval(est, var, z=1.959963984540054):
    se = math.sqrt(max(var, 0.0))
    return est - z * se, est + z * se


def run_replicate(cfg: StudyConfig, r: int, truth: dict) -> ReplicateResult:
    key = StreamKey(cfg.seed).child("replicate", r)
    full, censored = simulate_trial(cfg.simulation, key.child("trial"))
    t = cfg.estimand_time
    times = curve_times(cfg)
    rows, curves = [], {}

    def record(method, est_map):
        for (name, g), (est, var, lo, hi) in sorted(est_map.items()):
            tv = truth[name, g]
            rows.append((method, name, g, est, math.sqrt(max(var, 0.0)), lo, hi, int(lo <= tv <= hi)))

    for method, d, obs in (("nocens", full, False), ("naive", censored, True)):
        est = dataset_estimates(d, t, observed_only=obs)
        record(method, {k: (e, v, *_interval(e, v)) for k, (e, v) in est.items()})
        curves[method] = dataset_curves(d, times)

    for dep in cfg.dependencies:
        icfg = cfg.imputation.with_(dependency=dep)
        ikey = key.child("impute")
        per_imp, curve_sum = [], None
        for i in range(1, icfg.m + 1):
            completed = run_single_imputation(censored, icfg, i, ikey)
            per_imp.append(dataset_estimates(completed, t))
            c = dataset_curves(completed, times)
            curve_sum = c if curve_sum is None else {k: curve_sum[k] + c[k] for k in c}
        pooled = {}
        for k in per_imp[0]:
            p = rubin_pool([e[k][0] for e in per_imp], [e[k][1] for e in per_imp], df_mode=cfg.df_mode)
            pooled[k] = (p.theta_bar, p.v_pooled, p.ci[0], p.ci[1])
        record(method_name(dep), pooled)
        curves[method_name(dep)] = {k: v / icfg.m for k, v in curve_sum.items()}
    return ReplicateResult(r, rows, curves)


def curve_times(cfg: StudyConfig) -> np.ndarray:
    k = int(round(cfg.simulation.t_max / cfg.curve_step))
    return np.round(np.arange(k + 1) * cfg.curve_step, 12)


# -- reference values -------------------------------------------------------

def _reference_key(cfg: StudyConfig) -> str:
    blob = json.dumps({"simulation": dataclasses.asdict(cfg.simulation), "t": cfg.estimand_time,
                       "n_ref": cfg.n_ref}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def truth_values(cfg: StudyConfig, cache_dir=None) -> dict:
    """Reference values, read from or written to ``cache_dir/reference_<hash>.json``."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"reference_{_reference_key(cfg)}.json"
        if path.exists():
            raw = json.loads(path.read_text())
            return {(r["estimand"], r["group"]): r["value"] for r in raw["values"]}
    with threadpool_limits(1):
        ref = reference_values(cfg.simulation, cfg.estimand_time, n_ref=cfg.n_ref)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        values = [{"estimand": k[0], "group": k[1], "value": v} for k, v in sorted(ref.items())]
        path.write_text(json.dumps({"n_ref": cfg.n_ref, "t": cfg.estimand_time, "values": values},
                                   indent=2) + "\n")
    return ref


# -- driver -------------------------------------------------------------------

def _worker(args):
    cfg, r, truth = args
    with threadpool_limits(1):
        try:
            return run_replicate(cfg, r, truth)
        except Exception as e:
            # keep the exception type (callers map it to exit codes) but name the replicate
            try:
                tagged = type(e)(f"replicate {r}: {e}")
            except Exception:
                raise RuntimeError(f"replicate {r}: {e}") from e
            raise tagged from e


@dataclass
class StudySummary:
    truth: dict
    rows: list  # dicts with the summary.csv columns
    replicates: list

    def lookup(self, method: str, estimand: str, group: int) -> dict:
        for row in self.rows:
            if (row["method"], row["estimand"], row["group"]) == (method, estimand, group):
                return row
        raise KeyError((method, estimand, group))


def summarise(results: list, truth: dict, methods: list) -> list:
    out = []
    for method in methods:
        for name in ESTIMANDS:
            for g in GROUPS:
                sel = [row for res in results for row in res.rows
                       if row[0] == method and row[1] == name and row[2] == g]
                est = np.array([s[3] for s in sel])
                se = np.array([s[4] for s in sel])
                cov = np.array([s[7] for s in sel])
                sd = float(est.std(ddof=1)) if est.size > 1 else 0.0
                out.append({
                    "method": method, "estimand": name, "group": g, "truth": truth[name, g],
                    "mean": float(est.mean()), "sd": sd, "mse": float(se.mean()),
                    "cp": float(cov.mean()), "bias": float(est.mean() - truth[name, g]),
                    "replicates": int(est.size),
                })
    return out


def run_study(cfg: StudyConfig, truth: Optional[dict] = None) -> StudySummary:
    """Run all replicates and write CSV outputs when ``cfg.output_dir`` is set.

    Results are gathered in replicate order, so the output does not depend on
    the number of workers.
    """
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if truth is None:
        truth = truth_values(cfg, out_dir)
    jobs = [(cfg, r, truth) for r in range(1, cfg.replicates + 1)]
    if cfg.workers <= 1:
        results = [_worker(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_worker, jobs))
    results.sort(key=lambda res: res.replicate)
    methods = ["nocens", "naive", *(method_name(d) for d in cfg.dependencies)]
    summary = StudySummary(truth, summarise(results, truth, methods), results)
    if out_dir is not None:
        write_outputs(cfg, summary, methods, out_dir)
    return summary


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _portable(d: dict) -> dict:
    # run-location settings are left out so reruns elsewhere compare equal
    return {k: v for k, v in d.items() if k not in ("workers", "output_dir")}


def write_outputs(cfg: StudyConfig, summary: StudySummary, methods, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["method", "estimand", "group", "truth", "mean", "sd", "mse", "cp", "bias", "replicates"]
    _write_csv(out_dir / "summary.csv", cols, ([row[c] for c in cols] for row in summary.rows))
    _write_csv(out_dir / "replicates.csv",
               ["replicate", "method", "estimand", "group", "estimate", "se", "lower", "upper", "covered"],
               ((res.replicate, *row) for res in summary.replicates for row in res.rows))
    times = curve_times(cfg)
    R = len(summary.replicates)
    curve_rows, traj_rows = [], []
    for method in methods:
        for g in GROUPS:
            km = sum(res.curves[method]["km", g] for res in summary.replicates) / R
            mcf = sum(res.curves[method]["mcf", g] for res in summary.replicates) / R
            curve_rows += [(method, g, float(t), float(a), float(b)) for t, a, b in zip(times, km, mcf)]
            y3 = sum(res.curves[method]["y3", g] for res in summary.replicates) / R
            y4 = sum(res.curves[method]["y4", g] for res in summary.replicates) / R
            traj_rows += [(method, g, float(t), float(a), float(b))
                          for t, a, b in zip(cfg.simulation.grid, y3, y4)]
    _write_csv(out_dir / "curves.csv", ["method", "group", "time", "km", "mcf"], curve_rows)
    _write_csv(out_dir / "trajectories.csv", ["method", "group", "time", "mean_y3", "mean_y4"], traj_rows)
    (out_dir / "config.json").write_text(json.dumps(_portable(cfg.to_dict()), indent=2, sort_keys=True) + "\n")
