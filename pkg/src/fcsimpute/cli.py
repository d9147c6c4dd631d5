"""Command-line interface.

    fcsimpute simulate --out DIR            # DIR/full, DIR/censored
    fcsimpute validate --data DIR
    fcsimpute impute   --data DIR --out DIR --m 20
    fcsimpute estimate --data DIR [--time 12] [--out FILE]
    fcsimpute pool     FILE [FILE ...] [--out FILE]
    fcsimpute study    --out DIR --replicates 200 --m 20

``--config FILE`` reads a JSON study configuration (keys of ``StudyConfig``
with nested ``simulation`` and ``imputation`` objects); explicit flags win.
Exit status: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import validate_dataset
from .engine import run_multiple_imputation
from .estimators import rubin_pool
from .fitters import FitError
from .io import (DataFormatError, DatasetValidationError, fmt, load_dataset_dir,
                 save_dataset, save_imputations)
from .rng import StreamKey
from .simgen import PRESETS, preset, simulate_trial
from .study import StudyConfig, dataset_estimates, run_study

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="worker processes for imputations or replicates")
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON study configuration")
    return p


def _sim_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--censoring", choices=("independent", "dependent"))
    p.add_argument("--n", type=int)


def _imp_flags(p):
    p.add_argument("--m", type=int)
    p.add_argument("--by-group", action="store_true", default=None)
    p.add_argument("--history-mode", choices=("full", "composite"))
    p.add_argument("--dependency", choices=("full", "reduced"))
    p.add_argument("--ttre-rate-mode", choices=("as_paper", "offset_consistent"))
    p.add_argument("--count-scale", choices=("raw", "log1p"))


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="fcsimpute", parents=[common],
                                     description="Interval-wise multiple imputation for trial data")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate one trial")
    _sim_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate", parents=[common], help="check a dataset directory")
    p.add_argument("--data", required=True)

    p = sub.add_parser("impute", parents=[common], help="multiply impute a censored dataset")
    _imp_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("estimate", parents=[common], help="per-arm estimates at a time point")
    p.add_argument("--data", required=True)
    p.add_argument("--time", type=float)
    p.add_argument("--observed-only", action="store_true",
                   help="use only observed longitudinal values (naive analysis)")
    p.add_argument("--out")

    p = sub.add_parser("pool", parents=[common], help="combine estimate files")
    p.add_argument("files", nargs="+")
    p.add_argument("--df-mode", choices=("normal", "barnard_rubin"), default="normal")
    p.add_argument("--out")

    p = sub.add_parser("study", parents=[common], help="replicated simulation study")
    _sim_flags(p)
    _imp_flags(p)
    p.add_argument("--replicates", type=int)
    p.add_argument("--time", type=float)
    p.add_argument("--dependencies", help="comma list from full,reduced")
    p.add_argument("--n-ref", type=int)
    p.add_argument("--out", required=True)
    return parser


def study_config(args) -> StudyConfig:
    raw = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
    cfg = StudyConfig.from_dict(raw)
    sim = cfg.simulation
    if getattr(args, "preset", None):
        sim = preset(args.preset, censoring=getattr(args, "censoring", None))
    elif getattr(args, "censoring", None):
        sim = sim.with_(censoring=dataclasses.replace(sim.censoring, kind=args.censoring))
    if getattr(args, "n", None):
        sim = sim.with_(n=args.n)
    imp = cfg.imputation
    for flag, name in (("m", "m"), ("by_group", "by_group"), ("history_mode", "history_mode"),
                       ("dependency", "dependency"), ("ttre_rate_mode", "ttre_rate_mode"),
                       ("count_scale", "count_scale")):
        if getattr(args, flag, None) is not None:
            imp = imp.with_(**{name: getattr(args, flag)})
    changes = {"simulation": sim, "imputation": imp}
    if hasattr(args, "seed"):
        changes["seed"] = args.seed
        changes["imputation"] = imp.with_(master_seed=args.seed)
    if hasattr(args, "threads"):
        changes["workers"] = args.threads
    for flag, name in (("replicates", "replicates"), ("time", "estimand_time"), ("n_ref", "n_ref"),
                       ("out", "output_dir")):
        if args.command == "study" and getattr(args, flag, None) is not None:
            changes[name] = getattr(args, flag)
    if getattr(args, "dependencies", None):
        changes["dependencies"] = tuple(s.strip() for s in args.dependencies.split(","))
    return cfg.with_(**changes)


def _write_table(rows, header, out):
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    finally:
        if out:
            fh.close()


def cmd_simulate(args, cfg: StudyConfig):
    full, censored = simulate_trial(cfg.simulation, StreamKey(cfg.seed).child("simulate"))
    out = Path(args.out)
    save_dataset(full, out / "full")
    save_dataset(censored, out / "censored")
    print(f"wrote {out / 'full'} and {out / 'censored'} ({full.n} subjects)")


def cmd_validate(args, cfg):
    d = load_dataset_dir(args.data, validate=False)
    report = validate_dataset(d)
    for v in report:
        print(v)
    if report:
        print(f"{len(report)} violation(s)", file=sys.stderr)
        return EXIT_INVALID
    print(f"ok: {d.n} subjects, {d.grid.J} intervals")
    return EXIT_OK


def cmd_impute(args, cfg):
    d = load_dataset_dir(args.data)
    imps = run_multiple_imputation(d, cfg.imputation, workers=cfg.workers)
    paths = save_imputations(imps, args.out)
    print(f"wrote {len(paths)} imputed datasets to {args.out}")


def cmd_estimate(args, cfg):
    d = load_dataset_dir(args.data)
    t = args.time if args.time is not None else d.grid.t_max
    est = dataset_estimates(d, t, observed_only=args.observed_only)
    _write_table([(name, g, t, e, v) for (name, g), (e, v) in sorted(est.items())],
                 ["estimand", "group", "time", "estimate", "variance"], args.out)


def _read_estimates(path):
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for line, row in enumerate(reader, start=2):
            try:
                key = (row["estimand"], int(row["group"]), float(row["time"]))
                out[key] = (float(row["estimate"]), float(row["variance"]))
            except (KeyError, TypeError, ValueError) as e:
                raise DataFormatError(f"{path} line {line}: {e}") from None
    return out


def cmd_pool(args, cfg):
    tables = [_read_estimates(f) for f in args.files]
    keys = sorted(tables[0])
    if any(sorted(t) != keys for t in tables[1:]):
        raise DataFormatError("estimate files do not cover the same estimands")
    rows = []
    for k in keys:
        p = rubin_pool([t[k][0] for t in tables], [t[k][1] for t in tables], df_mode=args.df_mode)
        rows.append((*k, p.theta_bar, p.v_within, p.v_between, p.v_pooled, p.ci[0], p.ci[1], p.m))
    _write_table(rows, ["estimand", "group", "time", "estimate", "v_within", "v_between",
                        "v_pooled", "lower", "upper", "m"], args.out)


def cmd_study(args, cfg):
    summary = run_study(cfg)
    for row in summary.rows:
        print(f"{row['method']:<10} {row['estimand']:<9} {row['group']}  truth {row['truth']:.3f}  "
              f"mean {row['mean']:.3f}  sd {row['sd']:.3f}  mSE {row['mse']:.3f}  cp {row['cp']:.3f}")
    print(f"outputs in {cfg.output_dir}")


COMMANDS = {"simulate": cmd_simulate, "validate": cmd_validate, "impute": cmd_impute,
            "estimate": cmd_estimate, "pool": cmd_pool, "study": cmd_study}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = study_config(args)
        return COMMANDS[args.command](args, cfg) or EXIT_OK
    except (FitError, ArithmeticError, np.linalg.LinAlgError) as e:
        # LinAlgError subclasses ValueError, so this clause comes first
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, DatasetValidationError, FileNotFoundError,
            json.JSONDecodeError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID

if __name__ == "__main__":
    sys.exit(main())
