"""Command-line entry point: generate, simulate, identify, sweeps, oracle-check.

Configuration is a JSON document with the trial-config schema; command-line
overrides win over file values.  Exit codes: 0 success, 1 usage error,
2 numerical-stage failure (the stage is named on standard error).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .estimator import EstimatorOptions, trace_to_csv, markov_estimate_to_json
from .harness import (
    TrialConfig,
    lambda_sweep,
    run_trial_detailed,
    snr_sweep,
    _trial_seeds,
)
from .network import (
    add_noise_at_snr,
    network_spec_to_json,
    random_network,
    simulate,
    trajectory_to_csv,
    white_noise_input,
)
from .realizer import dump_factors_csv, realization_to_json

__all__ = ["main"]

_CONFIG_KEYS = {
    "n", "m", "p", "N", "stability_margin", "i", "R", "L", "s",
    "snr_db", "system_seed", "input_seed", "noise_seed", "base_seed",
    "lambda", "reweight_iters", "inner_iters", "inner_tol", "delta_factor",
    "h", "n_override", "oracle_band", "horizon", "gap_threshold",
    "trials", "snr_grid", "lambda_grid", "jobs",
    "count",  # oracle-check only
}

_ESTIMATOR_KEYS = {
    "lambda": "lam",
    "reweight_iters": "reweight_iters",
    "inner_iters": "inner_iters",
    "inner_tol": "inner_tol",
    "delta_factor": "delta_factor",
    "h": "h",
}

_PAPER_DEFAULT_GRIDS = {
    "snr_grid": [0.0, 20.0, 40.0, 60.0, 80.0],
    "lambda_grid": [1e-4, 1e-3, 1e-2, 1e-1],
}


class UsageError(Exception):
    pass


def _load_config(path: str) -> dict:
    cfg_path = Path(path)
    if not cfg_path.exists():
        raise UsageError(f"config file not found: {cfg_path}")
    try:
        doc = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {cfg_path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {cfg_path} must contain a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _base_seed(doc: dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if "base_seed" in doc:
        return int(doc["base_seed"])
    env = os.environ.get("NETID1D_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"NETID1D_SEED is not an integer: {env!r}") from exc
    return 12345


def _trial_config(doc: dict, args) -> TrialConfig:
    est_kwargs = {}
    for key, attr in _ESTIMATOR_KEYS.items():
        if key in doc:
            est_kwargs[attr] = doc[key]
    if getattr(args, "lam", None) is not None:
        est_kwargs["lam"] = args.lam
    estimator = EstimatorOptions(**est_kwargs)

    kwargs = {}
    for key in ("n", "m", "p", "N", "stability_margin", "i", "R", "L", "s",
                "snr_db", "system_seed", "input_seed", "noise_seed",
                "n_override", "oracle_band", "horizon", "gap_threshold"):
        if key in doc:
            kwargs[key] = doc[key]
    if getattr(args, "snr", None) is not None:
        kwargs["snr_db"] = args.snr
    if getattr(args, "R", None) is not None:
        kwargs["R"] = args.R
    if getattr(args, "s", None) is not None:
        kwargs["s"] = args.s
    if getattr(args, "n", None) is not None:
        kwargs["n_override"] = args.n

    base = _base_seed(doc, args)
    for idx, key in enumerate(("system_seed", "input_seed", "noise_seed")):
        if key not in kwargs:
            kwargs[key] = _trial_seeds(base, 0)[idx]

    try:
        cfg = TrialConfig(estimator=estimator, **kwargs)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return cfg


def _write_manifest(outdir: Path, command: str, doc: dict, cfg: TrialConfig, base_seed: int):
    from . import __version__

    manifest = {
        "command": command,
        "toolkit_version": __version__,
        "base_seed": base_seed,
        "config_file": doc,
        "resolved": {
            "n": cfg.n, "m": cfg.m, "p": cfg.p, "N": cfg.N,
            "stability_margin": cfg.stability_margin,
            "i": cfg.i, "R": cfg.R, "L": cfg.L, "s": cfg.s, "snr_db": cfg.snr_db,
            "system_seed": cfg.system_seed, "input_seed": cfg.input_seed,
            "noise_seed": cfg.noise_seed, "lambda": cfg.estimator.lam,
            "n_override": cfg.n_override, "oracle_band": cfg.oracle_band,
        },
    }
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _cmd_generate(args) -> int:
    doc = _load_config(args.config)
    cfg = _trial_config(doc, args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    spec = random_network(cfg.n, cfg.m, cfg.p, cfg.N, cfg.system_seed, cfg.stability_margin)
    network_spec_to_json(spec, outdir / "network.json")
    _write_manifest(outdir, "generate", doc, cfg, _base_seed(doc, args))
    print(f"generated chain of {cfg.N} subsystems (n={cfg.n}) -> {outdir / 'network.json'}")
    return 0


def _cmd_simulate(args) -> int:
    doc = _load_config(args.config)
    cfg = _trial_config(doc, args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    spec = random_network(cfg.n, cfg.m, cfg.p, cfg.N, cfg.system_seed, cfg.stability_margin)
    u = white_noise_input(spec, cfg.L, cfg.input_seed)
    traj = simulate(spec, u, None, cfg.L)
    if np.isfinite(cfg.snr_db):
        traj = add_noise_at_snr(traj, cfg.snr_db, cfg.noise_seed)
    network_spec_to_json(spec, outdir / "network.json")
    trajectory_to_csv(traj, outdir / "trajectory.csv")
    _write_manifest(outdir, "simulate", doc, cfg, _base_seed(doc, args))
    print(f"simulated L={cfg.L} steps at SNR={cfg.snr_db} dB -> {outdir / 'trajectory.csv'}")
    return 0


def _cmd_identify(args) -> int:
    doc = _load_config(args.config)
    cfg = _trial_config(doc, args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    result, extras = run_trial_detailed(cfg)
    _write_manifest(outdir, "identify", doc, cfg, _base_seed(doc, args))

    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)

    summary = {
        "fit_A": result.fit_A,
        "fit_Al": result.fit_Al,
        "fit_Ar": result.fit_Ar,
        "markov_err": result.markov_err,
        "n_used": result.n_used,
        "failed": result.failed,
        "failure_stage": result.failure_stage,
        "estimator_iterations": result.estimator_iterations,
        "estimator_converged": result.estimator_converged,
        "timings": result.timings,
    }
    (outdir / "result.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    with open(outdir / "trial.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("fit_A,fit_Al,fit_Ar,markov_err,n_used,failed\n")
        fh.write(
            f"{result.fit_A!r},{result.fit_Al!r},{result.fit_Ar!r},"
            f"{result.markov_err!r},{'' if result.n_used is None else result.n_used},"
            f"{int(result.failed)}\n"
        )
    if "estimate" in extras:
        markov_estimate_to_json(extras["estimate"], outdir / "markov.json")
        if args.trace:
            trace_to_csv(extras["estimate"], outdir / "objective_trace.csv")
    if "realization" in extras:
        realization_to_json(extras["realization"], outdir / "realization.json")
        if args.dump_factors:
            dump_factors_csv(
                extras["realization"], extras["band"], cfg.R, cfg.s, outdir / "factors"
            )
    if result.failed:
        print(f"numerical failure at stage: {result.failure_stage}", file=sys.stderr)
        return 2
    print(
        f"identify: fit_A={result.fit_A:.3e} fit_Al={result.fit_Al:.3e} "
        f"fit_Ar={result.fit_Ar:.3e} markov_err={result.markov_err:.3e} n={result.n_used}"
    )
    return 0


def _cmd_sweep(args, which: str) -> int:
    doc = _load_config(args.config)
    cfg = _trial_config(doc, args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    T = args.trials if args.trials is not None else int(doc.get("trials", 10))
    jobs = args.jobs if args.jobs is not None else int(doc.get("jobs", os.cpu_count() or 1))
    base = _base_seed(doc, args)
    grid_key = "snr_grid" if which == "snr" else "lambda_grid"
    grid = doc.get(grid_key, _PAPER_DEFAULT_GRIDS[grid_key])
    if which == "snr":
        rows = snr_sweep(cfg, grid, T, base_seed=base, outdir=outdir, jobs=jobs)
        name = "snr_db"
    else:
        if "snr_db" not in doc and getattr(args, "snr", None) is None:
            cfg = replace(cfg, snr_db=40.0)
        rows = lambda_sweep(cfg, grid, T, base_seed=base, outdir=outdir, jobs=jobs)
        name = "lambda"
    total_failures = sum(r["failures"] for r in rows)
    print(
        f"{which}-sweep over {len(rows)} points x {T} trials "
        f"({total_failures} failures) -> {outdir}"
    )
    for r in rows:
        print(f"  {name}={r[name]:g}: fit_A_mean={r['fit_A_mean']:.3e}")
    return 0


def _cmd_oracle_check(args) -> int:
    doc = _load_config(args.config)
    n = int(doc.get("n", 3))
    m = int(doc.get("m", 2))
    p = int(doc.get("p", 2))
    R = int(doc.get("R", 3))
    s = int(doc.get("s", 4))
    count = int(doc.get("count", 20))
    base = _base_seed(doc, args)
    from .oracles import run_structural_checks

    results = run_structural_checks(n=n, m=m, p=p, R=R, s=s, count=count, seed=base)
    width = max(len(r.name) for r in results)
    all_ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        all_ok &= r.passed
        print(f"{r.name:<{width}}  {status}  max|dev| = {r.max_dev:.3e}  (tol {r.tol:g})")
    if not all_ok:
        print("oracle-check failed", file=sys.stderr)
        return 2
    print(f"all structural checks passed on {count} random systems")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netid1d",
        description="Local identification of one subsystem in a 1D chain of identical LTI systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp, with_estimator=True):
        sp.add_argument("--config", required=True, help="JSON configuration file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="base seed override")
        if with_estimator:
            sp.add_argument("--snr", type=float, default=None, help="SNR override (dB)")
            sp.add_argument("--lambda", dest="lam", type=float, default=None,
                            help="regularization weight override")
            sp.add_argument("--n", type=int, default=None, help="subsystem order override")
            sp.add_argument("--R", type=int, default=None, help="cluster radius override")
            sp.add_argument("--s", type=int, default=None, help="stacking depth override")

    sp = sub.add_parser("generate", help="generate a random stable chain")
    add_common(sp)

    sp = sub.add_parser("simulate", help="generate, simulate and export a trajectory")
    add_common(sp)

    sp = sub.add_parser("identify", help="run one end-to-end identification trial")
    add_common(sp)
    sp.add_argument("--trace", action="store_true", help="export the objective trace CSV")
    sp.add_argument("--dump-factors", action="store_true",
                    help="export the factorization matrices to CSV")

    sp = sub.add_parser("snr-sweep", help="reproduce the noise-level sweep")
    add_common(sp)
    sp.add_argument("--trials", type=int, default=None, help="trials per grid point")
    sp.add_argument("--jobs", type=int, default=None, help="parallel worker processes")

    sp = sub.add_parser("lambda-sweep", help="reproduce the regularization sweep")
    add_common(sp)
    sp.add_argument("--trials", type=int, default=None, help="trials per grid point")
    sp.add_argument("--jobs", type=int, default=None, help="parallel worker processes")

    sp = sub.add_parser("oracle-check", help="run the brute-force structural check suite")
    add_common(sp, with_estimator=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        if args.command == "generate":
            return _cmd_generate(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "identify":
            return _cmd_identify(args)
        if args.command == "snr-sweep":
            return _cmd_sweep(args, "snr")
        if args.command == "lambda-sweep":
            return _cmd_sweep(args, "lambda")
        if args.command == "oracle-check":
            return _cmd_oracle_check(args)
        raise UsageError(f"unknown command {args.command}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
