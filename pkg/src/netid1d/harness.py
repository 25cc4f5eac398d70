"""End-to-end trials, impulse-response fitting metrics, and parameter sweeps.

A trial generates a random chain, simulates it under white-noise input, adds
measurement noise at a target SNR, estimates the Markov band of one cluster
from local data only, realizes the subsystem matrices, and scores them with
the similarity-invariant normalized impulse-response fitting errors over
horizon 0..10.  Sweeps average independent trials (fresh random systems) per
grid point and write CSV reports plus a JSON run manifest; failed trials are
excluded from the means and counted.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .blocks import markov_band_oracle
from .estimator import EstimatorOptions, estimate_markov
from .network import (
    add_noise_at_snr,
    extract_cluster,
    random_network,
    simulate,
    white_noise_input,
)
from .realizer import RankSolverOptions, StageError, realize

__all__ = [
    "TrialConfig",
    "TrialResult",
    "impulse_fit_error",
    "run_trial",
    "snr_sweep",
    "lambda_sweep",
    "paper_scale_config",
    "desk_scale_config",
]


@dataclass(frozen=True)
class TrialConfig:
    # network
    n: int = 3
    m: int = 2
    p: int = 2
    N: int = 40
    stability_margin: float = 0.95
    # cluster
    i: int = 20
    R: int = 5
    # data
    L: int = 800
    snr_db: float = 60.0
    system_seed: int = 1
    input_seed: int = 2
    noise_seed: int = 3
    # estimation / realization
    s: int = 8
    estimator: EstimatorOptions = field(default_factory=EstimatorOptions)
    n_override: int | None = None
    oracle_band: bool = False     # skip estimation, feed the true band
    horizon: int = 10
    gap_threshold: float = 10.0

    def validate(self) -> None:
        if self.i - self.R < 1 or self.i + self.R > self.N:
            raise ValueError("cluster exceeds the chain")
        if self.L < self.s + 1:
            raise ValueError("data length too short for the chosen s")
        if self.s % 2 != 0:
            raise ValueError("s must be even for realization")


def paper_scale_config(**overrides) -> TrialConfig:
    """The full-scale simulation setting (40 subsystems, R=5, s=8, L=800)."""
    return replace(TrialConfig(), **overrides)


def desk_scale_config(**overrides) -> TrialConfig:
    """A small setting that satisfies the sufficient identifiability conditions."""
    base = TrialConfig(
        n=2, m=1, p=2, N=15, i=8, R=4, s=4, L=400,
        estimator=EstimatorOptions(lam=1e-3),
        n_override=2,
    )
    return replace(base, **overrides)


@dataclass(frozen=True)
class TrialResult:
    fit_A: float
    fit_Al: float
    fit_Ar: float
    markov_err: float
    n_used: int | None
    failed: bool
    failure_stage: str | None
    warnings: tuple
    timings: dict
    estimator_iterations: int = 0
    estimator_converged: bool = True


def _impulse_seq(C: np.ndarray, A: np.ndarray, B: np.ndarray, horizon: int) -> list[np.ndarray]:
    out = []
    P = B.copy()
    for _ in range(horizon + 1):
        out.append(C @ P)
        P = A @ P
    return out


def impulse_fit_error(est, truth, horizon: int = 10) -> tuple[float, float, float]:
    """Normalized impulse-response fitting errors for the three sequences
    C A^i B, C A_l^i B, C A_r^i B over i = 0..horizon (similarity invariant)."""
    if est.B.shape != truth.B.shape or est.C.shape != truth.C.shape:
        raise ValueError("estimate and truth have mismatched input/output dimensions")
    errs = []
    for attr in ("A", "A_l", "A_r"):
        true_seq = _impulse_seq(truth.C, getattr(truth, attr), truth.B, horizon)
        est_seq = _impulse_seq(est.C, getattr(est, attr), est.B, horizon)
        denom = sum(float(np.linalg.norm(T)) for T in true_seq)
        if denom == 0.0:
            raise ValueError("all true impulse responses vanish; error undefined")
        num = sum(float(np.linalg.norm(T - E)) for T, E in zip(true_seq, est_seq))
        errs.append(num / denom)
    return tuple(errs)


def _band_max_rel_error(band_est, band_true) -> float:
    worst = 0.0
    for key, F in band_true.blocks.items():
        scale = float(np.linalg.norm(F))
        diff = float(np.linalg.norm(band_est.blocks[key] - F))
        worst = max(worst, diff / scale if scale > 0 else diff)
    return worst


def run_trial_detailed(cfg: TrialConfig) -> tuple[TrialResult, dict]:
    """One end-to-end identification trial; failures are labeled, not raised.

    The second return value carries the per-stage artifacts (network spec,
    trajectory, estimate, realization) for report generation."""
    import time

    cfg.validate()
    timings: dict[str, float] = {}
    warnings: list[str] = []
    extras: dict = {}

    t0 = time.perf_counter()
    spec = random_network(
        cfg.n, cfg.m, cfg.p, cfg.N, cfg.system_seed, cfg.stability_margin
    )
    u = white_noise_input(spec, cfg.L, cfg.input_seed)
    traj = simulate(spec, u, None, cfg.L)
    if np.isfinite(cfg.snr_db):
        traj = add_noise_at_snr(traj, cfg.snr_db, cfg.noise_seed)
    cluster = extract_cluster(traj, cfg.i, cfg.R)
    timings["simulate"] = time.perf_counter() - t0
    extras.update(spec=spec, trajectory=traj, cluster=cluster)

    band_true = markov_band_oracle(spec.subsystem, cfg.s)
    extras["band_true"] = band_true

    stage = None
    markov_err = float("nan")
    est_iters, est_conv = 0, True
    try:
        if cfg.oracle_band:
            band = band_true
        else:
            t0 = time.perf_counter()
            stage = "markov_estimation"
            est = estimate_markov(cluster, cfg.R, cfg.s, cfg.estimator, n_hint=cfg.n)
            timings["estimate"] = time.perf_counter() - t0
            warnings.extend(est.warnings)
            est_iters, est_conv = est.iterations, est.converged
            band = est.band
            extras["estimate"] = est
        extras["band"] = band
        markov_err = _band_max_rel_error(band, band_true)

        t0 = time.perf_counter()
        stage = "realization"
        res = realize(
            band, cfg.R, cfg.s, n_opt=cfg.n_override, gap_threshold=cfg.gap_threshold
        )
        timings["realize"] = time.perf_counter() - t0
        warnings.extend(res.diagnostics.get("warnings", []))
        extras["realization"] = res

        stage = "scoring"
        fit_A, fit_Al, fit_Ar = impulse_fit_error(res.est, spec.subsystem, cfg.horizon)
        result = TrialResult(
            fit_A=fit_A, fit_Al=fit_Al, fit_Ar=fit_Ar, markov_err=markov_err,
            n_used=res.n_used, failed=False, failure_stage=None,
            warnings=tuple(warnings), timings=timings,
            estimator_iterations=est_iters, estimator_converged=est_conv,
        )
        return result, extras
    except (StageError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
        label = exc.stage if isinstance(exc, StageError) else stage
        warnings.append(f"trial failed at stage {label}: {exc}")
        result = TrialResult(
            fit_A=float("nan"), fit_Al=float("nan"), fit_Ar=float("nan"),
            markov_err=markov_err, n_used=None, failed=True, failure_stage=label,
            warnings=tuple(warnings), timings=timings,
            estimator_iterations=est_iters, estimator_converged=est_conv,
        )
        return result, extras


def run_trial(cfg: TrialConfig) -> TrialResult:
    return run_trial_detailed(cfg)[0]


def _trial_seeds(base_seed: int, trial: int) -> tuple[int, int, int]:
    ss = np.random.SeedSequence(entropy=(int(base_seed), int(trial)))
    vals = ss.generate_state(3)
    return int(vals[0]), int(vals[1]), int(vals[2])


def _trial_config_for(cfg: TrialConfig, trial: int, base_seed: int, **replacements) -> TrialConfig:
    sys_seed, in_seed, noise_seed = _trial_seeds(base_seed, trial)
    return replace(
        cfg, system_seed=sys_seed, input_seed=in_seed, noise_seed=noise_seed, **replacements
    )


def _run_point(args):
    cfg, value_name, value, trial = args
    result = run_trial(cfg)
    return (value, trial, result)


def _sweep(
    cfg: TrialConfig,
    value_name: str,
    grid,
    T: int,
    base_seed: int,
    jobs: int = 1,
):
    tasks = []
    for value in grid:
        for trial in range(T):
            if value_name == "snr_db":
                tcfg = _trial_config_for(cfg, trial, base_seed, snr_db=float(value))
            else:
                est = replace(cfg.estimator, lam=float(value))
                tcfg = _trial_config_for(cfg, trial, base_seed, estimator=est)
            tasks.append((tcfg, value_name, value, trial))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(_run_point, tasks, chunksize=1))
    else:
        raw = [_run_point(t) for t in tasks]

    raw.sort(key=lambda r: (float(r[0]), r[1]))
    records = {}
    for value, trial, result in raw:
        records.setdefault(float(value), []).append((trial, result))

    rows = []
    for value in grid:
        res = [r for _, r in records[float(value)]]
        ok = [r for r in res if not r.failed]
        failures = len(res) - len(ok)

        def mean(key):
            vals = [getattr(r, key) for r in ok if np.isfinite(getattr(r, key))]
            return float(np.mean(vals)) if vals else float("nan")

        rows.append(
            {
                value_name: float(value),
                "fit_A_mean": mean("fit_A"),
                "fit_Al_mean": mean("fit_Al"),
                "fit_Ar_mean": mean("fit_Ar"),
                "markov_err_mean": mean("markov_err"),
                "failures": failures,
            }
        )
    return rows, records


def _write_sweep_outputs(
    rows, records, value_name, cfg, grid, T, base_seed, outdir, report_name
):
    from . import __version__

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    report = outdir / f"{report_name}.csv"
    with open(report, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [value_name, "fit_A_mean", "fit_Al_mean", "fit_Ar_mean", "markov_err_mean", "failures"]
        )
        for row in rows:
            writer.writerow(
                [repr(row[value_name])]
                + [repr(row[k]) for k in ("fit_A_mean", "fit_Al_mean", "fit_Ar_mean", "markov_err_mean")]
                + [row["failures"]]
            )

    trials_path = outdir / f"{report_name}_trials.csv"
    with open(trials_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [value_name, "trial", "fit_A", "fit_Al", "fit_Ar", "markov_err",
             "failed", "failure_stage", "n_used", "estimator_iterations"]
        )
        for value in grid:
            for trial, r in records[float(value)]:
                writer.writerow(
                    [repr(float(value)), trial, repr(r.fit_A), repr(r.fit_Al), repr(r.fit_Ar),
                     repr(r.markov_err), int(r.failed), r.failure_stage or "",
                     "" if r.n_used is None else r.n_used, r.estimator_iterations]
                )

    manifest = {
        "toolkit_version": __version__,
        "sweep": value_name,
        "grid": [float(v) for v in grid],
        "trials_per_point": T,
        "base_seed": base_seed,
        "per_trial_seeds": {
            str(trial): list(_trial_seeds(base_seed, trial)) for trial in range(T)
        },
        "failed_trials_excluded_from_means": True,
        "config": {
            "n": cfg.n, "m": cfg.m, "p": cfg.p, "N": cfg.N,
            "stability_margin": cfg.stability_margin,
            "i": cfg.i, "R": cfg.R, "L": cfg.L, "s": cfg.s,
            "snr_db": cfg.snr_db,
            "lambda": cfg.estimator.lam,
            "reweight_iters": cfg.estimator.reweight_iters,
            "inner_iters": cfg.estimator.inner_iters,
            "n_override": cfg.n_override,
            "horizon": cfg.horizon,
        },
    }
    (outdir / f"{report_name}_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return report


def snr_sweep(
    cfg: TrialConfig,
    snr_grid,
    T: int,
    base_seed: int = 12345,
    outdir: str | Path | None = None,
    jobs: int = 1,
    report_name: str = "snr_sweep",
):
    """Average T fresh-system trials per SNR value; returns the table rows."""
    if T < 1:
        raise ValueError("T must be at least 1")
    rows, records = _sweep(cfg, "snr_db", snr_grid, T, base_seed, jobs)
    if outdir is not None:
        _write_sweep_outputs(rows, records, "snr_db", cfg, snr_grid, T, base_seed, outdir, report_name)
    return rows


def lambda_sweep(
    cfg: TrialConfig,
    lambda_grid,
    T: int,
    base_seed: int = 12345,
    outdir: str | Path | None = None,
    jobs: int = 1,
    report_name: str = "lambda_sweep",
):
    """As the SNR sweep, with the regularization weight varying at fixed SNR."""
    if T < 1:
        raise ValueError("T must be at least 1")
    rows, records = _sweep(cfg, "lambda", lambda_grid, T, base_seed, jobs)
    if outdir is not None:
        _write_sweep_outputs(rows, records, "lambda", cfg, lambda_grid, T, base_seed, outdir, report_name)
    return rows
