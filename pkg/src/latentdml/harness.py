"""Monte Carlo benchmark harness: repeated generate / residualize / estimate.

Each run derives its own seed from (master_seed, run_index), draws a fresh
dataset, cross-fits residuals once, and applies every requested method to the
shared residual pair, so method comparisons within a run see identical data.
Method failures (degenerate data, EM diagnostics) are recorded on the run
result and never abort the sweep. Runs can execute in a process pool; the
output is a pure function of (config, methods, runs, master_seed) regardless
of worker count or completion order.

Randomness is partitioned per run by salt: 0 generates the dataset (inside
`synthetic.generate`), 1 draws the cross-fitting folds, 2 drives the
confounder EM restarts, 3 drives the direct-ElasticNet CV split. Independent
salted streams keep methods from perturbing each other's draws when the
method set changes.

Report files exclude wall-clock times so identical sweeps rewrite identical
bytes; timings stay available on the in-memory results.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import elasticnet
from .dml import cross_fit_residuals, make_folds, pooled_theta
from .errors import InvalidParameterError, LatentDmlError
from .latent import (
    KIND_CONFOUNDER,
    KIND_ORDINARY,
    KIND_OUTCOME,
    fit_confounder_em,
    fit_ordinary,
    fit_outcome_em,
    select_from_reports,
)
from .numerics import RngStream, derive_seed
from .synthetic import ScenarioConfig, generate

METHODS = ("elasticnet_direct", "dml", "outcome_latent", "confounder_latent", "bic_select")

SALT_FOLDS = 1
SALT_CONFOUNDER_RESTARTS = 2
SALT_DIRECT_CV = 3

STATS_HEADER = ["method", "n_runs", "mean", "std", "bias", "rmse", "ci95"]
RUNS_HEADER = ["seed", "scenario", "method", "theta_hat", "bic", "converged", "error"]


@dataclass(frozen=True)
class RunResult:
    """Outcome of one (run, method) cell of a sweep."""

    seed: int
    scenario: str
    method: str
    theta_hat: float | None
    bic: float | None
    converged: bool
    wall_time: float
    error: str | None = None


@dataclass(frozen=True)
class AggregateStats:
    """Per-method summary over the converged runs of a sweep."""

    method: str
    n_runs: int
    mean: float | None
    std: float | None
    bias: float | None
    rmse: float | None
    ci95: float | None
    n_failed: int


def _validate_methods(methods) -> tuple:
    msel = tuple(m for m in METHODS if m in set(methods))
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise InvalidParameterError(
            f"unknown methods {sorted(unknown)}; valid methods: {', '.join(METHODS)}"
        )
    if not msel:
        raise InvalidParameterError("methods must name at least one estimator")
    return msel


def _direct_elasticnet_theta(data, run_seed: int) -> float:
    """Treatment coefficient from one cross-validated fit of Y on (D, X)."""
    features = np.column_stack([data.D, data.X])
    config = elasticnet.cv_select(
        features, data.Y, stream=RngStream(run_seed, SALT_DIRECT_CV)
    )
    model = elasticnet.fit(features, data.Y, config)
    return float(model.coefficients[0])


def _execute_run(cfg: ScenarioConfig, methods: tuple, run_index: int, master_seed: int,
                 folds: int = 5) -> list:
    """All requested method results for one run; pure in its arguments."""
    run_seed = derive_seed(master_seed, run_index)
    inst = generate(replace(cfg, seed=run_seed))

    def failed(method, exc, elapsed):
        return RunResult(
            seed=run_seed,
            scenario=cfg.kind,
            method=method,
            theta_hat=None,
            bic=None,
            converged=False,
            wall_time=elapsed,
            error=f"{type(exc).__name__}: {exc}",
        )

    def succeeded(method, theta_hat, bic_value, converged, elapsed):
        return RunResult(
            seed=run_seed,
            scenario=cfg.kind,
            method=method,
            theta_hat=float(theta_hat),
            bic=None if bic_value is None else float(bic_value),
            converged=bool(converged),
            wall_time=elapsed,
        )

    results = []

    # Residuals are computed once and shared by all residual-based methods.
    needs_residuals = set(methods) - {"elasticnet_direct"}
    res, res_error = None, None
    if needs_residuals:
        try:
            split = make_folds(cfg.n, folds, RngStream(run_seed, SALT_FOLDS))
            res = cross_fit_residuals(inst.data, split)
        except LatentDmlError as exc:
            res_error = exc

    # Latent-model reports are fitted at most once per run and shared between
    # their own method rows and BIC selection.
    report_cache = {}

    def get_report(kind):
        if kind not in report_cache:
            if kind == KIND_ORDINARY:
                report_cache[kind] = fit_ordinary(res)
            elif kind == KIND_OUTCOME:
                report_cache[kind] = fit_outcome_em(res)
            else:
                report_cache[kind] = fit_confounder_em(
                    res, stream=RngStream(run_seed, SALT_CONFOUNDER_RESTARTS)
                )
        return report_cache[kind]

    for method in methods:
        start = time.perf_counter()
        try:
            if method == "elasticnet_direct":
                theta = _direct_elasticnet_theta(inst.data, run_seed)
                results.append(
                    succeeded(method, theta, None, True, time.perf_counter() - start)
                )
                continue
            if res_error is not None:
                raise res_error
            if method == "dml":
                results.append(
                    succeeded(
                        method, pooled_theta(res), None, True, time.perf_counter() - start
                    )
                )
            elif method == "outcome_latent":
                report = get_report(KIND_OUTCOME)
                results.append(
                    succeeded(
                        method,
                        report.theta_final,
                        report.bic,
                        report.converged,
                        time.perf_counter() - start,
                    )
                )
            elif method == "confounder_latent":
                report = get_report(KIND_CONFOUNDER)
                results.append(
                    succeeded(
                        method,
                        report.theta_final,
                        report.bic,
                        report.converged,
                        time.perf_counter() - start,
                    )
                )
            else:  # bic_select
                reports, causes = {}, {}
                for kind in (KIND_ORDINARY, KIND_OUTCOME, KIND_CONFOUNDER):
                    try:
                        reports[kind] = get_report(kind)
                    except LatentDmlError as exc:
                        causes[kind] = exc
                if not reports:
                    raise next(iter(causes.values()))
                selected = select_from_reports(reports)
                chosen = reports[selected]
                results.append(
                    succeeded(
                        method,
                        chosen.theta_final,
                        chosen.bic,
                        chosen.converged,
                        time.perf_counter() - start,
                    )
                )
        except LatentDmlError as exc:
            results.append(failed(method, exc, time.perf_counter() - start))

    results.sort(key=lambda rr: rr.method)
    return results


def _resolve_workers(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get("LATENT_DML_WORKERS", "").strip()
        if env:
            try:
                workers = int(env)
            except ValueError:
                raise InvalidParameterError(
                    f"LATENT_DML_WORKERS must be an integer: got {env!r}"
                ) from None
        else:
            workers = os.cpu_count() or 1
    if workers < 1:
        raise InvalidParameterError(f"workers must be >= 1: got {workers}")
    return workers


def iter_monte_carlo(
    cfg: ScenarioConfig,
    methods,
    runs: int,
    master_seed: int,
    workers: int | None = None,
    folds: int = 5,
):
    """Yield each run's result list in run order as it completes.

    With multiple workers, completed runs are still yielded in run-index
    order, so downstream writers see a deterministic sequence.
    """
    methods = _validate_methods(methods)
    if runs < 1:
        raise InvalidParameterError(f"runs must be >= 1: got {runs}")
    workers = _resolve_workers(workers)
    if workers == 1:
        for run_index in range(runs):
            yield _execute_run(cfg, methods, run_index, master_seed, folds)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_execute_run, cfg, methods, run_index, master_seed, folds)
            for run_index in range(runs)
        ]
        for future in futures:
            yield future.result()


def run_monte_carlo(
    cfg: ScenarioConfig,
    methods,
    runs: int,
    master_seed: int,
    workers: int | None = None,
    folds: int = 5,
) -> list:
    """Full sweep; the flat result list is ordered by (seed, method)."""
    flat = []
    for run_results in iter_monte_carlo(cfg, methods, runs, master_seed, workers, folds):
        flat.extend(run_results)
    flat.sort(key=lambda rr: (rr.seed, rr.method))
    return flat


def aggregate(results, theta_true: float) -> list:
    """Per-method statistics over converged runs, ordered by method name.

    Non-converged or failed runs are excluded from the statistics and counted
    in n_failed; a method with zero converged runs gets absent (None) stats.
    """
    if not results:
        raise InvalidParameterError("cannot aggregate an empty result list")
    by_method = {}
    for rr in results:
        by_method.setdefault(rr.method, []).append(rr)
    out = []
    for method in sorted(by_method):
        rows = by_method[method]
        good = [rr.theta_hat for rr in rows if rr.converged and rr.theta_hat is not None]
        n_failed = len(rows) - len(good)
        if not good:
            out.append(
                AggregateStats(
                    method=method,
                    n_runs=0,
                    mean=None,
                    std=None,
                    bias=None,
                    rmse=None,
                    ci95=None,
                    n_failed=n_failed,
                )
            )
            continue
        values = np.array(good)
        mean = float(np.mean(values))
        std = float(np.std(values))  # population convention: rmse^2 = bias^2 + std^2
        bias = mean - theta_true
        rmse = float(np.sqrt(np.mean((values - theta_true) ** 2)))
        ci95 = 1.96 * std / float(np.sqrt(values.size))
        out.append(
            AggregateStats(
                method=method,
                n_runs=values.size,
                mean=mean,
                std=std,
                bias=bias,
                rmse=rmse,
                ci95=ci95,
                n_failed=n_failed,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_stats_row(stats: AggregateStats) -> list:
    return [
        stats.method,
        str(stats.n_runs),
        _cell(stats.mean),
        _cell(stats.std),
        _cell(stats.bias),
        _cell(stats.rmse),
        _cell(stats.ci95),
    ]


def format_run_row(rr: RunResult) -> list:
    return [
        str(rr.seed),
        rr.scenario,
        rr.method,
        _cell(rr.theta_hat),
        _cell(rr.bic),
        _cell(rr.converged),
        _cell(rr.error),
    ]


def _stats_dict(stats: AggregateStats) -> dict:
    return {
        "method": stats.method,
        "n_runs": stats.n_runs,
        "mean": stats.mean,
        "std": stats.std,
        "bias": stats.bias,
        "rmse": stats.rmse,
        "ci95": stats.ci95,
        "n_failed": stats.n_failed,
    }


def _run_dict(rr: RunResult) -> dict:
    return {
        "seed": rr.seed,
        "scenario": rr.scenario,
        "method": rr.method,
        "theta_hat": rr.theta_hat,
        "bic": rr.bic,
        "converged": rr.converged,
        "error": rr.error,
    }


def runs_companion_path(path: str) -> str:
    stem, ext = os.path.splitext(path)
    return f"{stem}_runs{ext or '.csv'}"


def write_report(stats, results, path: str, format: str = "csv") -> None:
    """Write aggregate statistics and per-run rows.

    CSV puts the stats table at `path` and the per-run rows in a companion
    file with an `_runs` suffix; JSON puts both sections in one document.
    Wall-clock times are never written, so identical sweeps produce identical
    bytes. Rows appear in the order given.
    """
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(STATS_HEADER)
            for st in stats:
                writer.writerow(format_stats_row(st))
        with open(runs_companion_path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RUNS_HEADER)
            for rr in results:
                writer.writerow(format_run_row(rr))
    elif format == "json":
        document = {
            "stats": [_stats_dict(st) for st in stats],
            "runs": [_run_dict(rr) for rr in results],
        }
        with open(path, "w") as fh:
            json.dump(document, fh, indent=2)
            fh.write("\n")
    else:
        raise InvalidParameterError(f"unknown report format {format!r}; use 'csv' or 'json'")
