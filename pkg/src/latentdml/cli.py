"""Command-line front end: simulate datasets, estimate effects, run benchmarks.

Exit codes follow the usual convention: 0 on success, 1 for runtime or data
problems (unreadable files, non-numeric cells, degenerate inputs, I/O), and
2 for usage problems (bad flags, unknown presets or columns, invalid
parameter values).

Every subcommand accepts --config FILE, a JSON object whose keys mirror the
long flag names of that subcommand; values given on the command line override
values from the file. All commands are deterministic given their full flag
set, including --seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, replace

import numpy as np

from .dml import Dataset, cross_fit_residuals, make_folds, pooled_theta
from .errors import InvalidDataError, InvalidParameterError, LatentDmlError
from .harness import (
    METHODS,
    RUNS_HEADER,
    SALT_CONFOUNDER_RESTARTS,
    SALT_FOLDS,
    STATS_HEADER,
    aggregate,
    format_run_row,
    format_stats_row,
    iter_monte_carlo,
    runs_companion_path,
    write_report,
)
from .latent import (
    fit_confounder_em,
    fit_ordinary,
    fit_outcome_em,
    select_and_estimate,
)
from .numerics import RngStream
from .synthetic import PRESETS, ScenarioConfig, generate, preset, write_csv

ESTIMATE_MODELS = ("auto", "dml", "outcome", "confounder")

_SCENARIO_FLAGS = (
    # (dest, ScenarioConfig field)
    ("kind", "kind"),
    ("n", "n"),
    ("d", "d"),
    ("theta", "theta_true"),
    ("sparsity", "sparsity"),
    ("exp_mean", "exp_mean"),
    ("a", "a"),
    ("b", "b"),
    ("q", "q"),
    ("sigma_u", "sigma_u"),
    ("sigma_v", "sigma_v"),
    ("laplace_scale", "laplace_scale"),
)


@dataclass(frozen=True)
class EstimateRequest:
    """Validated description of one estimation job on a CSV file."""

    input_path: str
    outcome_col: str
    treatment_col: str
    covariate_cols: tuple | None  # None: every remaining column
    model: str
    folds: int
    seed: int
    output_path: str

    def __post_init__(self):
        if self.outcome_col == self.treatment_col:
            raise InvalidParameterError(
                f"outcome and treatment columns must differ: both {self.outcome_col!r}"
            )
        if self.model not in ESTIMATE_MODELS:
            raise InvalidParameterError(
                f"unknown model {self.model!r}; valid models: {', '.join(ESTIMATE_MODELS)}"
            )
        if self.folds < 2:
            raise InvalidParameterError(f"folds must be >= 2: got {self.folds}")


# ---------------------------------------------------------------------------
# Argument plumbing: argparse collects raw values (default None), a config
# file fills gaps, then per-command defaults fill what remains.
# ---------------------------------------------------------------------------

def _add_scenario_flags(sub):
    sub.add_argument("--preset", help="named benchmark scenario")
    sub.add_argument("--kind", help="scenario kind for a custom setup")
    sub.add_argument("--n", type=int, help="sample size")
    sub.add_argument("--d", type=int, help="covariate count")
    sub.add_argument("--theta", type=float, help="true treatment effect")
    sub.add_argument("--sparsity", type=float, help="fraction of active nuisance coefficients")
    sub.add_argument("--exp-mean", type=float, dest="exp_mean", help="outcome shock mean")
    sub.add_argument("--a", type=float, help="confounder outcome loading")
    sub.add_argument("--b", type=float, help="confounder treatment loading")
    sub.add_argument("--q", type=float, help="confounder high-state probability")
    sub.add_argument("--sigma-u", type=float, dest="sigma_u", help="outcome noise scale")
    sub.add_argument("--sigma-v", type=float, dest="sigma_v", help="treatment noise scale")
    sub.add_argument(
        "--laplace-scale", type=float, dest="laplace_scale", help="misspecified noise scale"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latent-dml",
        description="Debiased treatment-effect estimation with latent residual models.",
    )
    commands = parser.add_subparsers(dest="command")

    sim = commands.add_parser("simulate", help="write one synthetic dataset as CSV")
    _add_scenario_flags(sim)
    sim.add_argument("--seed", type=int, help="generator seed (default 0)")
    sim.add_argument("-o", "--output", help="CSV path to write (required)")
    sim.add_argument("--config", help="JSON file mirroring these flags")
    sim.set_defaults(handler=_cmd_simulate, defaults={"seed": 0})

    est = commands.add_parser("estimate", help="estimate a treatment effect from CSV data")
    est.add_argument("-i", "--input", help="input CSV path (required)")
    est.add_argument("--outcome-col", dest="outcome_col", help="outcome column (default y)")
    est.add_argument("--treatment-col", dest="treatment_col", help="treatment column (default d)")
    est.add_argument(
        "--covariates",
        help="comma-separated covariate columns (default: all remaining columns)",
    )
    est.add_argument("--model", help="auto, dml, outcome, or confounder (default auto)")
    est.add_argument("--folds", type=int, help="cross-fitting folds (default 5)")
    est.add_argument("--seed", type=int, help="seed for folds and restarts (default 0)")
    est.add_argument("-o", "--output", help="JSON report path (default <input>.report.json)")
    est.add_argument("--config", help="JSON file mirroring these flags")
    est.set_defaults(
        handler=_cmd_estimate,
        defaults={
            "outcome_col": "y",
            "treatment_col": "d",
            "model": "auto",
            "folds": 5,
            "seed": 0,
        },
    )

    ben = commands.add_parser("benchmark", help="run a Monte Carlo method comparison")
    _add_scenario_flags(ben)
    ben.add_argument("--runs", type=int, help="number of Monte Carlo runs (required)")
    ben.add_argument(
        "--methods", help=f"comma-separated subset of: {', '.join(METHODS)} (default all)"
    )
    ben.add_argument("--seed", type=int, help="master seed (default 0)")
    ben.add_argument("--folds", type=int, help="cross-fitting folds (default 5)")
    ben.add_argument(
        "--workers", type=int, help="parallel workers (default: LATENT_DML_WORKERS or CPU count)"
    )
    ben.add_argument("--format", help="report format, csv or json (default csv)")
    ben.add_argument("-o", "--output", help="stats file path (required)")
    ben.add_argument("--config", help="JSON file mirroring these flags")
    ben.set_defaults(
        handler=_cmd_benchmark,
        defaults={"seed": 0, "folds": 5, "format": "csv", "methods": ",".join(METHODS)},
    )

    return parser


def _merge_values(args) -> dict:
    """Layer per-command defaults under config-file values under CLI flags."""
    values = {
        k: v for k, v in vars(args).items() if k not in ("handler", "defaults", "command")
    }
    config_path = values.pop("config", None)
    if config_path:
        try:
            with open(config_path) as fh:
                file_values = json.load(fh)
        except OSError as exc:
            raise InvalidParameterError(f"cannot read config file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InvalidParameterError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(file_values, dict):
            raise InvalidParameterError("config file must hold a JSON object of flag values")
        unknown = set(file_values) - set(values)
        if unknown:
            raise InvalidParameterError(
                f"config file sets unknown keys: {', '.join(sorted(unknown))}"
            )
        for key, value in file_values.items():
            if values[key] is None:
                values[key] = value
    for key, value in args.defaults.items():
        if values.get(key) is None:
            values[key] = value
    return values


def _build_scenario(values) -> ScenarioConfig:
    if values.get("preset"):
        base = preset(str(values["preset"]))
    elif values.get("kind"):
        base = ScenarioConfig(kind=str(values["kind"]))
    else:
        raise InvalidParameterError("either --preset or --kind is required")
    overrides = {}
    for dest, cfg_field in _SCENARIO_FLAGS:
        value = values.get(dest)
        if value is not None:
            overrides[cfg_field] = value
    overrides["seed"] = int(values["seed"])
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def truth_sidecar_path(csv_path: str) -> str:
    stem, _ = os.path.splitext(csv_path)
    return f"{stem}.truth.json"


def _cmd_simulate(args) -> int:
    values = _merge_values(args)
    if not values.get("output"):
        raise InvalidParameterError("-o/--output is required")
    cfg = _build_scenario(values)
    inst = generate(cfg)
    out = str(values["output"])
    write_csv(inst.data, out)
    sidecar = truth_sidecar_path(out)
    with open(sidecar, "w") as fh:
        json.dump(
            {
                "theta_true": cfg.theta_true,
                "q_used": inst.truth.q,
                "config": asdict(cfg),
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    print(
        f"wrote {out} ({inst.data.n} rows, {inst.data.d + 2} columns) "
        f"and truth sidecar {sidecar}"
    )
    return 0


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _read_table(path: str):
    if not os.path.exists(path):
        raise InvalidDataError(f"no such file: {path}")
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InvalidDataError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in header]
        rows = list(reader)
    if not rows:
        raise InvalidDataError(f"{path}: no data rows")
    return header, rows


def _extract_columns(header, rows, request: EstimateRequest) -> Dataset:
    for label, name in (("outcome", request.outcome_col), ("treatment", request.treatment_col)):
        if name not in header:
            raise InvalidParameterError(
                f"{label} column {name!r} not found; available: {', '.join(header)}"
            )
    if request.covariate_cols is None:
        covariates = [
            c for c in header if c not in (request.outcome_col, request.treatment_col)
        ]
    else:
        covariates = list(request.covariate_cols)
        for name in covariates:
            if name not in header:
                raise InvalidParameterError(
                    f"covariate column {name!r} not found; available: {', '.join(header)}"
                )
            if name in (request.outcome_col, request.treatment_col):
                raise InvalidParameterError(
                    f"column {name!r} cannot be both a covariate and outcome/treatment"
                )
    if not covariates:
        raise InvalidParameterError("no covariate columns left to residualize on")

    index = {name: header.index(name) for name in header}
    width = len(header)
    parsed = np.empty((len(rows), width))
    for i, row in enumerate(rows, start=2):
        if len(row) != width:
            raise InvalidDataError(
                f"{request.input_path}: row {i} has {len(row)} fields, expected {width}"
            )
        for j, cell in enumerate(row):
            try:
                parsed[i - 2, j] = float(cell)
            except ValueError:
                raise InvalidDataError(
                    f"{request.input_path}: row {i}, column {header[j]!r}: "
                    f"cannot parse {cell!r} as a number"
                ) from None
    X = parsed[:, [index[c] for c in covariates]]
    return Dataset(X=X, D=parsed[:, index[request.treatment_col]], Y=parsed[:, index[request.outcome_col]])


def _fit_for_request(request: EstimateRequest, data: Dataset):
    if data.n < 10 * request.folds:
        raise InvalidDataError(
            f"need at least {10 * request.folds} rows for {request.folds}-fold "
            f"cross-fitting: got {data.n}"
        )
    split = make_folds(data.n, request.folds, RngStream(request.seed, SALT_FOLDS))
    res = cross_fit_residuals(data, split)

    candidates = {}
    failures = {}
    if request.model == "dml":
        theta = pooled_theta(res)
        selected = "ordinary"
        candidates["ordinary"] = fit_ordinary(res)
    elif request.model == "outcome":
        report = fit_outcome_em(res)
        theta, selected = report.theta_final, report.kind
        candidates[report.kind] = report
    elif request.model == "confounder":
        report = fit_confounder_em(
            res, stream=RngStream(request.seed, SALT_CONFOUNDER_RESTARTS)
        )
        theta, selected = report.theta_final, report.kind
        candidates[report.kind] = report
    else:  # auto
        result = select_and_estimate(
            res, stream=RngStream(request.seed, SALT_CONFOUNDER_RESTARTS)
        )
        theta, selected = result.theta, result.selected
        candidates = result.reports
        failures = result.failures
    return theta, selected, candidates, failures


def _cmd_estimate(args) -> int:
    values = _merge_values(args)
    if not values.get("input"):
        raise InvalidParameterError("-i/--input is required")
    input_path = str(values["input"])
    covariates = values.get("covariates")
    if isinstance(covariates, str):
        covariates = tuple(c.strip() for c in covariates.split(",") if c.strip())
    elif covariates is not None:
        covariates = tuple(covariates)
    request = EstimateRequest(
        input_path=input_path,
        outcome_col=str(values["outcome_col"]),
        treatment_col=str(values["treatment_col"]),
        covariate_cols=covariates,
        model=str(values["model"]),
        folds=int(values["folds"]),
        seed=int(values["seed"]),
        output_path=str(values.get("output") or input_path + ".report.json"),
    )

    header, rows = _read_table(request.input_path)
    data = _extract_columns(header, rows, request)
    theta, selected, candidates, failures = _fit_for_request(request, data)

    print(f"estimated treatment effect: {theta:.6f}  (model: {request.model})")
    if candidates:
        print("candidate        bic           converged")
        for kind in sorted(candidates, key=lambda k: candidates[k].bic):
            report = candidates[kind]
            marker = "  <- selected" if kind == selected and request.model == "auto" else ""
            print(f"{kind:<16} {report.bic:<13.4f} {str(report.converged).lower()}{marker}")
    for kind, message in sorted(failures.items()):
        print(f"{kind:<16} failed: {message}")

    document = {
        "input": request.input_path,
        "model": request.model,
        "selected": selected,
        "theta": theta,
        "folds": request.folds,
        "seed": request.seed,
        "n": data.n,
        "d": data.d,
        "candidates": {
            kind: {
                "theta": report.theta_final,
                "bic": report.bic,
                "loglik": report.loglik,
                "converged": report.converged,
                "iterations": report.iterations,
            }
            for kind, report in sorted(candidates.items())
        },
        "failures": dict(sorted(failures.items())),
    }
    with open(request.output_path, "w") as fh:
        json.dump(document, fh, indent=2)
        fh.write("\n")
    print(f"wrote report {request.output_path}")
    return 0


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def _format_stat(value) -> str:
    return "-" if value is None else f"{value:.6f}"


def _cmd_benchmark(args) -> int:
    values = _merge_values(args)
    if values.get("runs") is None:
        raise InvalidParameterError("--runs is required")
    if not values.get("output"):
        raise InvalidParameterError("-o/--output is required")
    cfg = _build_scenario(values)
    methods = values["methods"]
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    runs = int(values["runs"])
    fmt = str(values["format"])
    if fmt not in ("csv", "json"):
        raise InvalidParameterError(f"unknown report format {fmt!r}; use 'csv' or 'json'")
    output = str(values["output"])
    master_seed = int(values["seed"])

    results = []
    if fmt == "csv":
        # per-run rows are appended and flushed as each run finishes, so an
        # interrupted sweep leaves a valid prefix of the final file
        runs_path = runs_companion_path(output)
        with open(runs_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RUNS_HEADER)
            fh.flush()
            for batch in iter_monte_carlo(
                cfg, methods, runs, master_seed, values.get("workers"), int(values["folds"])
            ):
                for rr in batch:
                    writer.writerow(format_run_row(rr))
                fh.flush()
                results.extend(batch)
        stats = aggregate(results, cfg.theta_true)
        with open(output, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(STATS_HEADER)
            for st in stats:
                writer.writerow(format_stats_row(st))
    else:
        for batch in iter_monte_carlo(
            cfg, methods, runs, master_seed, values.get("workers"), int(values["folds"])
        ):
            results.extend(batch)
        stats = aggregate(results, cfg.theta_true)
        write_report(stats, results, output, format="json")

    print(f"{'method':<19} {'n_runs':>6} {'mean':>10} {'std':>10} {'bias':>10} "
          f"{'rmse':>10} {'ci95':>10} {'failed':>6}")
    for st in stats:
        print(
            f"{st.method:<19} {st.n_runs:>6} {_format_stat(st.mean):>10} "
            f"{_format_stat(st.std):>10} {_format_stat(st.bias):>10} "
            f"{_format_stat(st.rmse):>10} {_format_stat(st.ci95):>10} {st.n_failed:>6}"
        )
    print(f"wrote {output}" + ("" if fmt == "json" else f" and {runs_companion_path(output)}"))
    return 0


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse printed its own message
        return int(exc.code or 0)
    if not getattr(args, "handler", None):
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: a subcommand is required", file=sys.stderr)
        return 2
    try:
        return args.handler(args)
    except InvalidParameterError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (LatentDmlError, OSError) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
