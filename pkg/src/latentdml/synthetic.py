"""Seeded generators for the benchmark scenarios.

Every scenario follows the partially linear template

    D = m(X) + V,   Y = theta_true * D + g(X) + U,

with X standard normal and m, g sparse linear maps whose active coefficients
are standard normal. The scenarios differ only in the noise pair (U, V):

* no_latent:        U, V independent centered Gaussians.
* outcome_latent:   U adds a centered exponential shock to the Gaussian part.
* confounder:       a hidden two-state variable loads on both U and V.
* laplace_misspec:  U is centered Laplace (no candidate model matches it).

Draws come from a counter-based stream keyed by the config seed, in a fixed
documented order (see `generate`), so instances are reproducible bit for bit.
Stored truth residuals are recomputed from the final arrays with the exact
expressions `(Y - theta*D) - g(X)` and `D - m(X)`, which makes the published
reconstruction identities hold at the bit level rather than merely to
rounding.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .dml import Dataset
from .errors import InvalidDataError, InvalidParameterError, UnknownPresetError
from .numerics import RngStream

SCENARIO_KINDS = ("no_latent", "outcome_latent", "confounder", "laplace_misspec")

# Default Laplace scale makes Var(U) = 2*scale^2 equal 1.0, the Gaussian
# scenarios' outcome-noise variance, so comparisons are like for like.
DEFAULT_LAPLACE_SCALE = 1.0 / np.sqrt(2.0)

_GENERATE_SALT = 0
_SEED_LIMIT = 2**64


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete description of one synthetic data-generating process."""

    kind: str
    n: int = 300
    d: int = 100
    theta_true: float = 1.0
    sparsity: float = 0.1
    exp_mean: float = 5.0
    a: float = 2.0
    b: float = 2.0
    q: float | None = None  # None: drawn uniformly in [0.2, 0.8] per instance
    sigma_u: float = 1.0
    sigma_v: float = 0.5
    laplace_scale: float = DEFAULT_LAPLACE_SCALE
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise InvalidParameterError(
                f"unknown scenario kind {self.kind!r}; valid kinds: {', '.join(SCENARIO_KINDS)}"
            )
        if self.n < 10:
            raise InvalidParameterError(f"n must be >= 10: got {self.n}")
        if self.d < 1:
            raise InvalidParameterError(f"d must be >= 1: got {self.d}")
        if not np.isfinite(self.theta_true):
            raise InvalidParameterError(f"theta_true must be finite: got {self.theta_true}")
        if not 0.0 <= self.sparsity <= 1.0:
            raise InvalidParameterError(f"sparsity must be in [0, 1]: got {self.sparsity}")
        if not (np.isfinite(self.exp_mean) and self.exp_mean > 0):
            raise InvalidParameterError(f"exp_mean must be positive: got {self.exp_mean}")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise InvalidParameterError("confounder loadings a, b must be finite")
        if self.q is not None and not 0.0 < self.q < 1.0:
            raise InvalidParameterError(f"q must be in (0, 1) when given: got {self.q}")
        for name in ("sigma_u", "sigma_v", "laplace_scale"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidParameterError(f"{name} must be positive: got {value}")
        if not 0 <= int(self.seed) < _SEED_LIMIT:
            raise InvalidParameterError(f"seed must fit in 64 unsigned bits: got {self.seed}")


@dataclass(frozen=True)
class ScenarioTruth:
    """Ground truth stored with a generated instance."""

    theta: float
    kind: str
    coef_treatment: np.ndarray = field(repr=False)  # m(X) = X @ coef_treatment
    coef_outcome: np.ndarray = field(repr=False)  # g(X) = X @ coef_outcome
    U: np.ndarray = field(repr=False)
    V: np.ndarray = field(repr=False)
    latent: np.ndarray = field(repr=False)  # centered latent contribution per sample
    q: float | None  # success rate actually used (confounder only)


@dataclass(frozen=True)
class GeneratedInstance:
    data: Dataset
    truth: ScenarioTruth
    config: ScenarioConfig


def _sparse_coefficients(stream: RngStream, d: int, sparsity: float) -> np.ndarray:
    """Coefficient vector with round(sparsity*d) active standard-normal entries.

    Consumes, in order, one d-permutation (support choice) and the active
    values. A zero active count yields the zero vector and consumes only the
    permutation.
    """
    n_active = int(round(sparsity * d))
    support = stream.permutation(d)[:n_active]
    coef = np.zeros(d)
    if n_active > 0:
        coef[support] = stream.standard_normal(n_active)
    return coef


def generate(cfg: ScenarioConfig) -> GeneratedInstance:
    """Draw one dataset from the configured process, with bit-exact truth.

    Draw order from the seed-keyed stream: (1) q if the confounder rate is
    unspecified, (2) X row-major, (3) treatment coefficients (permutation,
    then values), (4) outcome coefficients likewise, (5) the scenario's
    latent draws, (6) treatment noise, (7) outcome noise. Stored U and V are
    recomputed from the final arrays as (Y - theta*D) - g(X) and D - m(X),
    so those expressions reproduce them exactly.
    """
    stream = RngStream(int(cfg.seed), _GENERATE_SALT)
    n, d = cfg.n, cfg.d

    q_used: float | None = None
    if cfg.kind == "confounder":
        q_used = cfg.q if cfg.q is not None else stream.uniform(0.2, 0.8)

    X = stream.standard_normal(n * d).reshape(n, d)
    coef_m = _sparse_coefficients(stream, d, cfg.sparsity)
    coef_g = _sparse_coefficients(stream, d, cfg.sparsity)

    latent = np.zeros(n)
    if cfg.kind == "outcome_latent":
        latent = stream.exponential(cfg.exp_mean, n) - cfg.exp_mean
    elif cfg.kind == "confounder":
        latent = stream.bernoulli(q_used, n) - q_used

    v_noise = cfg.sigma_v * stream.standard_normal(n)
    if cfg.kind == "laplace_misspec":
        u_noise = stream.laplace(cfg.laplace_scale, n)
    else:
        u_noise = cfg.sigma_u * stream.standard_normal(n)

    if cfg.kind == "confounder":
        V = cfg.b * latent + v_noise
        U = cfg.a * latent + u_noise
    elif cfg.kind == "outcome_latent":
        V = v_noise
        U = latent + u_noise
    else:
        V = v_noise
        U = u_noise

    m_vals = X @ coef_m
    g_vals = X @ coef_g
    D = m_vals + V
    Y = cfg.theta_true * D + g_vals + U

    data = Dataset(X=X, D=D, Y=Y)
    truth = ScenarioTruth(
        theta=cfg.theta_true,
        kind=cfg.kind,
        coef_treatment=coef_m,
        coef_outcome=coef_g,
        U=(Y - cfg.theta_true * D) - g_vals,
        V=D - m_vals,
        latent=latent,
        q=q_used,
    )
    return GeneratedInstance(data=data, truth=truth, config=cfg)


PRESETS = {
    "figure2-outcome": ScenarioConfig(kind="outcome_latent", exp_mean=5.0),
    "figure3-positive": ScenarioConfig(kind="confounder", a=2.0, b=2.0),
    "figure3-negative": ScenarioConfig(kind="confounder", a=2.0, b=-2.0),
    "modelsel-none": ScenarioConfig(kind="no_latent"),
    "modelsel-laplace": ScenarioConfig(kind="laplace_misspec"),
}


def preset(name: str, seed: int = 0) -> ScenarioConfig:
    """Named benchmark configuration (n=300, d=100, theta=1) with a seed."""
    if name not in PRESETS:
        raise UnknownPresetError(
            f"unknown preset {name!r}; valid presets: {', '.join(sorted(PRESETS))}"
        )
    return replace(PRESETS[name], seed=seed)


# ---------------------------------------------------------------------------
# CSV layout shared with the command-line tools
# ---------------------------------------------------------------------------

def csv_header(d: int) -> list:
    return ["y", "d"] + [f"x{j}" for j in range(1, d + 1)]


def write_csv(data: Dataset, path: str) -> None:
    """Write a dataset as comma-separated values: header y,d,x1..xd.

    Floats are written in shortest round-trip form, so reading the file back
    reproduces the arrays exactly.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_header(data.d))
        for i in range(data.n):
            writer.writerow(
                [repr(float(data.Y[i])), repr(float(data.D[i]))]
                + [repr(float(v)) for v in data.X[i]]
            )


def read_csv(path: str) -> Dataset:
    """Read a dataset written in the layout above; errors name row and column."""
    if not os.path.exists(path):
        raise InvalidDataError(f"no such file: {path}")
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidDataError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[:2] != ["y", "d"]:
            raise InvalidDataError(
                f"{path}: header must start with 'y,d,x1,...': got {','.join(header[:4])}..."
            )
        d = len(header) - 2
        if header != csv_header(d):
            raise InvalidDataError(
                f"{path}: covariate columns must be named x1..x{d} in order"
            )
        rows = []
        for row_number, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise InvalidDataError(
                    f"{path}: row {row_number} has {len(row)} fields, expected {d + 2}"
                )
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                bad = next(
                    (j for j, cell in enumerate(row) if not _is_float(cell)), 0
                )
                raise InvalidDataError(
                    f"{path}: row {row_number}, column {header[bad]!r}: "
                    f"cannot parse {row[bad]!r} as a number"
                ) from None
    if not rows:
        raise InvalidDataError(f"{path}: no data rows")
    table = np.array(rows)
    return Dataset(X=table[:, 2:], D=table[:, 1], Y=table[:, 0])


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False
