"""Cross-fitted residualization for the partially linear treatment model.

The observed data follow Y = theta * D + g(X) + U and D = m(X) + V with
unknown nuisance functions g and m. Both conditional means E[Y|X] and E[D|X]
are learned by cross-validated ElasticNet on K folds: the models for fold k
are trained on the other K-1 folds and produce out-of-fold residuals

    R_hat_i = Y_i - h_hat(X_i),   V_hat_i = D_i - m_hat(X_i),

where h(X) = E[Y|X] = g(X) + theta * m(X). The pooled no-intercept regression
of R_hat on V_hat is the usual debiased estimate; the residual pair also feeds
the latent-variable models downstream.

Hyperparameter selection inside cross-fitting uses the K-1 training folds of
the current split as CV groups. That keeps fold membership attached to
samples instead of row positions, so permuting rows together with the fold
assignment permutes the residuals and nothing else, and the whole first stage
consumes no randomness beyond the fold split itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import elasticnet
from .elasticnet import (
    DEFAULT_ALPHA_GRID,
    DEFAULT_L1_RATIO_GRID,
    ElasticNetConfig,
    _grid_search_groups,
    _validate_grids,
)
from .errors import (
    DegenerateDataError,
    DegenerateTreatmentError,
    InvalidDataError,
    InvalidParameterError,
    ShapeError,
)
from .numerics import RngStream


@dataclass
class Dataset:
    """Covariates X (n, d), treatment D (n,), outcome Y (n,)."""

    X: np.ndarray
    D: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.D = np.asarray(self.D, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2:
            raise ShapeError(f"X must be 2-dimensional: got ndim={self.X.ndim}")
        n = self.X.shape[0]
        if self.D.shape != (n,) or self.Y.shape != (n,):
            raise ShapeError(
                f"D and Y must be length-{n} vectors: got {self.D.shape} and {self.Y.shape}"
            )
        for name, arr in (("X", self.X), ("D", self.D), ("Y", self.Y)):
            if not np.all(np.isfinite(arr)):
                raise InvalidDataError(f"{name} contains non-finite values")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass
class FoldSplit:
    """Fold label per sample; labels run 0..n_folds-1 and every fold is non-empty."""

    assignment: np.ndarray

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.ndim != 1 or self.assignment.size == 0:
            raise ShapeError("fold assignment must be a non-empty 1-d integer array")
        labels = np.unique(self.assignment)
        k = labels.size
        if not np.array_equal(labels, np.arange(k)):
            raise InvalidParameterError(
                f"fold labels must be exactly 0..{k - 1} with no gaps: got {labels.tolist()}"
            )
        if k < 2:
            raise InvalidParameterError("need at least 2 folds")

    @property
    def n_folds(self) -> int:
        return int(self.assignment.max()) + 1


@dataclass
class ResidualSet:
    """Out-of-fold outcome residuals R_hat and treatment residuals V_hat."""

    R_hat: np.ndarray
    V_hat: np.ndarray

    def __post_init__(self):
        self.R_hat = np.asarray(self.R_hat, dtype=np.float64)
        self.V_hat = np.asarray(self.V_hat, dtype=np.float64)
        if self.R_hat.ndim != 1 or self.R_hat.shape != self.V_hat.shape:
            raise ShapeError("R_hat and V_hat must be 1-d arrays of equal length")
        if self.R_hat.size == 0:
            raise InvalidDataError("residual set is empty")
        if not (np.all(np.isfinite(self.R_hat)) and np.all(np.isfinite(self.V_hat))):
            raise InvalidDataError("residuals contain non-finite values")

    @property
    def n(self) -> int:
        return self.R_hat.size


@dataclass
class FoldRecord:
    """Diagnostics for one cross-fitting fold (what trained where, which configs won)."""

    fold: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    config_outcome: ElasticNetConfig
    config_treatment: ElasticNetConfig


def make_folds(n: int, k: int, stream: RngStream) -> FoldSplit:
    """Assign n samples to k folds by a seeded permutation; sizes differ by <= 1."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidParameterError(f"n must be a positive integer: got {n!r}")
    if not isinstance(k, (int, np.integer)) or not 2 <= k <= n:
        raise InvalidParameterError(f"k must satisfy 2 <= k <= n={n}: got {k!r}")
    perm = stream.permutation(int(n))
    assignment = np.empty(int(n), dtype=np.int64)
    assignment[perm] = np.arange(int(n)) % int(k)
    return FoldSplit(assignment)


def cross_fit_residuals(
    data: Dataset,
    folds: FoldSplit,
    alpha_grid=DEFAULT_ALPHA_GRID,
    l1_ratio_grid=DEFAULT_L1_RATIO_GRID,
    stream: RngStream | None = None,
    record: list | None = None,
    max_sweeps: int = 1000,
    tol: float = 1e-6,
) -> ResidualSet:
    """Out-of-fold outcome and treatment residuals.

    For each fold k both conditional-mean models are grid-searched (CV groups
    are the other folds restricted to the training set) and refit on the full
    training set, then evaluated on fold k. Deterministic given data and fold
    split; `stream` is accepted for interface stability but the grouped CV
    consumes no randomness.

    Pass a list as `record` to collect per-fold FoldRecord diagnostics.
    """
    if folds.assignment.shape[0] != data.n:
        raise ShapeError(
            f"fold assignment covers {folds.assignment.shape[0]} samples, data has {data.n}"
        )
    alphas, l1s = _validate_grids(alpha_grid, l1_ratio_grid)
    k_folds = folds.n_folds
    single_config = len(alphas) == 1 and len(l1s) == 1
    if k_folds < 3 and not single_config:
        raise InvalidParameterError(
            "grid search inside cross-fitting needs >= 3 folds so each training "
            "set contains >= 2 CV groups; pass a single-point grid for 2 folds"
        )

    R_hat = np.empty(data.n)
    V_hat = np.empty(data.n)
    for k in range(k_folds):
        test = np.flatnonzero(folds.assignment == k)
        train = np.flatnonzero(folds.assignment != k)
        X_tr = data.X[train]
        y_tr = data.Y[train]
        d_tr = data.D[train]
        if single_config:
            key = (alphas[0], l1s[0])
            key_y, key_d = key, key
        else:
            inner_ids = folds.assignment[train]
            key_y, key_d = _grid_search_groups(
                X_tr, [y_tr, d_tr], inner_ids, alphas, l1s, max_sweeps, tol
            )
        cfg_y = ElasticNetConfig(alpha=key_y[0], l1_ratio=key_y[1], max_sweeps=max_sweeps, tol=tol)
        cfg_d = ElasticNetConfig(alpha=key_d[0], l1_ratio=key_d[1], max_sweeps=max_sweeps, tol=tol)
        model_y = elasticnet.fit(X_tr, y_tr, cfg_y)
        model_d = elasticnet.fit(X_tr, d_tr, cfg_d)
        X_te = data.X[test]
        R_hat[test] = data.Y[test] - elasticnet.predict(model_y, X_te)
        V_hat[test] = data.D[test] - elasticnet.predict(model_d, X_te)
        if record is not None:
            record.append(
                FoldRecord(
                    fold=k,
                    train_indices=train.copy(),
                    test_indices=test.copy(),
                    config_outcome=cfg_y,
                    config_treatment=cfg_d,
                )
            )
    return ResidualSet(R_hat=R_hat, V_hat=V_hat)


def pooled_theta(res: ResidualSet) -> float:
    """No-intercept least squares of R_hat on V_hat: sum(V R) / sum(V^2)."""
    denom = float(res.V_hat @ res.V_hat)
    if denom == 0.0:
        raise DegenerateTreatmentError(
            "treatment residuals are identically zero; effect not identified"
        )
    return float(res.V_hat @ res.R_hat) / denom


@dataclass(frozen=True)
class GaussianResidualFit:
    """Max-likelihood Gaussian description of the residual pair at a fixed theta."""

    loglik: float
    sigma_u: float
    sigma_v: float


def gaussian_residual_loglik(res: ResidualSet, theta: float) -> GaussianResidualFit:
    """Log-likelihood of residuals under R = theta*V + N(0, s_u^2), V = N(0, s_v^2).

    Scales are the zero-mean maximum-likelihood values (root mean squares);
    identically-zero residual components are degenerate rather than a fit.
    """
    if not np.isfinite(theta):
        raise InvalidParameterError(f"theta must be finite: got {theta}")
    n = res.n
    u = res.R_hat - theta * res.V_hat
    var_u = float(u @ u) / n
    var_v = float(res.V_hat @ res.V_hat) / n
    if var_u == 0.0 or var_v == 0.0:
        raise DegenerateDataError(
            f"zero-variance residuals (var_u={var_u}, var_v={var_v}); "
            "Gaussian likelihood is unbounded"
        )
    loglik = -0.5 * n * (np.log(2.0 * np.pi * var_u) + 1.0) - 0.5 * n * (
        np.log(2.0 * np.pi * var_v) + 1.0
    )
    return GaussianResidualFit(
        loglik=float(loglik), sigma_u=float(np.sqrt(var_u)), sigma_v=float(np.sqrt(var_v))
    )
