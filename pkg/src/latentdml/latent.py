"""Latent-variable models on cross-fitted residual pairs, fit by EM.

Both models extend the Gaussian baseline R = theta*V + noise in a way that
captures a specific violation of the usual assumptions, and both are fit by
expectation-maximization on the pooled residuals:

* Outcome-shock model. The outcome noise contains a centered exponential
  component, R = theta*V + (Zp - beta) + W_u with Zp >= 0 exponential of mean
  beta and W_u Gaussian. The marginal of R - theta*V is an exponentially
  modified Gaussian shifted to mean zero. The E-step needs moments of a
  truncated normal; all parameter updates except beta are closed forms, and
  beta takes a curvature-scaled gradient step with backtracking.

* Binary-confounder model. A hidden centered two-state variable Z (values
  1-q and -q with probabilities q and 1-q) loads on both residuals:
  V = b*Z + W_v and R = theta*V + a*Z + W_u. The E-step is exact two-state
  Bayes; (theta, a), b and both scales are closed forms, and q takes a
  curvature-scaled gradient step with backtracking. Multiple seeded restarts
  guard against the a = b = 0 stationary point, and the reported solution is
  canonicalized to b >= 0 (the labeling of the two states is not identified).

After a latent fit, the estimated latent contribution is subtracted from the
outcome residual and the treatment effect is re-estimated from the adjusted
score equation. Model choice among {ordinary, outcome, confounder} is by BIC.

Every fit verifies the EM ascent property on the marginal log-likelihood and
raises EmAscentError if an iteration decreases it beyond float tolerance;
that is an internal-consistency alarm, not a data condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dml import ResidualSet, gaussian_residual_loglik, pooled_theta
from .errors import (
    DegenerateDataError,
    DegenerateTreatmentError,
    EmAscentError,
    InvalidParameterError,
    LatentDmlError,
    ModelSelectionError,
)
from .numerics import RngStream, solve_2x2, truncated_normal_moments, emg_log_density

KIND_ORDINARY = "ordinary"
KIND_OUTCOME = "outcome_latent"
KIND_CONFOUNDER = "confounder_latent"

SIGMA_FLOOR = 1e-8
BETA_FLOOR = 1e-6
Q_FLOOR = 1e-4
# An EM update may only decrease the marginal log-likelihood by float noise.
ASCENT_SLACK = 1e-9
_MAX_BACKTRACKS = 20
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LatentFitConfig:
    """EM controls: convergence tolerance, iteration cap, restarts, step scale."""

    tol: float = 1e-8
    max_iter: int = 500
    restarts: int = 5
    ng_step: float = 0.1

    def __post_init__(self):
        if not (np.isfinite(self.tol) and self.tol > 0):
            raise InvalidParameterError(f"tol must be positive: got {self.tol}")
        if self.max_iter < 1:
            raise InvalidParameterError(f"max_iter must be >= 1: got {self.max_iter}")
        if self.restarts < 1:
            raise InvalidParameterError(f"restarts must be >= 1: got {self.restarts}")
        if not (np.isfinite(self.ng_step) and self.ng_step > 0):
            raise InvalidParameterError(f"ng_step must be positive: got {self.ng_step}")


@dataclass(frozen=True)
class GaussianResidualParams:
    theta: float
    sigma_u: float
    sigma_v: float


@dataclass(frozen=True)
class OutcomeLatentParams:
    theta: float
    shock_mean: float  # beta: mean of the nonnegative exponential shock
    sigma_u: float
    sigma_v: float


@dataclass(frozen=True)
class ConfounderLatentParams:
    theta: float
    outcome_loading: float  # a
    treatment_loading: float  # b, canonicalized to >= 0
    high_prob: float  # q
    sigma_u: float
    sigma_v: float


@dataclass(frozen=True)
class FitReport:
    """One fitted residual model with its evidence and final effect estimate."""

    kind: str
    params: object
    loglik: float
    loglik_trace: np.ndarray = field(repr=False)
    converged: bool
    iterations: int
    n_parameters: int
    bic: float
    theta_final: float
    n_samples: int


@dataclass
class ModelSelectionResult:
    reports: dict
    failures: dict
    selected: str
    theta: float


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def score_theta(adjusted_R: np.ndarray, V_hat: np.ndarray) -> float:
    """Solve the estimating equation sum((R_adj - theta*V) * V) = 0."""
    denom = float(V_hat @ V_hat)
    if denom == 0.0:
        raise DegenerateTreatmentError(
            "treatment residuals are identically zero; effect not identified"
        )
    return float(V_hat @ adjusted_R) / denom


def bic(loglik: float, n_parameters: int, n_samples: int) -> float:
    """Bayesian information criterion, smaller is better."""
    if n_samples < 1 or n_parameters < 1:
        raise InvalidParameterError("BIC needs n_samples >= 1 and n_parameters >= 1")
    return -2.0 * loglik + n_parameters * float(np.log(n_samples))


def _gaussian_logpdf_sum(x: np.ndarray, sigma: float) -> float:
    n = x.size
    return float(-0.5 * n * _LOG_2PI - n * np.log(sigma) - (x @ x) / (2.0 * sigma * sigma))


# ---------------------------------------------------------------------------
# Ordinary (purely Gaussian) residual model
# ---------------------------------------------------------------------------

def fit_ordinary(res: ResidualSet) -> FitReport:
    """Gaussian baseline: no latent structure, closed-form fit."""
    theta = pooled_theta(res)
    gfit = gaussian_residual_loglik(res, theta)
    params = GaussianResidualParams(theta=theta, sigma_u=gfit.sigma_u, sigma_v=gfit.sigma_v)
    k = 3
    return FitReport(
        kind=KIND_ORDINARY,
        params=params,
        loglik=gfit.loglik,
        loglik_trace=np.array([gfit.loglik]),
        converged=True,
        iterations=0,
        n_parameters=k,
        bic=bic(gfit.loglik, k, res.n),
        theta_final=theta,
        n_samples=res.n,
    )


# ---------------------------------------------------------------------------
# Outcome-shock model
# ---------------------------------------------------------------------------

def outcome_e_step(res: ResidualSet, theta: float, beta: float, sigma_u: float):
    """Posterior mean and second moment of the nonnegative shock per sample.

    Combining the exponential prior with the Gaussian observation of
    R - theta*V = z - beta + noise gives a normal in z with location
    R - theta*V + beta - sigma_u^2/beta truncated to z >= 0.
    """
    m = res.R_hat - theta * res.V_hat + beta - sigma_u * sigma_u / beta
    mom = truncated_normal_moments(m, sigma_u)
    return np.asarray(mom.mean), np.asarray(mom.second_moment)


def _outcome_expected_loglik(res, theta, beta, sigma_u, z1, z2) -> float:
    """Expected complete-data log-likelihood of the shock model.

    Constant in the latent entropy and the V-part, which do not move during
    the M-step; used for update derivations and backtracking comparisons.
    """
    e = res.R_hat - theta * res.V_hat
    g = e + beta
    quad = g * g - 2.0 * g * z1 + z2
    return float(
        -res.n * np.log(beta)
        - np.sum(z1) / beta
        - res.n * np.log(sigma_u)
        - np.sum(quad) / (2.0 * sigma_u * sigma_u)
    )


def outcome_m_step(res: ResidualSet, z1, z2, beta: float, ng_step: float = 0.1):
    """One coordinate sweep: closed-form theta and sigma_u, guarded step on beta.

    theta and sigma_u maximize the expected complete-data log-likelihood with
    beta held at its previous value; beta then moves along its gradient scaled
    by beta^2 (the inverse curvature of the exponential likelihood), halving
    the step until the objective does not decrease. Projection to the positive
    floor happens before each comparison.
    """
    V, R = res.V_hat, res.R_hat
    denom = float(V @ V)
    if denom == 0.0:
        raise DegenerateTreatmentError("treatment residuals are identically zero")
    theta_new = float(V @ (R - z1 + beta)) / denom
    e = R - theta_new * V
    g = e + beta
    var_u = float(np.mean(g * g - 2.0 * g * z1 + z2))
    sigma_new = max(float(np.sqrt(max(var_u, 0.0))), SIGMA_FLOOR)

    grad = float(np.sum(z1 / (beta * beta) - 1.0 / beta - (g - z1) / (sigma_new * sigma_new)))
    q_old = _outcome_expected_loglik(res, theta_new, beta, sigma_new, z1, z2)
    beta_new = beta
    step = ng_step
    for _ in range(_MAX_BACKTRACKS):
        cand = max(beta + step * beta * beta * grad, BETA_FLOOR)
        if _outcome_expected_loglik(res, theta_new, cand, sigma_new, z1, z2) >= q_old:
            beta_new = cand
            break
        step *= 0.5
    return theta_new, beta_new, sigma_new


def outcome_marginal_loglik(
    res: ResidualSet, theta: float, beta: float, sigma_u: float, sigma_v: float
) -> float:
    """Joint log-likelihood: shifted exponentially-modified Gaussian for the
    outcome residual plus a centered Gaussian for the treatment residual."""
    ll_r = emg_log_density(res.R_hat, theta * res.V_hat - beta, sigma_u, 1.0 / beta)
    return float(np.sum(ll_r)) + _gaussian_logpdf_sum(res.V_hat, sigma_v)


def outcome_adjust(res: ResidualSet, params: OutcomeLatentParams) -> np.ndarray:
    """Outcome residuals minus the posterior mean of the centered shock."""
    z1, _ = outcome_e_step(res, params.theta, params.shock_mean, params.sigma_u)
    return res.R_hat - (z1 - params.shock_mean)


def fit_outcome_em(res: ResidualSet, config: LatentFitConfig | None = None) -> FitReport:
    """EM fit of the outcome-shock model from a data-driven start."""
    config = config if config is not None else LatentFitConfig()
    theta = pooled_theta(res)
    sigma_u = _rms(res.R_hat - theta * res.V_hat)
    if sigma_u == 0.0:
        raise DegenerateDataError(
            "outcome residuals fit exactly; shock-model likelihood is unbounded"
        )
    beta = max(sigma_u, BETA_FLOOR)
    sigma_v = max(_rms(res.V_hat), SIGMA_FLOOR)

    trace = [outcome_marginal_loglik(res, theta, beta, sigma_u, sigma_v)]
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iter + 1):
        z1, z2 = outcome_e_step(res, theta, beta, sigma_u)
        theta, beta, sigma_u = outcome_m_step(res, z1, z2, beta, config.ng_step)
        ll = outcome_marginal_loglik(res, theta, beta, sigma_u, sigma_v)
        if ll < trace[-1] - ASCENT_SLACK:
            raise EmAscentError(
                f"outcome EM decreased the log-likelihood at iteration {iterations}: "
                f"{trace[-1]} -> {ll}"
            )
        trace.append(ll)
        if abs(trace[-1] - trace[-2]) < config.tol:
            converged = True
            break

    params = OutcomeLatentParams(theta=theta, shock_mean=beta, sigma_u=sigma_u, sigma_v=sigma_v)
    theta_final = score_theta(outcome_adjust(res, params), res.V_hat)
    k = 4
    return FitReport(
        kind=KIND_OUTCOME,
        params=params,
        loglik=trace[-1],
        loglik_trace=np.array(trace),
        converged=converged,
        iterations=iterations,
        n_parameters=k,
        bic=bic(trace[-1], k, res.n),
        theta_final=theta_final,
        n_samples=res.n,
    )


# ---------------------------------------------------------------------------
# Binary-confounder model
# ---------------------------------------------------------------------------

def confounder_posterior(
    res: ResidualSet, theta, a, b, q, sigma_u, sigma_v
) -> np.ndarray:
    """Exact posterior probability of the high latent state per sample.

    The two-state Bayes log-odds reduce to a base-rate term plus one linear
    term per residual channel.
    """
    log_odds = (
        np.log(q / (1.0 - q))
        + ((2.0 * q - 1.0) * b * b + 2.0 * b * res.V_hat) / (2.0 * sigma_v * sigma_v)
        + ((2.0 * q - 1.0) * a * a + 2.0 * a * (res.R_hat - theta * res.V_hat))
        / (2.0 * sigma_u * sigma_u)
    )
    # expit with both-tail saturation safety
    out = np.empty_like(log_odds)
    pos = log_odds >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-log_odds[pos]))
    expv = np.exp(log_odds[~pos])
    out[~pos] = expv / (1.0 + expv)
    return out


def _z_moments(pi: np.ndarray, q: float):
    """Posterior mean and second moment of the centered two-state variable."""
    zbar = pi - q
    z2 = pi * (1.0 - q) ** 2 + (1.0 - pi) * q * q
    return zbar, z2


def _confounder_expected_loglik(res, theta, a, b, q, sigma_u, sigma_v, pi) -> float:
    """Expected complete-data log-likelihood of the confounder model.

    The latent support (1-q, -q) and the state prior both depend on q, so the
    q-derivative has no convenient closed form; backtracking compares this
    function directly.
    """
    z_hi, z_lo = 1.0 - q, -q
    e = res.R_hat - theta * res.V_hat
    prior = float(np.sum(pi * np.log(q) + (1.0 - pi) * np.log1p(-q)))
    quad_v = pi * (res.V_hat - b * z_hi) ** 2 + (1.0 - pi) * (res.V_hat - b * z_lo) ** 2
    quad_u = pi * (e - a * z_hi) ** 2 + (1.0 - pi) * (e - a * z_lo) ** 2
    return (
        prior
        - res.n * float(np.log(sigma_v))
        - float(np.sum(quad_v)) / (2.0 * sigma_v * sigma_v)
        - res.n * float(np.log(sigma_u))
        - float(np.sum(quad_u)) / (2.0 * sigma_u * sigma_u)
    )


def confounder_m_step(res: ResidualSet, pi: np.ndarray, q: float, ng_step: float = 0.1):
    """One coordinate sweep of the confounder model.

    b, then (theta, a) jointly, then both scales are closed-form maximizers
    of the expected complete-data log-likelihood at the incoming q; q then
    takes a gradient step scaled by q(1-q) with backtracking. The q-gradient
    comes from a central finite difference because the latent support moves
    with q.
    """
    V, R = res.V_hat, res.R_hat
    zbar, z2 = _z_moments(pi, q)
    s_z2 = float(np.sum(z2))
    s_vz = float(V @ zbar)
    s_vv = float(V @ V)
    b_new = s_vz / s_z2
    theta_new, a_new = solve_2x2(s_vv, s_vz, s_vz, s_z2, float(R @ V), float(R @ zbar))

    var_v = float(np.mean(V * V - 2.0 * b_new * V * zbar + b_new * b_new * z2))
    sigma_v_new = max(float(np.sqrt(max(var_v, 0.0))), SIGMA_FLOOR)
    e = R - theta_new * V
    var_u = float(np.mean(e * e - 2.0 * a_new * e * zbar + a_new * a_new * z2))
    sigma_u_new = max(float(np.sqrt(max(var_u, 0.0))), SIGMA_FLOOR)

    def q_objective(qq: float) -> float:
        return _confounder_expected_loglik(
            res, theta_new, a_new, b_new, qq, sigma_u_new, sigma_v_new, pi
        )

    h = 1e-6
    grad = (q_objective(q + h) - q_objective(q - h)) / (2.0 * h)
    obj_old = q_objective(q)
    q_new = q
    step = ng_step
    for _ in range(_MAX_BACKTRACKS):
        cand = q + step * q * (1.0 - q) * grad
        cand = min(max(cand, Q_FLOOR), 1.0 - Q_FLOOR)
        if q_objective(cand) >= obj_old:
            q_new = cand
            break
        step *= 0.5
    return theta_new, a_new, b_new, q_new, sigma_u_new, sigma_v_new


def confounder_marginal_loglik(
    res: ResidualSet, theta, a, b, q, sigma_u, sigma_v
) -> float:
    """Joint log-likelihood of (R, V) under the two-state mixture."""
    e = res.R_hat - theta * res.V_hat
    V = res.V_hat

    def component(z_val, log_prior):
        return (
            log_prior
            - 0.5 * ((V - b * z_val) / sigma_v) ** 2
            - np.log(sigma_v)
            - 0.5 * ((e - a * z_val) / sigma_u) ** 2
            - np.log(sigma_u)
            - _LOG_2PI
        )

    hi = component(1.0 - q, np.log(q))
    lo = component(-q, np.log1p(-q))
    return float(np.sum(np.logaddexp(hi, lo)))


def confounder_adjust(res: ResidualSet, params: ConfounderLatentParams) -> np.ndarray:
    """Outcome residuals minus the posterior mean of the confounder pass-through."""
    pi = confounder_posterior(
        res,
        params.theta,
        params.outcome_loading,
        params.treatment_loading,
        params.high_prob,
        params.sigma_u,
        params.sigma_v,
    )
    return res.R_hat - params.outcome_loading * (pi - params.high_prob)


def _run_confounder_em(res, theta, a, b, q, sigma_u, sigma_v, config):
    trace = [confounder_marginal_loglik(res, theta, a, b, q, sigma_u, sigma_v)]
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iter + 1):
        pi = confounder_posterior(res, theta, a, b, q, sigma_u, sigma_v)
        theta, a, b, q, sigma_u, sigma_v = confounder_m_step(res, pi, q, config.ng_step)
        ll = confounder_marginal_loglik(res, theta, a, b, q, sigma_u, sigma_v)
        if ll < trace[-1] - ASCENT_SLACK:
            raise EmAscentError(
                f"confounder EM decreased the log-likelihood at iteration {iterations}: "
                f"{trace[-1]} -> {ll}"
            )
        trace.append(ll)
        if abs(trace[-1] - trace[-2]) < config.tol:
            converged = True
            break
    return (theta, a, b, q, sigma_u, sigma_v), trace, converged, iterations


def fit_confounder_em(
    res: ResidualSet,
    config: LatentFitConfig | None = None,
    stream: RngStream | None = None,
) -> FitReport:
    """EM fit of the binary-confounder model with seeded random restarts.

    a = b = 0 is always a stationary point of this EM, so the loadings start
    at random draws scaled to the residual spreads; the restart with the best
    final log-likelihood wins. The sign convention is normalized afterwards:
    only (a, b, q) and (-a, -b, 1-q) relabelings differ, the fit does not.
    """
    config = config if config is not None else LatentFitConfig()
    stream = stream if stream is not None else RngStream(0)
    theta0 = pooled_theta(res)
    sigma_u0 = _rms(res.R_hat - theta0 * res.V_hat)
    if sigma_u0 == 0.0:
        raise DegenerateDataError(
            "outcome residuals fit exactly; confounder-model likelihood is unbounded"
        )
    sigma_v0 = max(_rms(res.V_hat), SIGMA_FLOOR)

    best = None
    for restart in range(config.restarts):
        sub = stream.substream(restart)
        a0 = sigma_u0 * float(sub.standard_normal(1)[0])
        b0 = sigma_v0 * float(sub.standard_normal(1)[0])
        outcome = _run_confounder_em(
            res, theta0, a0, b0, 0.5, sigma_u0, sigma_v0, config
        )
        if best is None or outcome[1][-1] > best[1][-1]:
            best = outcome

    (theta, a, b, q, sigma_u, sigma_v), trace, converged, iterations = best
    if b < 0:
        a, b, q = -a, -b, 1.0 - q
    params = ConfounderLatentParams(
        theta=theta,
        outcome_loading=a,
        treatment_loading=b,
        high_prob=q,
        sigma_u=sigma_u,
        sigma_v=sigma_v,
    )
    theta_final = score_theta(confounder_adjust(res, params), res.V_hat)
    k = 6
    return FitReport(
        kind=KIND_CONFOUNDER,
        params=params,
        loglik=trace[-1],
        loglik_trace=np.array(trace),
        converged=converged,
        iterations=iterations,
        n_parameters=k,
        bic=bic(trace[-1], k, res.n),
        theta_final=theta_final,
        n_samples=res.n,
    )


# ---------------------------------------------------------------------------
# Model selection
# ---------------------------------------------------------------------------

def select_from_reports(reports: dict) -> str:
    """Kind with the smallest BIC; ties within 1e-9 go to fewer parameters."""
    if not reports:
        raise InvalidParameterError("no fitted models to select from")
    best_bic = min(report.bic for report in reports.values())
    eligible = [
        (report.n_parameters, kind)
        for kind, report in reports.items()
        if report.bic <= best_bic + 1e-9
    ]
    return min(eligible)[1]


def select_and_estimate(
    res: ResidualSet,
    config: LatentFitConfig | None = None,
    stream: RngStream | None = None,
) -> ModelSelectionResult:
    """Fit all residual models, choose one by BIC, report its effect estimate.

    Individual model failures are recorded and selection proceeds over the
    survivors; only a full wipeout raises ModelSelectionError.
    """
    stream = stream if stream is not None else RngStream(0)
    reports, failures = {}, {}
    fitters = (
        (KIND_ORDINARY, lambda: fit_ordinary(res)),
        (KIND_OUTCOME, lambda: fit_outcome_em(res, config)),
        (KIND_CONFOUNDER, lambda: fit_confounder_em(res, config, stream)),
    )
    for kind, fitter in fitters:
        try:
            reports[kind] = fitter()
        except LatentDmlError as exc:
            failures[kind] = f"{type(exc).__name__}: {exc}"
    if not reports:
        raise ModelSelectionError(failures)
    selected = select_from_reports(reports)
    return ModelSelectionResult(
        reports=reports,
        failures=failures,
        selected=selected,
        theta=reports[selected].theta_final,
    )
