"""Latent residual models: E-steps vs brute force, M-steps vs grid maximizers,
marginal likelihoods vs independent assemblies, EM ascent, recovery, selection."""

import numpy as np
import pytest
from scipy import stats

from latentdml.dml import ResidualSet
from latentdml.errors import (
    DegenerateDataError,
    DegenerateTreatmentError,
    InvalidParameterError,
    ModelSelectionError,
)
from latentdml.latent import (
    KIND_CONFOUNDER,
    KIND_ORDINARY,
    KIND_OUTCOME,
    ConfounderLatentParams,
    FitReport,
    GaussianResidualParams,
    LatentFitConfig,
    ModelSelectionResult,
    OutcomeLatentParams,
    _confounder_expected_loglik,
    _outcome_expected_loglik,
    bic,
    confounder_adjust,
    confounder_m_step,
    confounder_marginal_loglik,
    confounder_posterior,
    fit_confounder_em,
    fit_ordinary,
    fit_outcome_em,
    outcome_adjust,
    outcome_e_step,
    outcome_m_step,
    outcome_marginal_loglik,
    score_theta,
    select_and_estimate,
    select_from_reports,
)
from latentdml.dml import gaussian_residual_loglik
from latentdml.numerics import RngStream

from oracles import (
    confounder_posterior_bayes,
    grid_refine_maximize,
    outcome_posterior_grid,
)


def _outcome_data(n, theta=1.0, beta=5.0, sigma_u=1.0, sigma_v=0.5, seed=0):
    rng = np.random.default_rng(seed)
    V = sigma_v * rng.standard_normal(n)
    Z = rng.exponential(beta, n)
    R = theta * V + Z - beta + sigma_u * rng.standard_normal(n)
    return ResidualSet(R_hat=R, V_hat=V)


def _confounder_data(n, theta=1.0, a=2.0, b=-2.0, q=0.4, sigma_u=1.0, sigma_v=0.5, seed=0):
    rng = np.random.default_rng(seed)
    Z = (rng.random(n) < q).astype(float) - q
    V = b * Z + sigma_v * rng.standard_normal(n)
    R = theta * V + a * Z + sigma_u * rng.standard_normal(n)
    return ResidualSet(R_hat=R, V_hat=V)


def _gaussian_data(n, theta=1.0, sigma_u=1.0, sigma_v=0.5, seed=0):
    rng = np.random.default_rng(seed)
    V = sigma_v * rng.standard_normal(n)
    R = theta * V + sigma_u * rng.standard_normal(n)
    return ResidualSet(R_hat=R, V_hat=V)


# ---------------------------------------------------------------------------
# Outcome model: E-step
# ---------------------------------------------------------------------------

def test_outcome_e_step_centered_case():
    # With R - theta*V = 0, beta = 1, sigma_u = 1 the truncation location is
    # exactly 0 and the posterior mean is the half-normal mean sqrt(2/pi).
    res = ResidualSet(R_hat=np.array([2.0]), V_hat=np.array([1.0]))
    z1, z2 = outcome_e_step(res, theta=2.0, beta=1.0, sigma_u=1.0)
    assert z1[0] == pytest.approx(np.sqrt(2.0 / np.pi), abs=1e-12)
    assert z2[0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("shift", [-3.0, 0.0, 2.0, 10.0])
@pytest.mark.parametrize("beta,sigma_u", [(0.5, 1.0), (5.0, 0.5)])
def test_outcome_e_step_matches_grid_posterior(shift, beta, sigma_u):
    theta, v = 1.3, 0.7
    r = shift + theta * v
    res = ResidualSet(R_hat=np.array([r]), V_hat=np.array([v]))
    z1, z2 = outcome_e_step(res, theta, beta, sigma_u)
    z1_ref, z2_ref = outcome_posterior_grid(r, v, theta, beta, sigma_u)
    assert z1[0] == pytest.approx(z1_ref, rel=1e-6, abs=1e-9)
    assert z2[0] == pytest.approx(z2_ref, rel=1e-6, abs=1e-9)


# ---------------------------------------------------------------------------
# Outcome model: M-step against grid maximization
# ---------------------------------------------------------------------------

def test_outcome_m_step_maximizes_expected_loglik():
    res = _outcome_data(400, seed=3)
    theta0, beta0, sigma0 = 0.8, 3.0, 1.2
    z1, z2 = outcome_e_step(res, theta0, beta0, sigma0)
    theta1, beta1, sigma1 = outcome_m_step(res, z1, z2, beta0, ng_step=0.1)

    # theta and sigma_u jointly maximize the objective at the old beta.
    def objective(x):
        return _outcome_expected_loglik(res, x[0], beta0, x[1], z1, z2)

    best_x, _ = grid_refine_maximize(
        objective, np.array([theta1 - 1.0, 0.2]), np.array([theta1 + 1.0, 4.0])
    )
    assert theta1 == pytest.approx(best_x[0], abs=1e-5)
    assert sigma1 == pytest.approx(best_x[1], abs=1e-5)

    # the beta move may not decrease the objective at the new (theta, sigma)
    before = _outcome_expected_loglik(res, theta1, beta0, sigma1, z1, z2)
    after = _outcome_expected_loglik(res, theta1, beta1, sigma1, z1, z2)
    assert after >= before - 1e-12


def test_outcome_m_step_beta_step_reaches_stationary_point():
    # Iterating the M-step updates at a fixed posterior drives the beta
    # gradient to zero: the fixed point maximizes the expected loglik in beta.
    res = _outcome_data(400, seed=4)
    z1, z2 = outcome_e_step(res, 1.0, 4.0, 1.0)
    beta = 4.0
    for _ in range(400):
        theta, beta, sigma = outcome_m_step(res, z1, z2, beta, ng_step=0.1)

    def objective_beta(x):
        return _outcome_expected_loglik(res, theta, x[0], sigma, z1, z2)

    best_b, _ = grid_refine_maximize(
        objective_beta, np.array([max(beta - 1.0, 1e-3)]), np.array([beta + 1.0])
    )
    assert beta == pytest.approx(best_b[0], abs=1e-4)


# ---------------------------------------------------------------------------
# Outcome model: marginal log-likelihood
# ---------------------------------------------------------------------------

def test_outcome_marginal_matches_scipy_assembly():
    # Independent construction: scipy's exponentially-modified normal for the
    # outcome residual (X = loc + scale*(N + Exp(mean K))) plus a normal for V.
    res = _outcome_data(50, seed=5)
    theta, beta, sigma_u, sigma_v = 0.9, 4.0, 1.1, 0.6
    got = outcome_marginal_loglik(res, theta, beta, sigma_u, sigma_v)
    K = beta / sigma_u
    ref = np.sum(
        stats.exponnorm.logpdf(res.R_hat, K, loc=theta * res.V_hat - beta, scale=sigma_u)
    ) + np.sum(stats.norm.logpdf(res.V_hat, 0.0, sigma_v))
    assert got == pytest.approx(ref, rel=1e-10)


def test_outcome_marginal_gaussian_limit():
    # As the shock mean shrinks the model collapses to the Gaussian baseline.
    res = _gaussian_data(300, seed=6)
    fitg = gaussian_residual_loglik(res, 1.0)
    ll = outcome_marginal_loglik(res, 1.0, 1e-6, fitg.sigma_u, fitg.sigma_v)
    assert ll == pytest.approx(fitg.loglik, abs=1e-3)


# ---------------------------------------------------------------------------
# Outcome model: full EM
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def outcome_fit():
    res = _outcome_data(3000, seed=0)
    return res, fit_outcome_em(res)


def test_outcome_em_recovers_parameters(outcome_fit):
    _, report = outcome_fit
    assert report.converged
    assert report.params.theta == pytest.approx(1.0, abs=0.05)
    assert report.params.shock_mean == pytest.approx(5.0, rel=0.15)
    assert report.theta_final == pytest.approx(1.0, abs=0.05)
    assert report.n_parameters == 4
    assert report.kind == KIND_OUTCOME


def test_outcome_em_trace_is_nondecreasing(outcome_fit):
    _, report = outcome_fit
    diffs = np.diff(report.loglik_trace)
    assert np.all(diffs >= -1e-9)
    assert report.loglik == report.loglik_trace[-1]
    assert report.bic == pytest.approx(
        -2.0 * report.loglik + 4.0 * np.log(report.n_samples)
    )


def test_outcome_adjusted_residuals_center_and_recover(outcome_fit):
    res, report = outcome_fit
    adjusted = outcome_adjust(res, report.params)
    centered = adjusted - report.params.theta * res.V_hat
    assert abs(np.mean(centered)) < 0.1
    assert score_theta(adjusted, res.V_hat) == pytest.approx(report.theta_final, abs=1e-12)


def test_outcome_em_degenerate_exact_fit_raises():
    V = np.linspace(-1.0, 1.0, 20)
    res = ResidualSet(R_hat=2.0 * V, V_hat=V)
    with pytest.raises(DegenerateDataError):
        fit_outcome_em(res)


# ---------------------------------------------------------------------------
# Confounder model: posterior
# ---------------------------------------------------------------------------

def test_confounder_posterior_frozen_logodds_case():
    # b = 0, q = 1/2 kill all terms except the outcome channel; the chosen
    # residual makes the log-odds exactly 2.
    res = ResidualSet(R_hat=np.array([2.0]), V_hat=np.array([0.0]))
    pi = confounder_posterior(res, theta=0.0, a=1.0, b=0.0, q=0.5, sigma_u=1.0, sigma_v=1.0)
    assert pi[0] == pytest.approx(1.0 / (1.0 + np.exp(-2.0)), abs=1e-12)
    assert pi[0] == pytest.approx(0.8807970779778823, abs=1e-12)


def test_confounder_posterior_matches_bayes_oracle_randomized():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(500):
        r, v = rng.uniform(-5, 5, size=2)
        theta = rng.uniform(-2, 2)
        a, b = rng.uniform(-3, 3, size=2)
        q = rng.uniform(0.05, 0.95)
        sigma_u, sigma_v = rng.uniform(0.3, 3.0, size=2)
        res = ResidualSet(R_hat=np.array([r]), V_hat=np.array([v]))
        pi = confounder_posterior(res, theta, a, b, q, sigma_u, sigma_v)[0]
        ref = confounder_posterior_bayes(r, v, theta, a, b, q, sigma_u, sigma_v)
        worst = max(worst, abs(pi - ref))
    assert worst < 1e-10


# ---------------------------------------------------------------------------
# Confounder model: M-step against grid maximization
# ---------------------------------------------------------------------------

def test_confounder_m_step_maximizes_each_coordinate():
    res = _confounder_data(400, seed=7)
    theta0, a0, b0, q0, su0, sv0 = 0.7, 1.0, -1.0, 0.5, 1.2, 0.7
    pi = confounder_posterior(res, theta0, a0, b0, q0, su0, sv0)
    theta1, a1, b1, q1, su1, sv1 = confounder_m_step(res, pi, q0, ng_step=0.1)

    # treatment loading maximizes the objective on its own
    def obj_b(x):
        return _confounder_expected_loglik(res, theta1, a1, x[0], q0, su1, sv1, pi)

    best_b, _ = grid_refine_maximize(obj_b, np.array([b1 - 1.0]), np.array([b1 + 1.0]))
    assert b1 == pytest.approx(best_b[0], abs=1e-5)

    # effect and outcome loading maximize jointly
    def obj_ta(x):
        return _confounder_expected_loglik(res, x[0], x[1], b1, q0, su1, sv1, pi)

    best_ta, _ = grid_refine_maximize(
        obj_ta, np.array([theta1 - 1.0, a1 - 1.0]), np.array([theta1 + 1.0, a1 + 1.0])
    )
    assert theta1 == pytest.approx(best_ta[0], abs=1e-5)
    assert a1 == pytest.approx(best_ta[1], abs=1e-5)

    # scales maximize their own channels
    def obj_su(x):
        return _confounder_expected_loglik(res, theta1, a1, b1, q0, x[0], sv1, pi)

    def obj_sv(x):
        return _confounder_expected_loglik(res, theta1, a1, b1, q0, su1, x[0], pi)

    best_su, _ = grid_refine_maximize(obj_su, np.array([0.2]), np.array([4.0]))
    best_sv, _ = grid_refine_maximize(obj_sv, np.array([0.2]), np.array([4.0]))
    assert su1 == pytest.approx(best_su[0], abs=1e-5)
    assert sv1 == pytest.approx(best_sv[0], abs=1e-5)

    # the q move may not decrease the objective at the new parameters
    before = _confounder_expected_loglik(res, theta1, a1, b1, q0, su1, sv1, pi)
    after = _confounder_expected_loglik(res, theta1, a1, b1, q1, su1, sv1, pi)
    assert after >= before - 1e-12


# ---------------------------------------------------------------------------
# Confounder model: marginal log-likelihood
# ---------------------------------------------------------------------------

def test_confounder_marginal_matches_direct_mixture():
    res = _confounder_data(50, seed=8)
    theta, a, b, q, su, sv = 0.9, 1.5, -1.2, 0.35, 1.1, 0.6
    got = confounder_marginal_loglik(res, theta, a, b, q, su, sv)
    z_hi, z_lo = 1.0 - q, -q
    e = res.R_hat - theta * res.V_hat
    mix = q * stats.norm.pdf(res.V_hat, b * z_hi, sv) * stats.norm.pdf(e, a * z_hi, su) + (
        1.0 - q
    ) * stats.norm.pdf(res.V_hat, b * z_lo, sv) * stats.norm.pdf(e, a * z_lo, su)
    assert got == pytest.approx(float(np.sum(np.log(mix))), rel=1e-10)


def test_confounder_marginal_no_loading_equals_gaussian():
    res = _gaussian_data(200, seed=9)
    fitg = gaussian_residual_loglik(res, 1.0)
    ll = confounder_marginal_loglik(res, 1.0, 0.0, 0.0, 0.3, fitg.sigma_u, fitg.sigma_v)
    assert ll == pytest.approx(fitg.loglik, abs=1e-10)


# ---------------------------------------------------------------------------
# Confounder model: full EM
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def confounder_fit():
    res = _confounder_data(3000, seed=0)
    return res, fit_confounder_em(res, stream=RngStream(42))


def test_confounder_em_recovers_parameters(confounder_fit):
    # true (a, b, q) = (2, -2, 0.4) relabels to (-2, 2, 0.6) under the b >= 0
    # convention; theta stays at 1.
    _, report = confounder_fit
    p = report.params
    assert report.converged
    assert p.treatment_loading >= 0.0
    assert p.theta == pytest.approx(1.0, abs=0.05)
    assert p.outcome_loading == pytest.approx(-2.0, abs=0.2)
    assert p.treatment_loading == pytest.approx(2.0, abs=0.2)
    assert p.high_prob == pytest.approx(0.6, abs=0.05)
    assert report.theta_final == pytest.approx(1.0, abs=0.05)
    assert report.n_parameters == 6
    assert report.kind == KIND_CONFOUNDER


def test_confounder_em_trace_is_nondecreasing(confounder_fit):
    _, report = confounder_fit
    assert np.all(np.diff(report.loglik_trace) >= -1e-9)
    assert report.bic == pytest.approx(
        -2.0 * report.loglik + 6.0 * np.log(report.n_samples)
    )


def test_confounder_adjusted_residuals_center_and_recover(confounder_fit):
    res, report = confounder_fit
    adjusted = confounder_adjust(res, report.params)
    centered = adjusted - report.params.theta * res.V_hat
    assert abs(np.mean(centered)) < 0.1
    # adjustment must undo most of the confounding bias in the pooled slope
    naive = score_theta(res.R_hat, res.V_hat)
    assert abs(naive - 1.0) > 0.3
    assert abs(report.theta_final - 1.0) < 0.05


def test_confounder_relabeling_leaves_adjustment_invariant():
    res = _confounder_data(500, seed=11)
    params = ConfounderLatentParams(
        theta=1.0,
        outcome_loading=1.5,
        treatment_loading=-1.2,
        high_prob=0.35,
        sigma_u=1.0,
        sigma_v=0.6,
    )
    flipped = ConfounderLatentParams(
        theta=1.0,
        outcome_loading=-1.5,
        treatment_loading=1.2,
        high_prob=0.65,
        sigma_u=1.0,
        sigma_v=0.6,
    )
    np.testing.assert_allclose(
        confounder_adjust(res, params), confounder_adjust(res, flipped), atol=1e-10
    )


def test_confounder_em_degenerate_exact_fit_raises():
    V = np.linspace(-1.0, 1.0, 20)
    res = ResidualSet(R_hat=0.5 * V, V_hat=V)
    with pytest.raises(DegenerateDataError):
        fit_confounder_em(res)


# ---------------------------------------------------------------------------
# score_theta / bic / ordinary fit
# ---------------------------------------------------------------------------

def test_score_theta_closed_form_and_degenerate():
    V = np.array([1.0, -2.0, 3.0])
    R = 1.7 * V
    assert score_theta(R, V) == pytest.approx(1.7, abs=1e-14)
    with pytest.raises(DegenerateTreatmentError):
        score_theta(R, np.zeros(3))


def test_bic_formula_and_validation():
    assert bic(-10.0, 3, 100) == pytest.approx(20.0 + 3.0 * np.log(100.0))
    with pytest.raises(InvalidParameterError):
        bic(0.0, 0, 100)
    with pytest.raises(InvalidParameterError):
        bic(0.0, 3, 0)


def test_fit_ordinary_report():
    res = _gaussian_data(500, seed=12)
    report = fit_ordinary(res)
    assert report.kind == KIND_ORDINARY
    assert report.n_parameters == 3
    assert report.converged and report.iterations == 0
    assert report.theta_final == pytest.approx(report.params.theta)
    fitg = gaussian_residual_loglik(res, report.params.theta)
    assert report.loglik == pytest.approx(fitg.loglik)


# ---------------------------------------------------------------------------
# Model selection
# ---------------------------------------------------------------------------

def _mk_report(kind, k, bic_value):
    return FitReport(
        kind=kind,
        params=None,
        loglik=0.0,
        loglik_trace=np.array([0.0]),
        converged=True,
        iterations=1,
        n_parameters=k,
        bic=bic_value,
        theta_final=1.0,
        n_samples=10,
    )


def test_select_from_reports_prefers_smaller_bic():
    reports = {
        KIND_ORDINARY: _mk_report(KIND_ORDINARY, 3, 105.0),
        KIND_OUTCOME: _mk_report(KIND_OUTCOME, 4, 100.0),
    }
    assert select_from_reports(reports) == KIND_OUTCOME


def test_select_from_reports_tie_goes_to_fewer_parameters():
    reports = {
        KIND_CONFOUNDER: _mk_report(KIND_CONFOUNDER, 6, 100.0),
        KIND_ORDINARY: _mk_report(KIND_ORDINARY, 3, 100.0 + 5e-10),
        KIND_OUTCOME: _mk_report(KIND_OUTCOME, 4, 100.0 + 8e-10),
    }
    assert select_from_reports(reports) == KIND_ORDINARY
    # outside the tie window the raw minimum wins
    reports[KIND_CONFOUNDER] = _mk_report(KIND_CONFOUNDER, 6, 100.0 - 1e-6)
    assert select_from_reports(reports) == KIND_CONFOUNDER
    with pytest.raises(InvalidParameterError):
        select_from_reports({})


@pytest.mark.parametrize(
    "maker,expected",
    [
        (_gaussian_data, KIND_ORDINARY),
        (_outcome_data, KIND_OUTCOME),
        (_confounder_data, KIND_CONFOUNDER),
    ],
)
def test_select_and_estimate_identifies_generating_model(maker, expected):
    res = maker(2000, seed=21)
    result = select_and_estimate(res, stream=RngStream(5))
    assert isinstance(result, ModelSelectionResult)
    assert result.selected == expected
    assert result.failures == {}
    assert result.theta == pytest.approx(1.0, abs=0.1)
    assert set(result.reports) == {KIND_ORDINARY, KIND_OUTCOME, KIND_CONFOUNDER}


def test_select_and_estimate_degenerate_data_raises_with_causes():
    V = np.linspace(-1.0, 1.0, 30)
    res = ResidualSet(R_hat=1.0 * V, V_hat=V)
    with pytest.raises(ModelSelectionError) as excinfo:
        select_and_estimate(res)
    assert set(excinfo.value.causes) == {KIND_ORDINARY, KIND_OUTCOME, KIND_CONFOUNDER}


def test_latent_fit_config_validation():
    with pytest.raises(InvalidParameterError):
        LatentFitConfig(tol=0.0)
    with pytest.raises(InvalidParameterError):
        LatentFitConfig(max_iter=0)
    with pytest.raises(InvalidParameterError):
        LatentFitConfig(restarts=0)
    with pytest.raises(InvalidParameterError):
        LatentFitConfig(ng_step=-1.0)
