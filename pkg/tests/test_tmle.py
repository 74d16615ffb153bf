import json
import warnings

import numpy as np
import pytest
from scipy.special import expit

from targeted_bayes.data import Dataset, SamplingDesign, estimate_rho, make_folds
from targeted_bayes.eif import CleverCovariates, eif, tilted_plugin_theta
from targeted_bayes.nuisance import CrossFittedNuisance, fit_cross_fitted
from targeted_bayes.sim import DgpSpec, ScenarioSpec, generate
from targeted_bayes.tmle import (
    LeastFavorablePath,
    SubmodelState,
    fit_epsilon,
    fluctuate,
    run_tmle,
    submodel_loglik,
)

from conftest import simulated_fit


def _random_state(n, seed, rho=0.5):
    rng = np.random.default_rng(seed)
    m, g = rng.uniform(0.05, 0.95, n), rng.uniform(0.1, 0.9, n)
    L = (rng.random(n) < g).astype(int)
    L[:2] = [1, 0]
    Y = np.where(L == 1, (rng.random(n) < m).astype(float), np.nan)
    data = Dataset(rng.uniform(size=(n, 1)), L, Y)
    state = SubmodelState.initial(m, g, rho)
    return data, state


def _loglik_from_scratch(data, state, clever, eps):
    m = expit(state.m_logit + eps * clever.H)
    g = expit(state.g_logit + eps * clever.M)
    w = state.weights * np.exp(eps * clever.lambda_X)
    w /= w.sum()
    L = data.label
    Y = data.outcome_filled()
    lab = L == 1
    return (
        np.sum(Y[lab] * np.log(m[lab]) + (1 - Y[lab]) * np.log1p(-m[lab]))
        + np.sum(L * np.log(g) + (1 - L) * np.log1p(-g))
        + np.sum(np.log(w))
    )


def test_zero_fluctuation_is_identity():
    _, state = _random_state(20, 0)
    assert fluctuate(state, state.clever(), 0.0) is state


def test_single_unit_fluctuation():
    state = SubmodelState(np.array([0.0]), np.array([0.0]), np.array([0.0]), 0.5)
    cc = CleverCovariates(np.array([1.0]), np.array([0.0]), np.array([0.0]), 0.5, 0.5)
    new = fluctuate(state, cc, 1.0)
    assert new.m[0] == pytest.approx(0.7310585786300049)
    assert new.g[0] == pytest.approx(0.5)


def test_constant_tilt_leaves_weights():
    _, state = _random_state(15, 1)
    cc = state.clever()
    cc = CleverCovariates(cc.H, cc.M, np.full(15, 0.37), cc.theta_ref, cc.rho)
    np.testing.assert_allclose(fluctuate(state, cc, 2.5).weights, state.weights, rtol=1e-13)


def test_state_theta_is_tilted_plugin():
    _, state = _random_state(25, 2)
    assert state.theta == pytest.approx(tilted_plugin_theta(state.m, state.g, state.weights), rel=1e-14)


def test_loglik_matches_direct_formula():
    data, state = _random_state(30, 3)
    cc = state.clever()
    path = LeastFavorablePath(state, cc, data)
    const = np.log(state.n) * state.n  # the log-likelihood drops sum(log w0)
    for eps in (-1.3, 0.0, 0.4, 2.0):
        assert path.loglik(eps) == pytest.approx(_loglik_from_scratch(data, state, cc, eps) + const, rel=1e-12)
        assert path.evaluate(eps)[0] == pytest.approx(path.loglik(eps), rel=1e-12)
    assert submodel_loglik(data, state, cc, 0.7) == path.loglik(0.7)


def test_score_matches_finite_differences():
    data, state = _random_state(40, 4)
    path = LeastFavorablePath(state, state.clever(), data)
    h = 1e-5
    for eps in (-0.8, 0.0, 0.6):
        fd = (path.loglik(eps + h) - path.loglik(eps - h)) / (2 * h)
        s, hess = path.score_and_hessian(eps)
        assert s == pytest.approx(fd, rel=1e-6, abs=1e-6)
        fd2 = (path.score(eps + h) - path.score(eps - h)) / (2 * h)
        assert hess == pytest.approx(fd2, rel=1e-5)


def test_score_at_zero_is_n_times_mean_eif():
    data, state = _random_state(40, 5)
    lam = eif(data, state.m, state.g, state.theta, state.rho).lambda_
    path = LeastFavorablePath(state, state.clever(), data)
    assert path.score(0.0) == pytest.approx(data.n * lam.mean(), rel=1e-10, abs=1e-10)


def test_loglik_is_concave_along_path():
    data, state = _random_state(25, 6)
    path = LeastFavorablePath(state, state.clever(), data)
    grid = np.linspace(-3, 3, 61)
    ll = np.array([path.loglik(e) for e in grid])
    assert np.all(ll[:-2] - 2 * ll[1:-1] + ll[2:] <= 1e-9)


def test_epsilon_matches_grid_argmax():
    data, state = _random_state(20, 7)
    cc = state.clever()
    eps = fit_epsilon(data, state, cc)
    grid = np.linspace(eps - 0.5, eps + 0.5, 10001)
    ll = [submodel_loglik(data, state, cc, e) for e in grid]
    assert eps == pytest.approx(grid[int(np.argmax(ll))], abs=1e-4)


def test_epsilon_sign_follows_score():
    data, state = _random_state(30, 8)
    path = LeastFavorablePath(state, state.clever(), data)
    eps = fit_epsilon(data, state, state.clever())
    assert np.sign(eps) == np.sign(path.score(0.0))


def test_epsilon_near_zero_at_data_generating_state():
    rng = np.random.default_rng(9)
    n = 100_000
    m, g = rng.uniform(0.2, 0.8, n), rng.uniform(0.2, 0.8, n)
    L = (rng.random(n) < g).astype(int)
    Y = np.where(L == 1, (rng.random(n) < m).astype(float), np.nan)
    data = Dataset(np.zeros((n, 1)), L, Y)
    state = SubmodelState.initial(m, g, 0.5)
    eps = fit_epsilon(data, state, state.clever())
    lam = eif(data, m, g, state.theta, 0.5).lambda_
    assert abs(eps) < 4 / np.sqrt(n * np.mean(lam**2))


def test_zero_direction_returns_zero():
    data, state = _random_state(10, 10)
    cc = state.clever()
    flat = CleverCovariates(np.zeros(10), np.zeros(10), np.zeros(10), cc.theta_ref, cc.rho)
    assert fit_epsilon(data, state, flat) == 0.0


def test_run_tmle_solves_score_equation():
    data, fit = simulated_fit(400, 11)
    lam = eif(data, fit.state.m, fit.state.g, fit.theta_tilde, fit.rho).lambda_
    assert fit.converged
    assert abs(lam.mean()) <= 1e-8 * max(1, lam.std(ddof=1))
    assert fit.se == pytest.approx(np.sqrt(np.mean(lam**2) / data.n))
    assert fit.theta_trace[-1] == fit.theta_tilde
    assert len(fit.score_trace) == fit.n_iter + 1


def test_early_exit_when_already_solved():
    data = generate(DgpSpec(400, seed=12))
    rho = estimate_rho(data, SamplingDesign.random())
    nuisance = fit_cross_fitted(
        data, make_folds(400, 5, 0, strata=data.label), ScenarioSpec("a").nuisance_spec()
    )
    fit = run_tmle(data, nuisance, rho, score_tol=1e3)
    assert fit.n_iter == 0 and fit.converged
    n = data.n
    assert fit.theta_tilde == pytest.approx(tilted_plugin_theta(nuisance.m_hat, nuisance.g_hat, np.full(n, 1 / n)))


def test_non_convergence_is_reported():
    data = generate(DgpSpec(400, seed=13))
    rho = estimate_rho(data, SamplingDesign.random())
    nuisance = fit_cross_fitted(data, make_folds(400, 5, 0, strata=data.label), ScenarioSpec("d").nuisance_spec())
    fit = run_tmle(data, nuisance, rho, max_iter=1, score_tol=0.0)
    assert not fit.converged
    assert fit.n_iter == 1
    diag = fit.diagnostics()
    assert diag["converged"] is False and diag["iterations"] == 1


def test_diagnostics_json(tmp_path):
    _, fit = simulated_fit(400, 14)
    fit.to_json(tmp_path / "d.json")
    doc = json.loads((tmp_path / "d.json").read_text())
    assert doc["theta_tilde"] == fit.theta_tilde
    assert doc["epsilon_trace"] == fit.epsilon_trace


@pytest.mark.slow
def test_error_shrinks_at_root_n():
    errs = {}
    for n in (400, 1600):
        e = [simulated_fit(n, 100 + r)[1].theta_tilde - 0.7719859522660842 for r in range(30)]
        errs[n] = np.sqrt(np.mean(np.square(e)))
    assert 1.3 < errs[400] / errs[1600] < 3.2


def test_handles_extreme_nuisances():
    n = 200
    rng = np.random.default_rng(15)
    L = (rng.random(n) < 0.5).astype(int)
    Y = np.where(L == 1, (rng.random(n) < 0.9).astype(float), np.nan)
    data = Dataset(np.zeros((n, 1)), L, Y)
    nuisance = CrossFittedNuisance(np.full(n, 1 - 1e-6), rng.uniform(1e-3, 0.999, n), ())
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        fit = run_tmle(data, nuisance, L.mean())
    assert np.isfinite(fit.theta_tilde) and 0 < fit.theta_tilde < 1


def test_each_step_does_not_decrease_likelihood():
    data = generate(DgpSpec(400, seed=16))
    rho = estimate_rho(data, SamplingDesign.random())
    nuisance = fit_cross_fitted(data, make_folds(400, 5, 0, strata=data.label), ScenarioSpec("d").nuisance_spec())
    state = SubmodelState.initial(nuisance.m_hat, nuisance.g_hat, rho)
    for _ in range(4):
        cc = state.clever()
        eps = fit_epsilon(data, state, cc)
        assert submodel_loglik(data, state, cc, eps) >= submodel_loglik(data, state, cc, 0.0)
        state = fluctuate(state, cc, eps)


def test_weighted_plugin_is_permutation_equivariant():
    _, state = _random_state(30, 17)
    perm = np.random.default_rng(0).permutation(30)
    shuffled = SubmodelState(state.m_logit[perm], state.g_logit[perm], state.log_weights[perm], state.rho)
    assert shuffled.theta == pytest.approx(state.theta, rel=1e-14)
