import math

import numpy as np
import pytest

from targeted_bayes.sim import (
    DgpSpec,
    MetricsRow,
    Oracle,
    PriorSpec,
    ScenarioSpec,
    StudyConfig,
    StudyInterrupted,
    aggregate,
    efficiency_bound,
    generate,
    oracle_values,
    prior_from_spec,
    read_metrics_csv,
    run_study,
    true_g,
    true_m,
    true_theta,
    write_metrics_csv,
)

QUAD_THETA = 0.7719859522660842


def test_label_rate_is_one_half():
    d = generate(DgpSpec(10**6, seed=1))
    assert abs(d.label.mean() - 0.5) < 0.002


def test_features_in_open_cube_and_outcomes_only_on_labeled():
    d = generate(DgpSpec(5000, seed=2))
    assert np.all(np.abs(d.features) < 1)
    assert np.all(np.isnan(d.outcome) == (d.label == 0))


def test_generation_is_deterministic():
    a, b = generate(DgpSpec(300, seed=3)), generate(DgpSpec(300, seed=3))
    assert a.equals(b)
    assert not a.equals(generate(DgpSpec(300, seed=4)))


def test_small_samples_rejected():
    with pytest.raises(ValueError):
        DgpSpec(5)


def test_true_nuisances():
    X = np.random.default_rng(0).uniform(-1, 1, (10, 3))
    s = X.sum(1)
    np.testing.assert_allclose(true_g(X), 1 / (1 + np.exp(-s)))
    np.testing.assert_allclose(true_m(X), 1 / (1 + np.exp(-(1 - s))))


def test_true_theta_reported_value():
    assert 0.765 <= true_theta(10**6) <= 0.775


def test_monte_carlo_oracle_agrees_with_quadrature():
    mc = oracle_values(10**6, 5)
    quad = oracle_values(method="quadrature")
    assert quad.theta == pytest.approx(QUAD_THETA, abs=1e-9)
    assert abs(mc.theta - quad.theta) < 3 * mc.theta_mc_error
    assert abs(mc.bound - quad.bound) < 3 * mc.bound_mc_error
    assert quad.rho == pytest.approx(0.5, abs=1e-12)


def test_constant_outcome_model_gives_constant():
    o = oracle_values(10**5, 1, m_fn=lambda X: np.full(len(X), 0.37))
    assert o.theta == pytest.approx(0.37, abs=1e-12)


def test_bound_positive_and_stable_under_more_draws():
    one = oracle_values(10**6, 9)
    two = oracle_values(2 * 10**6, 9)
    assert efficiency_bound(10**6, 9) > 0
    assert abs(two.bound - one.bound) < 3 * one.bound_mc_error
    assert two.theta_mc_error == pytest.approx(one.theta_mc_error / math.sqrt(2), rel=0.05)


def test_priors_are_valid():
    p1 = prior_from_spec(PriorSpec.from_id("p1"))
    p2 = prior_from_spec(PriorSpec.from_id("p2"))
    p3 = prior_from_spec(PriorSpec.from_id("p3"))
    p4 = prior_from_spec(PriorSpec.from_id("p4"))
    assert math.sqrt(p2.variance) == pytest.approx(0.134, abs=1e-3)
    assert p1.mean == pytest.approx(0.77) and p3.mean == pytest.approx(0.23)
    assert p4.variance == pytest.approx(0.018)
    with pytest.raises(ValueError):
        PriorSpec.from_id("p5")


def test_scenarios():
    assert ScenarioSpec("a").nuisance_spec().m_covariates == (0, 1, 2)
    assert ScenarioSpec("b").m_covariates == (0,) and ScenarioSpec("b").g_covariates == (0, 1, 2)
    assert ScenarioSpec("c").m_covariates == (0, 1, 2) and ScenarioSpec("c").g_covariates == (0,)
    assert ScenarioSpec("d").nuisance_spec().g_covariates == (0,)
    with pytest.raises(ValueError):
        ScenarioSpec("e")


def test_default_grid_has_eighty_cells():
    cfg = StudyConfig()
    assert len(cfg.cells()) == 80
    assert cfg.reps == 200


def test_config_round_trip_and_validation():
    cfg = StudyConfig(scenarios=["a"], sample_sizes=[400])
    assert StudyConfig.from_dict(cfg.as_dict()) == cfg
    with pytest.raises(ValueError):
        StudyConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        StudyConfig(sample_sizes=(10,))
    assert cfg.cell_key() == StudyConfig(scenarios=["b"], sample_sizes=[900]).cell_key()


def _oracle(theta=0.5, bound=2.0):
    return Oracle(theta, 0.0, bound, 0.0, 0.5, 0, "fixed")


def test_aggregate_hand_computed():
    recs = [
        dict(rep=0, ok=True, post_mean=0.6, post_sd=0.1, ci95_lo=0.4, ci95_hi=0.7, theta_tilde=0.55, se=0.1, acceptance=0.3),
        dict(rep=1, ok=True, post_mean=0.3, post_sd=0.2, ci95_lo=0.35, ci95_hi=0.45, theta_tilde=0.45, se=0.1, acceptance=0.4),
        dict(rep=2, ok=False, reason="x"),
    ]
    row = aggregate("a", "p1", 100, recs, _oracle())
    assert (row.reps, row.n_ok, row.n_failed) == (3, 2, 1)
    assert row.rel_efficiency == pytest.approx(100 * (0.01 + 0.04) / 2 / 2.0)
    assert row.coverage95 == 0.5
    assert row.sqrt_n_abs_bias == pytest.approx(10 * abs((0.1 - 0.2) / 2))
    assert row.tmle_coverage95 == 1.0
    assert row.mean_post_sd == pytest.approx(0.15)
    assert row.coverage95_mc_se == pytest.approx(math.sqrt(0.25 / 2))


def test_aggregate_all_failed():
    row = aggregate("a", "p1", 100, [dict(rep=0, ok=False)], _oracle())
    assert row.n_ok == 0 and math.isnan(row.rel_efficiency)


SMALL = dict(num_samples=1500, burn_in=500, oracle_precision=10**5)


def test_smoke_run_one_cell(tmp_path):
    cfg = StudyConfig(scenarios=("a",), priors=("p1",), sample_sizes=(200,), reps=2, **SMALL)
    res = run_study(cfg)
    assert len(res.rows) == 1
    assert res.rows[0].n_failed == 0
    assert res.failure_counts == {"a/p1/200": 0}
    write_metrics_csv(res.rows, tmp_path / "m.csv")
    assert read_metrics_csv(tmp_path / "m.csv") == res.rows


def test_interrupted_run_resumes_to_same_result(tmp_path):
    cfg = StudyConfig(scenarios=("a", "d"), priors=("p1",), sample_sizes=(200,), reps=3, **SMALL)
    full = run_study(cfg)
    with pytest.raises(StudyInterrupted):
        run_study(cfg, checkpoint_dir=tmp_path, max_cells=1)
    resumed = run_study(cfg, checkpoint_dir=tmp_path)
    write_metrics_csv(full.rows, tmp_path / "full.csv")
    write_metrics_csv(resumed.rows, tmp_path / "resumed.csv")
    assert (tmp_path / "full.csv").read_bytes() == (tmp_path / "resumed.csv").read_bytes()


def test_cells_share_datasets_across_priors():
    cfg = StudyConfig(scenarios=("a",), priors=("p1", "p4"), sample_sizes=(200,), reps=2, **SMALL)
    res = run_study(cfg)
    a, b = res.records[("a", "p1", 200)], res.records[("a", "p4", 200)]
    assert [r["theta_tilde"] for r in a] == [r["theta_tilde"] for r in b]


def test_metrics_row_fields():
    assert MetricsRow.fields()[:3] == ["scenario", "prior", "n"]
