import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panel_dml.dictionary import direction_for
from panel_dml.dml import (
    EstimateConfig, _pick, clustered_variance, cluster_sum_variance, crossfit, debiased_score, estimate,
    make_splits,
)
from panel_dml.errors import ConfigError
from panel_dml.panel import assign_folds

from conftest import linear_panel


def brute_force_variance(scores, unit):
    """Literal double loop over units and period pairs."""
    theta = np.mean(scores)
    total = 0.0
    for u in np.unique(unit):
        s = scores[unit == u]
        mean_u = s.mean()
        for t in range(s.size):
            total += (s[t] - theta) ** 2
            for t2 in range(t + 1, s.size):
                total += 2 * (s[t] - mean_u) * (s[t2] - mean_u)
    return total / scores.size


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_clustered_variance_matches_double_loop(n_units, periods, seed):
    rng = np.random.default_rng(seed)
    unit = np.repeat(np.arange(n_units), periods)
    scores = rng.normal(size=unit.size) * 3 + rng.normal(size=n_units)[unit]
    assert clustered_variance(scores, unit) == pytest.approx(brute_force_variance(scores, unit), rel=1e-12,
                                                             abs=1e-12)


def test_clustered_variance_reduces_to_unit_means():
    rng = np.random.default_rng(1)
    unit = np.repeat(np.arange(10), 3)
    s = rng.normal(size=30)
    means = np.array([s[unit == u].mean() for u in range(10)])
    assert clustered_variance(s, unit) == pytest.approx(np.sum(3 * (means - s.mean()) ** 2) / 30)


def test_cluster_sum_variance_for_independent_units():
    unit = np.arange(6)
    s = np.array([1.0, 2, 3, 4, 5, 6])
    assert cluster_sum_variance(s, unit) == pytest.approx(np.sum((s - s.mean()) ** 2) / 36)


def test_tie_rule_prefers_smaller_value():
    assert _pick([4, 2, 8], [1.0, 1.0, 3.0]) == 1
    assert _pick([1, 2], [np.inf, np.inf]) is None


def test_config_validation():
    with pytest.raises(ConfigError):
        EstimateConfig("ridge")
    with pytest.raises(ConfigError):
        EstimateConfig("lasso", k=1)
    assert EstimateConfig("nnet_dml").debias and EstimateConfig("nnet_dml").learner == "nnet"


def test_splits_keep_units_apart():
    panel = linear_panel(n_units=23)
    folds = assign_folds(panel.units, 5, seed=2)
    splits = make_splits(panel, folds, None, direction_for(panel.schema))
    rows = np.concatenate([s.eval.rows for s in splits])
    assert np.array_equal(np.sort(rows), np.arange(panel.n_obs))
    for s in splits:
        assert not set(panel.unit_ids[s.train.rows]) & set(panel.unit_ids[s.eval.rows])


def test_ols_linear_recovers_slope():
    panel = linear_panel(n_units=400, noise=0.5, seed=5)
    est = estimate(panel, "ols_linear")
    assert est.theta == pytest.approx(-0.05, abs=4 * est.se_cluster)
    assert est.theta == pytest.approx(est.plugin, abs=1e-12)
    assert est.n_obs == panel.n_obs and est.scores.shape == (panel.n_obs,)


def test_ols_poly_recovers_linear_truth():
    est = estimate(linear_panel(n_units=400, noise=0.5, seed=6), "ols_poly")
    assert est.theta == pytest.approx(-0.05, abs=4 * est.se_cluster + 0.005)


def test_lasso_dml_is_deterministic_and_debiases():
    panel = linear_panel(n_units=120, noise=0.5, seed=8)
    a = estimate(panel, "lasso_dml", seed=3, lambda_fraction=0.1)
    b = estimate(panel, "lasso_dml", seed=3, lambda_fraction=0.1)
    assert a.theta == b.theta and np.array_equal(a.scores, b.scores) and a.fold_hash == b.fold_hash
    assert a.c_hat in (5 / 4, 1, 3 / 4, 5 / 8, 9 / 16, 1 / 2)
    assert len(a.kappa) == 5


def test_debiasing_toggle_shares_learners():
    panel = linear_panel(n_units=80, seed=9)
    cf = crossfit(panel, EstimateConfig("lasso_dml", seed=1, lambda_fraction=0.2))
    plain = debiased_score(cf, debias=False)
    assert plain.theta == pytest.approx(plain.plugin)
    assert debiased_score(cf).theta != plain.theta


def test_lasso_selects_from_grid():
    est = estimate(linear_panel(n_units=60, seed=10), "lasso", seed=0, lambda_grid=(1e-4, 1e-2, 1.0))
    assert est.gamma_hyper in (1e-4, 1e-2, 1.0)
    assert set(est.diagnostics["gamma_mse"]) == {1e-4, 1e-2, 1.0}


def test_nnet_estimate_runs():
    est = estimate(linear_panel(n_units=40, seed=11), "nnet_dml", seed=0, width=4, epochs=50)
    assert np.isfinite(est.theta) and np.isfinite(est.se) and est.gamma_hyper == 4
