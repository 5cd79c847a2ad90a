from dataclasses import replace
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panel_dml.dictionary import Direction, dictionary_for, identity_dictionary
from panel_dml.errors import ConfigError
from panel_dml.riesz import C_GRID, RieszFit, RieszMoments, fit_riesz, kappa_grid, riesz_loss, riesz_objective
from panel_dml.weather import get_schema


def identity_moments(seed, n=200, p=4):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n, p)) @ rng.normal(size=(p, p))
    Mrows = np.tile(np.eye(p)[0], (n, 1))
    return B, Mrows


def test_kappa_zero_is_inverse_second_moment_times_e1():
    for seed in range(20):
        B, Mrows = identity_moments(seed)
        fit = fit_riesz(RieszMoments.from_rows(B, Mrows), 0.0)
        expected = np.linalg.solve(B.T @ B / len(B), np.eye(B.shape[1])[0])
        np.testing.assert_allclose(fit.rho, expected, atol=1e-6)
        # alpha reproduces the derivative of every function in the span
        np.testing.assert_allclose((fit.alpha(B)[:, None] * B).mean(axis=0), Mrows.mean(axis=0), atol=1e-6)


def test_kappa_grid_formula():
    n, p = 800, 27
    expected = [c * NormalDist().inv_cdf(1 - 0.05 / p) / np.sqrt(n) for c in C_GRID]
    np.testing.assert_allclose(kappa_grid(n, p), expected, rtol=1e-12)
    assert len(kappa_grid(n, p)) == 6
    with pytest.raises(ConfigError):
        kappa_grid(n, 0)


def test_loss_falls_toward_unregularized_optimum():
    B, Mrows = identity_moments(3)
    mom = RieszMoments.from_rows(B, Mrows)
    opt = fit_riesz(mom, 0.0).rho
    losses = [riesz_objective(mom, t * opt) for t in np.linspace(0, 1, 11)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_objective_is_convex_along_segments(seed, t):
    B, Mrows = identity_moments(seed % 50)
    mom = RieszMoments.from_rows(B, Mrows)
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, B.shape[1]))
    mid = riesz_objective(mom, (1 - t) * a + t * b)
    assert mid <= (1 - t) * riesz_objective(mom, a) + t * riesz_objective(mom, b) + 1e-9


def test_penalized_fit_shrinks_and_stops():
    B, Mrows = identity_moments(4, p=6)
    mom = RieszMoments.from_rows(B, Mrows)
    free = fit_riesz(mom, 0.0)
    fit = fit_riesz(mom, 0.5)
    assert np.abs(fit.rho).sum() < np.abs(free.rho).sum()
    assert 1 <= fit.iterations <= 10 and len(fit.loss_trace) == fit.iterations
    assert np.all(fit.loadings >= 0.2)
    huge = fit_riesz(mom, 1e6)
    assert not huge.rho.any()


def test_holdout_loss_matches_definition():
    B, Mrows = identity_moments(5)
    fit = fit_riesz(RieszMoments.from_rows(B, Mrows), 0.1)
    a = B @ fit.rho
    assert riesz_loss(fit, B, Mrows) == pytest.approx(np.mean(-2 * Mrows @ fit.rho + a * a))


def test_gradient_rows_ignore_centring():
    schema = get_schema("yearly_linear")
    X = np.random.default_rng(6).uniform(1, 2, (50, 3))
    d = dictionary_for(schema).fit(X)
    shifted = replace(d, mean=d.mean + 10.0)
    D = Direction.unit(schema.covariate_names, "higher").weights(X)
    assert np.array_equal(d.gradient(X, D), shifted.gradient(X, D))


def test_negative_kappa_rejected():
    B, Mrows = identity_moments(7)
    with pytest.raises(ConfigError):
        fit_riesz(RieszMoments.from_rows(B, Mrows), -0.1)


def test_fit_round_trip():
    B, Mrows = identity_moments(8)
    fit = fit_riesz(RieszMoments.from_rows(B, Mrows), 0.2)
    again = RieszFit.from_dict(fit.to_dict())
    assert np.array_equal(again.alpha(B), fit.alpha(B))


def test_identity_dictionary_derivative_rows_are_unit_vectors():
    schema = get_schema("yearly_linear")
    X = np.random.default_rng(9).uniform(size=(10, 3))
    d = identity_dictionary(schema).fit(X)
    assert d.gradient(X, Direction.unit(schema.covariate_names, "lower").weights(X)).tolist() == [[1, 0, 0]] * 10
