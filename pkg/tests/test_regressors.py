import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from sedpool.regressors import (
    LinearRegressor,
    mean_fit,
    mean_predict,
    ols_fit,
    ridge_fit,
    sliding_steps,
    wr_run,
)


def test_ols_recovers_exact_line():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    r = ols_fit(X, 2 * X[:, 0] + 1)
    assert r.intercept == pytest.approx(1.0)
    assert r.coefficients[0] == pytest.approx(2.0)
    assert not r.ridge


@pytest.mark.parametrize("seed", range(5))
def test_ols_matches_normal_equations(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 4))
    y = rng.normal(size=30)
    A = np.hstack([np.ones((30, 1)), X])
    beta = np.linalg.solve(A.T @ A, A.T @ y)
    r = ols_fit(X, y)
    assert r.intercept == pytest.approx(beta[0], abs=1e-10)
    assert_allclose(r.coefficients, beta[1:], atol=1e-10)


def test_underdetermined_falls_back_to_ridge():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(3, 5))
    y = rng.normal(size=3)
    r = ols_fit(X, y)
    assert r.ridge
    assert np.all(np.isfinite(r.coefficients))
    # near-interpolation: the penalty is tiny
    assert_allclose(r.predict(X), y, atol=1e-4)


def test_single_sample_and_no_features():
    r = ols_fit([[1.0, 2.0]], [4.0])
    assert r.predict([[1.0, 2.0]])[0] == pytest.approx(4.0)
    r0 = ols_fit(np.zeros((4, 0)), [1.0, 2.0, 3.0, 6.0])
    assert r0.intercept == pytest.approx(3.0)
    with pytest.raises(ValueError):
        ols_fit(np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        ols_fit(np.zeros((3, 2)), [1.0, 2.0])


def test_ridge_shrinks_toward_mean_and_keeps_intercept_unpenalized():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(20, 3))
    y = X @ [1.0, -2.0, 0.5] + 10.0
    r = ridge_fit(X, y, 1e6)
    assert_allclose(r.coefficients, 0.0, atol=1e-3)
    assert r.intercept == pytest.approx(y.mean() - X.mean(0) @ r.coefficients)
    Xc = X - X.mean(0)
    expected = np.linalg.solve(Xc.T @ Xc + 2.0 * np.eye(3), Xc.T @ (y - y.mean()))
    assert_allclose(ridge_fit(X, y, 2.0).coefficients, expected, atol=1e-10)
    assert not ridge_fit(X, y, 0.0).ridge


def test_mean_baseline():
    b = mean_fit([1, 2, 3, 6])
    assert mean_predict(b) == 3.0
    assert_allclose(b.predict(np.zeros((3, 5))), [3.0, 3.0, 3.0])
    with pytest.raises(ValueError):
        mean_fit([])


def test_sliding_steps():
    assert sliding_steps(30, 5, 5) == [5, 10, 15, 20, 25]
    assert sliding_steps(30, 3, 5) == list(range(5, 30, 3))
    assert sliding_steps(5, 3, 5) == []
    with pytest.raises(ValueError):
        sliding_steps(10, 0, 5)


def _const(v, d):
    return LinearRegressor(np.zeros(d), float(v))


def test_weight_schedule():
    n, w, s = 30, 5, 5
    X = np.random.default_rng(0).normal(size=(n, 2))
    y = np.arange(n, dtype=float)
    run = wr_run(X, y, _const(0.0, 2), w, s)
    assert len(run.weights) == 5
    assert run.delta == pytest.approx(1 / 30, abs=1e-12)
    for k, (t, bg, bl) in enumerate(run.weights):
        assert t == s + k * w
        assert bg + bl == pytest.approx(1.0, abs=1e-12)
        assert bl == pytest.approx(0.5 + k / 30, abs=1e-12)
    st_ = run.final_state
    assert st_.beta_l == pytest.approx(2 / 3, abs=1e-12)
    assert st_.beta_g + st_.beta_l == pytest.approx(1.0, abs=1e-12)
    assert [d for d, _ in run.predictions] == list(range(5, 30))


def test_weights_clamp_at_one():
    X = np.zeros((12, 1))
    run = wr_run(X, np.ones(12), _const(0.0, 1), 1, 2, delta=0.3)
    assert run.final_state.beta_l == 1.0 and run.final_state.beta_g == 0.0
    assert all(abs(bg + bl - 1) < 1e-12 for _, bg, bl in run.weights)


def test_blend_is_convex_combination():
    X = np.zeros((10, 1))
    y = np.full(10, 4.0)
    run = wr_run(X, y, _const(0.0, 1), 5, 5)
    # local model predicts 4, global 0, weights 0.5/0.5
    assert all(v == pytest.approx(2.0) for _, v in run.predictions)


@settings(max_examples=25, deadline=None)
@given(st.integers(7, 40), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_no_lookahead_with_poisoned_labels(n, w, s, seed):
    if s >= n:
        return
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = rng.normal(size=n)
    g = ols_fit(rng.normal(size=(20, 3)), rng.normal(size=20))
    clean = dict(wr_run(X, y, g, w, s).predictions)
    for t in sliding_steps(n, w, s):
        poisoned = y.copy()
        poisoned[t:] = 1e6
        p = dict(wr_run(X, poisoned, g, w, s).predictions)
        for day in range(t, min(t + w, n)):
            assert p[day] == clean[day]
