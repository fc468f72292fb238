"""Linear regressors, the population-mean baseline, and the weighted-regressors blend.

The blend keeps one population regressor and one per-participant regressor
retrained on a sliding window.  Weight starts at one half each and shifts
from the population model to the personal one by ``delta`` after every
window, with ``delta = 0.2 * w / len(series)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

RIDGE_LAMBDA = 1e-6


@dataclass(frozen=True, eq=False)
class LinearRegressor:
    coefficients: np.ndarray
    intercept: float
    ridge: bool = False

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.coefficients + self.intercept


def ols_fit(X, y, ridge_lambda: float = RIDGE_LAMBDA) -> LinearRegressor:
    """Least squares with intercept.

    Falls back to a tiny ridge penalty (intercept unpenalized) when the
    centered design is rank deficient, which includes every case with fewer
    samples than features + 1.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("ols_fit needs at least one sample")
    if X.shape[0] != y.size:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.size}")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    d = X.shape[1]
    ridge = d > 0 and (y.size < d + 1 or np.linalg.matrix_rank(Xc) < d)
    if ridge:
        beta = np.linalg.solve(Xc.T @ Xc + ridge_lambda * np.eye(d), Xc.T @ yc)
    else:
        beta = np.linalg.lstsq(Xc, yc, rcond=None)[0]
    return LinearRegressor(beta, float(y_mean - x_mean @ beta), ridge)


def ridge_fit(X, y, alpha: float = 1.0) -> LinearRegressor:
    """Ridge regression with an unpenalized intercept."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("ridge_fit needs at least one sample")
    if alpha <= 0:
        return ols_fit(X, y)
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    beta = np.linalg.solve(Xc.T @ Xc + alpha * np.eye(X.shape[1]), Xc.T @ (y - y_mean))
    return LinearRegressor(beta, float(y_mean - x_mean @ beta), True)


@dataclass(frozen=True)
class MeanBaseline:
    mean: float

    def predict(self, X) -> np.ndarray:
        n = np.atleast_2d(np.asarray(X, dtype=float)).shape[0]
        return np.full(n, self.mean)


def mean_fit(targets) -> MeanBaseline:
    y = np.asarray(targets, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("mean baseline needs at least one training target")
    return MeanBaseline(float(y.mean()))


def mean_predict(baseline: MeanBaseline, x=None) -> float:
    return baseline.mean


@dataclass
class WRState:
    beta_g: float
    beta_l: float
    delta: float
    window: int
    initial_days: int
    global_model: LinearRegressor
    local_model: LinearRegressor | None = None

    def step(self) -> None:
        beta_l = min(max(self.beta_l + self.delta, 0.0), 1.0)
        beta_g = min(max(self.beta_g - self.delta, 0.0), 1.0)
        total = beta_l + beta_g
        self.beta_l = beta_l / total
        self.beta_g = beta_g / total


@dataclass
class WRRun:
    """Output of one weighted-regressors pass over a participant."""

    predictions: list[tuple[int, float]] = field(default_factory=list)
    # (t, beta_g, beta_l) in effect when the window starting at t was predicted
    weights: list[tuple[int, float, float]] = field(default_factory=list)
    delta: float = 0.0
    final_state: WRState | None = None


def sliding_steps(n: int, w: int, s: int) -> list[int]:
    """Window starts t = s, s+w, ... while t < n."""
    if w < 1 or s < 1:
        raise ValueError("window and initial days must be >= 1")
    return list(range(s, n, w))


def wr_run(
    X,
    y,
    global_model: LinearRegressor,
    w: int,
    s: int,
    delta_scale: float = 0.2,
    beta_l: float = 0.5,
    delta: float | None = None,
    fit_local: Callable[[np.ndarray, np.ndarray], LinearRegressor] = ols_fit,
) -> WRRun:
    """Blend ``global_model`` with a personal OLS refit on days ``[0, t)`` at each step.

    ``y`` is only read up to the current ``t``.  ``beta_l`` and ``delta``
    override the initial personal weight and the schedule step;
    ``fit_local`` trains the personal regressor.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    if s > n:
        raise ValueError(f"initial days s={s} exceed series length {n}")
    if delta is None:
        delta = delta_scale * w / n
    state = WRState(1.0 - beta_l, beta_l, delta, w, s, global_model)
    run = WRRun(delta=delta)
    for t in sliding_steps(n, w, s):
        state.local_model = fit_local(X[:t], y[:t])
        Xw = X[t : min(t + w, n)]
        blended = state.beta_g * global_model.predict(Xw) + state.beta_l * state.local_model.predict(Xw)
        run.weights.append((t, state.beta_g, state.beta_l))
        run.predictions.extend((t + k, float(v)) for k, v in enumerate(blended))
        state.step()
    run.final_state = state
    return run
