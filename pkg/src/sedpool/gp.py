"""Exact single-task GP regression: RBF covariance, constant mean with a Gaussian prior.

Used directly for per-participant models (GP-Ind) and for a single pooled
model over everybody's data (GP-Batch).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

LOG_2PI = math.log(2 * math.pi)

PARAM_NAMES = ("lengthscale", "signal_variance", "noise_variance", "mean_constant")


class GPError(RuntimeError):
    pass


class NotFittedError(GPError):
    pass


class NotPositiveDefiniteError(GPError, LinAlgError):
    pass


class GPFitError(GPError):
    """Optimization hit a non-finite objective; ``last_valid`` holds the last good state."""

    def __init__(self, message: str, last_valid):
        super().__init__(message)
        self.last_valid = last_valid


@dataclass(frozen=True)
class GPHyperparams:
    lengthscale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 0.1
    mean_constant: float = 0.0
    mean_prior_mean: float = 0.0
    mean_prior_scale: float = 1.0

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if not self.signal_variance > 0:
            raise ValueError(f"signal_variance must be positive, got {self.signal_variance}")
        if not self.noise_variance >= 0:
            raise ValueError(f"noise_variance must be non-negative, got {self.noise_variance}")
        if not self.mean_prior_scale > 0:
            raise ValueError(f"mean_prior_scale must be positive, got {self.mean_prior_scale}")


@dataclass(frozen=True)
class OptConfig:
    """Settings for the deterministic L-BFGS-B hyperparameter search.

    ``fixed`` names hyperparameters held at their initial value; fixing
    ``noise_variance`` at 0 gives the noiseless model.  Bounds are on the
    natural log of the positive hyperparameters.
    """

    maxiter: int = 200
    gtol: float = 1e-5
    ftol: float = 1e-10
    fixed: frozenset = frozenset()
    log_lengthscale_bounds: tuple[float, float] = (math.log(1e-2), math.log(1e3))
    log_signal_bounds: tuple[float, float] = (math.log(1e-4), math.log(1e4))
    log_noise_bounds: tuple[float, float] = (math.log(1e-6), math.log(1e2))

    def __post_init__(self):
        unknown = set(self.fixed) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown hyperparameter(s) {sorted(unknown)}")


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float


# -- kernel ------------------------------------------------------------------


def rbf_kernel(a, b, lengthscale: float, signal_variance: float) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not lengthscale > 0:
        raise ValueError("lengthscale must be positive")
    d2 = float(np.sum((a - b) ** 2))
    return signal_variance * math.exp(-d2 / (2 * lengthscale**2))


def sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return cdist(A, B, "sqeuclidean")


def rbf_matrix(A, B, lengthscale: float, signal_variance: float) -> np.ndarray:
    return signal_variance * np.exp(-sq_dists(A, B) / (2 * lengthscale**2))


def jittered_cholesky(K: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K``, adding diagonal jitter only if needed.

    Jitter starts at ``1e-8 * scale`` and grows tenfold up to ``1e-4 * scale``.
    """
    try:
        return cholesky(K, lower=True, check_finite=False), 0.0
    except LinAlgError:
        pass
    if not np.all(np.isfinite(K)):
        raise NotPositiveDefiniteError("covariance has non-finite entries")
    idx = np.diag_indices_from(K)
    for e in range(-8, -3):
        jitter = scale * 10.0**e
        Kj = K.copy()
        Kj[idx] += jitter
        try:
            return cholesky(Kj, lower=True, check_finite=False), jitter
        except LinAlgError:
            continue
    raise NotPositiveDefiniteError(f"Cholesky failed even with jitter {1e-4 * scale:g}")


def log_gaussian_prior(c: float, mean: float, scale: float) -> tuple[float, float]:
    """Log density of N(mean, scale^2) at ``c`` and its derivative in ``c``."""
    z = (c - mean) / scale
    return -0.5 * z * z - math.log(scale) - 0.5 * LOG_2PI, -z / scale


# -- model -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GPModel:
    """A GP conditioned on training data.  Immutable once built."""

    hyperparams: GPHyperparams
    train_X: np.ndarray | None = None
    train_y: np.ndarray | None = None
    chol: np.ndarray | None = field(default=None, repr=False)
    alpha: np.ndarray | None = field(default=None, repr=False)
    jitter: float = 0.0

    @classmethod
    def condition(cls, hyperparams: GPHyperparams, X, y) -> "GPModel":
        """Cache the factorization for fixed hyperparameters (no fitting)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] != y.shape[0] or y.size == 0:
            raise ValueError(f"need matching non-empty X, y; got {X.shape[0]} and {y.size}")
        h = hyperparams
        K = rbf_matrix(X, X, h.lengthscale, h.signal_variance)
        K[np.diag_indices_from(K)] += h.noise_variance
        L, jitter = jittered_cholesky(K, h.signal_variance)
        alpha = cho_solve((L, True), y - h.mean_constant, check_finite=False)
        return cls(h, X, y, L, alpha, jitter)

    @property
    def is_fitted(self) -> bool:
        return self.chol is not None

    def _require_fitted(self):
        if not self.is_fitted:
            raise NotFittedError("model has no training data; call gp_fit or GPModel.condition")

    def predict(self, Xs) -> tuple[np.ndarray, np.ndarray]:
        """Posterior predictive mean and variance (noise-free latent) at each row of ``Xs``."""
        self._require_fitted()
        h = self.hyperparams
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        if Xs.shape[1] != self.train_X.shape[1]:
            raise ValueError(f"expected {self.train_X.shape[1]} features, got {Xs.shape[1]}")
        Ks = rbf_matrix(Xs, self.train_X, h.lengthscale, h.signal_variance)
        mean = h.mean_constant + Ks @ self.alpha
        v = solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
        var = h.signal_variance - np.sum(v * v, axis=0)
        return mean, clamp_variance(var)

    def log_marginal_likelihood(self) -> float:
        self._require_fitted()
        r = self.train_y - self.hyperparams.mean_constant
        n = r.size
        return float(-0.5 * r @ self.alpha - np.sum(np.log(np.diag(self.chol))) - 0.5 * n * LOG_2PI)

    def to_dict(self) -> dict:
        d = {"hyperparams": asdict(self.hyperparams), "jitter": self.jitter}
        if self.is_fitted:
            d["n_train"] = int(self.train_y.size)
            d["train_sha256"] = _data_digest(self.train_X, self.train_y)
        return d


def clamp_variance(var: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    var = np.asarray(var, dtype=float)
    if np.any(var < -tol):
        raise GPError(f"predictive variance {var.min():g} is negative beyond tolerance")
    return np.maximum(var, 0.0)


def _data_digest(X: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<f8").tobytes())
    return h.hexdigest()


def gp_predict(model: GPModel, x) -> Prediction:
    mean, var = model.predict(np.asarray(x, dtype=float).reshape(1, -1))
    return Prediction(float(mean[0]), float(var[0]))


def gp_log_marginal_likelihood(model: GPModel) -> float:
    return model.log_marginal_likelihood()


# -- objective ---------------------------------------------------------------


def lml_and_grad(
    h: GPHyperparams, X: np.ndarray, y: np.ndarray, D2: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient.

    The gradient is with respect to (log lengthscale, log signal variance,
    log noise variance, mean constant).
    """
    if D2 is None:
        D2 = sq_dists(X, X)
    n = y.size
    Kf = h.signal_variance * np.exp(-D2 / (2 * h.lengthscale**2))
    K = Kf.copy()
    K[np.diag_indices_from(K)] += h.noise_variance
    L, _ = jittered_cholesky(K, h.signal_variance)
    r = y - h.mean_constant
    alpha = cho_solve((L, True), r, check_finite=False)
    lml = -0.5 * r @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI

    Kinv = cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    grad = np.empty(4)
    grad[0] = 0.5 * np.sum(W * Kf * D2) / h.lengthscale**2
    grad[1] = 0.5 * np.sum(W * Kf)
    grad[2] = 0.5 * h.noise_variance * np.trace(W)
    grad[3] = np.sum(alpha)
    return float(lml), grad


def _to_theta(h: GPHyperparams) -> np.ndarray:
    noise = math.log(h.noise_variance) if h.noise_variance > 0 else -np.inf
    return np.array([math.log(h.lengthscale), math.log(h.signal_variance), noise, h.mean_constant])


def _from_theta(theta: np.ndarray, base: GPHyperparams) -> GPHyperparams:
    return replace(
        base,
        lengthscale=math.exp(theta[0]),
        signal_variance=math.exp(theta[1]),
        noise_variance=math.exp(theta[2]) if np.isfinite(theta[2]) else 0.0,
        mean_constant=float(theta[3]),
    )


def _clip(value: float, bounds: tuple) -> float:
    lo, hi = bounds
    lo = -np.inf if lo is None else lo
    hi = np.inf if hi is None else hi
    return float(np.clip(value, lo, hi))


def default_init(y) -> GPHyperparams:
    """Fixed starting point: unit lengthscale and signal, noise 0.1, mean at the data mean."""
    m = float(np.mean(y))
    return GPHyperparams(1.0, 1.0, 0.1, m, mean_prior_mean=m, mean_prior_scale=1.0)


def gp_fit(X, y, init: GPHyperparams | None = None, config: OptConfig | None = None) -> GPModel:
    """Maximize log marginal likelihood plus the log prior on the mean constant."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size or y.size == 0:
        raise ValueError(f"need matching non-empty X, y; got {X.shape[0]} and {y.size}")
    init = init if init is not None else default_init(y)
    config = config or OptConfig()
    free = [i for i, name in enumerate(PARAM_NAMES) if name not in config.fixed]
    if "noise_variance" not in config.fixed and init.noise_variance == 0:
        raise ValueError("noise_variance 0 can only be used when fixed")
    theta0 = _to_theta(init)
    bounds_all = [
        config.log_lengthscale_bounds,
        config.log_signal_bounds,
        config.log_noise_bounds,
        (None, None),
    ]
    D2 = sq_dists(X, X)
    last_valid = [init]

    def objective(free_theta):
        theta = theta0.copy()
        theta[free] = free_theta
        h = _from_theta(theta, init)
        try:
            lml, g = lml_and_grad(h, X, y, D2)
        except (LinAlgError, GPError) as exc:
            raise GPFitError(f"objective failed: {exc}", last_valid[0]) from exc
        lp, dlp = log_gaussian_prior(h.mean_constant, h.mean_prior_mean, h.mean_prior_scale)
        value = lml + lp
        g = g.copy()
        g[3] += dlp
        if not (np.isfinite(value) and np.all(np.isfinite(g[free]))):
            raise GPFitError("non-finite objective", last_valid[0])
        last_valid[0] = h
        return -value, -g[free]

    if free:
        x0 = np.array([_clip(theta0[i], bounds_all[i]) for i in free])
        res = minimize(
            objective,
            x0,
            jac=True,
            method="L-BFGS-B",
            bounds=[bounds_all[i] for i in free],
            options={"maxiter": config.maxiter, "gtol": config.gtol, "ftol": config.ftol},
        )
        theta = theta0.copy()
        theta[free] = res.x
        h = _from_theta(theta, init)
    else:
        h = init
    return GPModel.condition(h, X, y)
