"""Multi-task GP with a free-form inter-task covariance.

The joint covariance between training point p of task l and point q of
task m is ``Kf[l, m] * kx(x_p, x_q) + [l == m][p == q] * noise[l]`` where
``kx`` is a unit-variance RBF kernel shared by all tasks and ``Kf = L L^T``.
On a shared input grid this is exactly ``kron(Kf, Kx) + kron(D, I)``;
participants with different numbers of days are handled by building the
matrix entrywise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, lapack, solve_triangular
from scipy.optimize import minimize

from .gp import (
    LOG_2PI,
    GPError,
    GPFitError,
    NotFittedError,
    Prediction,
    clamp_variance,
    jittered_cholesky,
    log_gaussian_prior,
    rbf_matrix,
    sq_dists,
)

MT_PARAM_NAMES = ("lengthscale", "task_chol", "task_noises", "mean_constant")

TaskData = Sequence[tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True, eq=False)
class MTGPHyperparams:
    lengthscale: float
    task_chol: np.ndarray
    task_noises: np.ndarray
    mean_constant: float = 0.0
    mean_prior_mean: float = 0.0
    mean_prior_scale: float = 1.0

    def __post_init__(self):
        L = np.tril(np.atleast_2d(np.asarray(self.task_chol, dtype=float)))
        noises = np.asarray(self.task_noises, dtype=float).ravel()
        object.__setattr__(self, "task_chol", L)
        object.__setattr__(self, "task_noises", noises)
        if L.shape[0] != L.shape[1]:
            raise ValueError(f"task_chol must be square, got {L.shape}")
        if noises.size != L.shape[0]:
            raise ValueError(f"need {L.shape[0]} task noises, got {noises.size}")
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")
        if np.any(noises < 0):
            raise ValueError("task noises must be non-negative")
        if np.any(np.diag(self.task_covariance) <= 0):
            raise ValueError("diagonal of the task covariance must be strictly positive")
        if not self.mean_prior_scale > 0:
            raise ValueError("mean_prior_scale must be positive")

    @property
    def n_tasks(self) -> int:
        return self.task_chol.shape[0]

    @property
    def task_covariance(self) -> np.ndarray:
        return self.task_chol @ self.task_chol.T

    @classmethod
    def from_task_covariance(cls, Kf, task_noises, lengthscale=1.0, **kw) -> "MTGPHyperparams":
        """Build from a PSD task covariance (rank-deficient matrices are allowed)."""
        Kf = np.asarray(Kf, dtype=float)
        return cls(lengthscale, psd_cholesky(Kf), task_noises, **kw)


def psd_cholesky(A: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == A`` for symmetric PSD ``A``.

    Unlike LAPACK's routine this tolerates singular matrices (e.g. all-ones).
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    L = np.zeros_like(A)
    tol = 1e-10 * n * max(1.0, float(np.max(np.abs(np.diag(A)), initial=0.0)))
    for j in range(n):
        d = A[j, j] - L[j, :j] @ L[j, :j]
        if d < -tol:
            raise ValueError("matrix is not positive semi-definite")
        L[j, j] = math.sqrt(max(d, 0.0))
        for i in range(j + 1, n):
            s = A[i, j] - L[i, :j] @ L[j, :j]
            L[i, j] = s / L[j, j] if L[j, j] > math.sqrt(tol) else 0.0
    return L


def add_population_task(h: MTGPHyperparams) -> MTGPHyperparams:
    """Append a task for a participant the hyperparameters were not fit on.

    The new task is modelled as the average of the fitted tasks plus an
    independent personal component, sized so that its prior variance equals
    the average fitted task variance.  Its noise is the mean fitted noise.
    """
    K = h.task_covariance
    M = K.shape[0]
    cross = K.mean(axis=1)
    # tr(K)/M >= mean(K) for PSD K, so the personal part has non-negative variance
    own = max(np.trace(K) / M - K.mean(), 0.0)
    extended = np.block([[K, cross[:, None]], [cross[None, :], np.array([[K.mean() + own]])]])
    return replace(
        h,
        task_chol=psd_cholesky(extended),
        task_noises=np.append(h.task_noises, h.task_noises.mean()),
    )


@dataclass(frozen=True)
class MTOptConfig:
    maxiter: int = 200
    gtol: float = 1e-5
    ftol: float = 1e-10
    fixed: frozenset = frozenset()
    log_lengthscale_bounds: tuple[float, float] = (math.log(1e-2), math.log(1e3))
    log_noise_bounds: tuple[float, float] = (math.log(1e-6), math.log(1e2))

    def __post_init__(self):
        unknown = set(self.fixed) - set(MT_PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown hyperparameter(s) {sorted(unknown)}")


def stack_tasks(task_data: TaskData) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Concatenate per-task data; returns X, y and the task index of every row."""
    Xs, ys, ts = [], [], []
    dim = None
    for l, (X, y) in enumerate(task_data):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if y.size == 0:
            continue
        X = X.reshape(y.size, -1)
        if dim is not None and X.shape[1] != dim:
            raise ValueError(f"task {l} has {X.shape[1]} features, expected {dim}")
        dim = X.shape[1]
        Xs.append(X)
        ys.append(y)
        ts.append(np.full(y.size, l, dtype=int))
    if not ys:
        raise ValueError("no training points in any task")
    return np.vstack(Xs), np.concatenate(ys), np.concatenate(ts)


def _sigma_from_stacked(h: MTGPHyperparams, X, tasks, D2=None) -> tuple[np.ndarray, np.ndarray]:
    """Return (Sigma, Kx) for stacked data."""
    if D2 is None:
        D2 = sq_dists(X, X)
    Kx = np.exp(-D2 / (2 * h.lengthscale**2))
    Kf = h.task_covariance
    S = Kf[np.ix_(tasks, tasks)] * Kx
    S[np.diag_indices_from(S)] += h.task_noises[tasks]
    return S, Kx


def assemble_sigma(h: MTGPHyperparams, task_data: TaskData) -> np.ndarray:
    """Joint training covariance, rows ordered task by task."""
    if len(task_data) != h.n_tasks:
        raise ValueError(f"hyperparameters describe {h.n_tasks} tasks, data has {len(task_data)}")
    X, _, tasks = stack_tasks(task_data)
    return _sigma_from_stacked(h, X, tasks)[0]


@dataclass(frozen=True, eq=False)
class MTGPModel:
    hyperparams: MTGPHyperparams
    train_X: np.ndarray | None = None
    train_y: np.ndarray | None = None
    train_tasks: np.ndarray | None = None
    chol: np.ndarray | None = field(default=None, repr=False)
    alpha: np.ndarray | None = field(default=None, repr=False)
    jitter: float = 0.0
    task_ids: tuple | None = None

    @classmethod
    def condition(cls, hyperparams: MTGPHyperparams, task_data: TaskData, task_ids=None) -> "MTGPModel":
        if len(task_data) != hyperparams.n_tasks:
            raise ValueError(
                f"hyperparameters describe {hyperparams.n_tasks} tasks, data has {len(task_data)}"
            )
        X, y, tasks = stack_tasks(task_data)
        S, _ = _sigma_from_stacked(hyperparams, X, tasks)
        L, jitter = jittered_cholesky(S, float(np.max(np.diag(hyperparams.task_covariance))))
        alpha = cho_solve((L, True), y - hyperparams.mean_constant, check_finite=False)
        ids = tuple(task_ids) if task_ids is not None else tuple(range(hyperparams.n_tasks))
        return cls(hyperparams, X, y, tasks, L, alpha, jitter, ids)

    @property
    def is_fitted(self) -> bool:
        return self.chol is not None

    def predict(self, task: int, Xs, include_noise: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and variance for ``task`` at each row of ``Xs``.

        The variance includes the task's noise term unless ``include_noise`` is false.
        """
        if not self.is_fitted:
            raise NotFittedError("model has no training data")
        h = self.hyperparams
        if not 0 <= task < h.n_tasks:
            raise IndexError(f"task index {task} outside [0, {h.n_tasks})")
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        if Xs.shape[1] != self.train_X.shape[1]:
            raise ValueError(f"expected {self.train_X.shape[1]} features, got {Xs.shape[1]}")
        Kf = h.task_covariance
        V = rbf_matrix(Xs, self.train_X, h.lengthscale, 1.0) * Kf[task, self.train_tasks]
        mean = h.mean_constant + V @ self.alpha
        w = solve_triangular(self.chol, V.T, lower=True, check_finite=False)
        prior = Kf[task, task] + (h.task_noises[task] if include_noise else 0.0)
        return mean, clamp_variance(prior - np.sum(w * w, axis=0))

    def log_marginal_likelihood(self) -> float:
        if not self.is_fitted:
            raise NotFittedError("model has no training data")
        r = self.train_y - self.hyperparams.mean_constant
        return float(-0.5 * r @ self.alpha - np.sum(np.log(np.diag(self.chol))) - 0.5 * r.size * LOG_2PI)

    def to_dict(self) -> dict:
        h = self.hyperparams
        return {
            "n_tasks": h.n_tasks,
            "task_ids": [str(t) for t in (self.task_ids or range(h.n_tasks))],
            "lengthscale": h.lengthscale,
            "task_covariance": h.task_covariance.tolist(),
            "task_noises": h.task_noises.tolist(),
            "mean_constant": h.mean_constant,
            "mean_prior_mean": h.mean_prior_mean,
            "mean_prior_scale": h.mean_prior_scale,
            "jitter": self.jitter,
        }


def mtgp_predict(model: MTGPModel, task: int, x) -> Prediction:
    mean, var = model.predict(task, np.asarray(x, dtype=float).reshape(1, -1))
    return Prediction(float(mean[0]), float(var[0]))


# -- objective ---------------------------------------------------------------


def _spd_inverse(L: np.ndarray) -> np.ndarray:
    inv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise LinAlgError(f"dpotri failed with info={info}")
    return np.tril(inv) + np.tril(inv, -1).T


def mt_lml_and_grad(
    h: MTGPHyperparams, X: np.ndarray, y: np.ndarray, tasks: np.ndarray, D2: np.ndarray | None = None
) -> tuple[float, dict]:
    """Joint log marginal likelihood and gradients.

    Gradients are keyed by ``log_lengthscale``, ``task_chol`` (full M x M,
    lower triangle meaningful), ``log_task_noises`` and ``mean_constant``.
    """
    if D2 is None:
        D2 = sq_dists(X, X)
    M = h.n_tasks
    S, Kx = _sigma_from_stacked(h, X, tasks, D2)
    L, jitter = jittered_cholesky(S, float(np.max(np.diag(h.task_covariance))))
    r = y - h.mean_constant
    alpha = cho_solve((L, True), r, check_finite=False)
    lml = -0.5 * r @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * r.size * LOG_2PI

    W = np.outer(alpha, alpha) - _spd_inverse(L)
    G = W * Kx
    onehot = np.zeros((tasks.size, M))
    onehot[np.arange(tasks.size), tasks] = 1.0
    A = 0.5 * onehot.T @ G @ onehot
    Kf = h.task_covariance
    grads = {
        "log_lengthscale": 0.5 * np.sum(G * Kf[np.ix_(tasks, tasks)] * D2) / h.lengthscale**2,
        "task_chol": np.tril(2.0 * A @ h.task_chol),
        "log_task_noises": 0.5 * h.task_noises * np.bincount(tasks, weights=np.diag(W), minlength=M),
        "mean_constant": float(np.sum(alpha)),
    }
    return float(lml), grads


class _Packer:
    """Flattens the free hyperparameters into an optimizer vector and back."""

    def __init__(self, init: MTGPHyperparams, fixed):
        self.init = init
        self.fixed = set(fixed)
        self.M = init.n_tasks
        self.tril = np.tril_indices(self.M)

    def pack(self, h: MTGPHyperparams) -> np.ndarray:
        parts = []
        if "lengthscale" not in self.fixed:
            parts.append([math.log(h.lengthscale)])
        if "task_chol" not in self.fixed:
            parts.append(h.task_chol[self.tril])
        if "task_noises" not in self.fixed:
            parts.append(np.log(h.task_noises))
        if "mean_constant" not in self.fixed:
            parts.append([h.mean_constant])
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, theta: np.ndarray) -> MTGPHyperparams:
        h, i = self.init, 0
        kw = {}
        if "lengthscale" not in self.fixed:
            kw["lengthscale"] = math.exp(theta[i])
            i += 1
        if "task_chol" not in self.fixed:
            L = np.zeros((self.M, self.M))
            L[self.tril] = theta[i : i + len(self.tril[0])]
            kw["task_chol"] = L
            i += len(self.tril[0])
        if "task_noises" not in self.fixed:
            kw["task_noises"] = np.exp(theta[i : i + self.M])
            i += self.M
        if "mean_constant" not in self.fixed:
            kw["mean_constant"] = float(theta[i])
        return replace(h, **kw)

    def pack_grad(self, g: dict) -> np.ndarray:
        parts = []
        if "lengthscale" not in self.fixed:
            parts.append([g["log_lengthscale"]])
        if "task_chol" not in self.fixed:
            parts.append(g["task_chol"][self.tril])
        if "task_noises" not in self.fixed:
            parts.append(g["log_task_noises"])
        if "mean_constant" not in self.fixed:
            parts.append([g["mean_constant"]])
        return np.concatenate(parts) if parts else np.zeros(0)

    def bounds(self, config: MTOptConfig) -> list:
        b = []
        if "lengthscale" not in self.fixed:
            b.append(config.log_lengthscale_bounds)
        if "task_chol" not in self.fixed:
            b.extend([(None, None)] * len(self.tril[0]))
        if "task_noises" not in self.fixed:
            b.extend([config.log_noise_bounds] * self.M)
        if "mean_constant" not in self.fixed:
            b.append((None, None))
        return b


def default_mt_init(n_tasks: int, y) -> MTGPHyperparams:
    """Unit lengthscale, task covariance 0.9*I + 0.1*ones, noise 0.1, mean at the data mean."""
    m = float(np.mean(y))
    Kf = 0.9 * np.eye(n_tasks) + 0.1 * np.ones((n_tasks, n_tasks))
    return MTGPHyperparams(
        1.0, np.linalg.cholesky(Kf), np.full(n_tasks, 0.1), m, mean_prior_mean=m, mean_prior_scale=1.0
    )


def mtgp_fit(
    task_data: TaskData,
    init: MTGPHyperparams | None = None,
    config: MTOptConfig | None = None,
    task_ids=None,
) -> MTGPModel:
    """Maximize the joint log marginal likelihood (plus mean prior) over all tasks."""
    M = len(task_data)
    if M < 1:
        raise ValueError("need at least one task")
    X, y, tasks = stack_tasks(task_data)
    init = init if init is not None else default_mt_init(M, y)
    if init.n_tasks != M:
        raise ValueError(f"init describes {init.n_tasks} tasks, data has {M}")
    config = config or MTOptConfig()
    if "task_noises" not in config.fixed and np.any(init.task_noises == 0):
        raise ValueError("zero task noise can only be used when fixed")
    packer = _Packer(init, config.fixed)
    D2 = sq_dists(X, X)
    last_valid = [init]

    def objective(theta):
        try:
            h = packer.unpack(theta)
            lml, g = mt_lml_and_grad(h, X, y, tasks, D2)
        except (LinAlgError, GPError, ValueError) as exc:
            raise GPFitError(f"objective failed: {exc}", last_valid[0]) from exc
        lp, dlp = log_gaussian_prior(h.mean_constant, h.mean_prior_mean, h.mean_prior_scale)
        g["mean_constant"] += dlp
        grad = packer.pack_grad(g)
        value = lml + lp
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise GPFitError("non-finite objective", last_valid[0])
        last_valid[0] = h
        return -value, -grad

    theta0 = packer.pack(init)
    if theta0.size:
        bounds = packer.bounds(config)
        theta0 = np.array(
            [np.clip(v, -np.inf if lo is None else lo, np.inf if hi is None else hi) for v, (lo, hi) in zip(theta0, bounds)]
        )
        res = minimize(
            objective,
            theta0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": config.maxiter, "gtol": config.gtol, "ftol": config.ftol},
        )
        h = packer.unpack(res.x)
    else:
        h = init
    return MTGPModel.condition(h, task_data, task_ids)
