"""Within-person stationarity and between-person similarity.

The stationarity test compares one OLS model fit on a participant's whole
history against ``k`` separate models, one per consecutive window, with a
chi-square log-likelihood difference test.  Between-person similarity is the
DTW distance between daily sedentary-count sequences.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import chi2

from .ingest import Cohort, ParticipantSeries, Standardization, encode_series, N_CONTINUOUS
from .regressors import LinearRegressor, ols_fit

VARIANCE_FLOOR = 1e-9
FEATURE_SETS = ("full", "continuous", "intercept")


class DegenerateTestError(ValueError):
    """Fewer than two complete windows: nothing to compare against."""


def gaussian_loglik(regressor: LinearRegressor, X, y, variance: float | None = None) -> float:
    """Sum of Gaussian log densities of ``y`` around the regressor's predictions.

    Without ``variance`` the MLE (mean squared residual) is used, floored at 1e-9.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("log-likelihood of empty data")
    resid = y - regressor.predict(X)
    if variance is None:
        variance = float(np.mean(resid**2))
    variance = max(variance, VARIANCE_FLOOR)
    n = y.size
    return float(-0.5 * n * math.log(2 * math.pi * variance) - 0.5 * np.sum(resid**2) / variance)


@dataclass(frozen=True)
class StationarityResult:
    participant_id: str
    window_length: int
    k: int
    statistic: float
    dof: int
    threshold: float
    reject_null: bool


def resolve_dof(dof: str | int, k: int, n_features: int) -> int:
    """Degrees of freedom for the test.

    ``"k-1"`` is one degree per extra window.  ``"lr"`` is the likelihood-ratio count
    (k - 1) * (n_features + 2): coefficients, intercept and variance per
    extra window model.
    """
    if dof == "k-1":
        return k - 1
    if dof == "lr":
        return (k - 1) * (n_features + 2)
    dof = int(dof)
    if dof < 1:
        raise ValueError("dof must be positive")
    return dof


def stationarity_statistic(X, y, window_length: int) -> tuple[float, int]:
    """Return (statistic, k) comparing one whole-history model to k window models.

    Trailing days that do not fill a window are dropped from both sides.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if window_length < 1:
        raise ValueError("window_length must be >= 1")
    k = y.size // window_length
    if k < 2:
        raise DegenerateTestError(
            f"{y.size} days with window {window_length} gives k={k} window models; need k >= 2"
        )
    n = k * window_length
    X, y = X[:n], y[:n]
    base = ols_fit(X, y)
    base_var = max(float(np.mean((y - base.predict(X)) ** 2)), VARIANCE_FLOOR)
    stat = 0.0
    for i in range(k):
        sl = slice(i * window_length, (i + 1) * window_length)
        local = ols_fit(X[sl], y[sl])
        stat += gaussian_loglik(local, X[sl], y[sl]) - gaussian_loglik(base, X[sl], y[sl], base_var)
    return 2.0 * stat, k


def stationarity_design(series: ParticipantSeries, features: str, vocabulary) -> np.ndarray:
    if features not in FEATURE_SETS:
        raise ValueError(f"features must be one of {FEATURE_SETS}")
    if features == "intercept":
        return np.zeros((len(series), 0))
    X, _ = encode_series(series, vocabulary, Standardization.fit(series.records))
    return X if features == "full" else X[:, :N_CONTINUOUS]


def stationarity_test(
    series: ParticipantSeries,
    window_length: int,
    alpha: float = 0.05,
    dof: str | int = "k-1",
    features: str = "intercept",
    vocabulary=None,
) -> StationarityResult:
    if vocabulary is None:
        from .ingest import default_vocabulary

        vocabulary = default_vocabulary()
    X = stationarity_design(series, features, vocabulary)
    stat, k = stationarity_statistic(X, series.targets, window_length)
    df = resolve_dof(dof, k, X.shape[1])
    threshold = float(chi2.ppf(1 - alpha, df))
    return StationarityResult(series.participant_id, window_length, k, stat, df, threshold, stat > threshold)


# -- DTW ---------------------------------------------------------------------


def dtw_distance(a, b) -> float:
    """Unconstrained DTW with absolute-difference cost and match/insert/delete steps."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("DTW of an empty sequence")
    cost = np.abs(a[:, None] - b[None, :])
    D = np.full((a.size + 1, b.size + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, a.size + 1):
        prev, cur = D[i - 1], D[i]
        row = cost[i - 1]
        for j in range(1, b.size + 1):
            cur[j] = row[j - 1] + min(prev[j - 1], prev[j], cur[j - 1])
    return float(D[-1, -1])


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    participant_ids: tuple[str, ...]
    values: np.ndarray

    @property
    def similarity(self) -> np.ndarray:
        return 1.0 / (1.0 + self.values)

    def write_csv(self, path: str | Path, kind: str = "distance") -> None:
        data = self.values if kind == "distance" else self.similarity
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["participant_id", *self.participant_ids])
            for pid, row in zip(self.participant_ids, data):
                writer.writerow([pid, *(repr(float(v)) for v in row)])


def daily_targets(series: ParticipantSeries) -> np.ndarray:
    return series.targets


def similarity_matrix(
    cohort: Cohort | Sequence[ParticipantSeries],
    sequence_extractor: Callable[[ParticipantSeries], np.ndarray] = daily_targets,
) -> SimilarityMatrix:
    participants = cohort.participants if isinstance(cohort, Cohort) else tuple(cohort)
    seqs = [sequence_extractor(p) for p in participants]
    M = len(seqs)
    D = np.zeros((M, M))
    for i in range(M):
        for j in range(i + 1, M):
            D[i, j] = D[j, i] = dtw_distance(seqs[i], seqs[j])
    return SimilarityMatrix(tuple(p.participant_id for p in participants), D)
