"""Cross-validated sliding-window evaluation of the five predictors.

Participants are split into five folds.  For every test participant ``j``
and every step ``t = s, s+w, ...`` a model sees all data of the training
participants plus ``j``'s days ``[0, t)`` and forecasts days ``[t, t+w)``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .gp import GPModel, OptConfig, gp_fit
from .ingest import Cohort, Standardization, encode_series
from .mtgp import MTGPModel, MTOptConfig, add_population_task, mtgp_fit
from .regressors import mean_fit, ridge_fit, sliding_steps, wr_run

logger = logging.getLogger(__name__)

MODEL_NAMES = ("mean", "gp-ind", "gp-batch", "gp-mt", "wr")
N_FOLDS = 5
RECORDS_HEADER = ["model", "fold", "participant_id", "day_index", "w", "y_true", "y_pred"]


@dataclass(frozen=True)
class FoldSplit:
    index: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class PredictionRecord:
    model: str
    participant_id: str
    day_index: int
    w: int
    y_true: float
    y_pred: float
    fold: int


@dataclass(frozen=True)
class EvalConfig:
    """Protocol settings.

    ``pooled_refit`` is ``"fold"`` (fit GP-Batch and GP-MT hyperparameters once
    per fold, then only condition on new days) or ``"step"`` (refit at every
    sliding step).  ``gp_ind_refit`` is ``"step"`` or ``"once"``.
    """

    models: tuple[str, ...] = MODEL_NAMES
    windows: tuple[int, ...] = (3, 5)
    s: int = 5
    seed: int = 0
    clip: bool = False
    gp_ind_refit: str = "step"
    pooled_refit: str = "fold"
    wr_delta_scale: float = 0.2
    wr_ridge: float = 1.0
    gp_maxiter: int = 200
    mt_maxiter: int = 200
    jobs: int = 1

    def __post_init__(self):
        unknown = [m for m in self.models if m not in MODEL_NAMES]
        if unknown:
            raise ValueError(f"unknown model(s) {unknown}; valid names are {', '.join(MODEL_NAMES)}")
        if self.s < 1 or any(w < 1 for w in self.windows):
            raise ValueError("s and every window length must be >= 1")
        if self.gp_ind_refit not in ("step", "once"):
            raise ValueError("gp_ind_refit must be 'step' or 'once'")
        if self.pooled_refit not in ("fold", "step"):
            raise ValueError("pooled_refit must be 'fold' or 'step'")

    def snapshot(self) -> dict:
        d = asdict(self)
        d.pop("jobs")
        return d


def make_folds(cohort: Cohort | Sequence[str], seed: int, n_folds: int = N_FOLDS) -> list[FoldSplit]:
    """Shuffle participants with a seeded PRNG and deal them round-robin into folds."""
    ids = cohort.ids if isinstance(cohort, Cohort) else list(cohort)
    if len(ids) < n_folds:
        raise ValueError(f"need at least {n_folds} participants for {n_folds}-fold CV, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = []
    for f in range(n_folds):
        test = tuple(shuffled[f::n_folds])
        test_set = set(test)
        train = tuple(i for i in ids if i not in test_set)
        folds.append(FoldSplit(f, train, test))
    return folds


class FoldContext:
    """Encoded data and fold-level fitted models, shared across window lengths.

    Features are standardized with training-participant statistics only.
    """

    def __init__(self, cohort: Cohort, fold: FoldSplit, config: EvalConfig):
        self.cohort = cohort
        self.fold = fold
        self.config = config
        train_records = [r for pid in fold.train_ids for r in cohort[pid].records]
        self.standardization = Standardization.fit(train_records)
        self.data = {
            p.participant_id: encode_series(p, cohort.weather_vocabulary, self.standardization)
            for p in cohort.participants
            if p.participant_id in fold.train_ids or p.participant_id in fold.test_ids
        }
        self.train_X = np.vstack([self.data[pid][0] for pid in fold.train_ids])
        self.train_y = np.concatenate([self.data[pid][1] for pid in fold.train_ids])
        self._cache: dict[str, object] = {}

    def _get(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def mean_baseline(self):
        return self._get("mean", lambda: mean_fit(self.train_y))

    def fit_regressor(self, X, y):
        """The regressor class shared by both halves of the weighted blend."""
        return ridge_fit(X, y, self.config.wr_ridge)

    @property
    def global_regressor(self):
        return self._get("wr-global", lambda: self.fit_regressor(self.train_X, self.train_y))

    @property
    def batch_hyperparams(self):
        def build():
            cfg = OptConfig(maxiter=self.config.gp_maxiter)
            return gp_fit(self.train_X, self.train_y, config=cfg).hyperparams

        return self._get("gp-batch", build)

    @property
    def mt_hyperparams(self):
        """GP-MT fit on the training participants, plus one appended population task.

        The appended task stands for whichever test participant is being
        forecast; its own days only enter through conditioning.
        """

        def build():
            tasks = [self.data[pid] for pid in self.fold.train_ids]
            cfg = MTOptConfig(maxiter=self.config.mt_maxiter)
            fitted = mtgp_fit(tasks, config=cfg, task_ids=self.fold.train_ids).hyperparams
            return add_population_task(fitted)

        return self._get("gp-mt", build)

    def mt_task_data(self, pid: str, t: int):
        X, y = self.data[pid]
        return [self.data[q] for q in self.fold.train_ids] + [(X[:t], y[:t])]


def _forecast(model: str, ctx: FoldContext, pid: str, t: int, w: int) -> np.ndarray:
    """Predictions for days [t, t+w) of ``pid`` using only its days before ``t``."""
    X, y = ctx.data[pid]
    n = len(y)
    Xw = X[t : min(t + w, n)]
    X_past, y_past = X[:t], y[:t]
    cfg = ctx.config
    if model == "mean":
        return ctx.mean_baseline.predict(Xw)
    if model == "gp-ind":
        if cfg.gp_ind_refit == "once":
            s = cfg.s
            key = f"gp-ind-once:{pid}"
            hyp = ctx._get(key, lambda: gp_fit(X[:s], y[:s], config=OptConfig(maxiter=cfg.gp_maxiter)).hyperparams)
            return GPModel.condition(hyp, X_past, y_past).predict(Xw)[0]
        return gp_fit(X_past, y_past, config=OptConfig(maxiter=cfg.gp_maxiter)).predict(Xw)[0]
    if model == "gp-batch":
        Xa = np.vstack([ctx.train_X, X_past])
        ya = np.concatenate([ctx.train_y, y_past])
        hyp = ctx.batch_hyperparams
        if cfg.pooled_refit == "step":
            return gp_fit(Xa, ya, init=hyp, config=OptConfig(maxiter=cfg.gp_maxiter)).predict(Xw)[0]
        return GPModel.condition(hyp, Xa, ya).predict(Xw)[0]
    if model == "gp-mt":
        tasks = ctx.mt_task_data(pid, t)
        ids = ctx.fold.train_ids + (pid,)
        hyp = ctx.mt_hyperparams
        if cfg.pooled_refit == "step":
            mdl = mtgp_fit(tasks, init=hyp, config=MTOptConfig(maxiter=cfg.mt_maxiter), task_ids=ids)
        else:
            mdl = MTGPModel.condition(hyp, tasks, ids)
        return mdl.predict(len(tasks) - 1, Xw)[0]
    raise ValueError(f"unknown model {model!r}")


def run_model(
    model: str,
    fold: FoldSplit,
    cohort: Cohort,
    w: int,
    s: int,
    config: EvalConfig | None = None,
    context: FoldContext | None = None,
) -> list[PredictionRecord]:
    """Sliding-window forecasts of one model for every test participant of a fold."""
    if model not in MODEL_NAMES:
        raise ValueError(f"unknown model {model!r}; valid names are {', '.join(MODEL_NAMES)}")
    config = config or EvalConfig(s=s)
    if config.s != s:
        config = EvalConfig(**{**asdict(config), "s": s})
    ctx = context or FoldContext(cohort, fold, config)
    records = []
    for pid in fold.test_ids:
        X, y = ctx.data[pid]
        n = len(y)
        if n <= s:
            logger.warning("participant %s has %d days, no prediction after s=%d; skipped", pid, n, s)
            continue
        if model == "wr":
            run = wr_run(
                X, y, ctx.global_regressor, w, s, delta_scale=config.wr_delta_scale, fit_local=ctx.fit_regressor
            )
            preds = run.predictions
        else:
            preds = []
            for t in sliding_steps(n, w, s):
                yhat = _forecast(model, ctx, pid, t, w)
                preds.extend((t + k, float(v)) for k, v in enumerate(yhat))
        for day, yhat in preds:
            if config.clip:
                yhat = float(np.clip(yhat, 0.0, 9.0))
            records.append(PredictionRecord(model, pid, day, w, float(y[day]), yhat, fold.index))
    return records


def _run_fold(args) -> list[PredictionRecord]:
    cohort, fold, config = args
    ctx = FoldContext(cohort, fold, config)
    out = []
    for w in config.windows:
        for model in config.models:
            out.extend(run_model(model, fold, cohort, w, config.s, config, ctx))
    return out


def run_cv(cohort: Cohort, config: EvalConfig | None = None) -> "EvalResult":
    config = config or EvalConfig()
    folds = make_folds(cohort, config.seed)
    jobs = max(1, config.jobs)
    tasks = [(cohort, fold, config) for fold in folds]
    if jobs == 1:
        chunks = [_run_fold(a) for a in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_fold, tasks))
    records = [r for chunk in chunks for r in chunk]
    return aggregate(records, config.snapshot(), s=config.s)


# -- aggregation -------------------------------------------------------------


@dataclass
class EvalResult:
    records: list[PredictionRecord]
    overall_mse: dict[tuple[str, int], float]
    mse_by_day_index: dict[tuple[str, int], dict[int, float]]
    mse_by_window_position: dict[tuple[str, int], dict[int, float]]
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out: dict = {"config": self.config, "models": {}}
        for (model, w), mse in sorted(self.overall_mse.items()):
            entry = out["models"].setdefault(model, {})
            entry[str(w)] = {
                "overall_mse": mse,
                "n": sum(1 for r in self.records if r.model == model and r.w == w),
                "mse_by_day_index": {str(d): v for d, v in sorted(self.mse_by_day_index[(model, w)].items())},
                "mse_by_window_position": {
                    str(k): v for k, v in sorted(self.mse_by_window_position[(model, w)].items())
                },
            }
        return out


def _sort_key(r: PredictionRecord):
    return (r.model, r.w, r.fold, r.participant_id, r.day_index)


def aggregate(records: Iterable[PredictionRecord], config: dict | None = None, s: int | None = None) -> EvalResult:
    """MSE per (model, w) overall, by study day, and by window position.

    Window position k covers days [s + k*w, s + (k+1)*w); when ``s`` is not
    given the smallest predicted day index per participant stands in for it.
    """
    records = sorted(records, key=_sort_key)
    if not records:
        raise ValueError("cannot aggregate zero prediction records")
    sq: dict = defaultdict(list)
    by_day: dict = defaultdict(lambda: defaultdict(list))
    by_pos: dict = defaultdict(lambda: defaultdict(list))
    first_day: dict = {}
    for r in records:
        key = (r.model, r.w, r.participant_id)
        first_day[key] = min(first_day.get(key, r.day_index), r.day_index)
    for r in records:
        e = (r.y_true - r.y_pred) ** 2
        key = (r.model, r.w)
        sq[key].append(e)
        by_day[key][r.day_index].append(e)
        start = s if s is not None else first_day[(r.model, r.w, r.participant_id)]
        by_pos[key][(r.day_index - start) // r.w].append(e)
    overall = {k: float(np.mean(v)) for k, v in sq.items()}
    day = {k: {d: float(np.mean(v)) for d, v in sorted(dv.items())} for k, dv in by_day.items()}
    pos = {k: {p: float(np.mean(v)) for p, v in sorted(pv.items())} for k, pv in by_pos.items()}
    return EvalResult(records, overall, day, pos, dict(config or {}))


# -- output ------------------------------------------------------------------


def write_records(records: Iterable[PredictionRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORDS_HEADER)
        for r in sorted(records, key=_sort_key):
            writer.writerow([r.model, r.fold, r.participant_id, r.day_index, r.w, repr(r.y_true), repr(r.y_pred)])


def read_records(path: str | Path) -> list[PredictionRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                PredictionRecord(
                    row["model"],
                    row["participant_id"],
                    int(row["day_index"]),
                    int(row["w"]),
                    float(row["y_true"]),
                    float(row["y_pred"]),
                    int(row["fold"]),
                )
            )
    return out


def write_outputs(result: EvalResult, out_dir: str | Path) -> dict[str, Path]:
    """Records CSV, summary JSON and plot-ready CSVs (MSE bars; MSE by study day)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "records": out_dir / "records.csv",
        "summary": out_dir / "summary.json",
        "mse": out_dir / "mse_by_model.csv",
        "by_day": out_dir / "mse_by_day.csv",
        "by_window": out_dir / "mse_by_window_position.csv",
    }
    write_records(result.records, paths["records"])
    paths["summary"].write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    with open(paths["mse"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "w", "mse"])
        for (model, w), mse in sorted(result.overall_mse.items()):
            writer.writerow([model, w, repr(mse)])
    for key, table, col in (
        ("by_day", result.mse_by_day_index, "day_index"),
        ("by_window", result.mse_by_window_position, "window_position"),
    ):
        with open(paths[key], "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["model", "w", col, "mse"])
            for (model, w), values in sorted(table.items()):
                for idx, mse in values.items():
                    writer.writerow([model, w, idx, repr(mse)])
    return paths


def default_jobs() -> int:
    return os.cpu_count() or 1
