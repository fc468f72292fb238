import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from sedpool.evaluation import (
    MODEL_NAMES,
    EvalConfig,
    FoldContext,
    PredictionRecord,
    aggregate,
    make_folds,
    read_records,
    run_cv,
    run_model,
    write_outputs,
    write_records,
)
from sedpool.ingest import Cohort, ParticipantSeries
from sedpool.synth import SynthConfig, generate

SMALL = SynthConfig(n_participants=6, days=12, days_jitter=0, seed=9)
FAST = dict(gp_maxiter=30, mt_maxiter=30)


@pytest.fixture(scope="module")
def small_cohort():
    return generate(SMALL)


def test_fold_sizes_and_partition():
    ids = [f"p{i}" for i in range(36)]
    folds = make_folds(ids, seed=0)
    assert sorted(len(f.test_ids) for f in folds) == [7, 7, 7, 7, 8]
    tested = [pid for f in folds for pid in f.test_ids]
    assert sorted(tested) == sorted(ids)
    for f in folds:
        assert set(f.train_ids) | set(f.test_ids) == set(ids)
        assert not set(f.train_ids) & set(f.test_ids)
    assert make_folds(ids, 0) == folds
    assert make_folds(ids, 1) != folds
    with pytest.raises(ValueError):
        make_folds(ids[:4], 0)


def test_mean_model_steps_and_constant_prediction():
    cohort = generate(SynthConfig(n_participants=10, days=30, days_jitter=0))
    fold = make_folds(cohort, 0)[0]
    recs = run_model("mean", fold, cohort, w=5, s=5)
    pid = fold.test_ids[0]
    days = [r.day_index for r in recs if r.participant_id == pid]
    assert days == list(range(5, 30))
    train_mean = np.mean(np.concatenate([cohort[p].targets for p in fold.train_ids]))
    preds = {r.y_pred for r in recs}
    assert len(preds) == 1
    assert preds.pop() == pytest.approx(train_mean, abs=1e-12)
    assert all(r.day_index >= 5 for r in recs)


def test_short_series_is_skipped(small_cohort, caplog):
    fold = make_folds(small_cohort, 0)[0]
    assert run_model("mean", fold, small_cohort, w=3, s=12) == []
    assert "skipped" in caplog.text


def test_unknown_model(small_cohort):
    with pytest.raises(ValueError, match="gp-mt"):
        run_model("svm", make_folds(small_cohort, 0)[0], small_cohort, 3, 5)
    with pytest.raises(ValueError):
        EvalConfig(models=("svm",))


def _poison(cohort: Cohort, pid: str, t: int) -> Cohort:
    """Flip the targets of ``pid`` from day ``t`` on (features untouched)."""
    parts = []
    for p in cohort.participants:
        if p.participant_id == pid:
            recs = tuple(r if i < t else replace(r, target=9 - r.target) for i, r in enumerate(p.records))
            p = ParticipantSeries(pid, recs)
        parts.append(p)
    return Cohort(tuple(parts), cohort.weather_vocabulary)


@pytest.mark.parametrize("model", MODEL_NAMES)
def test_no_lookahead(small_cohort, model):
    config = EvalConfig(models=(model,), s=4, **FAST)
    fold = make_folds(small_cohort, 0)[0]
    pid = fold.test_ids[0]
    w = 3
    clean = {r.day_index: r.y_pred for r in run_model(model, fold, small_cohort, w, 4, config) if r.participant_id == pid}
    for t in (4, 7):
        poisoned = _poison(small_cohort, pid, t)
        got = {r.day_index: r.y_pred for r in run_model(model, fold, poisoned, w, 4, config) if r.participant_id == pid}
        for day in range(t, t + w):
            assert got[day] == clean[day]


def test_fold_context_standardizes_on_training_participants_only(small_cohort):
    fold = make_folds(small_cohort, 0)[0]
    ctx = FoldContext(small_cohort, fold, EvalConfig())
    assert np.allclose(ctx.train_X[:, :3].mean(0), 0.0)
    hyp = ctx.mt_hyperparams
    assert hyp.n_tasks == len(fold.train_ids) + 1


def test_aggregate_arithmetic():
    recs = [
        PredictionRecord("mean", "a", 5, 3, 1.0, 2.0, 0),
        PredictionRecord("mean", "a", 6, 3, 3.0, 5.0, 0),
    ]
    res = aggregate(recs, s=5)
    assert res.overall_mse[("mean", 3)] == 2.5
    assert res.mse_by_day_index[("mean", 3)] == {5: 1.0, 6: 4.0}
    assert res.mse_by_window_position[("mean", 3)] == {0: 2.5}
    perfect = aggregate([replace(r, y_pred=r.y_true) for r in recs])
    assert perfect.overall_mse[("mean", 3)] == 0.0
    with pytest.raises(ValueError):
        aggregate([])


@pytest.fixture(scope="module")
def small_run(small_cohort):
    return run_cv(small_cohort, EvalConfig(models=("mean", "wr", "gp-ind"), windows=(2, 5), s=4, seed=1, **FAST))


def test_every_day_predicted_once(small_cohort, small_run):
    seen = {}
    for r in small_run.records:
        key = (r.model, r.w, r.participant_id, r.day_index)
        assert key not in seen
        seen[key] = r
    for model in ("mean", "wr", "gp-ind"):
        for w in (2, 5):
            for p in small_cohort.participants:
                days = sorted(d for (m, ww, pid, d) in seen if (m, ww, pid) == (model, w, p.participant_id))
                assert days == list(range(4, len(p)))


def test_records_csv_recomputation(tmp_path, small_run):
    paths = write_outputs(small_run, tmp_path)
    sq = {}
    with open(paths["records"]) as fh:
        for row in csv.DictReader(fh):
            sq.setdefault((row["model"], int(row["w"])), []).append((float(row["y_true"]) - float(row["y_pred"])) ** 2)
    for key, errs in sq.items():
        assert small_run.overall_mse[key] == pytest.approx(sum(errs) / len(errs), rel=1e-12)
    summary = json.loads(paths["summary"].read_text())
    assert summary["models"]["wr"]["5"]["overall_mse"] == small_run.overall_mse[("wr", 5)]
    assert read_records(paths["records"]) == sorted(small_run.records, key=lambda r: (r.model, r.w, r.fold, r.participant_id, r.day_index))
    header = paths["records"].read_text().splitlines()[0]
    assert header == "model,fold,participant_id,day_index,w,y_true,y_pred"


def test_runs_are_bit_identical_and_parallel_safe(tmp_path, small_cohort, small_run):
    cfg = EvalConfig(models=("mean", "wr", "gp-ind"), windows=(2, 5), s=4, seed=1, **FAST)
    again = run_cv(small_cohort, replace(cfg, jobs=2))
    write_records(small_run.records, tmp_path / "a.csv")
    write_records(again.records, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_clip_flag(small_cohort):
    fold = make_folds(small_cohort, 0)[0]
    recs = run_model("wr", fold, small_cohort, 3, 4, EvalConfig(s=4, clip=True))
    assert all(0.0 <= r.y_pred <= 9.0 for r in recs)
