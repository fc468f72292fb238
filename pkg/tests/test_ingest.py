from datetime import date, datetime, timedelta

import pytest
from numpy.testing import assert_allclose

from conftest import START, day_samples
from sedpool.ingest import (
    FEATURE_DIM,
    DayRecord,
    DomainError,
    DuplicateSampleError,
    IngestReport,
    ParseError,
    ParticipantRejected,
    ParticipantSeries,
    Standardization,
    StepStream,
    build_cohort,
    build_day_records,
    default_vocabulary,
    encode_features,
    encode_series,
    label_sedentary,
    parse_step_stream,
    read_day_records,
    read_vocabulary,
    read_weather,
    write_day_records,
)

VOCAB = default_vocabulary()


def _stream(rows, pid="P"):
    return StepStream(pid, tuple(sorted(rows)))


# -- parsing -----------------------------------------------------------------


def test_parse_groups_and_sorts():
    text = "participant_id,timestamp,steps\nb,2015-07-01T10:00,5\na,2015-07-01T10:05,3\nb,2015-07-01T09:00,7\n"
    streams = parse_step_stream(text)
    assert [s.participant_id for s in streams] == ["b", "a"]
    assert [v for _, v in streams[0].samples] == [7, 5]


def test_parse_accepts_bytes_and_empty_input():
    assert parse_step_stream(b"") == []
    assert parse_step_stream(b"participant_id,timestamp,steps\n") == []


@pytest.mark.parametrize(
    "body, exc",
    [
        ("a,2015-07-01T10:00\n", ParseError),
        ("a,not-a-time,5\n", ParseError),
        ("a,2015-07-01T10:00,five\n", ParseError),
        ("a,2015-07-01T10:00,-1\n", DomainError),
        ("a,2015-07-01T10:00,1\na,2015-07-01T10:00,2\n", DuplicateSampleError),
    ],
)
def test_parse_errors(body, exc):
    with pytest.raises(exc):
        parse_step_stream("participant_id,timestamp,steps\n" + body)


def test_parse_error_reports_line_number():
    with pytest.raises(ParseError) as info:
        parse_step_stream("participant_id,timestamp,steps\na,2015-07-01T10:00,1\na,bad,2\n")
    assert info.value.line == 3


def test_bad_header():
    with pytest.raises(ParseError):
        parse_step_stream("id,time,steps\n")


def test_stream_invariants():
    t = datetime(2015, 7, 1, 10)
    with pytest.raises(DomainError):
        StepStream("x", ((t, 1), (t, 2)))
    with pytest.raises(DomainError):
        StepStream("x", ((t, -1),))


# -- labelling ---------------------------------------------------------------


def test_threshold_boundary():
    d = date(2015, 7, 1)
    base = datetime(2015, 7, 1, 15)
    s = _stream([(base, 139), (base + timedelta(minutes=40), 140), (base + timedelta(minutes=41), 0)])
    flags = label_sedentary(s, d)
    assert len(flags) == 9
    assert flags[0] is True and flags[1] is False
    assert all(flags[2:])


def test_steps_split_within_interval_are_summed():
    base = datetime(2015, 7, 1, 15)
    s = _stream([(base, 70), (base + timedelta(minutes=39), 70)])
    assert label_sedentary(s, date(2015, 7, 1))[0] is False


def test_samples_outside_window_ignored():
    s = _stream([(datetime(2015, 7, 1, 21, 0), 5000), (datetime(2015, 7, 1, 14, 59), 5000)])
    assert sum(label_sedentary(s, date(2015, 7, 1))) == 9


def test_window_must_be_whole_intervals():
    s = _stream([(datetime(2015, 7, 1, 15), 1)])
    with pytest.raises(DomainError):
        label_sedentary(s, date(2015, 7, 1), datetime(2015, 7, 1, 15).time(), datetime(2015, 7, 1, 16).time())


# -- day records -------------------------------------------------------------


def _weather(days):
    return {d: VOCAB[i % 21] for i, d in enumerate(days)}


def test_day_records_hand_computed():
    rows = []
    for i in range(9):
        rows += day_samples(START + timedelta(days=i), [50 * (i + 1), 50 * (i + 1)], i % 4)
    stream = _stream(rows, "A")
    days = [START + timedelta(days=i) for i in range(9)]
    report = IngestReport()
    series = build_day_records(stream, _weather(days), report)
    assert len(series) == 8
    assert report.dropped_days == [("A", START, "no-previous-day-data")]
    r = series.records[0]  # day 1
    assert r.date == START + timedelta(days=1)
    assert r.morning_steps == 200
    # previous day: morning 100, evening 0 active intervals -> 9 * 10 steps
    assert r.prev_total_steps == 100 + 90
    assert r.prev_sedentary_count == 9
    assert r.target == 9 - 1
    assert r.weather == VOCAB[1]
    assert [x.target for x in series.records] == [9 - i % 4 for i in range(1, 9)]


def test_day_drop_reasons():
    rows = []
    for i in range(11):
        d = START + timedelta(days=i)
        if i == 3:  # evening only: no morning data
            rows += [(datetime.combine(d, datetime.min.time()) + timedelta(hours=16), 5)]
        elif i == 4:  # morning only
            rows += [(datetime.combine(d, datetime.min.time()) + timedelta(hours=10), 5)]
        else:
            rows += day_samples(d, [100], 1)
    days = [START + timedelta(days=i) for i in range(11) if i != 6]
    report = IngestReport()
    series = build_day_records(_stream(rows, "A"), _weather(days), report)
    reasons = {d: r for _, d, r in report.dropped_days}
    assert reasons[START + timedelta(days=3)] == "no-morning-data"
    assert reasons[START + timedelta(days=4)] == "no-target-window-data"
    assert reasons[START + timedelta(days=6)] == "no-weather"
    assert len(series) == 11 - 4


def test_six_usable_days_rejects_participant():
    rows = []
    for i in range(7):
        rows += day_samples(START + timedelta(days=i), [100], 2)
    report = IngestReport()
    with pytest.raises(ParticipantRejected) as info:
        build_day_records(_stream(rows, "B"), _weather([START + timedelta(days=i) for i in range(7)]), report)
    assert info.value.n_days == 6 and info.value.reason == "too-few-days"
    assert report.rejected == [("B", "too-few-days", 6)]


def test_build_cohort_skips_rejected(tiny_study):
    steps, weather = tiny_study
    streams = parse_step_stream(steps.read_bytes())
    series = build_cohort(streams, read_weather(weather, VOCAB), VOCAB)
    assert [s.participant_id for s in series] == ["A"]


def test_record_domain():
    with pytest.raises(DomainError):
        DayRecord(START, 0, 0, 10, VOCAB[0], 1)
    recs = tuple(DayRecord(START + timedelta(days=i), 0, 0, 0, VOCAB[0], 1) for i in range(6))
    with pytest.raises(DomainError):
        ParticipantSeries("x", recs)


# -- vocabulary / weather ----------------------------------------------------


def test_vocabulary_file(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("\n".join(f"w{i}" for i in range(21)) + "\n")
    assert read_vocabulary(p)[20].description == "w20"
    p.write_text("\n".join(f"w{i}" for i in range(20)))
    with pytest.raises(DomainError):
        read_vocabulary(p)


def test_unknown_weather_description(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("date,description\n2015-07-01,raining frogs\n")
    with pytest.raises(DomainError):
        read_weather(p, VOCAB)


# -- features ----------------------------------------------------------------


def _series(n=8):
    return ParticipantSeries(
        "x",
        tuple(DayRecord(START + timedelta(days=i), 100 * i, 50 * i + 7, i % 10, VOCAB[i % 3], i % 10) for i in range(n)),
    )


def test_encoding_layout():
    s = _series()
    st = Standardization.fit(s.records)
    X, y = encode_series(s, VOCAB, st)
    assert X.shape == (8, FEATURE_DIM)
    assert_allclose(X[:, :3].mean(0), 0.0, atol=1e-12)
    assert_allclose(X[:, :3].std(0), 1.0, atol=1e-12)
    assert_allclose(X[:, 3:].sum(1), 1.0)
    assert X[4, 3 + 1] == 1.0
    assert_allclose(y, [i % 10 for i in range(8)])


def test_constant_feature_scale_is_one():
    recs = tuple(DayRecord(START + timedelta(days=i), 5, 5, 5, VOCAB[0], 1) for i in range(7))
    st = Standardization.fit(recs)
    assert st.scale == (1.0, 1.0, 1.0)
    assert_allclose(encode_features(recs[0], VOCAB, st)[:3], 0.0)


def test_day_records_csv_round_trip(tmp_path):
    s = _series()
    p = tmp_path / "r.csv"
    write_day_records([s], p)
    cohort = read_day_records(p)
    assert cohort.ids == ["x"]
    assert cohort["x"].records == s.records
    assert p.read_text().splitlines()[0] == "participant_id,date,morning_steps,prev_total_steps,prev_sedentary_count,weather_code,target"
