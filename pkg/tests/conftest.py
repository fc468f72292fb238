from datetime import date, datetime, timedelta

import pytest

from sedpool.ingest import DEFAULT_WEATHER_DESCRIPTIONS

START = date(2015, 7, 1)


def day_samples(day: date, morning: list[int], active_intervals: int, active_steps: int = 200):
    """Samples for one day.

    ``morning`` values go at 9:00, 9:10, ...; the first ``active_intervals`` of
    the nine 40-minute evening intervals get ``active_steps`` steps at their
    start, the rest get 10 steps (sedentary).
    """
    rows = []
    for i, steps in enumerate(morning):
        rows.append((datetime.combine(day, datetime.min.time()) + timedelta(hours=9, minutes=10 * i), steps))
    for k in range(9):
        ts = datetime.combine(day, datetime.min.time()) + timedelta(hours=15, minutes=40 * k)
        rows.append((ts, active_steps if k < active_intervals else 10))
    return rows


def steps_csv(streams: dict[str, list[tuple[datetime, int]]]) -> str:
    lines = ["participant_id,timestamp,steps"]
    for pid, rows in streams.items():
        lines += [f"{pid},{ts.isoformat()},{s}" for ts, s in rows]
    return "\n".join(lines) + "\n"


def weather_csv(days, descriptions=None) -> str:
    descriptions = descriptions or DEFAULT_WEATHER_DESCRIPTIONS
    lines = ["date,description"]
    lines += [f"{d.isoformat()},{descriptions[i % len(descriptions)]}" for i, d in enumerate(days)]
    return "\n".join(lines) + "\n"


@pytest.fixture
def tiny_study(tmp_path):
    """Participant A: 9 consecutive days (8 usable).  B: 7 days (6 usable, rejected).

    Day i of A has i % 4 active evening intervals, so target = 9 - i % 4, and
    morning steps 100 * (i + 1) split over two samples.
    """
    streams = {"A": [], "B": []}
    for i in range(9):
        d = START + timedelta(days=i)
        streams["A"] += day_samples(d, [50 * (i + 1), 50 * (i + 1)], i % 4)
    for i in range(7):
        streams["B"] += day_samples(START + timedelta(days=i), [300], 2)
    days = [START + timedelta(days=i) for i in range(10)]
    steps = tmp_path / "steps.csv"
    weather = tmp_path / "weather.csv"
    steps.write_text(steps_csv(streams))
    weather.write_text(weather_csv(days))
    return steps, weather


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
