"""Step-stream ingestion: raw minute-level step counts to per-day feature records.

A study day ``t`` is usable when it has at least one step sample in the
context window (9:00-15:00) and at least one in the target window
(15:00-21:00), and the previous calendar day has any data at all.  The
target is the number of sedentary 40-minute intervals in 15:00-21:00,
where an interval is sedentary if fewer than 140 steps were taken in it.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

INTERVAL_MINUTES = 40
SEDENTARY_THRESHOLD = 140
MIN_DAYS = 7
N_WEATHER = 21
N_CONTINUOUS = 3
FEATURE_DIM = N_CONTINUOUS + N_WEATHER

CONTEXT_WINDOW = (time(9, 0), time(15, 0))
TARGET_WINDOW = (time(15, 0), time(21, 0))

STEPS_HEADER = ["participant_id", "timestamp", "steps"]
WEATHER_HEADER = ["date", "description"]
DAY_RECORDS_HEADER = [
    "participant_id",
    "date",
    "morning_steps",
    "prev_total_steps",
    "prev_sedentary_count",
    "weather_code",
    "target",
]

# Descriptions as they appear in the public hourly-weather dataset.
DEFAULT_WEATHER_DESCRIPTIONS = (
    "sky is clear",
    "few clouds",
    "scattered clouds",
    "broken clouds",
    "overcast clouds",
    "mist",
    "haze",
    "fog",
    "smoke",
    "dust",
    "light intensity drizzle",
    "drizzle",
    "light rain",
    "moderate rain",
    "heavy intensity rain",
    "light intensity shower rain",
    "proximity shower rain",
    "thunderstorm",
    "proximity thunderstorm",
    "light snow",
    "snow",
)


class IngestError(ValueError):
    """Base class for ingestion failures."""


class ParseError(IngestError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateSampleError(IngestError):
    pass


class DomainError(IngestError):
    pass


class ParticipantRejected(IngestError):
    """Raised by :func:`build_day_records` when a participant is unusable.

    ``reason`` is ``"too-few-days"`` or ``"no-usable-days"``.
    """

    def __init__(self, participant_id: str, reason: str, n_days: int = 0):
        super().__init__(f"participant {participant_id!r} rejected: {reason} ({n_days} usable days)")
        self.participant_id = participant_id
        self.reason = reason
        self.n_days = n_days


@dataclass(frozen=True)
class WeatherCategory:
    code: int
    description: str


@dataclass(frozen=True)
class StepStream:
    participant_id: str
    samples: tuple[tuple[datetime, int], ...]

    def __post_init__(self):
        prev = None
        for ts, steps in self.samples:
            if steps < 0:
                raise DomainError(f"negative step count {steps} at {ts}")
            if prev is not None and ts <= prev:
                raise DomainError(f"timestamps not strictly increasing at {ts}")
            prev = ts

    def by_date(self) -> dict[date, list[tuple[datetime, int]]]:
        days: dict[date, list[tuple[datetime, int]]] = defaultdict(list)
        for ts, steps in self.samples:
            days[ts.date()].append((ts, steps))
        return dict(days)


@dataclass(frozen=True)
class DayRecord:
    date: date
    morning_steps: int
    prev_total_steps: int
    prev_sedentary_count: int
    weather: WeatherCategory
    target: int

    def __post_init__(self):
        for name in ("prev_sedentary_count", "target"):
            v = getattr(self, name)
            if not 0 <= v <= 9:
                raise DomainError(f"{name}={v} outside [0, 9]")


@dataclass(frozen=True)
class ParticipantSeries:
    participant_id: str
    records: tuple[DayRecord, ...]

    def __post_init__(self):
        if len(self.records) < MIN_DAYS:
            raise DomainError(
                f"participant {self.participant_id!r} has {len(self.records)} records, need {MIN_DAYS}"
            )
        dates = [r.date for r in self.records]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise DomainError(f"dates not strictly increasing for {self.participant_id!r}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def targets(self) -> np.ndarray:
        return np.array([r.target for r in self.records], dtype=float)


@dataclass(frozen=True)
class Cohort:
    participants: tuple[ParticipantSeries, ...]
    weather_vocabulary: tuple[WeatherCategory, ...]

    def __post_init__(self):
        ids = [p.participant_id for p in self.participants]
        if len(set(ids)) != len(ids):
            raise DomainError("participant ids are not unique")
        if not ids:
            raise DomainError("cohort needs at least one participant")
        check_vocabulary(self.weather_vocabulary)

    @property
    def ids(self) -> list[str]:
        return [p.participant_id for p in self.participants]

    def __getitem__(self, participant_id: str) -> ParticipantSeries:
        for p in self.participants:
            if p.participant_id == participant_id:
                return p
        raise KeyError(participant_id)

    def __len__(self) -> int:
        return len(self.participants)


@dataclass
class IngestReport:
    """Book-keeping for days and participants dropped during ingestion."""

    dropped_days: list[tuple[str, date, str]] = field(default_factory=list)
    rejected: list[tuple[str, str, int]] = field(default_factory=list)
    accepted: list[tuple[str, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accepted": [{"participant_id": p, "n_days": n} for p, n in self.accepted],
            "rejected": [
                {"participant_id": p, "reason": r, "n_days": n} for p, r, n in self.rejected
            ],
            "dropped_days": [
                {"participant_id": p, "date": d.isoformat(), "reason": r}
                for p, d, r in self.dropped_days
            ],
        }


# -- vocabulary --------------------------------------------------------------


def default_vocabulary() -> tuple[WeatherCategory, ...]:
    return tuple(WeatherCategory(i, d) for i, d in enumerate(DEFAULT_WEATHER_DESCRIPTIONS))


def check_vocabulary(vocabulary: Sequence[WeatherCategory]) -> None:
    if len(vocabulary) != N_WEATHER:
        raise DomainError(f"weather vocabulary must have {N_WEATHER} entries, got {len(vocabulary)}")
    if sorted(c.code for c in vocabulary) != list(range(N_WEATHER)):
        raise DomainError("weather codes must be exactly 0..20")
    if len({c.description for c in vocabulary}) != N_WEATHER:
        raise DomainError("weather descriptions must be distinct")


def read_vocabulary(path: str | Path) -> tuple[WeatherCategory, ...]:
    """One description per line; the (0-based) line number is the code."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    vocab = tuple(WeatherCategory(i, d) for i, d in enumerate(lines))
    check_vocabulary(vocab)
    return vocab


def read_weather(path: str | Path, vocabulary: Sequence[WeatherCategory]) -> dict[date, WeatherCategory]:
    lookup = {c.description: c for c in vocabulary}
    out: dict[date, WeatherCategory] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != WEATHER_HEADER:
            raise ParseError(1, f"expected header {','.join(WEATHER_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(lineno, f"expected 2 fields, got {len(row)}")
            try:
                day = date.fromisoformat(row[0].strip())
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            desc = row[1].strip()
            if desc not in lookup:
                raise DomainError(f"line {lineno}: unknown weather description {desc!r}")
            out[day] = lookup[desc]
    return out


# -- step streams ------------------------------------------------------------


def parse_step_stream(data: bytes | str | io.IOBase) -> list[StepStream]:
    """Parse a ``participant_id,timestamp,steps`` CSV into one stream per participant.

    Streams are returned in order of first appearance; samples are sorted by
    timestamp.
    """
    if isinstance(data, bytes):
        text = data.decode("utf-8")
    elif isinstance(data, str):
        text = data
    else:
        text = data.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")

    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    if [h.strip() for h in header] != STEPS_HEADER:
        raise ParseError(1, f"expected header {','.join(STEPS_HEADER)}, got {','.join(header)}")

    grouped: dict[str, dict[datetime, int]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != 3:
            raise ParseError(lineno, f"expected 3 fields, got {len(row)}")
        pid, ts_raw, steps_raw = (f.strip() for f in row)
        if not pid:
            raise ParseError(lineno, "empty participant_id")
        try:
            ts = datetime.fromisoformat(ts_raw).replace(second=0, microsecond=0)
        except ValueError:
            raise ParseError(lineno, f"bad timestamp {ts_raw!r}") from None
        try:
            steps = int(steps_raw)
        except ValueError:
            raise ParseError(lineno, f"bad step count {steps_raw!r}") from None
        if steps < 0:
            raise DomainError(f"line {lineno}: negative step count {steps}")
        samples = grouped.setdefault(pid, {})
        if ts in samples:
            raise DuplicateSampleError(f"line {lineno}: duplicate sample for {pid!r} at {ts.isoformat()}")
        samples[ts] = steps

    return [StepStream(pid, tuple(sorted(s.items()))) for pid, s in grouped.items()]


def _window_bounds(day: date, start: time, end: time) -> tuple[datetime, datetime]:
    lo = datetime.combine(day, start)
    hi = datetime.combine(day, end)
    return lo, hi


def label_sedentary(
    stream: StepStream,
    day: date,
    window_start: time = TARGET_WINDOW[0],
    window_end: time = TARGET_WINDOW[1],
) -> list[bool]:
    """Sedentary flag for each consecutive 40-minute interval of a window on ``day``.

    Minutes without a sample count as zero steps.
    """
    lo, hi = _window_bounds(day, window_start, window_end)
    minutes = (hi - lo).total_seconds() / 60
    if minutes <= 0 or minutes % INTERVAL_MINUTES:
        raise DomainError(
            f"window {window_start}-{window_end} is not a positive multiple of {INTERVAL_MINUTES} minutes"
        )
    n = int(minutes) // INTERVAL_MINUTES
    totals = [0] * n
    for ts, steps in stream.samples:
        if lo <= ts < hi:
            k = int((ts - lo).total_seconds() // 60) // INTERVAL_MINUTES
            totals[k] += steps
    return [t < SEDENTARY_THRESHOLD for t in totals]


def _sum_in(samples: Iterable[tuple[datetime, int]], lo: datetime, hi: datetime) -> tuple[int, int]:
    total = count = 0
    for ts, steps in samples:
        if lo <= ts < hi:
            total += steps
            count += 1
    return total, count


def build_day_records(
    stream: StepStream,
    weather_by_date: Mapping[date, WeatherCategory],
    report: IngestReport | None = None,
) -> ParticipantSeries:
    """Build the usable-day series for one participant.

    Raises :class:`ParticipantRejected` when fewer than a week of usable days
    survive the filters.
    """
    pid = stream.participant_id
    days = stream.by_date()
    records = []
    for day in sorted(days):
        samples = days[day]
        morning, n_morning = _sum_in(samples, *_window_bounds(day, *CONTEXT_WINDOW))
        _, n_evening = _sum_in(samples, *_window_bounds(day, *TARGET_WINDOW))
        reason = None
        if n_morning == 0:
            reason = "no-morning-data"
        elif n_evening == 0:
            reason = "no-target-window-data"
        elif day - timedelta(days=1) not in days:
            reason = "no-previous-day-data"
        elif day not in weather_by_date:
            reason = "no-weather"
        if reason is not None:
            if report is not None:
                report.dropped_days.append((pid, day, reason))
            continue
        prev = day - timedelta(days=1)
        records.append(
            DayRecord(
                date=day,
                morning_steps=morning,
                prev_total_steps=sum(s for _, s in days[prev]),
                prev_sedentary_count=sum(label_sedentary(stream, prev)),
                weather=weather_by_date[day],
                target=sum(label_sedentary(stream, day)),
            )
        )
    if len(records) < MIN_DAYS:
        reason = "no-usable-days" if not records else "too-few-days"
        if report is not None:
            report.rejected.append((pid, reason, len(records)))
        raise ParticipantRejected(pid, reason, len(records))
    if report is not None:
        report.accepted.append((pid, len(records)))
    return ParticipantSeries(pid, tuple(records))


def build_cohort(
    streams: Sequence[StepStream],
    weather_by_date: Mapping[date, WeatherCategory],
    vocabulary: Sequence[WeatherCategory],
    report: IngestReport | None = None,
) -> tuple[ParticipantSeries, ...]:
    """Series for every participant that survives the filters (may be empty)."""
    out = []
    for stream in streams:
        try:
            out.append(build_day_records(stream, weather_by_date, report))
        except ParticipantRejected as exc:
            logger.info("%s", exc)
    return tuple(out)


# -- features ----------------------------------------------------------------


@dataclass(frozen=True)
class Standardization:
    """Per-feature centering and scaling for the three continuous features."""

    mean: tuple[float, float, float]
    scale: tuple[float, float, float]

    @classmethod
    def fit(cls, records: Iterable[DayRecord]) -> "Standardization":
        raw = np.array([_continuous(r) for r in records], dtype=float)
        if raw.size == 0:
            raise DomainError("cannot standardize on zero records")
        mean = raw.mean(axis=0)
        scale = raw.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in scale))

    @classmethod
    def identity(cls) -> "Standardization":
        return cls((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def _continuous(r: DayRecord) -> tuple[int, int, int]:
    return (r.morning_steps, r.prev_total_steps, r.prev_sedentary_count)


def encode_features(
    record: DayRecord,
    vocabulary: Sequence[WeatherCategory],
    standardization: Standardization,
) -> np.ndarray:
    """Length-24 vector: three standardized continuous features then a weather one-hot."""
    n = len(vocabulary)
    code = record.weather.code
    if not 0 <= code < n:
        raise DomainError(f"weather code {code} outside vocabulary of size {n}")
    x = np.zeros(N_CONTINUOUS + n)
    x[:N_CONTINUOUS] = (np.array(_continuous(record), dtype=float) - standardization.mean) / standardization.scale
    x[N_CONTINUOUS + code] = 1.0
    return x


def encode_series(
    series: ParticipantSeries,
    vocabulary: Sequence[WeatherCategory],
    standardization: Standardization,
) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([encode_features(r, vocabulary, standardization) for r in series.records])
    return X, series.targets


# -- day-records CSV ---------------------------------------------------------


def write_day_records(participants: Iterable[ParticipantSeries], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DAY_RECORDS_HEADER)
        for p in participants:
            for r in p.records:
                writer.writerow(
                    [
                        p.participant_id,
                        r.date.isoformat(),
                        r.morning_steps,
                        r.prev_total_steps,
                        r.prev_sedentary_count,
                        r.weather.code,
                        r.target,
                    ]
                )


def read_day_records(
    path: str | Path, vocabulary: Sequence[WeatherCategory] | None = None
) -> Cohort:
    vocabulary = tuple(vocabulary) if vocabulary is not None else default_vocabulary()
    by_code = {c.code: c for c in vocabulary}
    grouped: dict[str, list[DayRecord]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DAY_RECORDS_HEADER:
            raise ParseError(1, f"expected header {','.join(DAY_RECORDS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DAY_RECORDS_HEADER):
                raise ParseError(lineno, f"expected {len(DAY_RECORDS_HEADER)} fields, got {len(row)}")
            try:
                pid = row[0]
                day = date.fromisoformat(row[1])
                morning, prev_total, prev_sed, code, target = (int(v) for v in row[2:])
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if code not in by_code:
                raise DomainError(f"line {lineno}: weather code {code} outside vocabulary")
            grouped.setdefault(pid, []).append(
                DayRecord(day, morning, prev_total, prev_sed, by_code[code], target)
            )
    participants = tuple(ParticipantSeries(pid, tuple(recs)) for pid, recs in grouped.items())
    return Cohort(participants, vocabulary)
