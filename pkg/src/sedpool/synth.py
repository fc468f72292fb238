"""Seeded synthetic cohorts shaped like a small mobile-health study.

Each participant's expected sedentary count is a mixture
``rho * f_shared + (1 - rho) * f_individual`` of smooth functions of the
three continuous context features plus per-weather offsets.  The smooth
parts are RBF-GP draws on a fixed 7x7x7 lattice, linearly interpolated.
Participants are dealt round-robin into behavioural clusters: everybody in
a cluster shares the shape of ``f_individual``, a feature distribution and
the sign of any drift or regime change, and adds a personal level offset.  Drift or a regime change can be layered
on top over study days.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .ingest import (
    N_WEATHER,
    Cohort,
    DayRecord,
    ParticipantSeries,
    default_vocabulary,
    write_day_records,
)

NONSTATIONARITY = ("none", "drift", "regime_change")

LATTICE = np.linspace(-2.5, 2.5, 7)
# Reference scales mapping raw features to the lattice coordinates.
MORNING_REF = (3000.0, 1500.0)
TOTAL_REF = (7000.0, 3000.0)
SEDENTARY_REF = (4.5, 2.5)

SHARED_SLOPES = np.array([-0.9, -0.3, 0.4])
START_DATE = date(2015, 7, 1)


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    n_participants: int = 36
    days: int = 30
    days_jitter: int = 3
    rho: float = 0.7
    nonstationarity: str = "drift"
    drift_rate: float = 0.04
    regime_day: int = 15
    regime_magnitude: float = 2.0
    noise_sd: float = 0.8
    cluster_count: int = 2
    cluster_separation: float = 2.0
    smooth_amplitude: float = 0.8
    smooth_lengthscale: float = 1.5
    level_sd: float = 0.8
    slope_sd: float = 0.6
    weather_sd: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise SynthConfigError(f"rho must be in [0, 1], got {self.rho}")
        if self.n_participants < 1:
            raise SynthConfigError("n_participants must be >= 1")
        if self.days_jitter < 0 or self.days - self.days_jitter < 7:
            raise SynthConfigError("every participant needs at least 7 days (days - days_jitter >= 7)")
        if self.nonstationarity not in NONSTATIONARITY:
            raise SynthConfigError(f"nonstationarity must be one of {NONSTATIONARITY}")
        if self.noise_sd < 0:
            raise SynthConfigError("noise_sd must be non-negative")
        if self.cluster_count < 1:
            raise SynthConfigError("cluster_count must be >= 1")
        if self.cluster_separation < 0:
            raise SynthConfigError("cluster_separation must be non-negative")
        if self.smooth_lengthscale <= 0:
            raise SynthConfigError("smooth_lengthscale must be positive")


class _SmoothFunction:
    """RBF-GP draw on the lattice, linearly interpolated; inputs are clipped to the lattice."""

    def __init__(self, values: np.ndarray):
        self._interp = RegularGridInterpolator((LATTICE, LATTICE, LATTICE), values, method="linear")

    def __call__(self, z: np.ndarray) -> float:
        z = np.clip(z, LATTICE[0], LATTICE[-1])
        return float(self._interp(z[None, :])[0])


def _lattice_chol(lengthscale: float) -> np.ndarray:
    grid = np.stack(np.meshgrid(LATTICE, LATTICE, LATTICE, indexing="ij"), axis=-1).reshape(-1, 3)
    d2 = ((grid[:, None, :] - grid[None, :, :]) ** 2).sum(-1)
    K = np.exp(-d2 / (2 * lengthscale**2)) + 1e-8 * np.eye(len(grid))
    return np.linalg.cholesky(K)


def _draw_smooth(rng, chol, amplitude) -> _SmoothFunction:
    vals = amplitude * (chol @ rng.standard_normal(chol.shape[0]))
    return _SmoothFunction(vals.reshape(len(LATTICE), len(LATTICE), len(LATTICE)))


def _weather_calendar(rng, n_days: int) -> np.ndarray:
    """Persistent weather: keep yesterday's category with prob 0.5, else draw from a skewed base."""
    base = rng.dirichlet(np.linspace(3.0, 0.2, N_WEATHER))
    out = np.empty(n_days, dtype=int)
    out[0] = rng.choice(N_WEATHER, p=base)
    for i in range(1, n_days):
        out[i] = out[i - 1] if rng.random() < 0.5 else rng.choice(N_WEATHER, p=base)
    return out


def _zscore(v, ref):
    return (v - ref[0]) / ref[1]


def generate_with_truth(config: SynthConfig | None = None) -> tuple[Cohort, dict]:
    config = config or SynthConfig()
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_participants + 1)
    rng = np.random.default_rng(seeds[0])
    chol = _lattice_chol(config.smooth_lengthscale)

    shared_smooth = _draw_smooth(rng, chol, config.smooth_amplitude)
    shared_weather = rng.normal(0.0, config.weather_sd, N_WEATHER)
    calendar_len = 2 * (config.days + config.days_jitter) + 60
    weather = _weather_calendar(rng, calendar_len)
    cluster_centers = rng.normal(0.0, 1.0, (config.cluster_count, 2))
    # cluster baselines are evenly spaced and centred on zero
    cluster_levels = config.cluster_separation * (np.arange(config.cluster_count) - (config.cluster_count - 1) / 2)
    cluster_slopes = rng.normal(0.0, config.slope_sd, (config.cluster_count, 3))
    cluster_smooth = [_draw_smooth(rng, chol, config.smooth_amplitude) for _ in range(config.cluster_count)]
    cluster_weather = rng.normal(0.0, config.weather_sd, (config.cluster_count, N_WEATHER))
    cluster_direction = np.where(rng.random(config.cluster_count) < 0.5, 1.0, -1.0)

    vocab = default_vocabulary()
    rho = config.rho
    participants = []
    truth = {"config": asdict(config), "participants": []}
    width = len(str(config.n_participants))
    for j in range(config.n_participants):
        prng = np.random.default_rng(seeds[j + 1])
        pid = f"P{j:0{width}d}"
        cluster = j % config.cluster_count
        level = cluster_levels[cluster] + prng.normal(0.0, config.level_sd)
        slopes = cluster_slopes[cluster]
        smooth = cluster_smooth[cluster]
        w_off = cluster_weather[cluster]
        direction = cluster_direction[cluster]
        morning_mu = cluster_centers[cluster, 0] + prng.normal(0.0, 0.3)
        other_mu = cluster_centers[cluster, 1] + prng.normal(0.0, 0.3)
        n_days = config.days + int(prng.integers(-config.days_jitter, config.days_jitter + 1))
        start = int(prng.integers(0, 60))

        def expected(t, z, wcode):
            shared = SHARED_SLOPES @ z + shared_smooth(z) + shared_weather[wcode]
            indiv = level + slopes @ z + smooth(z) + w_off[wcode]
            value = 4.5 + rho * shared + (1 - rho) * indiv
            if config.nonstationarity == "drift":
                value += direction * config.drift_rate * t
            elif config.nonstationarity == "regime_change" and t >= config.regime_day:
                value += direction * config.regime_magnitude
            return value

        # day -1 is latent: it only supplies the lag features of day 0
        prev_target = int(np.clip(round(4.5 + prng.normal(0, 1.5)), 0, 9))
        prev_total = int(max(0.0, TOTAL_REF[0] + TOTAL_REF[1] * prng.normal()))
        records = []
        for t in range(n_days):
            morning = int(max(0.0, round(MORNING_REF[0] + MORNING_REF[1] * (morning_mu + 0.7 * prng.normal()))))
            z = np.array(
                [
                    _zscore(morning, MORNING_REF),
                    _zscore(prev_total, TOTAL_REF),
                    _zscore(prev_target, SEDENTARY_REF),
                ]
            )
            wcode = int(weather[start + t])
            f = expected(t, z, wcode)
            target = int(np.clip(round(f + config.noise_sd * prng.normal()), 0, 9))
            day = START_DATE + timedelta(days=start + t)
            records.append(DayRecord(day, morning, prev_total, prev_target, vocab[wcode], target))
            evening = max(0.0, (9 - target) * 250 + 300 * prng.normal())
            other = max(0.0, 1500 * (1 + 0.3 * other_mu) + 500 * prng.normal())
            prev_total = int(round(morning + evening + other))
            prev_target = target
        participants.append(ParticipantSeries(pid, tuple(records)))
        truth["participants"].append(
            {
                "participant_id": pid,
                "cluster": cluster,
                "level": level,
                "slopes": slopes.tolist(),
                "drift_direction": direction,
                "n_days": n_days,
            }
        )
    return Cohort(tuple(participants), vocab), truth


def generate(config: SynthConfig | None = None) -> Cohort:
    return generate_with_truth(config)[0]


def write_synthetic(config: SynthConfig, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cohort, truth = generate_with_truth(config)
    records = out_dir / "day_records.csv"
    truth_path = out_dir / "ground_truth.json"
    write_day_records(cohort.participants, records)
    truth_path.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return records, truth_path
