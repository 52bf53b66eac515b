"""Synthetic station demand and the asymmetric buffering reward.

A station's daily package volume is modeled as

    value(t) = base_volume * (1 + trend_per_day * t)
               * weekly_pattern[t mod 7] * regime(t) * noise(t)

clipped at zero, where ``noise(t)`` is lognormal multiplicative noise with
mean 1 and standard deviation ``noise_cv`` (non-negative and right-skewed,
like real package volumes), and ``regime(t)`` is the multiplier of the most
recent regime shift at or before day ``t``.

The buffering reward for realized demand ``D``, forecast ``F`` and buffer
``b`` (all in package units) is

    r = -(alpha * max(0, D - F - b) + beta * max(0, b + F - D))

with ``alpha >= beta > 0``; ``alpha > beta`` penalizes a shortfall more than
the same amount of surplus. At most one of the two terms is nonzero and the
reward is never positive.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

REGIONS = ("NorthEast", "MidWest", "South", "West")

# Display names used in rendered reports.
REGION_LABELS = {
    "NorthEast": "North-East",
    "MidWest": "Mid-West",
    "South": "South",
    "West": "West",
}


class InvalidProfileError(ValueError):
    """A station profile violates one of its invariants."""


@dataclass(frozen=True)
class StationProfile:
    """Generator parameters for one station's demand series."""

    station_id: str
    region: str
    base_volume: float
    weekly_pattern: tuple[float, ...] = (1.0,) * 7
    trend_per_day: float = 0.0
    noise_cv: float = 0.0
    regime_shifts: tuple[tuple[int, float], ...] = ()
    capacity_class: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.region not in REGIONS:
            raise InvalidProfileError(
                f"station {self.station_id}: region {self.region!r} not one of {REGIONS}"
            )
        if not self.base_volume > 0:
            raise InvalidProfileError(
                f"station {self.station_id}: base_volume must be > 0, got {self.base_volume}"
            )
        if len(self.weekly_pattern) != 7:
            raise InvalidProfileError(
                f"station {self.station_id}: weekly_pattern needs exactly 7 entries, "
                f"got {len(self.weekly_pattern)}"
            )
        if any(w <= 0 for w in self.weekly_pattern):
            raise InvalidProfileError(
                f"station {self.station_id}: weekly_pattern entries must be positive"
            )
        if self.noise_cv < 0:
            raise InvalidProfileError(
                f"station {self.station_id}: noise_cv must be >= 0, got {self.noise_cv}"
            )
        days = [d for d, _ in self.regime_shifts]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise InvalidProfileError(
                f"station {self.station_id}: regime shift days must be strictly increasing"
            )


@dataclass
class DemandSeries:
    """Realized daily demand for one station; index t is day start_day + t."""

    station_id: str
    start_day: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("demand values must be one-dimensional")
        if len(self.values) and self.values.min() < 0:
            raise ValueError("demand values must be >= 0")

    def __len__(self) -> int:
        return len(self.values)

    def day(self, t: int) -> int:
        return self.start_day + t


@dataclass(frozen=True)
class RewardConfig:
    """Asymmetry weights of the buffering penalty.

    ``alpha == beta`` (symmetric loss) is accepted for what-if analysis even
    though production configurations keep the strict ``alpha > beta``.
    """

    alpha: float = 2.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.alpha >= self.beta > 0):
            raise ValueError(
                f"reward weights need alpha >= beta > 0, got alpha={self.alpha} beta={self.beta}"
            )

    @property
    def critical_fractile(self) -> float:
        """Newsvendor service quantile alpha / (alpha + beta)."""
        return self.alpha / (self.alpha + self.beta)


@dataclass(frozen=True)
class BufferActionSet:
    """Discrete buffer levels as percentages of the forecast."""

    percents: tuple[float, ...] = (0.0, 2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0)

    def __post_init__(self):
        if len(self.percents) < 2:
            raise ValueError("action set needs at least 2 buffer levels")
        if any(p < 0 for p in self.percents):
            raise ValueError("buffer percentages must be >= 0")
        if not all(b > a for a, b in zip(self.percents, self.percents[1:])):
            raise ValueError("buffer percentages must be strictly increasing")

    def __len__(self) -> int:
        return len(self.percents)

    def buffer_units(self, action_index: int, forecast: float) -> float:
        """Convert action k to package units: b = p_k/100 * forecast."""
        return float(self.percents[action_index] / 100.0 * forecast)


def _lognormal_unit_mean(rng: np.random.Generator, cv: float, n: int) -> np.ndarray:
    # mean 1, std cv: sigma^2 = ln(1 + cv^2), mu = -sigma^2 / 2
    if cv == 0:
        return np.ones(n)
    sigma2 = math.log(1.0 + cv * cv)
    mu = -sigma2 / 2.0
    return rng.lognormal(mean=mu, sigma=math.sqrt(sigma2), size=n)


def generate_series(profile: StationProfile, n_days: int, start_day: int = 0) -> DemandSeries:
    """Generate a reproducible demand series from a station profile.

    Deterministic in (profile.seed, n_days); the same seed always yields the
    same series and a longer run extends a shorter one.
    """
    if n_days < 0:
        raise ValueError(f"n_days must be >= 0, got {n_days}")
    rng = np.random.default_rng(profile.seed)
    noise = _lognormal_unit_mean(rng, profile.noise_cv, n_days)

    t = np.arange(n_days, dtype=float)
    values = profile.base_volume * (1.0 + profile.trend_per_day * t)
    values *= np.asarray(profile.weekly_pattern)[np.arange(n_days) % 7]

    regime = np.ones(n_days)
    for day_index, multiplier in profile.regime_shifts:
        if day_index < n_days:
            regime[day_index:] = multiplier
    values *= regime * noise
    return DemandSeries(profile.station_id, start_day, np.maximum(values, 0.0))


def compute_reward(
    realized: float, forecast: float, buffer_units: float, cfg: RewardConfig
) -> float:
    """Asymmetric penalty on forecast+buffer coverage; always <= 0.

    Shortfall u = realized - forecast - buffer is penalized at ``alpha`` per
    unit, surplus (-u) at ``beta`` per unit; the two cases are exclusive.
    """
    if realized < 0 or forecast < 0 or buffer_units < 0:
        raise ValueError(
            f"realized, forecast and buffer must be >= 0, got "
            f"({realized}, {forecast}, {buffer_units})"
        )
    u = realized - forecast - buffer_units
    return -(cfg.alpha * max(0.0, u) + cfg.beta * max(0.0, -u))


def write_demand_csv(series: DemandSeries, path: str | Path, header_comment: str | None = None):
    """Write a series as ``station_id,day,demand`` rows (one per day)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["station_id", "day", "demand"])
        for t, v in enumerate(series.values):
            writer.writerow([series.station_id, series.start_day + t, repr(float(v))])


def read_demand_csv(path: str | Path) -> tuple[DemandSeries, list[str]]:
    """Read a ``station_id,day,demand`` file; returns the series and any
    leading ``#`` comment lines (stripped of the marker)."""
    path = Path(path)
    comments: list[str] = []
    with path.open(newline="") as fh:
        pos = fh.tell()
        line = fh.readline()
        while line.startswith("#"):
            comments.append(line[1:].strip())
            pos = fh.tell()
            line = fh.readline()
        fh.seek(pos)
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["station_id", "day", "demand"]:
            raise ValueError(f"{path}: expected header station_id,day,demand, got {header}")
        station_ids, days, values = [], [], []
        for row in reader:
            if not row:
                continue
            station_ids.append(row[0])
            days.append(int(row[1]))
            values.append(float(row[2]))
    if not station_ids:
        raise ValueError(f"{path}: no demand rows")
    ids = set(station_ids)
    if len(ids) != 1:
        raise ValueError(f"{path}: expected one station per file, got {sorted(ids)}")
    if days != list(range(days[0], days[0] + len(days))):
        raise ValueError(f"{path}: day indices must be consecutive")
    return DemandSeries(station_ids[0], days[0], np.asarray(values)), comments
