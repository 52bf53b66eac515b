"""Feature construction for the demand forecaster and the policy observation.

Three groups of inputs are built from a demand series:

* temporal encodings of the day index (weekly and annual cycles),
* lagged demands and rolling mean/std volatility over trailing windows
  ending the day before the target day (strictly backward-looking), and
* static operational indicators copied verbatim onto every row.

Rows whose lags or windows would reach before the start of the series are
dropped, never imputed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .demand import DemandSeries

DAYS_PER_WEEK = 7
WEEKS_PER_YEAR = 52
DAYS_PER_MONTH = 30
MONTHS_PER_YEAR = 12

#: Cyclic encodings included in feature matrices. ``month_index`` from
#: :func:`encode_temporal` is deliberately left out of the default matrix:
#: it duplicates the week-of-year cycle and keeping the default width at 12
#: features leaves exact Shapley enumeration tractable.
TEMPORAL_NAMES = ("dow_sin", "dow_cos", "woy_sin", "woy_cos")


def encode_temporal(day_index: int) -> tuple[float, float, float, float, int]:
    """Cyclic encodings of a day index.

    Returns (dow_sin, dow_cos, week_of_year_sin, week_of_year_cos,
    month_index). Day indices are calendar-free: weeks are 7 days, years 52
    weeks, months 30 days.
    """
    if not isinstance(day_index, (int, np.integer)):
        raise TypeError(f"day_index must be an integer, got {type(day_index).__name__}")
    if day_index < 0:
        raise ValueError(f"day_index must be >= 0, got {day_index}")
    dow = day_index % DAYS_PER_WEEK
    woy = (day_index // DAYS_PER_WEEK) % WEEKS_PER_YEAR
    month = (day_index // DAYS_PER_MONTH) % MONTHS_PER_YEAR
    return (
        math.sin(2.0 * math.pi * dow / DAYS_PER_WEEK),
        math.cos(2.0 * math.pi * dow / DAYS_PER_WEEK),
        math.sin(2.0 * math.pi * woy / WEEKS_PER_YEAR),
        math.cos(2.0 * math.pi * woy / WEEKS_PER_YEAR),
        int(month),
    )


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature layout: temporal encodings, lags, rolling stats,
    then operational indicators."""

    lag_set: tuple[int, ...] = (1, 7, 14)
    rolling_windows: tuple[int, ...] = (7, 28)
    operational_names: tuple[str, ...] = ("capacity_class",)
    names: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        if not self.lag_set or any(l < 1 for l in self.lag_set):
            raise ValueError("lag offsets must be >= 1")
        if not self.rolling_windows or any(w < 2 for w in self.rolling_windows):
            raise ValueError("rolling windows must be >= 2 days")
        names = list(TEMPORAL_NAMES)
        names += [f"lag_{l}" for l in self.lag_set]
        for w in self.rolling_windows:
            names += [f"rollmean_{w}", f"rollstd_{w}"]
        names += list(self.operational_names)
        object.__setattr__(self, "names", tuple(names))

    @property
    def dimension(self) -> int:
        return len(self.names)

    @property
    def burn_in(self) -> int:
        """Days at the start of a series with undefined lags or windows."""
        return max(max(self.lag_set), max(self.rolling_windows))

    def fingerprint(self) -> str:
        return f"d{self.dimension}:" + "|".join(self.names)


@dataclass
class FeatureRow:
    day_index: int
    values: np.ndarray
    target: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite feature values at day {self.day_index}")
        if self.target < 0:
            raise ValueError(f"target must be >= 0 at day {self.day_index}")


def feature_vector(
    values: np.ndarray,
    t: int,
    day: int,
    schema: FeatureSchema,
    op_values: list[float],
) -> np.ndarray:
    """Feature vector for predicting values[t], reading only values[:t].

    ``day`` is the absolute calendar day of index t (temporal encodings);
    requires t >= schema.burn_in.
    """
    if t < schema.burn_in:
        raise ValueError(f"index {t} inside burn-in ({schema.burn_in} days)")
    feats: list[float] = list(encode_temporal(day)[:4])
    for l in schema.lag_set:
        feats.append(float(values[t - l]))
    for w in schema.rolling_windows:
        window = values[t - w : t]
        feats.append(float(window.mean()))
        feats.append(float(window.std()))
    feats.extend(op_values)
    return np.asarray(feats)


def operational_values(
    schema: FeatureSchema, operational: Mapping[str, float] | None
) -> list[float]:
    """Operational indicators in schema order; missing names are an error."""
    operational = dict(operational or {})
    missing = [n for n in schema.operational_names if n not in operational]
    if missing:
        raise ValueError(f"missing operational indicators: {missing}")
    return [float(operational[n]) for n in schema.operational_names]


def build_feature_matrix(
    series: DemandSeries,
    schema: FeatureSchema,
    operational: Mapping[str, float] | None = None,
) -> list[FeatureRow]:
    """One row per day with a fully defined history.

    Row t carries the temporal encodings of the calendar day, D_{t-l} for
    each lag l, mean/std of demand over each window [t-w, t-1], the
    operational constants, and target D_t. Nothing at index >= t is read:
    the matrix is leakage-free by construction.
    """
    op_values = operational_values(schema, operational)
    burn_in = schema.burn_in
    n = len(series)
    if n <= burn_in:
        raise ValueError(
            f"series of length {n} too short: needs more than {burn_in} days "
            f"(max lag/window burn-in)"
        )
    values = series.values
    rows = [
        FeatureRow(
            series.day(t),
            feature_vector(values, t, series.day(t), schema, op_values),
            float(values[t]),
        )
        for t in range(burn_in, n)
    ]
    return rows


def rows_to_arrays(rows: list[FeatureRow]) -> tuple[np.ndarray, np.ndarray]:
    """Stack feature rows into (X, y) float64 arrays."""
    if not rows:
        return np.zeros((0, 0)), np.zeros(0)
    X = np.stack([r.values for r in rows])
    y = np.asarray([r.target for r in rows], dtype=float)
    return X, y


def temporal_split(rows: list[FeatureRow], train_fraction: float) -> tuple[list, list]:
    """Split rows so every training day precedes every test day."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0,1), got {train_fraction}")
    ordered = sorted(rows, key=lambda r: r.day_index)
    cut = int(len(ordered) * train_fraction)
    return ordered[:cut], ordered[cut:]


def write_feature_csv(
    rows: list[FeatureRow],
    schema: FeatureSchema,
    path: str | Path,
    header_comment: str | None = None,
):
    """Debugging export: day, schema-named feature columns, target."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["day", *schema.names, "target"])
        for r in rows:
            writer.writerow(
                [r.day_index, *(repr(float(v)) for v in r.values), repr(float(r.target))]
            )
