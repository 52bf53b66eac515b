"""Fleet evaluation metrics and the report table built from them.

WAPE per station, its dispersion across stations, and per-day
under-/over-buffering incident rates, grouped by (region, method) and
rendered as a six-column table (markdown and CSV). The CSV side writes
floats with repr so a parse/render round trip is bit-identical.

Fleet-level WAPE is reported both volume-weighted (all days pooled) and
as the unweighted mean of station WAPEs, since aggregated accuracy claims
are sensitive to that choice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class DecisionRecord:
    """One station-day outcome: what happened vs what was planned."""

    station_id: str
    region: str
    day: int
    realized: float
    forecast: float
    buffer_units: float

    def __post_init__(self):
        for name in ("realized", "forecast", "buffer_units"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class ReportRow:
    region: str
    method: str
    wape: float
    wape_std: float | None
    under_rate: float
    over_rate: float


@dataclass(frozen=True)
class FleetRow:
    method: str
    pooled_wape: float
    mean_station_wape: float
    under_rate: float
    over_rate: float
    improved_share: float | None


@dataclass(frozen=True)
class EvaluationReport:
    rows: tuple[ReportRow, ...]
    fleet: tuple[FleetRow, ...]
    baseline_method: str


def wape(records: Sequence[DecisionRecord]) -> float:
    """100 * sum|D - Dhat| / sum D over the records."""
    if not records:
        raise ValueError("wape needs at least one record")
    total = sum(r.realized for r in records)
    if total <= 0:
        raise ValueError("wape undefined: total realized demand is 0")
    err = sum(abs(r.realized - r.forecast) for r in records)
    return 100.0 * err / total


def wape_std(station_wapes: Sequence[float]) -> float:
    """Sample standard deviation across stations."""
    if len(station_wapes) < 2:
        raise ValueError(f"wape_std needs >= 2 stations, got {len(station_wapes)}")
    return float(np.std(station_wapes, ddof=1))


def incident_rates(records: Sequence[DecisionRecord], tau: float = 0.0) -> tuple[float, float]:
    """(under %, over %): days with D > Dhat+b, and days with D < Dhat+b-tau.

    With tau = 0 the two classes plus exact coverage partition the days.
    """
    if not records:
        raise ValueError("incident_rates needs at least one record")
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    under = sum(1 for r in records if r.realized > r.forecast + r.buffer_units)
    over = sum(1 for r in records if r.realized < r.forecast + r.buffer_units - tau)
    n = len(records)
    return 100.0 * under / n, 100.0 * over / n


def _wape_by_station(records: Sequence[DecisionRecord]) -> dict[str, float]:
    groups: dict[str, list[DecisionRecord]] = {}
    for r in records:
        groups.setdefault(r.station_id, []).append(r)
    return {sid: wape(rs) for sid, rs in sorted(groups.items())}


def aggregate_report(
    records_by_method: Mapping[str, Sequence[DecisionRecord]],
    station_regions: Mapping[str, str] | None = None,
    baseline_method: str = "Manual",
    tau: float = 0.0,
) -> EvaluationReport:
    """Group records into Table-shaped (region, method) rows plus fleet totals.

    Regions come from ``station_regions`` when given, else from the records
    themselves; a station without a region is rejected. ``improved_share``
    for a method is the percentage of stations whose WAPE is strictly below
    the baseline's, over stations present in both.
    """
    if baseline_method not in records_by_method:
        raise ValueError(f"baseline method {baseline_method!r} has no records")

    def region_of(record: DecisionRecord) -> str:
        region = (
            station_regions.get(record.station_id, record.region)
            if station_regions is not None
            else record.region
        )
        if not region:
            raise ValueError(f"station {record.station_id!r} is not mapped to a region")
        return region

    rows: list[ReportRow] = []
    fleet: list[FleetRow] = []
    baseline_wapes = _wape_by_station(records_by_method[baseline_method])

    for method in sorted(records_by_method):
        records = records_by_method[method]
        if not records:
            raise ValueError(f"method {method!r} has no records")
        by_region: dict[str, list[DecisionRecord]] = {}
        for r in records:
            by_region.setdefault(region_of(r), []).append(r)
        for region in sorted(by_region):
            group = by_region[region]
            station_wapes = list(_wape_by_station(group).values())
            under, over = incident_rates(group, tau)
            rows.append(
                ReportRow(
                    region=region,
                    method=method,
                    wape=float(np.mean(station_wapes)),
                    wape_std=wape_std(station_wapes) if len(station_wapes) >= 2 else None,
                    under_rate=under,
                    over_rate=over,
                )
            )

        station_wapes_all = _wape_by_station(records)
        under, over = incident_rates(records, tau)
        if method == baseline_method:
            improved = None
        else:
            shared = sorted(set(station_wapes_all) & set(baseline_wapes))
            if not shared:
                raise ValueError(
                    f"method {method!r} shares no stations with baseline {baseline_method!r}"
                )
            improved = 100.0 * sum(
                1 for sid in shared if station_wapes_all[sid] < baseline_wapes[sid]
            ) / len(shared)
        fleet.append(
            FleetRow(
                method=method,
                pooled_wape=wape(records),
                mean_station_wape=float(np.mean(list(station_wapes_all.values()))),
                under_rate=under,
                over_rate=over,
                improved_share=improved,
            )
        )

    rows.sort(key=lambda r: (r.region, r.method))
    return EvaluationReport(rows=tuple(rows), fleet=tuple(fleet), baseline_method=baseline_method)


TABLE_COLUMNS = (
    "Region",
    "Method",
    "WAPE (%)",
    "WAPE Std. Dev. (%)",
    "Under-buffering (%)",
    "Over-buffering (%)",
)

FLEET_COLUMNS = (
    "Method",
    "Pooled WAPE (%)",
    "Mean Station WAPE (%)",
    "Under-buffering (%)",
    "Over-buffering (%)",
    "Stations Improved (%)",
)


def render_table(report: EvaluationReport) -> tuple[str, str]:
    """(markdown, csv) forms of the per-region table.

    Markdown rounds to two decimals for reading; the CSV keeps full repr
    precision so parsing it back reproduces the report bit-exactly.
    """
    md = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "---|" * len(TABLE_COLUMNS)]
    csv = [",".join(TABLE_COLUMNS)]
    for r in report.rows:
        std_md = f"{r.wape_std:.2f}" if r.wape_std is not None else "n/a"
        std_csv = repr(r.wape_std) if r.wape_std is not None else ""
        md.append(
            f"| {r.region} | {r.method} | {r.wape:.2f} | {std_md} "
            f"| {r.under_rate:.2f} | {r.over_rate:.2f} |"
        )
        csv.append(
            f"{r.region},{r.method},{r.wape!r},{std_csv},{r.under_rate!r},{r.over_rate!r}"
        )
    return "\n".join(md) + "\n", "\n".join(csv) + "\n"


def render_fleet_table(report: EvaluationReport) -> tuple[str, str]:
    """(markdown, csv) forms of the fleet-level summary."""
    md = ["| " + " | ".join(FLEET_COLUMNS) + " |", "|" + "---|" * len(FLEET_COLUMNS)]
    csv = [",".join(FLEET_COLUMNS)]
    for f in report.fleet:
        imp_md = f"{f.improved_share:.2f}" if f.improved_share is not None else "baseline"
        imp_csv = repr(f.improved_share) if f.improved_share is not None else ""
        md.append(
            f"| {f.method} | {f.pooled_wape:.2f} | {f.mean_station_wape:.2f} "
            f"| {f.under_rate:.2f} | {f.over_rate:.2f} | {imp_md} |"
        )
        csv.append(
            f"{f.method},{f.pooled_wape!r},{f.mean_station_wape!r},"
            f"{f.under_rate!r},{f.over_rate!r},{imp_csv}"
        )
    return "\n".join(md) + "\n", "\n".join(csv) + "\n"


def parse_table_csv(text: str) -> tuple[list[ReportRow], list[str]]:
    """Rows and leading comment lines from a render_table CSV."""
    lines = text.splitlines()
    comments = []
    pos = 0
    while pos < len(lines) and lines[pos].startswith("#"):
        comments.append(lines[pos])
        pos += 1
    if pos >= len(lines) or lines[pos] != ",".join(TABLE_COLUMNS):
        raise ValueError(f"line {pos + 1}: bad report header")
    rows = []
    for i, line in enumerate(lines[pos + 1 :], start=pos + 2):
        parts = line.split(",")
        if len(parts) != len(TABLE_COLUMNS):
            raise ValueError(f"line {i}: expected {len(TABLE_COLUMNS)} fields")
        try:
            rows.append(
                ReportRow(
                    region=parts[0],
                    method=parts[1],
                    wape=float(parts[2]),
                    wape_std=float(parts[3]) if parts[3] else None,
                    under_rate=float(parts[4]),
                    over_rate=float(parts[5]),
                )
            )
        except ValueError as exc:
            raise ValueError(f"line {i}: bad numeric field") from exc
    return rows, comments


# --- DecisionRecord CSV I/O ---

RECORD_HEADER = "station_id,region,day,demand,forecast,buffer"


def write_records_csv(
    records: Sequence[DecisionRecord], path: str | Path, comment: str | None = None
):
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append(RECORD_HEADER)
    for r in records:
        lines.append(
            f"{r.station_id},{r.region},{r.day},{r.realized!r},{r.forecast!r},{r.buffer_units!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_records_csv(path: str | Path) -> tuple[list[DecisionRecord], list[str]]:
    """(records, comment lines) from a decision-record CSV."""
    lines = Path(path).read_text().splitlines()
    comments = []
    pos = 0
    while pos < len(lines) and lines[pos].startswith("#"):
        comments.append(lines[pos])
        pos += 1
    if pos >= len(lines) or lines[pos] != RECORD_HEADER:
        raise ValueError(f"{path}: line {pos + 1}: expected header {RECORD_HEADER!r}")
    records = []
    for i, line in enumerate(lines[pos + 1 :], start=pos + 2):
        parts = line.split(",")
        if len(parts) != 6:
            raise ValueError(f"{path}: line {i}: expected 6 fields, got {len(parts)}")
        try:
            records.append(
                DecisionRecord(
                    station_id=parts[0],
                    region=parts[1],
                    day=int(parts[2]),
                    realized=float(parts[3]),
                    forecast=float(parts[4]),
                    buffer_units=float(parts[5]),
                )
            )
        except ValueError as exc:
            raise ValueError(f"{path}: line {i}: {exc}") from exc
    return records, comments
