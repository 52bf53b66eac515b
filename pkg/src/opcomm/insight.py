"""Forecast explanation and decision support.

Exact Shapley attributions of a black-box predictor by full subset
enumeration (guarded at d <= 12, one batched model call), what-if sweeps
of the buffer grid against an empirical residual distribution, and
deterministic markdown summaries of both. Summaries can optionally pass
through an external text refiner; any refiner failure falls back to the
deterministic draft.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .demand import BufferActionSet, RewardConfig, compute_reward

MAX_EXACT_FEATURES = 12
DEFAULT_TOP_M = 3


@dataclass(frozen=True)
class Attribution:
    feature_name: str
    phi: float

    def __post_init__(self):
        if not math.isfinite(self.phi):
            raise ValueError(f"non-finite attribution for {self.feature_name!r}")


def shap_exact(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    background: np.ndarray,
    feature_names: Sequence[str] | None = None,
) -> list[Attribution]:
    """Exact Shapley attribution of predict_fn at x against a background set.

    v(S) is the background-mean prediction with features in S pinned to x.
    phi_i sums w(|S|) * (v(S + i) - v(S)) over all S not containing i, with
    w(s) = s! (d-1-s)! / d!. Every composite row is evaluated in a single
    predict_fn call. Efficiency (sum phi = f(x) - mean background f) holds
    by construction.
    """
    x = np.asarray(x, dtype=float)
    background = np.atleast_2d(np.asarray(background, dtype=float))
    d = x.shape[-1] if x.ndim else 0
    if x.ndim != 1:
        raise ValueError(f"x must be a single feature vector, got shape {x.shape}")
    if len(background) == 0:
        raise ValueError("background set is empty")
    if background.shape[1] != d:
        raise ValueError(f"background width {background.shape[1]} != instance width {d}")
    if d > MAX_EXACT_FEATURES:
        raise ValueError(
            f"exact enumeration covers at most {MAX_EXACT_FEATURES} features, got {d}"
        )
    if feature_names is None:
        feature_names = [f"x{i}" for i in range(d)]
    elif len(feature_names) != d:
        raise ValueError(f"{len(feature_names)} names for {d} features")

    n_subsets = 1 << d
    subset_ids = np.arange(n_subsets)
    masks = (subset_ids[:, None] >> np.arange(d)) & 1  # (2^d, d) of {0,1}
    sizes = masks.sum(axis=1)

    # composite[m, b] = background row b with masked features replaced from x
    n_bg = len(background)
    composites = np.where(masks[:, None, :].astype(bool), x, background[None, :, :])
    preds = np.asarray(predict_fn(composites.reshape(n_subsets * n_bg, d)), dtype=float)
    if preds.shape != (n_subsets * n_bg,):
        raise ValueError(f"predict_fn returned shape {preds.shape} for batched input")
    v = preds.reshape(n_subsets, n_bg).mean(axis=1)

    fact = [math.factorial(k) for k in range(d + 1)]
    weights = np.array([fact[s] * fact[d - 1 - s] / fact[d] for s in range(d)])

    phis = []
    for i in range(d):
        without = subset_ids[(masks[:, i] == 0)]
        gaps = v[without | (1 << i)] - v[without]
        phis.append(float(np.dot(weights[sizes[without]], gaps)))
    return [Attribution(name, phi) for name, phi in zip(feature_names, phis)]


def top_attributions(attributions: Sequence[Attribution], m: int = DEFAULT_TOP_M) -> tuple[Attribution, ...]:
    """The m largest by |phi|, ties broken by feature order."""
    order = sorted(range(len(attributions)), key=lambda i: (-abs(attributions[i].phi), i))
    return tuple(attributions[i] for i in order[:m])


# --- buffer what-if sweep ---


@dataclass(frozen=True)
class ScenarioRow:
    buffer_percent: float
    buffer_units: float
    expected_reward: float


@dataclass(frozen=True)
class ScenarioSweep:
    rows: tuple[ScenarioRow, ...]
    recommended_index: int

    @property
    def recommended(self) -> ScenarioRow:
        return self.rows[self.recommended_index]


def scenario_sweep(
    residual_samples: Sequence[float],
    actions: BufferActionSet,
    forecast: float,
    cfg: RewardConfig,
) -> ScenarioSweep:
    """Expected reward of each fixed buffer action over the residual samples.

    The recommendation is the argmax; ties break toward the smaller buffer.
    """
    residuals = np.asarray(residual_samples, dtype=float)
    if residuals.size == 0:
        raise ValueError("no residual samples")
    if not forecast > 0:
        raise ValueError(f"forecast must be > 0, got {forecast}")
    if residuals.min() < -forecast:
        raise ValueError("residual below -forecast implies negative realized demand")

    rows = []
    for k in range(len(actions.percents)):
        b = actions.buffer_units(k, forecast)
        mean = float(
            np.mean([compute_reward(forecast + res, forecast, b, cfg) for res in residuals])
        )
        rows.append(ScenarioRow(actions.percents[k], b, mean))
    best = max(range(len(rows)), key=lambda k: (rows[k].expected_reward, -rows[k].buffer_units))
    return ScenarioSweep(rows=tuple(rows), recommended_index=best)


def write_scenario_csv(sweep: ScenarioSweep, path: str | Path, comment: str | None = None):
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("buffer_percent,expected_reward")
    for row in sweep.rows:
        lines.append(f"{row.buffer_percent!r},{row.expected_reward!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_attributions_csv(
    attributions: Sequence[Attribution], path: str | Path, comment: str | None = None
):
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("feature,phi")
    for a in attributions:
        lines.append(f"{a.feature_name},{a.phi!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- executive summaries ---

TextRefiner = Callable[[str], str]

TEMPLATES = ("executive", "brief")


@dataclass(frozen=True)
class SummaryContext:
    """Everything a summary may mention. Numbers in the rendered text come
    only from here (or arithmetic combinations listed by number_vocabulary),
    so output claims stay grounded in computed values."""

    station_id: str | None = None
    region: str | None = None
    day: int | None = None
    forecast: float | None = None
    method: str | None = None
    baseline_method: str | None = None
    method_wape: float | None = None
    baseline_wape: float | None = None
    attributions: tuple[Attribution, ...] | None = None
    scenario: ScenarioSweep | None = None

    def __post_init__(self):
        if self.attributions:
            mags = [abs(a.phi) for a in self.attributions]
            if any(a < b for a, b in zip(mags, mags[1:])):
                raise ValueError("attributions must be sorted by |phi| descending")

    def missing_fields(self) -> list[str]:
        required = (
            "station_id",
            "region",
            "day",
            "forecast",
            "method",
            "baseline_method",
            "method_wape",
            "baseline_wape",
            "attributions",
            "scenario",
        )
        return [name for name in required if getattr(self, name) is None]

    @property
    def wape_change_pct(self) -> float:
        """Relative WAPE change of method vs baseline, in percent (positive
        = improvement)."""
        if not self.baseline_wape:
            raise ValueError("baseline WAPE unavailable or zero")
        return 100.0 * (self.baseline_wape - self.method_wape) / self.baseline_wape

    def number_vocabulary(self) -> set[str]:
        """Formatted number tokens a summary is allowed to contain."""
        vocab = {str(self.day)}
        floats = [self.forecast, self.method_wape, self.baseline_wape, self.wape_change_pct]
        for a in self.attributions or ():
            floats.extend((a.phi, abs(a.phi)))
        rows = self.scenario.rows if self.scenario else ()
        for row in rows:
            floats.extend((row.buffer_percent, row.buffer_units, row.expected_reward))
        if self.scenario and len(rows) > 1:
            best = self.scenario.recommended
            for row in rows:
                floats.append(abs(best.expected_reward - row.expected_reward))
        vocab.update(_fmt(v) for v in floats if v is not None)
        return vocab


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _render_executive(ctx: SummaryContext) -> str:
    best = ctx.scenario.recommended
    lines = [
        f"# Station {ctx.station_id} ({ctx.region}), day {ctx.day}",
        "",
        f"{ctx.method} forecast accuracy: WAPE {_fmt(ctx.method_wape)}% against "
        f"{_fmt(ctx.baseline_wape)}% for {ctx.baseline_method}, a relative change of "
        f"{_fmt(ctx.wape_change_pct)}%.",
        "",
    ]
    if ctx.attributions:
        lines.append(f"Forecast of {_fmt(ctx.forecast)} packages, main drivers:")
        lines.append("")
        for a in ctx.attributions:
            direction = "raised" if a.phi >= 0 else "lowered"
            lines.append(f"- {a.feature_name} {direction} the forecast by {_fmt(abs(a.phi))} packages")
        lines.append("")
    lines.append("Buffer scenarios (expected reward per day):")
    lines.append("")
    lines.append("| Buffer (%) | Buffer (packages) | Expected reward |")
    lines.append("|---|---|---|")
    for row in ctx.scenario.rows:
        marker = " (recommended)" if row is best else ""
        lines.append(
            f"| {_fmt(row.buffer_percent)} | {_fmt(row.buffer_units)} "
            f"| {_fmt(row.expected_reward)}{marker} |"
        )
    lines.append("")
    sentence = (
        f"Recommended buffer: {_fmt(best.buffer_percent)}% "
        f"({_fmt(best.buffer_units)} packages) with expected reward "
        f"{_fmt(best.expected_reward)}"
    )
    others = [r for r in ctx.scenario.rows if r is not best]
    if others:
        runner_up = max(others, key=lambda r: (r.expected_reward, -r.buffer_units))
        edge = abs(best.expected_reward - runner_up.expected_reward)
        sentence += (
            f", ahead of the {_fmt(runner_up.buffer_percent)}% alternative by {_fmt(edge)}"
        )
    lines.append(sentence + ".")
    return "\n".join(lines) + "\n"


def _render_brief(ctx: SummaryContext) -> str:
    best = ctx.scenario.recommended
    lines = [
        f"Station {ctx.station_id}, day {ctx.day}: {ctx.method} WAPE {_fmt(ctx.method_wape)}% "
        f"vs {ctx.baseline_method} {_fmt(ctx.baseline_wape)}% "
        f"({_fmt(ctx.wape_change_pct)}% relative change).",
        f"Buffer {_fmt(best.buffer_percent)}% recommended, expected reward "
        f"{_fmt(best.expected_reward)}.",
    ]
    if ctx.attributions:
        a = ctx.attributions[0]
        direction = "raised" if a.phi >= 0 else "lowered"
        lines.append(
            f"Top forecast driver: {a.feature_name} ({direction} it by {_fmt(abs(a.phi))})."
        )
    return "\n".join(lines) + "\n"


_RENDERERS = {"executive": _render_executive, "brief": _render_brief}


def render_summary(
    ctx: SummaryContext,
    template_id: str = "executive",
    refiner: TextRefiner | None = None,
    refiner_timeout_s: float = 10.0,
) -> str:
    """Deterministic markdown summary of a station's forecast and buffer picture.

    An empty attribution tuple is allowed (the drivers section is omitted);
    a None field is not. With a refiner, the draft is sent once and the
    refined text used only if the call returns a non-empty string in time.
    """
    missing = ctx.missing_fields()
    if missing:
        raise ValueError(f"summary context missing fields: {', '.join(missing)}")
    if template_id not in _RENDERERS:
        raise ValueError(f"unknown template {template_id!r}; available: {', '.join(TEMPLATES)}")
    draft = _RENDERERS[template_id](ctx)
    if refiner is None:
        return draft
    pool = ThreadPoolExecutor(max_workers=1)
    try:
        refined = pool.submit(refiner, draft).result(timeout=refiner_timeout_s)
    except Exception:  # any refiner failure, including timeout, means fall back
        return draft
    finally:
        # wait=False so a hung refiner cannot stall the caller past the timeout
        pool.shutdown(wait=False)
    if isinstance(refined, str) and refined.strip():
        return refined
    return draft
