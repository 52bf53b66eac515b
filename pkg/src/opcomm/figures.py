"""Matplotlib renderings written next to the delimited outputs.

All figures use the Agg backend with fixed metadata so re-running a
pipeline with the same config produces byte-identical PNG files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 - backend must be pinned first

from .insight import Attribution  # noqa: E402
from .metrics import EvaluationReport  # noqa: E402
from .ppo import UpdateStats  # noqa: E402


def _save(fig, path: str | Path, comment: str):
    fig.savefig(
        Path(path),
        format="png",
        dpi=100,
        metadata={"Software": "opcomm", "Comment": comment},
    )
    plt.close(fig)


def forecast_eval_png(
    station_ids: Sequence[str],
    baseline_wapes: Sequence[float],
    model_wapes: Sequence[float],
    path: str | Path,
    comment: str,
):
    """Per-station WAPE of the trained forecaster vs the seasonal-naive line."""
    fig, ax = plt.subplots(figsize=(max(6.0, 0.35 * len(station_ids)), 4.0))
    x = range(len(station_ids))
    ax.bar([i - 0.2 for i in x], baseline_wapes, width=0.4, label="seasonal naive")
    ax.bar([i + 0.2 for i in x], model_wapes, width=0.4, label="boosted trees")
    ax.set_xticks(list(x))
    ax.set_xticklabels(station_ids, rotation=90, fontsize=7)
    ax.set_ylabel("test WAPE (%)")
    ax.set_title("Forecast accuracy by station")
    ax.legend()
    fig.tight_layout()
    _save(fig, path, comment)


def reward_curve_png(curve: Sequence[UpdateStats], path: str | Path, comment: str):
    fig, axes = plt.subplots(2, 1, figsize=(7.0, 5.5), sharex=True)
    updates = [row.update for row in curve]
    axes[0].plot(updates, [row.mean_reward for row in curve])
    axes[0].set_ylabel("mean reward")
    axes[0].set_title("Policy training")
    axes[1].plot(updates, [row.entropy for row in curve], label="entropy")
    axes[1].plot(updates, [row.clip_fraction for row in curve], label="clip fraction")
    axes[1].set_xlabel("update")
    axes[1].legend()
    fig.tight_layout()
    _save(fig, path, comment)


def wape_by_region_png(report: EvaluationReport, path: str | Path, comment: str):
    regions = sorted({row.region for row in report.rows})
    methods = sorted({row.method for row in report.rows})
    lookup = {(row.region, row.method): row.wape for row in report.rows}
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    width = 0.8 / max(len(methods), 1)
    for j, method in enumerate(methods):
        xs = [i + (j - (len(methods) - 1) / 2) * width for i in range(len(regions))]
        ys = [lookup.get((region, method), 0.0) for region in regions]
        ax.bar(xs, ys, width=width, label=method)
    ax.set_xticks(range(len(regions)))
    ax.set_xticklabels(regions)
    ax.set_ylabel("mean station WAPE (%)")
    ax.set_title("Accuracy by region and method")
    ax.legend()
    fig.tight_layout()
    _save(fig, path, comment)


def attributions_png(attributions: Sequence[Attribution], path: str | Path, comment: str):
    fig, ax = plt.subplots(figsize=(7.0, max(2.5, 0.4 * len(attributions))))
    names = [a.feature_name for a in attributions]
    phis = [a.phi for a in attributions]
    colors = ["#2a9d8f" if p >= 0 else "#e76f51" for p in phis]
    ax.barh(range(len(names)), phis, color=colors)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.axvline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("contribution to forecast (packages)")
    ax.set_title("Forecast drivers")
    fig.tight_layout()
    _save(fig, path, comment)
