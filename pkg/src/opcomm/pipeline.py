"""Pipeline stages behind the CLI commands.

simulate -> train-forecaster -> train-policy -> evaluate -> explain, each a
pure function of (config, upstream files). Every artifact carries the
config hash and master seed in a header comment (or meta line), and every
stage refuses inputs written under a different hash, so partial re-runs
cannot silently mix experiments.

Per-station work can fan out over a process pool (--jobs); results are
written by the parent in sorted station order, so the byte content of the
output tree does not depend on the schedule.
"""

from __future__ import annotations

import re
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import env as envmod
from . import figures, gbt, insight, metrics, ppo
from .config import MissingArtifactError, RunConfig
from .demand import (
    REGION_LABELS,
    DemandSeries,
    StationProfile,
    generate_series,
    read_demand_csv,
    write_demand_csv,
)
from .features import FeatureRow, FeatureSchema, build_feature_matrix, temporal_split
from .metrics import DecisionRecord


class OutputLayout:
    """All artifact paths under one output directory."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.demand_dir = self.root / "demand"
        self.models_dir = self.root / "models"
        self.policy_dir = self.root / "policy"
        self.reports_dir = self.root / "reports"
        self.explain_dir = self.root / "explain"

    def demand_csv(self, station_id: str) -> Path:
        return self.demand_dir / f"{station_id}.csv"

    @property
    def stations_csv(self) -> Path:
        return self.demand_dir / "stations.csv"

    def model_file(self, station_id: str) -> Path:
        return self.models_dir / f"{station_id}.model"

    @property
    def forecast_eval_csv(self) -> Path:
        return self.models_dir / "forecast_eval.csv"

    @property
    def forecast_eval_png(self) -> Path:
        return self.models_dir / "forecast_eval.png"

    @property
    def policy_bundle(self) -> Path:
        return self.policy_dir / "policy.bundle"

    @property
    def reward_curve_csv(self) -> Path:
        return self.policy_dir / "reward_curve.csv"

    @property
    def reward_curve_png(self) -> Path:
        return self.policy_dir / "reward_curve.png"

    def records_csv(self, method: str) -> Path:
        return self.reports_dir / f"records_{method.lower()}.csv"

    @property
    def report_csv(self) -> Path:
        return self.reports_dir / "report.csv"

    @property
    def report_md(self) -> Path:
        return self.reports_dir / "report.md"

    @property
    def fleet_csv(self) -> Path:
        return self.reports_dir / "fleet_summary.csv"

    @property
    def wape_png(self) -> Path:
        return self.reports_dir / "wape_by_region.png"

    @property
    def attributions_csv(self) -> Path:
        return self.explain_dir / "attributions.csv"

    @property
    def attributions_png(self) -> Path:
        return self.explain_dir / "attributions.png"

    @property
    def scenario_csv(self) -> Path:
        return self.explain_dir / "scenario.csv"

    @property
    def summary_md(self) -> Path:
        return self.explain_dir / "summary.md"


MANUAL_METHOD = "Manual"
MODEL_METHOD = "OpComm"

_HASH_RE = re.compile(r"config_hash=(\S+)")


def _verify_hash(found: str | None, path: Path, cfg: RunConfig, producer: str):
    if found is None:
        raise MissingArtifactError(
            f"{path} carries no config hash; regenerate it with `opcomm {producer}`"
        )
    if found != cfg.config_hash:
        raise MissingArtifactError(
            f"{path} was produced under config hash {found}, current config is "
            f"{cfg.config_hash}; re-run `opcomm {producer}` (and downstream stages) "
            f"with this config"
        )


def _hash_from_comments(comments: Iterable[str]) -> str | None:
    for line in comments:
        m = _HASH_RE.search(line)
        if m:
            return m.group(1)
    return None


def _require(path: Path, producer: str):
    if not path.exists():
        raise MissingArtifactError(
            f"missing artifact {path}; produce it with `opcomm {producer}`"
        )


def read_series_checked(path: Path, cfg: RunConfig, producer: str = "simulate") -> DemandSeries:
    _require(path, producer)
    series, comments = read_demand_csv(path)
    _verify_hash(_hash_from_comments(comments), path, cfg, producer)
    return series


def load_model_checked(path: Path, cfg: RunConfig) -> gbt.TreeEnsemble:
    _require(path, "train-forecaster")
    model = gbt.load_model_file(path)
    _verify_hash(model.meta.get("config_hash"), path, cfg, "train-forecaster")
    return model


def load_bundle_checked(path: Path, cfg: RunConfig) -> ppo.PolicyBundle:
    _require(path, "train-policy")
    bundle = ppo.load_bundle_file(path)
    _verify_hash(bundle.meta.get("config_hash"), path, cfg, "train-policy")
    return bundle


def _operational(profile: StationProfile) -> dict[str, float]:
    return {"capacity_class": float(profile.capacity_class)}


def _station_rows(
    series: DemandSeries, profile: StationProfile, schema: FeatureSchema
) -> list[FeatureRow]:
    return build_feature_matrix(series, schema, _operational(profile))


def _run_pool(jobs: int, worker, args_list: list[tuple]) -> list:
    """Run worker over args in order; results returned in submission order."""
    if jobs <= 1 or len(args_list) <= 1:
        return [worker(*args) for args in args_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(worker, *args) for args in args_list]
        return [f.result() for f in futures]


# --- simulate ---


def _simulate_station(profile: StationProfile, n_days: int) -> np.ndarray:
    return generate_series(profile, n_days).values


def cmd_simulate(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    """Generate per-station demand CSVs plus the fleet roster."""
    layout = OutputLayout(cfg.output_dir)
    layout.demand_dir.mkdir(parents=True, exist_ok=True)
    values_list = _run_pool(
        jobs, _simulate_station, [(p, cfg.history_days) for p in cfg.stations]
    )
    written = []
    for profile, values in zip(cfg.stations, values_list):
        series = DemandSeries(profile.station_id, 0, values)
        path = layout.demand_csv(profile.station_id)
        write_demand_csv(series, path, header_comment=cfg.header_comment)
        written.append(path)

    lines = [f"# {cfg.header_comment}"]
    lines.append("station_id,region,base_volume,trend_per_day,noise_cv,capacity_class,seed")
    for p in cfg.stations:
        lines.append(
            f"{p.station_id},{REGION_LABELS[p.region]},{float(p.base_volume)!r},"
            f"{float(p.trend_per_day)!r},{float(p.noise_cv)!r},{p.capacity_class},{p.seed}"
        )
    layout.stations_csv.write_text("\n".join(lines) + "\n")
    written.append(layout.stations_csv)
    return written


# --- train-forecaster ---


def _wape_of(actual: np.ndarray, predicted: np.ndarray) -> float:
    total = float(actual.sum())
    if total <= 0:
        raise ValueError("WAPE undefined: zero total demand in the test window")
    return 100.0 * float(np.abs(actual - predicted).sum()) / total


def _train_station(
    profile: StationProfile, demand_path: Path, cfg: RunConfig
) -> tuple[str, str | None, dict]:
    """(station_id, model document or None if excluded, eval fields)."""
    series = read_series_checked(demand_path, cfg)
    rows = _station_rows(series, profile, cfg.schema)
    info: dict = {"region": REGION_LABELS[profile.region]}
    if len(rows) < cfg.min_usable_rows:
        info["status"] = "excluded"
        info["n_train"] = info["n_test"] = 0
        return profile.station_id, None, info

    train_rows, test_rows = temporal_split(rows, cfg.train.train_fraction)
    model = gbt.fit(train_rows, cfg.train, schema=cfg.schema)
    model.meta.update(
        {
            "config_hash": cfg.config_hash,
            "seed": str(cfg.master_seed),
            "station_id": profile.station_id,
        }
    )

    X_test = np.array([r.values for r in test_rows])
    y_test = np.array([r.target for r in test_rows])
    model_pred = np.maximum(model.predict_matrix(X_test), 0.0)
    naive_pred = np.array(
        [gbt.seasonal_naive_forecast(series, r.day_index) for r in test_rows]
    )
    info.update(
        status="trained",
        n_train=len(train_rows),
        n_test=len(test_rows),
        baseline_wape=_wape_of(y_test, naive_pred),
        model_wape=_wape_of(y_test, model_pred),
    )
    return profile.station_id, gbt.save_model(model), info


def cmd_train_forecaster(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    """Fit one tree ensemble per station; report test WAPE vs seasonal naive."""
    layout = OutputLayout(cfg.output_dir)
    for profile in cfg.stations:
        _require(layout.demand_csv(profile.station_id), "simulate")
    layout.models_dir.mkdir(parents=True, exist_ok=True)

    results = _run_pool(
        jobs,
        _train_station,
        [(p, layout.demand_csv(p.station_id), cfg) for p in cfg.stations],
    )
    written = []
    eval_lines = [f"# {cfg.header_comment}"]
    eval_lines.append(
        "station_id,region,status,n_train_rows,n_test_rows,baseline_wape,model_wape"
    )
    plot_ids, plot_base, plot_model = [], [], []
    for station_id, document, info in results:
        if document is not None:
            path = layout.model_file(station_id)
            path.write_text(document)
            written.append(path)
            wapes = f"{info['baseline_wape']!r},{info['model_wape']!r}"
            plot_ids.append(station_id)
            plot_base.append(info["baseline_wape"])
            plot_model.append(info["model_wape"])
        else:
            wapes = ","
        eval_lines.append(
            f"{station_id},{info['region']},{info['status']},"
            f"{info['n_train']},{info['n_test']},{wapes}"
        )
    if not plot_ids:
        raise MissingArtifactError(
            "every station was excluded for insufficient history; "
            f"raise run.history_days (need >= {cfg.min_usable_rows} usable rows)"
        )
    layout.forecast_eval_csv.write_text("\n".join(eval_lines) + "\n")
    figures.forecast_eval_png(
        plot_ids, plot_base, plot_model, layout.forecast_eval_png, cfg.header_comment
    )
    written.extend([layout.forecast_eval_csv, layout.forecast_eval_png])
    return written


def trained_stations(cfg: RunConfig, layout: OutputLayout) -> list[StationProfile]:
    """Stations with a model on disk (order of the fleet spec)."""
    out = [p for p in cfg.stations if layout.model_file(p.station_id).exists()]
    if not out:
        raise MissingArtifactError(
            f"no trained models under {layout.models_dir}; run `opcomm train-forecaster`"
        )
    return out


# --- train-policy ---


def _policy_warmup(schema: FeatureSchema) -> int:
    return schema.burn_in + envmod.RESIDUAL_WINDOW


def cmd_train_policy(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    """Train one shared buffer policy across the fleet's trained stations.

    Rollouts cycle stations round-robin, each episode on freshly generated
    demand. jobs is accepted for interface symmetry; collection stays
    sequential so the reward curve is schedule-independent.
    """
    del jobs
    layout = OutputLayout(cfg.output_dir)
    stations = trained_stations(cfg, layout)
    for p in stations:
        _require(layout.demand_csv(p.station_id), "simulate")
    layout.policy_dir.mkdir(parents=True, exist_ok=True)

    forecasters = {}
    for profile in stations:
        model = load_model_checked(layout.model_file(profile.station_id), cfg)
        forecasters[profile.station_id] = envmod.model_forecaster(
            model, cfg.schema, _operational(profile)
        )
    warmup = _policy_warmup(cfg.schema)

    def env_factory(episode_index: int, episode_seed: int) -> envmod.BufferEnv:
        profile = stations[episode_index % len(stations)]
        return envmod.episode_from_profile(
            profile,
            forecasters[profile.station_id],
            cfg.actions,
            cfg.reward,
            cfg.horizon_days,
            episode_seed=episode_seed,
            warmup_days=warmup,
        )

    bundle = ppo.PolicyBundle.create(
        envmod.OBS_DIM, len(cfg.actions), seed=cfg.master_seed
    )
    bundle, curve = ppo.train_loop(env_factory, bundle, cfg.ppo, seed=cfg.master_seed)
    bundle.meta.update({"config_hash": cfg.config_hash, "seed": str(cfg.master_seed)})
    ppo.save_bundle_file(bundle, layout.policy_bundle)
    ppo.write_reward_curve(curve, layout.reward_curve_csv, comment=cfg.header_comment)
    figures.reward_curve_png(curve, layout.reward_curve_png, cfg.header_comment)
    return [layout.policy_bundle, layout.reward_curve_csv, layout.reward_curve_png]


# --- evaluate ---


def _evaluate_station(
    profile: StationProfile, demand_path: Path, model_path: Path, cfg: RunConfig, bundle
) -> tuple[list[DecisionRecord], list[DecisionRecord]]:
    """(manual records, model-policy records) over the station's test window."""
    series = read_series_checked(demand_path, cfg)
    model = load_model_checked(model_path, cfg)
    rows = _station_rows(series, profile, cfg.schema)
    train_rows, test_rows = temporal_split(rows, cfg.train.train_fraction)
    region = REGION_LABELS[profile.region]

    X_test = np.array([r.values for r in test_rows])
    forecasts = np.maximum(model.predict_matrix(X_test), 0.0)
    realized = np.array([r.target for r in test_rows])
    days = [r.day_index for r in test_rows]

    manual = []
    for t, d_real in zip(days, realized):
        naive = gbt.seasonal_naive_forecast(series, t)
        manual.append(
            DecisionRecord(
                station_id=profile.station_id,
                region=region,
                day=t,
                realized=float(d_real),
                forecast=naive,
                buffer_units=cfg.manual_buffer_percent / 100.0 * naive,
            )
        )

    # residual history from the tail of the training window primes the
    # policy observation exactly as during training rollouts
    X_train = np.array([r.values for r in train_rows])
    train_pred = np.maximum(model.predict_matrix(X_train), 0.0)
    train_resid = np.array([r.target for r in train_rows]) - train_pred
    prior = list(train_resid[-envmod.RESIDUAL_WINDOW :])

    policy_env = envmod.BufferEnv(
        profile.station_id,
        realized,
        forecasts,
        cfg.actions,
        cfg.reward,
        day_offset=days[0],
        capacity_class=profile.capacity_class,
        obs_scale=profile.base_volume,
        prior_residuals=prior,
    )
    model_records = []
    state = policy_env.reset()
    pos = 0
    while state is not None:
        action = ppo.greedy_action(bundle, state.observation)
        transition, state = policy_env.step(action)
        model_records.append(
            DecisionRecord(
                station_id=profile.station_id,
                region=region,
                day=days[pos],
                realized=float(realized[pos]),
                forecast=float(forecasts[pos]),
                buffer_units=transition.buffer_units,
            )
        )
        pos += 1
    return manual, model_records


def cmd_evaluate(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    """Play both methods over every station's held-out window and report."""
    layout = OutputLayout(cfg.output_dir)
    stations = trained_stations(cfg, layout)
    bundle = load_bundle_checked(layout.policy_bundle, cfg)
    layout.reports_dir.mkdir(parents=True, exist_ok=True)

    results = _run_pool(
        jobs,
        _evaluate_station,
        [
            (p, layout.demand_csv(p.station_id), layout.model_file(p.station_id), cfg, bundle)
            for p in stations
        ],
    )
    manual_records = [r for manual, _ in results for r in manual]
    model_records = [r for _, records in results for r in records]

    metrics.write_records_csv(
        manual_records, layout.records_csv(MANUAL_METHOD), comment=cfg.header_comment
    )
    metrics.write_records_csv(
        model_records, layout.records_csv(MODEL_METHOD), comment=cfg.header_comment
    )
    report = metrics.aggregate_report(
        {MANUAL_METHOD: manual_records, MODEL_METHOD: model_records},
        baseline_method=MANUAL_METHOD,
        tau=cfg.over_slack,
    )
    table_md, table_csv = metrics.render_table(report)
    fleet_md, fleet_csv = metrics.render_fleet_table(report)
    layout.report_csv.write_text(f"# {cfg.header_comment}\n" + table_csv)
    layout.fleet_csv.write_text(f"# {cfg.header_comment}\n" + fleet_csv)
    layout.report_md.write_text(
        f"<!-- {cfg.header_comment} -->\n\n# Fleet evaluation\n\n"
        + table_md
        + "\n## Fleet totals\n\n"
        + fleet_md
    )
    figures.wape_by_region_png(report, layout.wape_png, cfg.header_comment)
    return [
        layout.records_csv(MANUAL_METHOD),
        layout.records_csv(MODEL_METHOD),
        layout.report_csv,
        layout.fleet_csv,
        layout.report_md,
        layout.wape_png,
    ]


# --- explain ---


def _read_records_checked(path: Path, cfg: RunConfig) -> list[DecisionRecord]:
    _require(path, "evaluate")
    records, comments = metrics.read_records_csv(path)
    _verify_hash(_hash_from_comments(comments), path, cfg, "evaluate")
    return records


def cmd_explain(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    """Attribute one station-day forecast and sweep its buffer options."""
    del jobs
    layout = OutputLayout(cfg.output_dir)
    stations = trained_stations(cfg, layout)
    profile = cfg.station(cfg.explain.station_id) if cfg.explain.station_id else stations[0]
    if not layout.model_file(profile.station_id).exists():
        raise MissingArtifactError(
            f"station {profile.station_id} has no trained model "
            f"(excluded or not yet trained); run `opcomm train-forecaster`"
        )
    layout.explain_dir.mkdir(parents=True, exist_ok=True)

    series = read_series_checked(layout.demand_csv(profile.station_id), cfg)
    model = load_model_checked(layout.model_file(profile.station_id), cfg)
    rows = _station_rows(series, profile, cfg.schema)
    train_rows, test_rows = temporal_split(rows, cfg.train.train_fraction)

    day = cfg.explain.day if cfg.explain.day is not None else test_rows[-1].day_index
    by_day = {r.day_index: r for r in test_rows}
    if day not in by_day:
        raise MissingArtifactError(
            f"explain.day={day} is not in station {profile.station_id}'s test window "
            f"(days {test_rows[0].day_index}..{test_rows[-1].day_index})"
        )
    row = by_day[day]

    background = np.array([r.values for r in train_rows[-28:]])
    attributions = insight.shap_exact(
        model.predict_matrix, row.values, background, cfg.schema.names
    )
    top = insight.top_attributions(attributions, cfg.explain.top_drivers)

    X_test = np.array([r.values for r in test_rows])
    test_pred = np.maximum(model.predict_matrix(X_test), 0.0)
    residuals = np.array([r.target for r in test_rows]) - test_pred
    forecast = max(0.0, gbt.predict(model, row.values))
    if forecast <= 0:
        raise MissingArtifactError(
            f"model forecast for station {profile.station_id} day {day} is 0; "
            "buffer percentages are undefined, pick another day"
        )
    sweep = insight.scenario_sweep(residuals, cfg.actions, forecast, cfg.reward)

    manual_records = _read_records_checked(layout.records_csv(MANUAL_METHOD), cfg)
    model_records = _read_records_checked(layout.records_csv(MODEL_METHOD), cfg)
    sid = profile.station_id
    ctx = insight.SummaryContext(
        station_id=sid,
        region=REGION_LABELS[profile.region],
        day=day,
        forecast=forecast,
        method=MODEL_METHOD,
        baseline_method=MANUAL_METHOD,
        method_wape=metrics.wape([r for r in model_records if r.station_id == sid]),
        baseline_wape=metrics.wape([r for r in manual_records if r.station_id == sid]),
        attributions=top,
        scenario=sweep,
    )
    summary = insight.render_summary(ctx, cfg.explain.template)

    insight.write_attributions_csv(
        attributions, layout.attributions_csv, comment=cfg.header_comment
    )
    insight.write_scenario_csv(sweep, layout.scenario_csv, comment=cfg.header_comment)
    layout.summary_md.write_text(f"<!-- {cfg.header_comment} -->\n\n" + summary)
    figures.attributions_png(attributions, layout.attributions_png, cfg.header_comment)
    return [
        layout.attributions_csv,
        layout.scenario_csv,
        layout.summary_md,
        layout.attributions_png,
    ]
