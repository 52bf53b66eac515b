"""Run configuration: a single YAML document driving every command.

The file is a key-value tree with units spelled out in key names
(horizon_days, buffer_percents, ...) so experiment diffs read naturally.
Every parameter lives here except two overrides: ``--seed`` replaces the
master seed and ``--out`` (or OPCOMM_OUT) replaces the output directory.

A short hash of the effective configuration (resolved values, master seed
included, output directory excluded) is embedded in every artifact the
pipeline writes; downstream commands refuse inputs whose hash disagrees
with the current config.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .demand import (
    REGION_LABELS,
    REGIONS,
    BufferActionSet,
    InvalidProfileError,
    RewardConfig,
    StationProfile,
)
from .features import FeatureSchema
from .gbt import TrainConfig
from .ppo import PpoConfig


class ConfigError(ValueError):
    """Invalid or missing configuration; message carries the key path."""


class MissingArtifactError(FileNotFoundError):
    """A required upstream artifact is absent or from a different config."""


HASH_LENGTH = 12
OUTPUT_DIR_ENV = "OPCOMM_OUT"

_LABEL_TO_REGION = {label: name for name, label in REGION_LABELS.items()}


@dataclass(frozen=True)
class ExplainSpec:
    station_id: str | None
    day: int | None
    top_drivers: int
    template: str


@dataclass(frozen=True)
class RunConfig:
    master_seed: int
    horizon_days: int
    history_days: int
    output_dir: Path
    stations: tuple[StationProfile, ...]
    schema: FeatureSchema
    train: TrainConfig
    ppo: PpoConfig
    reward: RewardConfig
    actions: BufferActionSet
    min_usable_rows: int
    manual_buffer_percent: float
    over_slack: float
    explain: ExplainSpec
    config_hash: str

    @property
    def header_comment(self) -> str:
        """The provenance line embedded in every output file."""
        return f"config_hash={self.config_hash} seed={self.master_seed}"

    def station(self, station_id: str) -> StationProfile:
        for profile in self.stations:
            if profile.station_id == station_id:
                return profile
        raise ConfigError(f"explain.station_id: unknown station {station_id!r}")


class _Section:
    """Typed access into one level of the YAML tree with pathed errors."""

    def __init__(self, data: Mapping[str, Any] | None, path: str):
        if data is None:
            data = {}
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
        self.data = data
        self.path = path

    def _key(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def section(self, key: str) -> "_Section":
        return _Section(self.data.get(key), self._key(key))

    def get(self, key: str, kind, default=None, required: bool = False):
        if key not in self.data or self.data[key] is None:
            if required:
                raise ConfigError(f"{self._key(key)}: required key is missing")
            return default
        value = self.data[key]
        try:
            if kind is int:
                if isinstance(value, bool) or int(value) != value:
                    raise ValueError
                return int(value)
            if kind is float:
                if isinstance(value, bool):
                    raise ValueError
                return float(value)
            if kind is str:
                if not isinstance(value, str):
                    raise ValueError
                return value
        except (TypeError, ValueError):
            pass
        raise ConfigError(
            f"{self._key(key)}: expected {kind.__name__}, got {value!r}"
        )

    def number_list(self, key: str, default: Sequence[float] | None = None) -> list[float]:
        if key not in self.data or self.data[key] is None:
            if default is None:
                raise ConfigError(f"{self._key(key)}: required key is missing")
            return list(default)
        value = self.data[key]
        if not isinstance(value, Sequence) or isinstance(value, str):
            raise ConfigError(f"{self._key(key)}: expected a list of numbers")
        out = []
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{self._key(key)}[{i}]: expected a number, got {v!r}")
            out.append(float(v))
        return out

    def unknown_keys(self, known: Sequence[str]) -> list[str]:
        return [k for k in self.data if k not in known]


def _normalize_region(value: str, path: str) -> str:
    if value in REGIONS:
        return value
    if value in _LABEL_TO_REGION:
        return _LABEL_TO_REGION[value]
    raise ConfigError(
        f"{path}: unknown region {value!r}; use one of "
        f"{', '.join(sorted(REGION_LABELS.values()))}"
    )


def _station_seeds(master_seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(count)]


def _explicit_station(entry: Any, index: int, default_seed: int) -> StationProfile:
    path = f"fleet.stations[{index}]"
    sec = _Section(entry, path)
    weekly = sec.number_list("weekly_pattern", default=[1.0] * 7)
    shifts_raw = sec.data.get("regime_shifts", [])
    shifts = []
    for j, pair in enumerate(shifts_raw or []):
        if not isinstance(pair, Sequence) or len(pair) != 2:
            raise ConfigError(f"{path}.regime_shifts[{j}]: expected [day, multiplier]")
        shifts.append((int(pair[0]), float(pair[1])))
    try:
        return StationProfile(
            station_id=sec.get("station_id", str, required=True),
            region=_normalize_region(sec.get("region", str, required=True), f"{path}.region"),
            base_volume=sec.get("base_volume_packages", float, required=True),
            weekly_pattern=tuple(weekly),
            trend_per_day=sec.get("trend_per_day", float, default=0.0),
            noise_cv=sec.get("noise_cv", float, default=0.1),
            regime_shifts=tuple(shifts),
            capacity_class=sec.get("capacity_class", int, default=0),
            seed=sec.get("seed", int, default=default_seed),
        )
    except InvalidProfileError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _generate_fleet(sec: _Section, master_seed: int) -> tuple[StationProfile, ...]:
    count = sec.get("count", int, required=True)
    if count < 1:
        raise ConfigError(f"{sec.path}.count: must be >= 1, got {count}")
    base_range = sec.number_list("base_volume_packages", default=[80.0, 300.0])
    trend_range = sec.number_list("trend_per_day", default=[-0.001, 0.002])
    cv_range = sec.number_list("noise_cv", default=[0.05, 0.15])
    for key, rng_pair in (
        ("base_volume_packages", base_range),
        ("trend_per_day", trend_range),
        ("noise_cv", cv_range),
    ):
        if len(rng_pair) != 2 or rng_pair[0] > rng_pair[1]:
            raise ConfigError(f"{sec.path}.{key}: expected [low, high] with low <= high")
    weekly_amplitude = sec.get("weekly_amplitude", float, default=0.15)
    if not 0 <= weekly_amplitude < 1:
        raise ConfigError(
            f"{sec.path}.weekly_amplitude: must be in [0,1), got {weekly_amplitude}"
        )

    region_values = sec.data.get("regions")
    if region_values is None:
        regions = list(REGIONS)
    else:
        regions = [
            _normalize_region(str(r), f"{sec.path}.regions[{i}]")
            for i, r in enumerate(region_values)
        ]
        if not regions:
            raise ConfigError(f"{sec.path}.regions: must not be empty")

    seeds = _station_seeds(master_seed, count)
    rng = np.random.default_rng(np.random.SeedSequence((master_seed, 0xF1EE7)))
    stations = []
    for i in range(count):
        pattern = np.exp(rng.normal(0.0, weekly_amplitude, size=7))
        pattern = pattern / pattern.mean()
        stations.append(
            StationProfile(
                station_id=f"S{i + 1:03d}",
                region=regions[i % len(regions)],
                base_volume=float(rng.uniform(*base_range)),
                weekly_pattern=tuple(float(w) for w in pattern),
                trend_per_day=float(rng.uniform(*trend_range)),
                noise_cv=float(rng.uniform(*cv_range)),
                capacity_class=int(rng.integers(0, 3)),
                seed=seeds[i],
            )
        )
    return tuple(stations)


def _resolve_fleet(sec: _Section, master_seed: int) -> tuple[StationProfile, ...]:
    entries = sec.data.get("stations")
    if entries is not None:
        if not isinstance(entries, Sequence) or isinstance(entries, str) or not entries:
            raise ConfigError(f"{sec.path}.stations: expected a non-empty list")
        seeds = _station_seeds(master_seed, len(entries))
        stations = tuple(
            _explicit_station(entry, i, seeds[i]) for i, entry in enumerate(entries)
        )
    else:
        stations = _generate_fleet(sec, master_seed)
    ids = [s.station_id for s in stations]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{sec.path}: duplicate station_id in fleet")
    return stations


def _effective_dict(cfg_without_hash: "RunConfig") -> dict:
    """Everything that defines the run, minus the output directory."""
    c = cfg_without_hash
    return {
        "master_seed": c.master_seed,
        "horizon_days": c.horizon_days,
        "history_days": c.history_days,
        "stations": [
            {
                "station_id": s.station_id,
                "region": s.region,
                "base_volume": s.base_volume,
                "weekly_pattern": list(s.weekly_pattern),
                "trend_per_day": s.trend_per_day,
                "noise_cv": s.noise_cv,
                "regime_shifts": [list(p) for p in s.regime_shifts],
                "capacity_class": s.capacity_class,
                "seed": s.seed,
            }
            for s in c.stations
        ],
        "features": {
            "lags_days": list(c.schema.lag_set),
            "rolling_windows_days": list(c.schema.rolling_windows),
            "operational": list(c.schema.operational_names),
        },
        "forecaster": {
            "n_rounds": c.train.n_rounds,
            "max_leaves": c.train.max_leaves,
            "min_samples_leaf": c.train.min_samples_leaf,
            "l2_lambda": c.train.l2_lambda,
            "n_bins": c.train.n_bins,
            "learning_rate": c.train.learning_rate,
            "train_fraction": c.train.train_fraction,
            "min_usable_rows": c.min_usable_rows,
        },
        "policy": {
            "clip_epsilon": c.ppo.clip_epsilon,
            "discount": c.ppo.discount,
            "gae_lambda": c.ppo.gae_lambda,
            "epochs_per_update": c.ppo.epochs_per_update,
            "minibatch_size": c.ppo.minibatch_size,
            "policy_step_size": c.ppo.policy_step_size,
            "value_step_size": c.ppo.value_step_size,
            "entropy_coef": c.ppo.entropy_coef,
            "rollout_episodes": c.ppo.rollout_episodes,
            "max_updates": c.ppo.max_updates,
            "optimizer": c.ppo.optimizer,
        },
        "reward": {"alpha": c.reward.alpha, "beta": c.reward.beta},
        "actions": list(c.actions.percents),
        "evaluate": {
            "manual_buffer_percent": c.manual_buffer_percent,
            "over_slack_packages": c.over_slack,
        },
        "explain": {
            "station_id": c.explain.station_id,
            "day": c.explain.day,
            "top_drivers": c.explain.top_drivers,
            "template": c.explain.template,
        },
    }


def config_hash_of(effective: dict) -> str:
    canonical = json.dumps(effective, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:HASH_LENGTH]


def load_config(
    path: str | Path,
    seed_override: int | None = None,
    out_override: str | None = None,
) -> RunConfig:
    """Parse and validate a YAML run configuration.

    seed_override replaces run.master_seed before anything is derived from
    it (so it changes the config hash); out_override and the OPCOMM_OUT
    env var only move the output directory (hash unchanged).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    root = _Section(data, "")

    known_sections = (
        "run",
        "fleet",
        "features",
        "forecaster",
        "policy",
        "reward",
        "actions",
        "evaluate",
        "explain",
    )
    unknown = root.unknown_keys(known_sections)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")

    run = root.section("run")
    master_seed = run.get("master_seed", int, required=seed_override is None)
    if seed_override is not None:
        master_seed = seed_override
    horizon_days = run.get("horizon_days", int, default=28)
    history_days = run.get("history_days", int, default=240)
    if horizon_days < 1:
        raise ConfigError(f"run.horizon_days: must be >= 1, got {horizon_days}")
    if history_days < 1:
        raise ConfigError(f"run.history_days: must be >= 1, got {history_days}")

    out_dir = out_override or os.environ.get(OUTPUT_DIR_ENV) or run.get("output_dir", str)
    if not out_dir:
        raise ConfigError("run.output_dir: required (or pass --out / set OPCOMM_OUT)")

    stations = _resolve_fleet(root.section("fleet"), master_seed)

    feat = root.section("features")
    try:
        schema = FeatureSchema(
            lag_set=tuple(int(v) for v in feat.number_list("lags_days", default=[1, 7, 14])),
            rolling_windows=tuple(
                int(v) for v in feat.number_list("rolling_windows_days", default=[7, 28])
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"features: {exc}") from exc

    fc = root.section("forecaster")
    min_usable_rows = fc.get("min_usable_rows", int, default=120)
    if min_usable_rows < 1:
        raise ConfigError(f"forecaster.min_usable_rows: must be >= 1, got {min_usable_rows}")
    try:
        train = TrainConfig(
            n_rounds=fc.get("n_rounds", int, default=100),
            max_leaves=fc.get("max_leaves", int, default=15),
            min_samples_leaf=fc.get("min_samples_leaf", int, default=5),
            l2_lambda=fc.get("l2_lambda", float, default=1.0),
            n_bins=fc.get("n_bins", int, default=64),
            learning_rate=fc.get("learning_rate", float, default=0.1),
            train_fraction=fc.get("train_fraction", float, default=0.8),
        )
    except ValueError as exc:
        raise ConfigError(f"forecaster: {exc}") from exc

    pol = root.section("policy")
    try:
        ppo_cfg = PpoConfig(
            clip_epsilon=pol.get("clip_epsilon", float, default=0.2),
            discount=pol.get("discount", float, default=0.99),
            gae_lambda=pol.get("gae_lambda", float, default=0.95),
            epochs_per_update=pol.get("epochs_per_update", int, default=4),
            minibatch_size=pol.get("minibatch_size", int, default=64),
            policy_step_size=pol.get("policy_step_size", float, default=3e-3),
            value_step_size=pol.get("value_step_size", float, default=1e-2),
            entropy_coef=pol.get("entropy_coef", float, default=0.01),
            rollout_episodes=pol.get("rollout_episodes", int, default=8),
            max_updates=pol.get("max_updates", int, default=200),
            optimizer=pol.get("optimizer", str, default="sgd"),
        )
    except ValueError as exc:
        raise ConfigError(f"policy: {exc}") from exc

    rew = root.section("reward")
    try:
        reward = RewardConfig(
            alpha=rew.get("alpha", float, default=2.0),
            beta=rew.get("beta", float, default=1.0),
        )
    except ValueError as exc:
        raise ConfigError(f"reward: {exc}") from exc

    act = root.section("actions")
    percents = act.number_list(
        "buffer_percents", default=[0.0, 2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0]
    )
    try:
        actions = BufferActionSet(percents=tuple(percents))
    except ValueError as exc:
        raise ConfigError(f"actions.buffer_percents: {exc}") from exc

    ev = root.section("evaluate")
    manual_buffer = ev.get("manual_buffer_percent", float, default=10.0)
    over_slack = ev.get("over_slack_packages", float, default=0.0)
    if manual_buffer < 0:
        raise ConfigError(f"evaluate.manual_buffer_percent: must be >= 0, got {manual_buffer}")
    if over_slack < 0:
        raise ConfigError(f"evaluate.over_slack_packages: must be >= 0, got {over_slack}")

    ex = root.section("explain")
    explain = ExplainSpec(
        station_id=ex.get("station_id", str),
        day=ex.get("day", int),
        top_drivers=ex.get("top_drivers", int, default=3),
        template=ex.get("template", str, default="executive"),
    )
    if explain.top_drivers < 0:
        raise ConfigError(f"explain.top_drivers: must be >= 0, got {explain.top_drivers}")

    cfg = RunConfig(
        master_seed=master_seed,
        horizon_days=horizon_days,
        history_days=history_days,
        output_dir=Path(out_dir),
        stations=stations,
        schema=schema,
        train=train,
        ppo=ppo_cfg,
        reward=reward,
        actions=actions,
        min_usable_rows=min_usable_rows,
        manual_buffer_percent=manual_buffer,
        over_slack=over_slack,
        explain=explain,
        config_hash="",
    )
    return RunConfig(**{**cfg.__dict__, "config_hash": config_hash_of(_effective_dict(cfg))})
