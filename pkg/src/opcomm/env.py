"""Daily buffer-decision episodes: forecast, buffer action, realized demand,
reward.

Demand is exogenous (actions never change it), so each episode precomputes
its realized-demand and forecast paths up front and then walks them for a
fixed horizon. Per step t the agent sees the state, picks a buffer level
p_k, the buffer converts to package units b = p_k/100 * forecast, demand
realizes, and the asymmetric penalty is paid.

The observation is six numbers: the forecast and the trailing-week residual
mean/std (all divided by a station scale so one policy can serve stations
of different sizes), the day-of-week encodings, and the station's capacity
class.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .demand import (
    BufferActionSet,
    RewardConfig,
    StationProfile,
    compute_reward,
    generate_series,
)
from .features import FeatureSchema, encode_temporal, feature_vector, operational_values
from .gbt import TreeEnsemble

OBS_DIM = 6
RESIDUAL_WINDOW = 7


class EpisodeEndError(RuntimeError):
    """step() called on a finished episode."""


class InvalidActionError(ValueError):
    """Action index outside the buffer grid."""


@dataclass
class EnvState:
    station_id: str
    day_index: int
    observation: np.ndarray
    forecast: float


@dataclass
class Transition:
    """One decision step. The policy-side fields (old_log_prob,
    value_estimate, return_to_go, advantage) are filled during rollout
    collection and credit assignment, not by the environment."""

    state: EnvState
    action_index: int
    buffer_units: float
    reward: float
    old_log_prob: float = 0.0
    value_estimate: float = 0.0
    return_to_go: float = 0.0
    advantage: float = 0.0


#: (series values, index t, absolute day) -> forecast for day t.
#: Must read only values[:t].
ForecastFn = Callable[[np.ndarray, int, int], float]


def naive_forecaster() -> ForecastFn:
    def forecast(values: np.ndarray, t: int, day: int) -> float:
        del day
        return float(values[t - 7])

    forecast.min_history = 7
    return forecast


def constant_forecaster(level: float) -> ForecastFn:
    def forecast(values: np.ndarray, t: int, day: int) -> float:
        del values, t, day
        return float(level)

    forecast.min_history = 0
    return forecast


def perfect_forecaster() -> ForecastFn:
    """Oracle that forecasts the realized value exactly (test aid)."""

    def forecast(values: np.ndarray, t: int, day: int) -> float:
        del day
        return float(values[t])

    forecast.min_history = 0
    return forecast


def model_forecaster(
    model: TreeEnsemble, schema: FeatureSchema, operational: dict[str, float]
) -> ForecastFn:
    """Forecast with a trained tree ensemble; negative predictions clamp to 0."""
    op_values = operational_values(schema, operational)

    def forecast(values: np.ndarray, t: int, day: int) -> float:
        x = feature_vector(values, t, day, schema, op_values)
        return max(0.0, float(model.predict_matrix(x[None, :])[0]))

    forecast.min_history = schema.burn_in
    return forecast


class BufferEnv:
    """Fixed-horizon episode over precomputed demand and forecast paths."""

    def __init__(
        self,
        station_id: str,
        realized: np.ndarray,
        forecasts: np.ndarray,
        actions: BufferActionSet,
        reward_cfg: RewardConfig,
        *,
        day_offset: int = 0,
        capacity_class: float = 0.0,
        obs_scale: float = 1.0,
        prior_residuals: Sequence[float] = (),
    ):
        self.station_id = station_id
        self.realized = np.asarray(realized, dtype=float)
        self.forecasts = np.asarray(forecasts, dtype=float)
        if self.realized.shape != self.forecasts.shape or self.realized.ndim != 1:
            raise ValueError("realized and forecast paths must be 1-D and equal length")
        if len(self.realized) == 0:
            raise ValueError("episode needs at least one day")
        if self.realized.min() < 0 or self.forecasts.min() < 0:
            raise ValueError("demand and forecasts must be >= 0")
        if obs_scale <= 0:
            raise ValueError("obs_scale must be > 0")
        self.actions = actions
        self.reward_cfg = reward_cfg
        self.day_offset = day_offset
        self.capacity_class = float(capacity_class)
        self.obs_scale = float(obs_scale)
        self._prior_residuals = list(prior_residuals)
        self._t: int | None = None
        self._residuals: list[float] = []

    @property
    def horizon(self) -> int:
        return len(self.realized)

    def _observation(self, t: int) -> np.ndarray:
        recent = (self._prior_residuals + self._residuals)[-RESIDUAL_WINDOW:]
        if recent:
            res_mean = float(np.mean(recent))
            res_std = float(np.std(recent))
        else:
            res_mean = res_std = 0.0
        dow_sin, dow_cos = encode_temporal(self.day_offset + t)[:2]
        return np.array(
            [
                self.forecasts[t] / self.obs_scale,
                res_mean / self.obs_scale,
                res_std / self.obs_scale,
                dow_sin,
                dow_cos,
                self.capacity_class,
            ]
        )

    def _state(self, t: int) -> EnvState:
        return EnvState(
            station_id=self.station_id,
            day_index=self.day_offset + t,
            observation=self._observation(t),
            forecast=float(self.forecasts[t]),
        )

    def reset(self) -> EnvState:
        self._t = 0
        self._residuals = []
        return self._state(0)

    def step(self, action_index: int) -> tuple[Transition, EnvState | None]:
        """Apply buffer level k; returns the transition and the next state,
        or None once the horizon is reached."""
        if self._t is None:
            raise EpisodeEndError("environment must be reset() before stepping")
        if self._t >= self.horizon:
            raise EpisodeEndError(f"episode already ended after {self.horizon} steps")
        if not 0 <= action_index < len(self.actions):
            raise InvalidActionError(
                f"action index {action_index} outside [0, {len(self.actions) - 1}]"
            )
        t = self._t
        state = self._state(t)
        forecast = float(self.forecasts[t])
        realized = float(self.realized[t])
        buffer_units = self.actions.buffer_units(action_index, forecast)
        reward = compute_reward(realized, forecast, buffer_units, self.reward_cfg)
        self._residuals.append(realized - forecast)
        self._t = t + 1
        next_state = self._state(self._t) if self._t < self.horizon else None
        return (
            Transition(
                state=state,
                action_index=action_index,
                buffer_units=buffer_units,
                reward=reward,
            ),
            next_state,
        )


def episode_from_profile(
    profile: StationProfile,
    forecast_fn: ForecastFn,
    actions: BufferActionSet,
    reward_cfg: RewardConfig,
    horizon: int,
    *,
    episode_seed: int | None = None,
    start_day: int = 0,
    warmup_days: int = 35,
) -> BufferEnv:
    """Episode over freshly generated station demand.

    Generates start_day + warmup_days + horizon days (so trend and regime
    shifts stay anchored to the profile's own day 0), forecasts the final
    warmup stretch to prime the residual history, then plays the last
    ``horizon`` days.
    """
    min_history = getattr(forecast_fn, "min_history", warmup_days)
    if warmup_days < min_history:
        raise ValueError(
            f"warmup_days={warmup_days} shorter than the forecaster's "
            f"required history ({min_history} days)"
        )
    gen_profile = profile if episode_seed is None else replace(profile, seed=episode_seed)
    total = start_day + warmup_days + horizon
    series = generate_series(gen_profile, total)
    values = series.values

    first = start_day + warmup_days
    forecasts = np.array(
        [forecast_fn(values, t, t) for t in range(first, first + horizon)]
    )
    prior_start = max(min_history, first - RESIDUAL_WINDOW)
    prior_residuals = [
        values[t] - forecast_fn(values, t, t) for t in range(prior_start, first)
    ]
    return BufferEnv(
        profile.station_id,
        values[first : first + horizon],
        np.maximum(forecasts, 0.0),
        actions,
        reward_cfg,
        day_offset=first,
        capacity_class=profile.capacity_class,
        obs_scale=profile.base_volume,
        prior_residuals=prior_residuals,
    )


def stationary_residual_env(
    residuals: Sequence[float],
    actions: BufferActionSet,
    reward_cfg: RewardConfig,
    horizon: int,
    *,
    forecast: float = 100.0,
    seed: int = 0,
    station_id: str = "synthetic",
) -> BufferEnv:
    """Constant forecast with residuals drawn uniformly from a fixed set.

    Realized demand is forecast + residual (floored at 0); the optimal fixed
    buffer is computable by enumeration, which makes this the reference
    environment for policy-learning checks.
    """
    if not residuals:
        raise ValueError("need at least one residual value")
    rng = np.random.default_rng(seed)
    draws = rng.choice(np.asarray(residuals, dtype=float), size=horizon, replace=True)
    realized = np.maximum(forecast + draws, 0.0)
    forecasts = np.full(horizon, float(forecast))
    return BufferEnv(
        station_id,
        realized,
        forecasts,
        actions,
        reward_cfg,
        obs_scale=max(forecast, 1.0),
    )
