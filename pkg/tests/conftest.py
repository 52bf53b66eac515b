"""Shared independent oracles for the test suite.

Each oracle re-derives a quantity through a different code path than the
library (branchy scalar logic, brute-force enumeration, finite differences)
so agreement is evidence, not tautology.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def reward_oracle(realized: float, forecast: float, buffer_units: float, alpha: float, beta: float) -> float:
    """Branchy re-derivation of the asymmetric penalty (single gap variable)."""
    gap = realized - forecast - buffer_units
    if gap > 0:
        return -alpha * gap
    if gap < 0:
        return -beta * -gap
    return 0.0


def clipped_objective_oracle(rho: float, adv: float, eps: float) -> float:
    """Hand substitution: clamp with if/else instead of np.clip."""
    if rho < 1.0 - eps:
        clamped = 1.0 - eps
    elif rho > 1.0 + eps:
        clamped = 1.0 + eps
    else:
        clamped = rho
    return min(rho * adv, clamped * adv)


def fd_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(len(x)):
        up = x.copy()
        dn = x.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (fn(up) - fn(dn)) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def exhaustive_best_split(
    X: np.ndarray,
    residuals: np.ndarray,
    idx: np.ndarray,
    boundaries: list[np.ndarray],
    min_samples_leaf: int,
    l2_lambda: float,
):
    """Brute-force split search over the given candidate thresholds.

    Scores every (feature, threshold) by direct subsetting, no histograms.
    Ties break toward the lower feature index, then the lower threshold.
    Returns (gain, feature, threshold_position) or None.
    """
    res = residuals[idx]
    n = len(idx)
    if n < 2 * min_samples_leaf:
        return None
    parent = res.sum() ** 2 / (n + l2_lambda)
    best = None
    for f in range(X.shape[1]):
        col = X[idx, f]
        for j, thr in enumerate(boundaries[f]):
            go_left = col <= thr
            nl = int(go_left.sum())
            nr = n - nl
            if nl < min_samples_leaf or nr < min_samples_leaf:
                continue
            gl = res[go_left].sum()
            gr = res[~go_left].sum()
            gain = gl * gl / (nl + l2_lambda) + gr * gr / (nr + l2_lambda) - parent
            if gain > 0.0 and (best is None or gain > best[0]):
                best = (gain, f, j)
    return best


def subset_value_fn(predict_fn, x: np.ndarray, background: np.ndarray):
    """v(S): background-mean prediction with features in S pinned to x,
    computed one composite row at a time (no batching tricks)."""
    d = len(x)

    def v(subset: frozenset) -> float:
        total = 0.0
        for row in background:
            z = np.array([x[i] if i in subset else row[i] for i in range(d)])
            total += float(predict_fn(z[None, :])[0])
        return total / len(background)

    return v


def permutation_shap_oracle(predict_fn, x: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Average marginal contribution over all d! orderings (d small)."""
    d = len(x)
    v = subset_value_fn(predict_fn, x, background)
    cache: dict[frozenset, float] = {}

    def value(subset: frozenset) -> float:
        if subset not in cache:
            cache[subset] = v(subset)
        return cache[subset]

    phis = np.zeros(d)
    n_perm = 0
    for perm in itertools.permutations(range(d)):
        n_perm += 1
        acc: frozenset = frozenset()
        for i in perm:
            with_i = acc | {i}
            phis[i] += value(with_i) - value(acc)
            acc = with_i
    return phis / n_perm


def expected_rewards_by_action(
    residuals, percents, forecast: float, alpha: float, beta: float
) -> list[float]:
    """Enumeration of action x residual outcomes with the branchy oracle."""
    out = []
    for p in percents:
        b = p / 100.0 * forecast
        total = 0.0
        for r in residuals:
            total += reward_oracle(forecast + r, forecast, b, alpha, beta)
        out.append(total / len(residuals))
    return out


def optimal_buffer_index(residuals, percents, forecast, alpha, beta) -> int:
    """Brute-force best fixed action; ties go to the smaller buffer."""
    rewards = expected_rewards_by_action(residuals, percents, forecast, alpha, beta)
    best = 0
    for k in range(1, len(rewards)):
        if rewards[k] > rewards[best]:
            best = k
    return best


def discounted_returns_oracle(rewards, gamma: float) -> list[float]:
    """Forward-summed G_t = sum_k gamma^k r_{t+k} (library sums backward)."""
    n = len(rewards)
    return [
        math.fsum(gamma**k * rewards[t + k] for k in range(n - t)) for t in range(n)
    ]
