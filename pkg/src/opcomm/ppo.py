"""Clipped-ratio policy optimization over the discrete buffer grid.

Policy and value networks are two-hidden-layer tanh perceptrons written
directly in numpy with hand-derived backpropagation, so analytic gradients
can be audited against central finite differences. Optimization is plain
fixed-step gradient ascent on the clipped surrogate plus an entropy bonus
(descent on squared error for the value net); adaptive moment estimation
is available behind ``PpoConfig.optimizer`` but off by default.

The probability ratio exp(log pi(a|s) - old_log_prob) is named rho
throughout to keep it apart from the reward r_t.

Observations are standardized by a running per-dimension normalizer that
is frozen during gradient steps (it only advances while collecting), and
value targets are standardized by a running scalar moment tracker so the
same step size works across stations of very different volume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ._docio import DocReader, ModelFormatError, check_header
from .env import BufferEnv, Transition

TrajectoryBatch = list[list[Transition]]

HIDDEN_SIZES = (32, 32)


class NumericalError(RuntimeError):
    """Training produced non-finite numbers; the offending update was rolled back."""


# --- tiny dense network with manual backprop ---


class Mlp:
    """Fully connected net, tanh hidden layers, linear output, float64."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None):
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = tuple(int(s) for s in sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes, self.sizes[1:]):
            if rng is None:
                W = np.zeros((fan_in, fan_out))
            else:
                W = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.weights.append(W)
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, X: np.ndarray) -> list[np.ndarray]:
        """All layer activations; [0] is the input, [-1] the linear output."""
        acts = [np.asarray(X, dtype=float)]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ W + b
            acts.append(np.tanh(z) if i < self.n_layers - 1 else z)
        return acts

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[-1]

    def backward(self, acts: list[np.ndarray], d_out: np.ndarray):
        """Gradients of a scalar with upstream d(scalar)/d(output) = d_out.

        Returns (d_weights, d_biases) lists matching self.weights/biases.
        """
        d_weights = [np.empty(0)] * self.n_layers
        d_biases = [np.empty(0)] * self.n_layers
        delta = np.asarray(d_out, dtype=float)
        for i in reversed(range(self.n_layers)):
            d_weights[i] = acts[i].T @ delta
            d_biases[i] = delta.sum(axis=0)
            if i > 0:
                # tanh'(z) = 1 - tanh(z)^2, and acts[i] already holds tanh(z)
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return d_weights, d_biases

    def step(self, d_weights, d_biases, scale: float):
        """params += scale * grads (caller chooses the sign)."""
        for W, dW in zip(self.weights, d_weights):
            W += scale * dW
        for b, db in zip(self.biases, d_biases):
            b += scale * db

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=float)
        pos = 0
        for a in self.arrays():
            a[...] = vec[pos : pos + a.size].reshape(a.shape)
            pos += a.size
        if pos != len(vec):
            raise ValueError(f"flat vector has {len(vec)} entries, network needs {pos}")

    def copy(self) -> "Mlp":
        clone = Mlp(self.sizes)
        clone.set_flat(self.get_flat())
        return clone


class RunningMoments:
    """Streaming per-dimension mean/variance (parallel-update form)."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 0.0

    def update(self, X: np.ndarray):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = len(X)
        if n == 0:
            return
        batch_mean = X.mean(axis=0)
        batch_var = X.var(axis=0)
        if self.count == 0.0:
            self.mean, self.var, self.count = batch_mean, batch_var, float(n)
            return
        total = self.count + n
        delta = batch_mean - self.mean
        m_a = self.var * self.count
        m_b = batch_var * n
        self.var = (m_a + m_b + delta**2 * self.count * n / total) / total
        self.mean = self.mean + delta * n / total
        self.count = total

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var + 1e-8)

    def normalize(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def denormalize(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) * self.std + self.mean


@dataclass
class PolicyBundle:
    """Policy/value networks plus the running statistics they depend on."""

    policy: Mlp
    value: Mlp
    obs_normalizer: RunningMoments
    return_scaler: RunningMoments
    n_actions: int
    meta: dict = field(default_factory=dict, repr=False)
    opt_state: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.policy.sizes[-1] != self.n_actions:
            raise ValueError(
                f"policy emits {self.policy.sizes[-1]} logits for {self.n_actions} actions"
            )
        if self.value.sizes[-1] != 1:
            raise ValueError("value network must emit a single output")
        if self.policy.sizes[0] != self.value.sizes[0]:
            raise ValueError("policy and value networks disagree on observation dim")
        for net in (self.policy, self.value):
            if not all(np.all(np.isfinite(a)) for a in net.arrays()):
                raise ValueError("non-finite network parameters")

    @property
    def obs_dim(self) -> int:
        return self.policy.sizes[0]

    @classmethod
    def create(
        cls,
        obs_dim: int,
        n_actions: int,
        seed: int = 0,
        hidden: Sequence[int] = HIDDEN_SIZES,
    ) -> "PolicyBundle":
        rng = np.random.default_rng(seed)
        policy = Mlp((obs_dim, *hidden, n_actions), rng)
        value = Mlp((obs_dim, *hidden, 1), rng)
        return cls(policy, value, RunningMoments(obs_dim), RunningMoments(1), n_actions)

    def values_for(self, obs_norm: np.ndarray) -> np.ndarray:
        """State values on the reward scale (the net itself works normalized)."""
        raw = self.value.predict(np.atleast_2d(obs_norm))[:, 0]
        return self.return_scaler.denormalize(raw[:, None])[:, 0]


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    epochs_per_update: int = 4
    minibatch_size: int = 64
    policy_step_size: float = 3e-3
    value_step_size: float = 1e-2
    entropy_coef: float = 0.01
    rollout_episodes: int = 8
    max_updates: int = 200
    optimizer: str = "sgd"

    def __post_init__(self):
        if not self.clip_epsilon > 0:
            raise ValueError(f"clip_epsilon must be > 0, got {self.clip_epsilon}")
        if not 0 < self.discount <= 1:
            raise ValueError(f"discount must be in (0,1], got {self.discount}")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError(f"gae_lambda must be in [0,1], got {self.gae_lambda}")
        if self.minibatch_size < 1:
            raise ValueError(f"minibatch_size must be >= 1, got {self.minibatch_size}")
        if self.epochs_per_update < 1 or self.rollout_episodes < 1 or self.max_updates < 0:
            raise ValueError("epoch/rollout/update counts out of range")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


# --- distributions ---


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def action_probs(bundle: PolicyBundle, observation: np.ndarray) -> np.ndarray:
    """Action distribution at one observation (normalizer applied, softmax'd)."""
    obs = np.asarray(observation, dtype=float)
    if obs.shape != (bundle.obs_dim,):
        raise ValueError(f"observation shape {obs.shape}, expected ({bundle.obs_dim},)")
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observation")
    logits = bundle.policy.predict(bundle.obs_normalizer.normalize(obs)[None, :])[0]
    return softmax(logits)


def greedy_action(bundle: PolicyBundle, observation: np.ndarray) -> int:
    return int(np.argmax(action_probs(bundle, observation)))


def sample_action(
    bundle: PolicyBundle, observation: np.ndarray, rng: np.random.Generator
) -> tuple[int, float, float]:
    """Draw an action; returns (action_index, log_prob, value_estimate)."""
    probs = action_probs(bundle, observation)
    a = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
    a = min(a, bundle.n_actions - 1)
    obs_norm = bundle.obs_normalizer.normalize(np.asarray(observation, dtype=float))
    value = float(bundle.values_for(obs_norm[None, :])[0])
    return a, float(np.log(probs[a])), value


# --- credit assignment ---


def compute_returns(batch: TrajectoryBatch, gamma: float) -> np.ndarray:
    """Discounted reward-to-go per transition, episodes flattened in order.

    Also writes ``return_to_go`` on each transition.
    """
    out = []
    for episode in batch:
        g = 0.0
        returns = [0.0] * len(episode)
        for t in reversed(range(len(episode))):
            g = episode[t].reward + gamma * g
            returns[t] = g
            episode[t].return_to_go = g
        out.extend(returns)
    return np.array(out)


def compute_gae(
    batch: TrajectoryBatch,
    gamma: float,
    lam: float,
    values: np.ndarray | None = None,
) -> np.ndarray:
    """Generalized advantage estimates, flattened in batch order.

    ``values`` optionally overrides the recorded value estimates (flat array
    aligned with the flattened batch). The value beyond the final step of an
    episode is 0. Also writes ``advantage`` on each transition.
    """
    n = sum(len(ep) for ep in batch)
    if values is None:
        values = np.array([tr.value_estimate for ep in batch for tr in ep])
    else:
        values = np.asarray(values, dtype=float)
        if values.shape != (n,):
            raise ValueError(f"values shape {values.shape}, expected ({n},)")
    out = np.empty(n)
    pos = 0
    for episode in batch:
        m = len(episode)
        v = values[pos : pos + m]
        adv = 0.0
        for t in reversed(range(m)):
            next_v = v[t + 1] if t + 1 < m else 0.0
            delta = episode[t].reward + gamma * next_v - v[t]
            adv = delta + gamma * lam * adv
            out[pos + t] = adv
            episode[t].advantage = adv
        pos += m
    return out


def clipped_objective(ratio, advantage, clip_epsilon: float):
    """min(rho*A, clip(rho, 1-eps, 1+eps)*A); vectorizes over the inputs."""
    rho = np.asarray(ratio, dtype=float)
    adv = np.asarray(advantage, dtype=float)
    clipped = np.clip(rho, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    out = np.minimum(rho * adv, clipped * adv)
    return float(out) if out.ndim == 0 else out


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy per row, in nats."""
    p = np.atleast_2d(probs)
    return -(p * np.log(np.maximum(p, 1e-300))).sum(axis=-1)


# --- objective and analytic gradients ---


def policy_objective_and_grads(
    policy: Mlp,
    obs_norm: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    clip_epsilon: float,
    entropy_coef: float,
):
    """Batch objective mean(clipped surrogate) + entropy_coef*mean(entropy),
    with its gradient w.r.t. the policy parameters.

    Returns (objective, d_weights, d_biases, stats dict).
    """
    acts = policy.forward(np.atleast_2d(obs_norm))
    logits = acts[-1]
    n, k = logits.shape
    probs = softmax(logits)
    logp = log_softmax(logits)
    rows = np.arange(n)
    logp_a = logp[rows, actions]
    rho = np.exp(logp_a - old_log_probs)

    clipped = np.clip(rho, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    surr1 = rho * advantages
    surr2 = clipped * advantages
    objective_terms = np.minimum(surr1, surr2)
    ent = entropy(probs)
    objective = float(objective_terms.mean() + entropy_coef * ent.mean())

    # d/dlogits of the surrogate: active only where the unclipped branch wins
    # (ties included); there d min/dlogits = A * rho * (onehot - probs).
    use_unclipped = surr1 <= surr2
    coef = np.where(use_unclipped, rho * advantages, 0.0) / n
    d_logits = -coef[:, None] * probs
    d_logits[rows, actions] += coef
    # entropy term: dH/dz_j = -p_j (log p_j + H)
    d_logits += (entropy_coef / n) * (-probs * (logp + ent[:, None]))

    d_weights, d_biases = policy.backward(acts, d_logits)
    stats = {
        "clip_fraction": float(np.mean(np.abs(rho - 1.0) > clip_epsilon)),
        "entropy": float(ent.mean()),
        "surrogate": float(objective_terms.mean()),
    }
    return objective, d_weights, d_biases, stats


def value_loss_and_grads(value: Mlp, obs_norm: np.ndarray, targets: np.ndarray):
    """Mean squared error of V(s) against targets, with parameter gradients."""
    acts = value.forward(np.atleast_2d(obs_norm))
    pred = acts[-1][:, 0]
    err = pred - np.asarray(targets, dtype=float)
    loss = float(np.mean(err**2))
    d_out = (2.0 / len(err)) * err[:, None]
    d_weights, d_biases = value.backward(acts, d_out)
    return loss, d_weights, d_biases


class _Adam:
    """Adaptive moment estimation state for one network."""

    def __init__(self, net: Mlp, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(a) for a in net.arrays()]
        self.v = [np.zeros_like(a) for a in net.arrays()]
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, net: Mlp, d_weights, d_biases, scale: float):
        """params += scale * adapted(grads); sign convention as Mlp.step."""
        grads = []
        for dW, db in zip(d_weights, d_biases):
            grads.append(dW)
            grads.append(db)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for a, g, m, v in zip(net.arrays(), grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            a += scale * m_hat / (np.sqrt(v_hat) + self.eps)


def _grads_finite(d_weights, d_biases) -> bool:
    return all(np.all(np.isfinite(g)) for g in d_weights) and all(
        np.all(np.isfinite(g)) for g in d_biases
    )


def ppo_update(
    bundle: PolicyBundle,
    batch: TrajectoryBatch,
    cfg: PpoConfig,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """One optimization phase over a collected batch (in place).

    Expects return_to_go and advantage to be populated (train_loop does
    this). Advantages are normalized here, per batch. Returns diagnostics
    averaged over all minibatch steps. On a non-finite gradient the whole
    update is rolled back and NumericalError is raised.
    """
    if not batch or not any(len(ep) for ep in batch):
        raise ValueError("empty trajectory batch")
    if rng is None:
        rng = np.random.default_rng(0)

    transitions = [tr for ep in batch for tr in ep]
    obs = np.array([tr.state.observation for tr in transitions])
    actions = np.array([tr.action_index for tr in transitions])
    old_log_probs = np.array([tr.old_log_prob for tr in transitions])
    returns = np.array([tr.return_to_go for tr in transitions])
    advantages = np.array([tr.advantage for tr in transitions])

    obs_norm = bundle.obs_normalizer.normalize(obs)
    advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    bundle.return_scaler.update(returns[:, None])
    targets = bundle.return_scaler.normalize(returns[:, None])[:, 0]

    snapshot = (bundle.policy.get_flat(), bundle.value.get_flat())
    if cfg.optimizer == "adam":
        if "policy" not in bundle.opt_state:
            bundle.opt_state["policy"] = _Adam(bundle.policy)
            bundle.opt_state["value"] = _Adam(bundle.value)
        adam_snapshot = bundle.opt_state.copy()

    n = len(transitions)
    mb = min(cfg.minibatch_size, n)
    totals = {"objective": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0}
    steps = 0
    try:
        for _ in range(cfg.epochs_per_update):
            order = rng.permutation(n)
            for start in range(0, n, mb):
                sel = order[start : start + mb]
                objective, dW_p, db_p, stats = policy_objective_and_grads(
                    bundle.policy,
                    obs_norm[sel],
                    actions[sel],
                    old_log_probs[sel],
                    advantages[sel],
                    cfg.clip_epsilon,
                    cfg.entropy_coef,
                )
                value_loss, dW_v, db_v = value_loss_and_grads(
                    bundle.value, obs_norm[sel], targets[sel]
                )
                if not (_grads_finite(dW_p, db_p) and _grads_finite(dW_v, db_v)):
                    raise NumericalError(
                        f"non-finite gradient at step {steps} "
                        f"(objective {objective}, value loss {value_loss})"
                    )
                if cfg.optimizer == "adam":
                    bundle.opt_state["policy"].step(bundle.policy, dW_p, db_p, cfg.policy_step_size)
                    bundle.opt_state["value"].step(bundle.value, dW_v, db_v, -cfg.value_step_size)
                else:
                    bundle.policy.step(dW_p, db_p, cfg.policy_step_size)
                    bundle.value.step(dW_v, db_v, -cfg.value_step_size)
                totals["objective"] += objective
                totals["value_loss"] += value_loss
                totals["entropy"] += stats["entropy"]
                totals["clip_fraction"] += stats["clip_fraction"]
                steps += 1
    except NumericalError:
        bundle.policy.set_flat(snapshot[0])
        bundle.value.set_flat(snapshot[1])
        if cfg.optimizer == "adam":
            bundle.opt_state.clear()
            bundle.opt_state.update(adam_snapshot)
        raise
    return {key: val / steps for key, val in totals.items()}


# --- training loop ---


@dataclass(frozen=True)
class UpdateStats:
    """One reward-curve row."""

    update: int
    mean_reward: float
    clip_fraction: float
    entropy: float
    objective: float
    value_loss: float


EnvFactory = Callable[[int, int], BufferEnv]


def collect_episode(
    env: BufferEnv, bundle: PolicyBundle, rng: np.random.Generator
) -> list[Transition]:
    """Roll one full episode with the current stochastic policy.

    The observation normalizer advances on every state visited.
    """
    episode: list[Transition] = []
    state = env.reset()
    while state is not None:
        bundle.obs_normalizer.update(state.observation[None, :])
        action, log_prob, value = sample_action(bundle, state.observation, rng)
        transition, state = env.step(action)
        transition.old_log_prob = log_prob
        transition.value_estimate = value
        episode.append(transition)
    return episode


def train_loop(
    env_factory: EnvFactory,
    bundle: PolicyBundle,
    cfg: PpoConfig,
    seed: int = 0,
) -> tuple[PolicyBundle, list[UpdateStats]]:
    """Alternate collection and optimization for cfg.max_updates rounds.

    env_factory(episode_index, episode_seed) must build a fresh episode
    environment; episode seeds derive from ``seed``, so two runs with the
    same seed produce identical reward curves.
    """
    root = np.random.SeedSequence(seed)
    action_rng = np.random.default_rng(root.spawn(1)[0])
    shuffle_rng = np.random.default_rng(root.spawn(1)[0])
    episode_seeds = np.random.default_rng(root.spawn(1)[0])

    curve: list[UpdateStats] = []
    episode_index = 0
    for update in range(cfg.max_updates):
        batch: TrajectoryBatch = []
        for _ in range(cfg.rollout_episodes):
            env_seed = int(episode_seeds.integers(0, 2**63 - 1))
            env = env_factory(episode_index, env_seed)
            batch.append(collect_episode(env, bundle, action_rng))
            episode_index += 1
        compute_returns(batch, cfg.discount)
        compute_gae(batch, cfg.discount, cfg.gae_lambda)
        diag = ppo_update(bundle, batch, cfg, rng=shuffle_rng)
        rewards = [tr.reward for ep in batch for tr in ep]
        curve.append(
            UpdateStats(
                update=update,
                mean_reward=float(np.mean(rewards)),
                clip_fraction=diag["clip_fraction"],
                entropy=diag["entropy"],
                objective=diag["objective"],
                value_loss=diag["value_loss"],
            )
        )
    return bundle, curve


def write_reward_curve(curve: Sequence[UpdateStats], path: str | Path, comment: str | None = None):
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("update,mean_reward,clip_fraction,entropy")
    for row in curve:
        lines.append(f"{row.update},{row.mean_reward!r},{row.clip_fraction!r},{row.entropy!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- persistence: same versioned text scheme as the forecaster models ---

_FORMAT_TAG = "opcomm-policy"
_FORMAT_VERSION = 1


def _emit_matrix(lines: list[str], name: str, arr: np.ndarray):
    arr = np.atleast_2d(arr)
    lines.append(f"matrix {name} {arr.shape[0]} {arr.shape[1]}")
    for row in arr:
        lines.append(" ".join(repr(float(v)) for v in row))


def _emit_net(lines: list[str], name: str, net: Mlp):
    lines.append(f"net {name} {' '.join(str(s) for s in net.sizes)}")
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        _emit_matrix(lines, f"{name}.W{i}", W)
        _emit_matrix(lines, f"{name}.b{i}", b)


def save_bundle(bundle: PolicyBundle, meta: Mapping[str, str] | None = None) -> str:
    lines = [f"{_FORMAT_TAG} v{_FORMAT_VERSION}"]
    for key, val in {**bundle.meta, **(meta or {})}.items():
        lines.append(f"meta {key} {val}")
    lines.append(f"n_actions {bundle.n_actions}")
    lines.append(f"obs_dim {bundle.obs_dim}")
    _emit_net(lines, "policy", bundle.policy)
    _emit_net(lines, "value", bundle.value)
    for name, mom in (("obs_normalizer", bundle.obs_normalizer), ("return_scaler", bundle.return_scaler)):
        _emit_matrix(lines, f"{name}.mean", mom.mean)
        _emit_matrix(lines, f"{name}.var", mom.var)
        lines.append(f"count {name} {mom.count!r}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def _read_matrix(reader: DocReader, name: str) -> np.ndarray:
    parts = reader.expect("matrix")
    if len(parts) != 3 or parts[0] != name:
        raise reader.error(f"expected matrix {name}, got {parts}")
    try:
        rows, cols = int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise reader.error(f"bad matrix shape {parts[1:]}") from exc
    return np.array([reader.floats(cols) for _ in range(rows)])


def _read_net(reader: DocReader, name: str) -> Mlp:
    parts = reader.expect("net")
    if not parts or parts[0] != name:
        raise reader.error(f"expected net {name}, got {parts}")
    try:
        sizes = tuple(int(p) for p in parts[1:])
    except ValueError as exc:
        raise reader.error(f"bad net sizes {parts[1:]}") from exc
    if len(sizes) < 2:
        raise reader.error(f"net {name} needs at least two layer sizes")
    net = Mlp(sizes)
    for i in range(net.n_layers):
        W = _read_matrix(reader, f"{name}.W{i}")
        b = _read_matrix(reader, f"{name}.b{i}")
        if W.shape != net.weights[i].shape or b.shape != (1, len(net.biases[i])):
            raise reader.error(f"layer {i} of net {name} has inconsistent shape")
        net.weights[i] = W
        net.biases[i] = b[0]
    return net


def _read_moments(reader: DocReader, name: str, dim: int) -> RunningMoments:
    mom = RunningMoments(dim)
    mean = _read_matrix(reader, f"{name}.mean")
    var = _read_matrix(reader, f"{name}.var")
    if mean.shape != (1, dim) or var.shape != (1, dim):
        raise reader.error(f"{name} moments have wrong dimension")
    parts = reader.expect("count")
    if len(parts) != 2 or parts[0] != name:
        raise reader.error(f"expected count {name}, got {parts}")
    mom.mean, mom.var, mom.count = mean[0], var[0], float(parts[1])
    return mom


def load_bundle(document: str) -> PolicyBundle:
    reader = DocReader(document)
    check_header(reader, _FORMAT_TAG, _FORMAT_VERSION)
    meta = reader.read_meta()
    n_actions = reader.scalar("n_actions", int)
    obs_dim = reader.scalar("obs_dim", int)
    policy = _read_net(reader, "policy")
    value = _read_net(reader, "value")
    obs_normalizer = _read_moments(reader, "obs_normalizer", obs_dim)
    return_scaler = _read_moments(reader, "return_scaler", 1)
    reader.expect("end")
    if policy.sizes[0] != obs_dim:
        raise ModelFormatError(f"policy input width {policy.sizes[0]} != obs_dim {obs_dim}")
    return PolicyBundle(policy, value, obs_normalizer, return_scaler, n_actions, meta=meta)


def save_bundle_file(bundle: PolicyBundle, path: str | Path, meta: Mapping[str, str] | None = None):
    Path(path).write_text(save_bundle(bundle, meta))


def load_bundle_file(path: str | Path) -> PolicyBundle:
    return load_bundle(Path(path).read_text())
