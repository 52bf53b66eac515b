import numpy as np
import pytest

from conftest import (
    clipped_objective_oracle,
    discounted_returns_oracle,
    fd_gradient,
    max_relative_error,
)
from opcomm.demand import BufferActionSet, RewardConfig
from opcomm.env import EnvState, Transition, stationary_residual_env
from opcomm.ppo import (
    Mlp,
    ModelFormatError,
    NumericalError,
    PolicyBundle,
    PpoConfig,
    RunningMoments,
    action_probs,
    clipped_objective,
    collect_episode,
    compute_gae,
    compute_returns,
    entropy,
    greedy_action,
    load_bundle,
    log_softmax,
    policy_objective_and_grads,
    ppo_update,
    sample_action,
    save_bundle,
    softmax,
    train_loop,
    value_loss_and_grads,
    write_reward_curve,
)


def make_transition(reward, value=0.0, obs=(0.0, 0.0, 0.0), action=0, log_prob=0.0):
    state = EnvState("S", 0, np.asarray(obs, dtype=float), 100.0)
    return Transition(
        state=state,
        action_index=action,
        buffer_units=0.0,
        reward=float(reward),
        old_log_prob=float(log_prob),
        value_estimate=float(value),
    )


def flat_grads(net: Mlp, d_weights, d_biases) -> np.ndarray:
    parts = []
    for dW, db in zip(d_weights, d_biases):
        parts.append(dW.ravel())
        parts.append(db.ravel())
    return np.concatenate(parts)


class TestMlp:
    def test_zero_init_predicts_zero(self):
        net = Mlp((4, 8, 2))
        assert np.all(net.predict(np.ones((3, 4))) == 0.0)

    def test_forward_shapes(self):
        net = Mlp((4, 8, 8, 2), np.random.default_rng(0))
        acts = net.forward(np.ones((5, 4)))
        assert [a.shape for a in acts] == [(5, 4), (5, 8), (5, 8), (5, 2)]

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        net = Mlp((3, 6, 2), rng)
        X = rng.normal(size=(7, 3))
        C = rng.normal(size=(7, 2))  # scalar = sum(out * C)

        def scalar_of(flat):
            clone = net.copy()
            clone.set_flat(flat)
            return float((clone.predict(X) * C).sum())

        acts = net.forward(X)
        d_weights, d_biases = net.backward(acts, C)
        analytic = flat_grads(net, d_weights, d_biases)
        numeric = fd_gradient(scalar_of, net.get_flat())
        assert max_relative_error(analytic, numeric) < 1e-6

    def test_flat_round_trip_and_copy_independence(self):
        net = Mlp((3, 5, 2), np.random.default_rng(2))
        flat = net.get_flat()
        clone = net.copy()
        clone.weights[0][0, 0] += 1.0
        assert np.array_equal(net.get_flat(), flat)
        with pytest.raises(ValueError):
            net.set_flat(flat[:-1])

    def test_bad_sizes_rejected(self):
        with pytest.raises(ValueError):
            Mlp((4,))
        with pytest.raises(ValueError):
            Mlp((4, 0, 2))


class TestRunningMoments:
    def test_matches_batch_statistics(self):
        rng = np.random.default_rng(3)
        chunks = [rng.normal(loc=5.0, scale=2.0, size=(n, 3)) for n in (1, 7, 20, 2)]
        mom = RunningMoments(3)
        for chunk in chunks:
            mom.update(chunk)
        X = np.vstack(chunks)
        assert np.allclose(mom.mean, X.mean(axis=0), atol=1e-12)
        assert np.allclose(mom.var, X.var(axis=0), atol=1e-12)
        assert mom.count == len(X)

    def test_normalize_denormalize_inverse(self):
        mom = RunningMoments(2)
        mom.update(np.random.default_rng(4).normal(size=(50, 2)))
        X = np.array([[1.0, -2.0], [0.5, 3.0]])
        assert np.allclose(mom.denormalize(mom.normalize(X)), X)

    def test_fresh_normalizer_is_identity_like(self):
        mom = RunningMoments(2)
        X = np.array([[1.0, 2.0]])
        assert np.allclose(mom.normalize(X), X, atol=1e-4)


class TestPolicyBundle:
    def test_create_shapes(self):
        bundle = PolicyBundle.create(6, 3, seed=0)
        assert bundle.obs_dim == 6
        assert bundle.policy.sizes == (6, 32, 32, 3)
        assert bundle.value.sizes == (6, 32, 32, 1)

    def test_mismatched_networks_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            PolicyBundle(
                Mlp((6, 8, 4), rng), Mlp((6, 8, 1), rng),
                RunningMoments(6), RunningMoments(1), n_actions=3,
            )
        with pytest.raises(ValueError):
            PolicyBundle(
                Mlp((6, 8, 3), rng), Mlp((6, 8, 2), rng),
                RunningMoments(6), RunningMoments(1), n_actions=3,
            )


class TestPpoConfig:
    def test_zero_clip_rejected(self):
        with pytest.raises(ValueError):
            PpoConfig(clip_epsilon=0.0)

    def test_discount_and_lambda_ranges(self):
        with pytest.raises(ValueError):
            PpoConfig(discount=0.0)
        with pytest.raises(ValueError):
            PpoConfig(gae_lambda=1.5)
        PpoConfig(discount=1.0, gae_lambda=1.0)  # boundary values are legal

    def test_optimizer_whitelist(self):
        with pytest.raises(ValueError):
            PpoConfig(optimizer="rmsprop")


class TestDistributions:
    def test_softmax_rows_sum_to_one(self):
        logits = np.random.default_rng(5).normal(size=(4, 6))
        p = softmax(logits)
        assert np.allclose(p.sum(axis=-1), 1.0)
        assert np.allclose(np.log(p), log_softmax(logits))

    def test_softmax_stable_for_huge_logits(self):
        p = softmax(np.array([1000.0, 1000.0, 0.0]))
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(0.5)

    def test_entropy_bounds(self):
        k = 5
        assert entropy(np.full(k, 1.0 / k))[0] == pytest.approx(np.log(k))
        assert entropy(np.array([1.0, 0.0, 0.0]))[0] == pytest.approx(0.0)

    def test_action_probs_and_greedy(self):
        bundle = PolicyBundle.create(4, 3, seed=1)
        obs = np.array([0.1, -0.2, 0.3, 0.0])
        p = action_probs(bundle, obs)
        assert p.shape == (3,)
        assert p.sum() == pytest.approx(1.0)
        assert greedy_action(bundle, obs) == int(np.argmax(p))
        with pytest.raises(ValueError):
            action_probs(bundle, np.zeros(5))
        with pytest.raises(ValueError):
            action_probs(bundle, np.array([np.nan, 0, 0, 0]))

    def test_sample_action_reproducible_and_consistent(self):
        bundle = PolicyBundle.create(4, 3, seed=2)
        obs = np.array([0.5, 0.5, -0.5, 0.0])
        a1, lp1, v1 = sample_action(bundle, obs, np.random.default_rng(9))
        a2, lp2, v2 = sample_action(bundle, obs, np.random.default_rng(9))
        assert (a1, lp1, v1) == (a2, lp2, v2)
        p = action_probs(bundle, obs)
        assert lp1 == pytest.approx(np.log(p[a1]))

    def test_sample_frequencies_track_probabilities(self):
        bundle = PolicyBundle.create(3, 3, seed=3)
        obs = np.array([1.0, 0.0, -1.0])
        p = action_probs(bundle, obs)
        rng = np.random.default_rng(10)
        draws = np.array([sample_action(bundle, obs, rng)[0] for _ in range(4000)])
        freq = np.bincount(draws, minlength=3) / len(draws)
        assert np.all(np.abs(freq - p) < 0.04)


class TestCreditAssignment:
    def test_returns_match_forward_oracle(self):
        rng = np.random.default_rng(11)
        gamma = 0.97
        batch = [
            [make_transition(r) for r in rng.normal(size=rng.integers(1, 15))]
            for _ in range(8)
        ]
        got = compute_returns(batch, gamma)
        want = []
        for ep in batch:
            want.extend(discounted_returns_oracle([tr.reward for tr in ep], gamma))
        assert np.allclose(got, want, rtol=0, atol=1e-10)
        assert got[0] == batch[0][0].return_to_go

    def test_gae_hand_computed_two_steps(self):
        ep = [make_transition(1.0, value=0.5), make_transition(2.0, value=0.25)]
        adv = compute_gae([ep], gamma=0.9, lam=0.8)
        d1 = 2.0 + 0.0 - 0.25
        d0 = 1.0 + 0.9 * 0.25 - 0.5
        assert adv[1] == pytest.approx(d1)
        assert adv[0] == pytest.approx(d0 + 0.9 * 0.8 * d1)
        assert ep[0].advantage == adv[0]

    def test_gae_reduces_to_return_minus_value(self):
        rng = np.random.default_rng(12)
        batch = []
        for _ in range(50):
            n = int(rng.integers(1, 20))
            batch.append(
                [make_transition(rng.normal(), value=rng.normal()) for _ in range(n)]
            )
        returns = compute_returns(batch, gamma=1.0)
        adv = compute_gae(batch, gamma=1.0, lam=1.0)
        values = np.array([tr.value_estimate for ep in batch for tr in ep])
        assert np.max(np.abs(adv - (returns - values))) < 1e-10

    def test_gae_values_override_shape_checked(self):
        batch = [[make_transition(1.0)]]
        compute_gae(batch, 0.9, 0.9, values=np.array([0.3]))
        with pytest.raises(ValueError):
            compute_gae(batch, 0.9, 0.9, values=np.zeros(2))


class TestClippedObjective:
    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(13)
        for eps in (0.0, 0.1, 0.2, 0.5):
            rho = rng.uniform(0.0, 2.5, size=200)
            adv = rng.normal(size=200)
            got = clipped_objective(rho, adv, eps)
            want = [clipped_objective_oracle(r, a, eps) for r, a in zip(rho, adv)]
            assert np.array_equal(got, np.array(want))

    def test_scalar_inputs_return_float(self):
        assert isinstance(clipped_objective(1.3, 2.0, 0.2), float)
        assert clipped_objective(1.3, 2.0, 0.2) == pytest.approx(1.2 * 2.0)

    def test_pessimistic_bound(self):
        # clipped objective never exceeds either branch
        rng = np.random.default_rng(14)
        rho = rng.uniform(0, 3, 100)
        adv = rng.normal(size=100)
        out = clipped_objective(rho, adv, 0.2)
        assert np.all(out <= rho * adv + 1e-15)


class TestAnalyticGradients:
    def random_instance(self, rng, obs_dim, n_actions, n=12):
        policy = Mlp((obs_dim, 8, 8, n_actions), rng)
        obs = rng.normal(size=(n, obs_dim))
        actions = rng.integers(0, n_actions, size=n)
        logp = log_softmax(policy.predict(obs))
        # old log probs near but not equal to current: ratios straddle 1
        old_lp = logp[np.arange(n), actions] + rng.uniform(-0.3, 0.3, size=n)
        adv = rng.normal(size=n)
        return policy, obs, actions, old_lp, adv

    def test_policy_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        for _ in range(6):
            obs_dim = int(rng.integers(3, 7))
            n_actions = int(rng.integers(3, 9))
            policy, obs, actions, old_lp, adv = self.random_instance(rng, obs_dim, n_actions)

            def objective_of(flat):
                clone = policy.copy()
                clone.set_flat(flat)
                obj, _, _, _ = policy_objective_and_grads(
                    clone, obs, actions, old_lp, adv, 0.2, 0.05
                )
                return obj

            obj, dW, db, stats = policy_objective_and_grads(
                policy, obs, actions, old_lp, adv, 0.2, 0.05
            )
            analytic = flat_grads(policy, dW, db)
            numeric = fd_gradient(objective_of, policy.get_flat())
            assert max_relative_error(analytic, numeric) < 1e-4
            assert 0.0 <= stats["clip_fraction"] <= 1.0

    def test_value_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(16)
        value = Mlp((5, 8, 8, 1), rng)
        obs = rng.normal(size=(10, 5))
        targets = rng.normal(size=10)

        def loss_of(flat):
            clone = value.copy()
            clone.set_flat(flat)
            loss, _, _ = value_loss_and_grads(clone, obs, targets)
            return loss

        _, dW, db = value_loss_and_grads(value, obs, targets)
        analytic = flat_grads(value, dW, db)
        numeric = fd_gradient(loss_of, value.get_flat())
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_zero_clip_window_kills_the_gradient(self):
        """With clip_epsilon=0 the clipped branch wins everywhere when
        positive-advantage ratios sit above 1 and negative ones below, so the
        surrogate gradient is exactly zero."""
        rng = np.random.default_rng(17)
        policy = Mlp((4, 8, 3), rng)
        obs = rng.normal(size=(8, 4))
        actions = rng.integers(0, 3, size=8)
        logp = log_softmax(policy.predict(obs))[np.arange(8), actions]
        adv = np.where(np.arange(8) % 2 == 0, 1.5, -2.0)
        # rho = exp(logp - old) > 1 where adv > 0, < 1 where adv < 0
        old_lp = logp - np.where(adv > 0, 0.2, -0.2)
        obj, dW, db, _ = policy_objective_and_grads(
            policy, obs, actions, old_lp, adv, clip_epsilon=0.0, entropy_coef=0.0
        )
        assert obj == pytest.approx(float(adv.mean()))
        for g in (*dW, *db):
            assert np.all(g == 0.0)


class TestPpoUpdate:
    def synthetic_batch(self, bundle, n=40):
        obs = np.array([0.3, -0.1, 0.2])
        episode = []
        for i in range(n):
            action = i % 2
            p = action_probs(bundle, obs)
            tr = make_transition(
                reward=0.0, value=0.0, obs=obs, action=action,
                log_prob=float(np.log(p[action])),
            )
            tr.advantage = 1.0 if action == 1 else -1.0
            tr.return_to_go = float(np.random.default_rng(i).normal())
            episode.append(tr)
        return [episode]

    def test_update_moves_probability_toward_positive_advantage(self):
        bundle = PolicyBundle.create(3, 2, seed=20)
        obs = np.array([0.3, -0.1, 0.2])
        before = action_probs(bundle, obs)[1]
        cfg = PpoConfig(epochs_per_update=4, minibatch_size=16, policy_step_size=0.05)
        diag = ppo_update(bundle, self.synthetic_batch(bundle), cfg)
        after = action_probs(bundle, obs)[1]
        assert after > before
        assert set(diag) == {"objective", "value_loss", "entropy", "clip_fraction"}

    def test_nonfinite_gradient_rolls_back_and_raises(self, monkeypatch):
        import opcomm.ppo as ppo_mod

        bundle = PolicyBundle.create(3, 2, seed=21)
        batch = self.synthetic_batch(bundle)
        policy_before = bundle.policy.get_flat().copy()
        value_before = bundle.value.get_flat().copy()

        real = ppo_mod.value_loss_and_grads

        def poisoned(value, obs_norm, targets):
            loss, dW, db = real(value, obs_norm, targets)
            dW = [g * np.nan for g in dW]
            return loss, dW, db

        monkeypatch.setattr(ppo_mod, "value_loss_and_grads", poisoned)
        with pytest.raises(NumericalError):
            ppo_update(bundle, batch, PpoConfig())
        assert np.array_equal(bundle.policy.get_flat(), policy_before)
        assert np.array_equal(bundle.value.get_flat(), value_before)

    def test_adam_optimizer_path(self):
        bundle = PolicyBundle.create(3, 2, seed=22)
        before = bundle.policy.get_flat().copy()
        cfg = PpoConfig(optimizer="adam", epochs_per_update=2, minibatch_size=16)
        ppo_update(bundle, self.synthetic_batch(bundle), cfg)
        assert not np.array_equal(bundle.policy.get_flat(), before)
        assert "policy" in bundle.opt_state

    def test_empty_batch_rejected(self):
        bundle = PolicyBundle.create(3, 2, seed=23)
        with pytest.raises(ValueError):
            ppo_update(bundle, [], PpoConfig())


ACTIONS = BufferActionSet(percents=(0.0, 5.0, 10.0))
REWARD = RewardConfig(alpha=3.0, beta=1.0)


def env_factory(episode_index, episode_seed):
    del episode_index
    return stationary_residual_env(
        (-5.0, 0.0, 5.0), ACTIONS, REWARD, horizon=10, seed=episode_seed
    )


class TestCollectionAndLoop:
    def test_collect_episode_fills_policy_fields(self):
        bundle = PolicyBundle.create(6, 3, seed=24)
        env = env_factory(0, 7)
        episode = collect_episode(env, bundle, np.random.default_rng(0))
        assert len(episode) == env.horizon
        assert bundle.obs_normalizer.count == env.horizon
        for tr in episode:
            assert tr.old_log_prob < 0.0
            assert np.isfinite(tr.value_estimate)

    def test_train_loop_deterministic_per_seed(self):
        cfg = PpoConfig(max_updates=3, rollout_episodes=2, minibatch_size=16)
        runs = []
        for _ in range(2):
            bundle = PolicyBundle.create(6, 3, seed=30)
            bundle, curve = train_loop(env_factory, bundle, cfg, seed=77)
            runs.append((save_bundle(bundle), curve))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]
        assert [row.update for row in runs[0][1]] == [0, 1, 2]

    def test_train_seed_changes_trajectories(self):
        cfg = PpoConfig(max_updates=2, rollout_episodes=2, minibatch_size=16)
        curves = []
        for seed in (1, 2):
            bundle = PolicyBundle.create(6, 3, seed=30)
            _, curve = train_loop(env_factory, bundle, cfg, seed=seed)
            curves.append(curve)
        assert curves[0] != curves[1]

    def test_reward_curve_file_format(self, tmp_path):
        curve = [
            # update, mean_reward, clip_fraction, entropy, objective, value_loss
            __import__("opcomm.ppo", fromlist=["UpdateStats"]).UpdateStats(
                0, -5.125, 0.25, 1.0986122886681098, 0.1, 2.0
            )
        ]
        path = tmp_path / "curve.csv"
        write_reward_curve(curve, path, comment="config_hash=beef seed=1")
        lines = path.read_text().splitlines()
        assert lines[0] == "# config_hash=beef seed=1"
        assert lines[1] == "update,mean_reward,clip_fraction,entropy"
        update, mean_reward, clip_fraction, ent = lines[2].split(",")
        assert int(update) == 0
        assert float(mean_reward) == -5.125
        assert float(clip_fraction) == 0.25
        assert float(ent) == 1.0986122886681098


class TestBundlePersistence:
    def trained_bundle(self):
        bundle = PolicyBundle.create(6, 3, seed=40)
        cfg = PpoConfig(max_updates=2, rollout_episodes=2, minibatch_size=16)
        bundle, _ = train_loop(env_factory, bundle, cfg, seed=5)
        bundle.meta["config_hash"] = "cafe"
        return bundle

    def test_round_trip_bit_exact(self):
        bundle = self.trained_bundle()
        loaded = load_bundle(save_bundle(bundle))
        rng = np.random.default_rng(41)
        for _ in range(5):
            obs = rng.normal(size=6)
            assert np.array_equal(action_probs(loaded, obs), action_probs(bundle, obs))
            obs_n = loaded.obs_normalizer.normalize(obs)
            assert np.array_equal(
                loaded.values_for(obs_n[None, :]), bundle.values_for(obs_n[None, :])
            )
        assert loaded.meta == bundle.meta
        assert loaded.obs_normalizer.count == bundle.obs_normalizer.count

    def test_document_stable_under_reserialization(self):
        doc = save_bundle(self.trained_bundle())
        assert save_bundle(load_bundle(doc)) == doc

    def test_wrong_tag_rejected(self):
        with pytest.raises(ModelFormatError):
            load_bundle("opcomm-gbt v1\nend\n")

    def test_truncated_document_reports_line(self):
        doc = save_bundle(self.trained_bundle())
        truncated = "\n".join(doc.splitlines()[:8]) + "\n"
        with pytest.raises(ModelFormatError, match="line"):
            load_bundle(truncated)

    def test_corrupt_matrix_row_rejected(self):
        doc = save_bundle(self.trained_bundle())
        lines = doc.splitlines()
        matrix_at = next(i for i, l in enumerate(lines) if l.startswith("matrix"))
        lines[matrix_at + 1] = lines[matrix_at + 1] + " 1.0"  # extra column
        with pytest.raises(ModelFormatError):
            load_bundle("\n".join(lines) + "\n")
