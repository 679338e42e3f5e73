"""Trajectory-prior MDP: state buffer, rewards, DQN training, rollouts."""

import numpy as np
import pytest
from scipy import stats

from trajbo import mdprior as mdp
from trajbo import priors

SINE_POOL = priors.synth_task_family("shifted-sine", 1, seed=0, n_points=200)[0]

FAST_CFG = mdp.DqnConfig(episode_len=20, history_k=5, max_epochs=120,
                         target_update_every=25, hidden=(64, 64),
                         min_buffer=300, gate_every=10, subset_size=40)

# Same recipe but no early exit, so the fixture agent gets the full budget.
FULL_CFG = mdp.DqnConfig(**{**FAST_CFG.__dict__, "gate_every": 10_000})


@pytest.fixture(scope="module")
def trained_sine_agent():
    """Full-budget agent for rollout-quality tests."""
    q, info = mdp.train_dqn(SINE_POOL, FULL_CFG, np.random.default_rng(0))
    return q, info


@pytest.fixture(scope="module")
def gated_sine_agent():
    """Agent returned by the early-stopping gate, for gate-contract tests."""
    q, info = mdp.train_dqn(SINE_POOL, FAST_CFG, np.random.default_rng(0))
    return q, info


def zero_qnet(d=1, k=3, hidden=(8, 8), out_bias=0.0):
    q = mdp.init_qnet(d, k, np.random.default_rng(0), hidden=hidden)
    for name in q.params:
        q.params[name] = np.zeros_like(q.params[name])
    q.params[f"l{len(hidden)}/b"][:] = out_bias
    return q


class TestState:
    def test_append_until_full_then_slide(self):
        state = mdp.empty_state(k=3, d=1)
        assert state.fill == 0
        for t in range(1, 4):
            state = mdp.state_append(state, [float(t)], t * 0.1, t / 5)
        assert state.fill == 3
        np.testing.assert_allclose(state.xs[:, 0], [1, 2, 3])
        state = mdp.state_append(state, [4.0], 0.4, 4 / 5)
        np.testing.assert_allclose(state.xs[:, 0], [2, 3, 4])
        assert state.fill == 3

    def test_last_k_in_order_after_long_run(self):
        state = mdp.empty_state(k=10, d=1)
        for t in range(1, 12):
            state = mdp.state_append(state, [float(t)], 0.0, t / 11)
        np.testing.assert_allclose(state.xs[:, 0], np.arange(2, 12))
        assert state.fill == 10

    def test_unfilled_slots_masked_and_zero(self):
        state = mdp.state_append(mdp.empty_state(3, 2), [0.5, 0.7], 1.0, 0.2)
        np.testing.assert_array_equal(state.mask, [1, 0, 0])
        assert (state.xs[1:] == 0).all() and (state.ys[1:] == 0).all()

    def test_flatten_width(self):
        state = mdp.empty_state(k=10, d=3)
        assert mdp.flatten_state(state).shape == (mdp.state_width(10, 3),)
        assert mdp.state_width(10, 3) == 10 * 5 + 10


class TestEnvStep:
    def test_reward_zero_at_optimum(self):
        best_idx = int(np.argmax(SINE_POOL.normalized))
        state = mdp.empty_state(3, 1)
        _, r = mdp.env_step(SINE_POOL, state, best_idx, 1, 20, 0.0,
                            np.random.default_rng(0))
        assert r == 0.0

    def test_reward_is_best_minus_one(self):
        state = mdp.empty_state(3, 1)
        idx = int(np.argmin(np.abs(SINE_POOL.normalized - 0.3)))
        _, r = mdp.env_step(SINE_POOL, state, idx, 1, 20, 0.0,
                            np.random.default_rng(0), best_prev=0.8)
        assert r == pytest.approx(-0.2)

    def test_action_vector_lookup(self):
        state = mdp.empty_state(3, 1)
        x = SINE_POOL.candidates[17]
        next_state, _ = mdp.env_step(SINE_POOL, state, x, 1, 20, 0.0,
                                     np.random.default_rng(0))
        np.testing.assert_allclose(next_state.xs[0], x)

    def test_unknown_action_rejected(self):
        state = mdp.empty_state(3, 1)
        with pytest.raises(ValueError, match="not a candidate"):
            mdp.env_step(SINE_POOL, state, np.array([17.5]), 1, 20, 0.0,
                         np.random.default_rng(0))

    def test_noise_hits_observation_not_reward(self):
        state = mdp.empty_state(3, 1)
        rng = np.random.default_rng(3)
        next_state, r = mdp.env_step(SINE_POOL, state, 10, 1, 20, 0.5, rng)
        assert next_state.ys[0] != SINE_POOL.normalized[10]
        assert r == pytest.approx(SINE_POOL.normalized[10] - 1.0)

    def test_reward_monotone_and_nonpositive(self):
        rng = np.random.default_rng(7)
        state = mdp.empty_state(5, 1)
        best = -np.inf
        rewards = []
        for t in range(1, 21):
            a = int(rng.integers(len(SINE_POOL.candidates)))
            state, r = mdp.env_step(SINE_POOL, state, a, t, 20, 0.0, rng,
                                    best_prev=best)
            best = r + 1.0
            rewards.append(r)
        assert all(r <= 0 for r in rewards)
        assert all(b >= a for a, b in zip(rewards, rewards[1:]))


class TestBellman:
    def test_done_returns_reward(self):
        q = zero_qnet(out_bias=5.0)
        t = mdp.bellman_target(-0.3, mdp.empty_state(3, 1), True, q,
                               SINE_POOL, np.arange(5), 0.98)
        assert t == -0.3

    def test_arithmetic(self):
        q = zero_qnet(out_bias=1.0)  # Q == 1 everywhere
        t = mdp.bellman_target(-0.5, mdp.empty_state(3, 1), False, q,
                               SINE_POOL, np.arange(5), 0.98)
        assert t == pytest.approx(0.48)

    def test_gamma_zero(self):
        q = zero_qnet(out_bias=123.0)
        t = mdp.bellman_target(-0.7, mdp.empty_state(3, 1), False, q,
                               SINE_POOL, np.arange(5), 0.0)
        assert t == pytest.approx(-0.7)

    def test_empty_subset_rejected(self):
        q = zero_qnet()
        with pytest.raises(ValueError, match="empty"):
            mdp.bellman_target(-0.5, mdp.empty_state(3, 1), False, q,
                               SINE_POOL, np.arange(0), 0.98)

    def test_gamma_range_checked(self):
        q = zero_qnet()
        with pytest.raises(ValueError, match="gamma"):
            mdp.bellman_target(0.0, mdp.empty_state(3, 1), False, q,
                               SINE_POOL, np.arange(5), 1.5)


class TestEpsilonGreedy:
    def test_uniform_at_eps_one(self):
        q = zero_qnet(k=3)
        subset = np.arange(40, 60)
        rng = np.random.default_rng(5)
        state = mdp.empty_state(3, 1)
        counts = np.zeros(20)
        for _ in range(10_000):
            a = mdp.epsilon_greedy_action(q, state, SINE_POOL, subset, 1.0, rng)
            counts[a - 40] += 1
        assert stats.chisquare(counts).pvalue > 0.01

    def test_greedy_deterministic(self):
        q, _ = mdp.init_qnet(1, 3, np.random.default_rng(2), hidden=(16,)), None
        state = mdp.empty_state(3, 1)
        subset = np.arange(0, 100, 7)
        picks = {mdp.epsilon_greedy_action(q, state, SINE_POOL, subset, 0.0,
                                           np.random.default_rng(i))
                 for i in range(5)}
        assert len(picks) == 1

    def test_constant_q_picks_lowest_index(self):
        q = zero_qnet(k=3)
        state = mdp.empty_state(3, 1)
        subset = np.array([90, 13, 55])
        a = mdp.epsilon_greedy_action(q, state, SINE_POOL, subset, 0.0,
                                      np.random.default_rng(0))
        assert a == 13


class TestReplayBuffer:
    def test_capacity_and_fifo_eviction(self):
        buf = mdp.ReplayBuffer(capacity=100, width=4)
        for i in range(105):
            buf.push(np.full(4, i), i, float(i), np.full(4, i), False, 0.0)
        assert buf.size == 100
        kept = sorted(buf.r[:buf.size])
        np.testing.assert_allclose(kept, np.arange(5, 105))


class TestTrainDqn:
    def test_small_pool_rejected(self):
        pool = priors.make_task_pool("tiny", np.arange(10)[:, None], np.arange(10.0))
        with pytest.raises(ValueError, match="at least 20"):
            mdp.train_dqn(pool, FAST_CFG, np.random.default_rng(0))

    def test_early_stop_waits_for_training(self, gated_sine_agent):
        """The gate must not fire before any gradient step has run."""
        q, info = gated_sine_agent
        assert info["gate_passed"], f"gate not passed in {info['epochs']} epochs"
        assert info["grad_steps"] > 0
        assert info["epochs"] < FAST_CFG.max_epochs

    def test_agent_beats_random_search(self, gated_sine_agent):
        """Gate oracle: greedy final regret beats paired random search."""
        q, info = gated_sine_agent
        rng = np.random.default_rng(99)
        greedy, rand = [], []
        for _ in range(20):
            seed = int(rng.integers(2**63))
            greedy.append(mdp.greedy_episode_final_reward(
                q, SINE_POOL, FAST_CFG, np.random.default_rng(seed)))
            rand.append(mdp.random_episode_final_reward(
                SINE_POOL, FAST_CFG, np.random.default_rng(seed)))
        assert np.mean(greedy) > np.mean(rand)

    def test_gate_flag_false_on_exhaustion(self):
        cfg = mdp.DqnConfig(episode_len=10, history_k=3, max_epochs=2,
                            hidden=(8,), min_buffer=5, gate_every=50)
        _, info = mdp.train_dqn(SINE_POOL, cfg, np.random.default_rng(1))
        assert info["gate_passed"] is False
        assert info["epochs"] == 2


class TestGenerateTrajectories:
    def test_identical_seeds_identical_rollouts(self, trained_sine_agent):
        q, _ = trained_sine_agent
        a = mdp.generate_trajectories(q, SINE_POOL, 5, T=15, k=5, eps=0.1,
                                      noise_std=0.0, rng=np.random.default_rng(4))
        b = mdp.generate_trajectories(q, SINE_POOL, 5, T=15, k=5, eps=0.1,
                                      noise_std=0.0, rng=np.random.default_rng(4))
        for ta, tb in zip(a, b):
            assert ta.xs.tobytes() == tb.xs.tobytes()
            assert ta.ys.tobytes() == tb.ys.tobytes()

    def test_greedy_rollouts_all_identical(self, trained_sine_agent):
        q, _ = trained_sine_agent
        trajs = mdp.generate_trajectories(q, SINE_POOL, 4, T=10, k=5, eps=0.0,
                                          noise_std=0.0,
                                          rng=np.random.default_rng(8))
        for t in trajs[1:]:
            np.testing.assert_array_equal(t.xs, trajs[0].xs)

    def test_noiseless_values_come_from_pool(self, trained_sine_agent):
        q, _ = trained_sine_agent
        trajs = mdp.generate_trajectories(q, SINE_POOL, 3, T=12, k=5, eps=0.5,
                                          noise_std=0.0,
                                          rng=np.random.default_rng(6))
        for t in trajs:
            assert np.isin(t.ys, SINE_POOL.normalized).all()
            np.testing.assert_allclose(t.ts, np.arange(1, 13) / 12)

    def test_trained_policy_dominates_random_rollouts(self, trained_sine_agent):
        """Mean best-so-far curve beats random search pointwise after burn-in."""
        q, _ = trained_sine_agent
        rng = np.random.default_rng(10)
        trajs = mdp.generate_trajectories(q, SINE_POOL, 100, T=15, k=5, eps=0.1,
                                          noise_std=0.0, rng=rng)
        dqn_best = np.maximum.accumulate(
            np.stack([t.ys for t in trajs]), axis=1).mean(axis=0)
        picks = rng.integers(len(SINE_POOL.candidates), size=(100, 15))
        rand_best = np.maximum.accumulate(
            SINE_POOL.normalized[picks], axis=1).mean(axis=0)
        assert (dqn_best[2:] >= rand_best[2:]).all()
