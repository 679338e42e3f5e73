"""Trajectory prior over discrete pools: environment, per-task DQN, rollouts.

Each source task becomes an episodic MDP whose state is a ring buffer of the
last k evaluations and whose reward is the negative simple regret on
normalized values.  A small Q-network trained per task yields the behavior
policy that generates trajectory data for surrogate fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .priors import TaskPool


@dataclass(frozen=True)
class MdpState:
    """Last-k evaluation history (x, y, t/T), zero-padded with a validity mask."""

    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    mask: np.ndarray

    @property
    def fill(self) -> int:
        return int(self.mask.sum())


def empty_state(k: int, d: int) -> MdpState:
    return MdpState(np.zeros((k, d)), np.zeros(k), np.zeros(k), np.zeros(k))


def state_append(state: MdpState, x, y: float, t_frac: float) -> MdpState:
    """Append a triple, dropping the oldest entry once the buffer is full."""
    k = len(state.ys)
    fill = state.fill
    xs, ys = state.xs.copy(), state.ys.copy()
    ts, mask = state.ts.copy(), state.mask.copy()
    if fill < k:
        idx = fill
    else:
        xs[:-1], ys[:-1], ts[:-1] = xs[1:], ys[1:], ts[1:]
        idx = k - 1
    xs[idx], ys[idx], ts[idx], mask[idx] = x, y, t_frac, 1.0
    return MdpState(xs, ys, ts, mask)


def flatten_state(state: MdpState) -> np.ndarray:
    return np.concatenate([state.xs.ravel(), state.ys, state.ts, state.mask])


def state_width(k: int, d: int) -> int:
    return k * (d + 2) + k


# ---------------------------------------------------------------------------
# Q-network


@dataclass
class QNet:
    """Joint (state, action) -> scalar value MLP for one task dimension."""

    params: dict[str, np.ndarray]
    k: int
    d: int
    hidden: tuple[int, ...]


def init_qnet(d: int, k: int, rng: np.random.Generator,
              hidden=(200, 200, 200, 200)) -> QNet:
    sizes = [state_width(k, d) + d, *hidden, 1]
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        params[f"l{i}/w"] = rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in)
        params[f"l{i}/b"] = np.zeros(fan_out)
    return QNet(params, k, d, tuple(hidden))


def qnet_forward_np(params: dict, inputs: np.ndarray) -> np.ndarray:
    """Fast inference path: plain numpy ReLU MLP, returns (n,) values."""
    h = inputs
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = h @ params[f"l{i}/w"] + params[f"l{i}/b"]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h[:, 0]


def _qnet_forward_nd(params: dict, inputs: np.ndarray) -> nd.Tensor:
    h = nd.constant(inputs)
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = nd.add(nd.matmul(h, params[f"l{i}/w"]), params[f"l{i}/b"])
        if i < n_layers - 1:
            h = nd.relu(h)
    return nd.reshape(h, (inputs.shape[0],))


def q_values(net_params: dict, flat_states: np.ndarray, task: TaskPool,
             cand_idx: np.ndarray) -> np.ndarray:
    """Q for every (state, candidate) pair: (n_states, n_candidates)."""
    flat_states = np.atleast_2d(flat_states)
    actions = task.candidates[cand_idx]
    n_s, n_a = len(flat_states), len(actions)
    inputs = np.concatenate([
        np.repeat(flat_states, n_a, axis=0),
        np.tile(actions, (n_s, 1)),
    ], axis=1)
    return qnet_forward_np(net_params, inputs).reshape(n_s, n_a)


# ---------------------------------------------------------------------------
# environment


def _action_index(task: TaskPool, action) -> int:
    if np.isscalar(action) or getattr(action, "ndim", 1) == 0:
        idx = int(action)
        if not 0 <= idx < len(task.candidates):
            raise ValueError(f"action index {idx} outside pool of {len(task.candidates)}")
        return idx
    matches = np.flatnonzero((task.candidates == np.asarray(action)).all(axis=1))
    if len(matches) == 0:
        raise ValueError("action is not a candidate of this task pool")
    return int(matches[0])


def env_step(task: TaskPool, state: MdpState, action, t: int, T: int,
             noise_std: float, rng: np.random.Generator,
             best_prev: float = -np.inf) -> tuple[MdpState, float]:
    """Evaluate one action: returns the next state and the reward.

    The observation entering the state may carry Gaussian noise; the reward
    is the negative simple regret on noiseless normalized values, so it
    equals best-so-far minus 1 and the caller can thread best_prev forward
    as reward + 1.
    """
    idx = _action_index(task, action)
    f_val = float(task.normalized[idx])
    y_obs = f_val + (noise_std * rng.standard_normal() if noise_std > 0 else 0.0)
    next_state = state_append(state, task.candidates[idx], y_obs, t / T)
    reward = max(best_prev, f_val) - 1.0
    return next_state, reward


def bellman_target(r: float, next_state: MdpState, done: bool, q_target: QNet,
                   task: TaskPool, cand_idx: np.ndarray, gamma: float) -> float:
    """r if terminal, else r + gamma * max Q over the candidate subset."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma {gamma} outside [0, 1]")
    if done:
        return float(r)
    if len(cand_idx) == 0:
        raise ValueError("bellman_target: empty candidate subset")
    best = q_values(q_target.params, flatten_state(next_state), task, cand_idx).max()
    return float(r + gamma * best)


def epsilon_greedy_action(q: QNet, state: MdpState, task: TaskPool,
                          cand_idx: np.ndarray, eps: float,
                          rng: np.random.Generator) -> int:
    """Pick a candidate index; greedy ties go to the lowest candidate index."""
    if len(cand_idx) == 0:
        raise ValueError("epsilon_greedy_action: empty candidate subset")
    if eps > 0 and rng.uniform() < eps:
        return int(cand_idx[rng.integers(len(cand_idx))])
    cand_idx = np.sort(np.asarray(cand_idx))
    vals = q_values(q.params, flatten_state(state), task, cand_idx)[0]
    return int(cand_idx[int(np.argmax(vals))])


# ---------------------------------------------------------------------------
# replay buffer


@dataclass
class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with cached regression targets."""

    capacity: int
    width: int
    size: int = 0
    head: int = 0

    def __post_init__(self):
        cap, w = self.capacity, self.width
        self.s = np.zeros((cap, w))
        self.a = np.zeros(cap, dtype=np.int64)
        self.r = np.zeros(cap)
        self.s_next = np.zeros((cap, w))
        self.done = np.zeros(cap, dtype=bool)
        self.target = np.zeros(cap)

    def push(self, s, a, r, s_next, done, target):
        i = self.head
        self.s[i], self.a[i], self.r[i] = s, a, r
        self.s_next[i], self.done[i], self.target[i] = s_next, done, target
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def refresh_targets(self, q_target: QNet, task: TaskPool, cand_idx, gamma):
        """Recompute cached targets after a target-network or subset swap."""
        if self.size == 0:
            return
        live = slice(0, self.size)
        best = q_values(q_target.params, self.s_next[live], task, cand_idx).max(axis=1)
        self.target[live] = np.where(self.done[live], self.r[live],
                                     self.r[live] + gamma * best)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class DqnConfig:
    """Per-task agent settings; defaults are the full-scale recipe."""

    episode_len: int = 40
    history_k: int = 10
    max_epochs: int = 250
    target_update_every: int = 50
    gamma: float = 0.98
    replay_capacity: int = 10_000
    lr: float = 1e-3
    hidden: tuple[int, ...] = (200, 200, 200, 200)
    minibatch: int = 64
    min_buffer: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_anneal_epochs: int = 100
    noise_std: float = 0.0
    gate_every: int = 10
    gate_episodes: int = 20
    subset_size: int | None = None  # None -> pool size // 10


def _behavior_eps(cfg: DqnConfig, epoch: int) -> float:
    frac = min(epoch / cfg.eps_anneal_epochs, 1.0)
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac

def _draw_subset(n: int, size: int, rng) -> np.ndarray:
    return np.sort(rng.choice(n, size=size, replace=False))


def greedy_episode_final_reward(q: QNet, task: TaskPool, cfg: DqnConfig,
                                rng: np.random.Generator) -> float:
    """Roll one epsilon=0 episode on the full pool, return the last reward."""
    state = empty_state(cfg.history_k, task.candidates.shape[1])
    full = np.arange(len(task.candidates))
    best = -np.inf
    reward = -1.0
    for t in range(1, cfg.episode_len + 1):
        a = epsilon_greedy_action(q, state, task, full, 0.0, rng)
        state, reward = env_step(task, state, a, t, cfg.episode_len,
                                 cfg.noise_std, rng, best_prev=best)
        best = reward + 1.0
    return reward


def random_episode_final_reward(task: TaskPool, cfg: DqnConfig,
                                rng: np.random.Generator) -> float:
    picks = rng.integers(len(task.candidates), size=cfg.episode_len)
    return float(task.normalized[picks].max() - 1.0)


def _gate_passes(q: QNet, task: TaskPool, cfg: DqnConfig,
                 rng: np.random.Generator) -> bool:
    """Mean greedy final reward strictly above paired random search's."""
    greedy, rand = [], []
    for _ in range(cfg.gate_episodes):
        seed = int(rng.integers(2**63))
        greedy.append(greedy_episode_final_reward(q, task, cfg,
                                                  np.random.default_rng(seed)))
        rand.append(random_episode_final_reward(task, cfg,
                                                np.random.default_rng(seed)))
    return float(np.mean(greedy)) > float(np.mean(rand))


def train_dqn(task: TaskPool, cfg: DqnConfig,
              rng: np.random.Generator) -> tuple[QNet, dict]:
    """Episodic DQN on one task pool; stops early once it beats random search.

    Returns the policy net and an info dict with the gate status.  Targets
    for the Q regression are cached per transition and refreshed whenever
    the target network and action subset are redrawn, which keeps them
    consistent with the frozen target while avoiding recomputation inside
    every minibatch.
    """
    n = len(task.candidates)
    if n < 20:
        raise ValueError(f"task {task.task_id!r}: need at least 20 candidates")
    d = task.candidates.shape[1]
    q = init_qnet(d, cfg.history_k, rng, hidden=cfg.hidden)
    target = QNet({k: v.copy() for k, v in q.params.items()}, q.k, q.d, q.hidden)
    subset_size = cfg.subset_size or max(1, n // 10)
    subset = _draw_subset(n, subset_size, rng)
    buffer = ReplayBuffer(cfg.replay_capacity, state_width(cfg.history_k, d))
    adam = nd.AdamState(lr=cfg.lr)
    info = {"gate_passed": False, "epochs": 0, "final_loss": None, "grad_steps": 0}

    for epoch in range(cfg.max_epochs):
        if epoch > 0 and epoch % cfg.target_update_every == 0:
            target = QNet({k: v.copy() for k, v in q.params.items()},
                          q.k, q.d, q.hidden)
            subset = _draw_subset(n, subset_size, rng)
            buffer.refresh_targets(target, task, subset, cfg.gamma)
        eps = _behavior_eps(cfg, epoch)
        state = empty_state(cfg.history_k, d)
        best = -np.inf
        for t in range(1, cfg.episode_len + 1):
            a = epsilon_greedy_action(q, state, task, subset, eps, rng)
            next_state, r = env_step(task, state, a, t, cfg.episode_len,
                                     cfg.noise_std, rng, best_prev=best)
            best = r + 1.0
            done = t == cfg.episode_len
            tgt = bellman_target(r, next_state, done, target, task, subset, cfg.gamma)
            buffer.push(flatten_state(state), a, r, flatten_state(next_state),
                        done, tgt)
            state = next_state
            if buffer.size >= cfg.min_buffer:
                idx = rng.integers(buffer.size, size=cfg.minibatch)
                inputs = np.concatenate([buffer.s[idx],
                                         task.candidates[buffer.a[idx]]], axis=1)
                g = nd.Graph()
                leaves = {k: g.leaf(v, name=k) for k, v in q.params.items()}
                pred = _qnet_forward_nd(leaves, inputs)
                err = nd.sub(pred, nd.constant(buffer.target[idx]))
                loss = nd.tmean(nd.mul(err, err))
                if not np.isfinite(loss.data):
                    raise RuntimeError(f"train_dqn: non-finite loss at epoch {epoch}")
                nd.backward(loss)
                grads = {k: leaves[k].grad.data for k in q.params}
                q.params = nd.adam_step(q.params, grads, adam)
                info["final_loss"] = float(loss.data)
                info["grad_steps"] += 1
                g.release()
        info["epochs"] = epoch + 1
        # The gate certifies the learned policy, so it only runs once
        # optimization has started; an untrained net can fluke past it.
        if (info["grad_steps"] > 0 and (epoch + 1) % cfg.gate_every == 0
                and _gate_passes(q, task, cfg, rng)):
            info["gate_passed"] = True
            break
    return q, info


# ---------------------------------------------------------------------------
# trajectory generation


@dataclass
class Trajectory:
    """One T-step rollout: points, observed values, normalized step index."""

    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    task_id: str
    policy: str = "dqn"


def generate_trajectories(q: QNet, task: TaskPool, count: int, T: int, k: int,
                          eps: float, noise_std: float,
                          rng: np.random.Generator) -> list[Trajectory]:
    """Batched epsilon-greedy rollouts over the full pool, in lock-step."""
    if count < 1:
        raise ValueError("generate_trajectories: count must be positive")
    n = len(task.candidates)
    d = task.candidates.shape[1]
    full = np.arange(n)
    states = [empty_state(k, d) for _ in range(count)]
    xs = np.zeros((count, T, d))
    ys = np.zeros((count, T))
    for t in range(1, T + 1):
        flat = np.stack([flatten_state(s) for s in states])
        vals = q_values(q.params, flat, task, full)
        actions = np.argmax(vals, axis=1)  # first max = lowest index
        explore = rng.uniform(size=count) < eps
        randoms = rng.integers(n, size=count)
        actions = np.where(explore, randoms, actions)
        noise = noise_std * rng.standard_normal(count) if noise_std > 0 else 0.0
        y_obs = task.normalized[actions] + noise
        xs[:, t - 1] = task.candidates[actions]
        ys[:, t - 1] = y_obs
        states = [state_append(s, xs[i, t - 1], y_obs[i], t / T)
                  for i, s in enumerate(states)]
    ts = np.tile(np.arange(1, T + 1) / T, (count, 1))
    return [Trajectory(xs[i], ys[i], ts[i], task.task_id) for i in range(count)]
