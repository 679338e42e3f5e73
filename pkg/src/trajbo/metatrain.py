"""Two-stage surrogate training: GP pre-training, then MAML on trajectory priors.

Stage 1 trains the transformer on synthetic GP sequences with positional
encodings off, so the model learns a generic in-context regressor.  Stage 2
switches positional encodings on and meta-trains on batches of optimizer
trajectories from the source tasks: each meta-iteration adapts the parameters
one inner gradient step per source task and takes an Adam step on the summed
post-adaptation loss.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import ndtensor as nd
from . import pfn
from .mdprior import Trajectory
from .priors import GpPriorConfig, TaskPool, sample_gp_function

# Learning-rate menu the pre-training stage was tuned over, kept for reference
# and for config tooling; any positive rate is accepted.
PRETRAIN_LRS = (1e-3, 1e-4, 3e-4, 1e-5)

MAML_MODES = ("full", "first-order")


@dataclass(frozen=True)
class TrainConfig:
    """Budgets and step sizes for both training stages.

    Defaults are the desk-scale profile.  ``full_scale`` returns the
    production profile, where the fine-tune budget comes from
    ``steps_per_epoch * finetune_epochs``.
    """

    k1: int = 2000
    k2: int = 100
    batch_size: int = 16
    inner_beta: float = 1e-3
    prior_batch: int = 4
    maml_mode: str = "first-order"
    pretrain_lr: float = 3e-4
    finetune_lr: float = 3e-4
    gp_replay: float = 0.1
    fresh_batch: bool = False
    # Cap on the context size of fine-tune splits.  Few-shot search only ever
    # conditions on short histories, so spending the fine-tune budget there
    # beats spreading it over all prefix lengths.  None trains on all splits.
    max_context: int | None = None
    steps_per_epoch: int = 100
    finetune_epochs: int = 2

    def __post_init__(self):
        for name in ("k1", "k2", "batch_size", "prior_batch",
                     "steps_per_epoch", "finetune_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be at least 1")
        if self.inner_beta < 0:
            raise ValueError("TrainConfig.inner_beta must be nonnegative")
        if self.maml_mode not in MAML_MODES:
            raise ValueError(f"TrainConfig.maml_mode must be one of {MAML_MODES}")
        if self.pretrain_lr <= 0 or self.finetune_lr <= 0:
            raise ValueError("TrainConfig learning rates must be positive")
        if not 0.0 <= self.gp_replay <= 1.0:
            raise ValueError("TrainConfig.gp_replay must lie in [0, 1]")
        if self.max_context is not None and self.max_context < 1:
            raise ValueError("TrainConfig.max_context must be at least 1")

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        return cls(k1=8000, k2=200, batch_size=128)


class SequenceSource(Protocol):
    """Anything that can serve (xs, ys, bounds) training batches per task."""

    @property
    def task_ids(self) -> tuple[str, ...]: ...

    def sample_batch(self, task_id: str, count: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, tuple]: ...


@dataclass
class TrajectoryDataset:
    """Pre-generated optimizer trajectories grouped by source task."""

    pools: dict[str, TaskPool]
    trajectories: dict[str, list[Trajectory]]
    seq_len: int

    def __post_init__(self):
        if set(self.pools) != set(self.trajectories):
            raise ValueError("TrajectoryDataset: pool and trajectory task ids differ")
        for tid, trajs in self.trajectories.items():
            if not trajs:
                raise ValueError(f"TrajectoryDataset: task {tid!r} has no trajectories")
            for traj in trajs:
                if traj.ys.shape[0] != self.seq_len:
                    raise ValueError(
                        f"TrajectoryDataset: task {tid!r} has a trajectory of "
                        f"length {traj.ys.shape[0]}, expected {self.seq_len}")
                if traj.task_id != tid:
                    raise ValueError(
                        f"TrajectoryDataset: trajectory labeled {traj.task_id!r} "
                        f"filed under {tid!r}")

    @property
    def task_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.pools))

    def bounds(self, task_id: str) -> tuple[np.ndarray, np.ndarray]:
        cand = self.pools[task_id].candidates
        return cand.min(axis=0), cand.max(axis=0)

    def sample_batch(self, task_id, count, rng):
        trajs = self.trajectories[task_id]
        picks = rng.integers(0, len(trajs), size=count)
        xs = np.stack([trajs[i].xs for i in picks])
        ys = np.stack([trajs[i].ys for i in picks])
        return xs, ys, self.bounds(task_id)


@dataclass
class PoolSubsequenceSource:
    """Random unordered pool subsequences; the raw-meta-data training source.

    Serves the same interface as TrajectoryDataset but rows carry no search
    structure: each sequence is a random draw from the task's candidate pool.
    """

    pools: dict[str, TaskPool]
    seq_len: int

    @property
    def task_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.pools))

    def sample_batch(self, task_id, count, rng):
        pool = self.pools[task_id]
        n = pool.values.shape[0]
        xs = np.empty((count, self.seq_len, pool.candidates.shape[1]))
        ys = np.empty((count, self.seq_len))
        for i in range(count):
            picks = rng.choice(n, size=self.seq_len, replace=n < self.seq_len)
            xs[i] = pool.candidates[picks]
            ys[i] = pool.normalized[picks]
        return xs, ys, (pool.candidates.min(axis=0), pool.candidates.max(axis=0))


# ---------------------------------------------------------------------------
# stage 1: pre-training on GP draws


def _sample_gp_batch(gp: GpPriorConfig, seq_len: int, count: int,
                     rng: np.random.Generator):
    """Draw one batch of GP sequences sharing a single input dimension."""
    d = int(rng.integers(gp.input_dim_range[0], gp.input_dim_range[1] + 1))
    cfg = dataclasses.replace(gp, input_dim_range=(d, d), points_per_function=seq_len)
    xs = np.empty((count, seq_len, d))
    ys = np.empty((count, seq_len))
    for i in range(count):
        sample = sample_gp_function(cfg, rng)
        xs[i] = sample.xs
        ys[i] = sample.ys
    return xs, ys, (np.zeros(d), np.ones(d))


def _leaf_grads(leaves: dict[str, nd.Tensor]) -> dict[str, np.ndarray]:
    return {name: (np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.data)
            for name, leaf in leaves.items()}


def pretrain(model: pfn.PfnSurrogate, gp: GpPriorConfig, cfg: TrainConfig,
             rng: np.random.Generator):
    """Stage-1 training on GP-prior batches; returns (model, info).

    info carries the per-iteration loss history and the optimizer step count.
    """
    config = model.config
    if config.positional_encoding:
        raise ValueError("pretrain expects positional encoding disabled")
    if gp.input_dim_range[1] > config.max_input_dim:
        raise ValueError("pretrain: GP input dimension exceeds the model's limit")
    params = dict(model.params)
    adam = nd.AdamState(lr=cfg.pretrain_lr, anneal_period=cfg.k1)
    losses = []
    for it in range(cfg.k1):
        xs, ys, bounds = _sample_gp_batch(gp, config.seq_len, cfg.batch_size, rng)
        m = int(rng.integers(1, config.seq_len))
        graph = nd.Graph()
        leaves = pfn.param_leaves(graph, params)
        loss, _ = pfn.pfn_loss(leaves, config, xs, ys, m, bounds=bounds)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"pretrain: loss diverged at iteration {it}")
        nd.backward(loss)
        params = nd.adam_step(params, _leaf_grads(leaves), adam)
        losses.append(float(loss.data))
        graph.release()
    trained = pfn.PfnSurrogate(config, params)
    return trained, {"losses": losses, "optimizer_steps": adam.step}


# ---------------------------------------------------------------------------
# stage 2: MAML fine-tuning on trajectory priors


def adapt_parameters(leaves: dict[str, nd.Tensor], loss: nd.Tensor,
                     beta: float, mode: str) -> dict[str, nd.Tensor]:
    """One inner gradient step; returns the task-adapted parameter tensors.

    In "full" mode the step itself stays on the tape, so gradients of any
    downstream loss flow through the inner gradient.  In "first-order" mode
    the inner gradient is frozen to a constant, which treats the adaptation
    Jacobian as identity.
    """
    if mode not in MAML_MODES:
        raise ValueError(f"adapt_parameters: unknown mode {mode!r}")
    grads = nd.backward(loss, create_graph=(mode == "full"))
    adapted = {}
    for name, leaf in leaves.items():
        g = grads.get(leaf.nid)
        if g is None:
            adapted[name] = leaf
        else:
            if mode == "first-order":
                g = nd.constant(g.data)
            adapted[name] = leaf - g * beta
    return adapted


def _meta_step(params: dict[str, np.ndarray], config: pfn.PfnConfig,
               batches: list[dict], cfg: TrainConfig):
    """Adapt per prior, sum the post-adaptation losses, return loss and grads."""
    graph = nd.Graph()
    leaves = pfn.param_leaves(graph, params)
    total = None
    for batch in batches:
        xs, ys, m, bounds = batch["inner"]
        inner, _ = pfn.pfn_loss(leaves, config, xs, ys, m, bounds=bounds)
        adapted = adapt_parameters(leaves, inner, cfg.inner_beta, cfg.maml_mode)
        xs, ys, m, bounds = batch.get("outer") or batch["inner"]
        outer, _ = pfn.pfn_loss(adapted, config, xs, ys, m, bounds=bounds)
        total = outer if total is None else total + outer
    nd.backward(total)
    value, grads = float(total.data), _leaf_grads(leaves)
    graph.release()
    return value, grads


def _draw_split(seq_len: int, cfg: TrainConfig, rng: np.random.Generator) -> int:
    lo = 1
    if cfg.max_context is not None:
        lo = max(1, seq_len - cfg.max_context)
    return int(rng.integers(lo, seq_len))


def _draw_prior_batches(data: SequenceSource, ids, cfg: TrainConfig,
                        seq_len: int, rng: np.random.Generator) -> list[dict]:
    batches = []
    for tid in ids:
        xs, ys, bounds = data.sample_batch(tid, cfg.batch_size, rng)
        m = _draw_split(seq_len, cfg, rng)
        batch = {"inner": (xs, ys, m, bounds), "outer": None}
        if cfg.fresh_batch:
            xs2, ys2, b2 = data.sample_batch(tid, cfg.batch_size, rng)
            batch["outer"] = (xs2, ys2, _draw_split(seq_len, cfg, rng), b2)
        batches.append(batch)
    return batches


def _finetune_loop(model: pfn.PfnSurrogate, data: SequenceSource,
                   cfg: TrainConfig, rng: np.random.Generator,
                   gp: GpPriorConfig | None = None):
    config = model.config
    all_ids = np.asarray(data.task_ids, dtype=object)
    if all_ids.size == 0:
        raise ValueError("maml_finetune: no source-task priors to sample from")
    params = dict(model.params)
    adam = nd.AdamState(lr=cfg.finetune_lr, anneal_period=cfg.k2)
    history = []
    for it in range(cfg.k2):
        if gp is not None and cfg.gp_replay > 0 and rng.uniform() < cfg.gp_replay:
            # Replay a plain GP-prior batch so regions the trajectories never
            # visit keep their pre-trained behavior.
            xs, ys, bounds = _sample_gp_batch(gp, config.seq_len, cfg.batch_size, rng)
            m = int(rng.integers(1, config.seq_len))
            graph = nd.Graph()
            leaves = pfn.param_leaves(graph, params)
            loss, _ = pfn.pfn_loss(leaves, config, xs, ys, m, bounds=bounds)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"maml_finetune: loss diverged at iteration {it}")
            nd.backward(loss)
            params = nd.adam_step(params, _leaf_grads(leaves), adam)
            history.append({"kind": "gp", "loss": float(loss.data)})
            graph.release()
            continue
        n_priors = min(cfg.prior_batch, all_ids.size)
        # Sorted so the per-prior loss reduction runs in task-id order.
        chosen = sorted(rng.choice(all_ids, size=n_priors, replace=False).tolist())
        batches = _draw_prior_batches(data, chosen, cfg, config.seq_len, rng)
        meta_loss, grads = _meta_step(params, config, batches, cfg)
        if not np.isfinite(meta_loss):
            raise RuntimeError(f"maml_finetune: loss diverged at iteration {it}")
        params = nd.adam_step(params, grads, adam)
        history.append({"kind": "meta", "loss": meta_loss, "priors": chosen})
    trained = pfn.PfnSurrogate(config, params)
    return trained, {"history": history, "optimizer_steps": adam.step}


def maml_finetune(model: pfn.PfnSurrogate, data: SequenceSource,
                  cfg: TrainConfig, rng: np.random.Generator,
                  gp: GpPriorConfig | None = None):
    """Stage-2 meta-training on trajectory priors; returns (model, info).

    Each iteration samples up to ``prior_batch`` source tasks, adapts the
    parameters one inner step per task, and applies one Adam step on the
    summed post-adaptation loss.  The post-adaptation loss is evaluated on
    the same batch that drove the inner step unless ``fresh_batch`` is set.
    """
    if not model.config.positional_encoding:
        raise ValueError("maml_finetune expects positional encoding enabled")
    return _finetune_loop(model, data, cfg, rng, gp=gp)


def with_positional_encoding(model: pfn.PfnSurrogate,
                             enabled: bool) -> pfn.PfnSurrogate:
    """Copy the model with positional encoding toggled.

    Enabling adds the zero-initialized gate if absent, so the copy behaves
    identically until training opens it; disabling drops the gate.
    """
    config = dataclasses.replace(model.config, positional_encoding=enabled)
    params = {k: v.copy() for k, v in model.params.items()}
    if enabled:
        params.setdefault("pos_gate", np.zeros(()))
    else:
        params.pop("pos_gate", None)
    return pfn.PfnSurrogate(config, params)


def finetune_variant(model: pfn.PfnSurrogate, data: SequenceSource,
                     cfg: TrainConfig, rng: np.random.Generator,
                     gp: GpPriorConfig | None = None, *,
                     adaptation: bool = True, positional: bool = True):
    """Fine-tune one configuration of the (adaptation, encoding) grid.

    Disabling adaptation zeroes the inner step size, which reduces each
    iteration to a plain training step on the same batches; disabling the
    encoding trains an order-agnostic variant.  Returns (model, info).
    """
    variant_cfg = cfg if adaptation else dataclasses.replace(cfg, inner_beta=0.0)
    start = with_positional_encoding(model, positional)
    return _finetune_loop(start, data, variant_cfg, rng, gp=gp)


# ---------------------------------------------------------------------------
# ablations


def ablation_variants(model: pfn.PfnSurrogate, data: TrajectoryDataset,
                      cfg: TrainConfig, seed: int,
                      gp: GpPriorConfig | None = None) -> dict[str, pfn.PfnSurrogate]:
    """Fine-tune the ablation grid from one checkpoint and seed.

    Returns five models: the flagship (adaptation plus positional encoding,
    key "profbo"), the three grid ablations that disable adaptation and/or
    the encoding, and "tnp-plus", which trains on raw pool subsequences
    instead of trajectories.  Keys name the disabled component.
    """
    subseq = PoolSubsequenceSource(data.pools, data.seq_len)
    recipes = {
        "profbo": (True, True, data),
        "no-maml": (True, False, data),
        "no-pos": (False, True, data),
        "no-maml-no-pos": (False, False, data),
        "tnp-plus": (True, True, subseq),
    }
    out = {}
    for name, (pos, adapt, source) in recipes.items():
        trained, _ = finetune_variant(model, source, cfg,
                                      np.random.default_rng(seed), gp=gp,
                                      adaptation=adapt, positional=pos)
        out[name] = trained
    return out
