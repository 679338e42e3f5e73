"""Outer optimization loop on a target task, plus baselines and evaluation.

Runs step over a tabular candidate pool with noiseless lookups of the
normalized objective, so best-so-far values live in [0, 1] and simple regret
is 1 minus best-so-far.  Baselines are an analytic GP optimizer with
marginal-likelihood grid-search hyperparameters and uniform random search.
The evaluation protocol aggregates paired runs into per-iteration mean
log-regret and mean competition rank with 95% confidence intervals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import bardist as bd
from . import pfn
from .priors import TaskPool, chol_with_jitter, gp_posterior, rbf_kernel
from .seeding import derive_rng

REGRET_FLOOR = 1e-8

SURROGATE_METHODS = ("profbo", "tnp-plus", "no-maml", "no-pos", "no-maml-no-pos")


@dataclass(frozen=True)
class BoRun:
    """One optimization run: the visited points and the regret curve."""

    method: str
    task_id: str
    seed: int
    horizon: int
    xs: np.ndarray
    ys: np.ndarray
    best: np.ndarray
    regret: np.ndarray

    def __post_init__(self):
        n = len(self.ys)
        if not (self.xs.shape[0] == self.best.shape[0] == self.regret.shape[0] == n):
            raise ValueError("BoRun: field lengths disagree")
        if n > self.horizon:
            raise ValueError("BoRun: more records than the horizon allows")
        if np.any(np.diff(self.best) < 0):
            raise ValueError("BoRun: best-so-far must be non-decreasing")
        if not np.allclose(self.regret, 1.0 - self.best, atol=1e-12):
            raise ValueError("BoRun: regret must equal 1 - best-so-far")
        if self.regret.size and (self.regret.min() < -1e-12 or self.regret.max() > 1 + 1e-12):
            raise ValueError("BoRun: regret must lie in [0, 1]")


@dataclass(frozen=True)
class GpBaselineConfig:
    """RBF hyperparameters for the GP baseline, with optional grid-search fit."""

    lengthscale: float = 0.5
    output_scale: float = 1.0
    noise_std: float = 1e-3
    fit: bool = True
    lengthscale_grid: tuple = (0.05, 0.1, 0.2, 0.4, 0.8, 1.6)
    noise_grid: tuple = (1e-4, 1e-3, 1e-2)

    def __post_init__(self):
        if min(self.lengthscale, self.output_scale, self.noise_std) <= 0:
            raise ValueError("GpBaselineConfig: hyperparameters must be positive")
        if not self.lengthscale_grid or min(self.lengthscale_grid) <= 0:
            raise ValueError("GpBaselineConfig: lengthscale grid must be positive")
        if not self.noise_grid or min(self.noise_grid) <= 0:
            raise ValueError("GpBaselineConfig: noise grid must be positive")


# ---------------------------------------------------------------------------
# GP baseline machinery

_erf = np.vectorize(math.erf, otypes=[np.float64])


def _normal_cdf(u):
    return 0.5 * (1.0 + _erf(u / math.sqrt(2.0)))


def _normal_pdf(u):
    return np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)


def gaussian_ei(mean, std, best, xi=0.0):
    """Closed-form expected improvement of N(mean, std^2) over best + xi."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    gap = mean - best - xi
    out = np.maximum(gap, 0.0)
    pos = std > 0
    u = gap[pos] / std[pos]
    out[pos] = gap[pos] * _normal_cdf(u) + std[pos] * _normal_pdf(u)
    return out


def gp_predict(xs, ys, queries, cfg: GpBaselineConfig):
    """Zero-mean GP posterior (mean, variance) at the queries.

    With no observations this is the prior: mean 0, variance = output scale.
    Callers that want a non-zero prior mean center ys themselves.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, queries.shape[1])
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) == 0:
        return np.zeros(len(queries)), np.full(len(queries), cfg.output_scale)
    return gp_posterior(xs, ys, queries, cfg.lengthscale,
                        cfg.output_scale, cfg.noise_std**2)


def _log_marginal_likelihood(xs, yc, lengthscale, output_scale, noise_var):
    k = rbf_kernel(xs, xs, lengthscale, output_scale)
    k += noise_var * np.eye(len(xs))
    chol = chol_with_jitter(k)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, yc))
    return (-0.5 * float(yc @ alpha) - float(np.log(np.diag(chol)).sum())
            - 0.5 * len(yc) * math.log(2.0 * math.pi))


def fit_gp_hyperparameters(xs, ys, cfg: GpBaselineConfig) -> GpBaselineConfig:
    """Grid-search lengthscale and noise by marginal likelihood.

    The output scale is pinned to the centered data variance (floored), so
    the grid stays two-dimensional and the fit is fully deterministic; ties
    keep the earliest grid entry.
    """
    yc = ys - ys.mean()
    output_scale = max(float(yc.var()), 1e-2)
    best_score, best_cfg = -np.inf, None
    for ls in cfg.lengthscale_grid:
        for noise in cfg.noise_grid:
            score = _log_marginal_likelihood(xs, yc, ls, output_scale, noise**2)
            if score > best_score:
                best_score = score
                best_cfg = (ls, noise)
    return replace(cfg, lengthscale=best_cfg[0], noise_std=best_cfg[1],
                   output_scale=output_scale)


def gp_step(task: TaskPool, obs_idx, cfg: GpBaselineConfig, acq="ei",
            params=None) -> int:
    """Pick the next pool index for the GP baseline; evaluated points excluded."""
    params = params or {}
    obs_idx = list(obs_idx)
    avail = np.setdiff1d(np.arange(len(task.candidates)), obs_idx)
    if avail.size == 0:
        raise ValueError("gp_step: pool exhausted")
    xs = task.candidates[obs_idx]
    ys = task.normalized[obs_idx]
    fitted = fit_gp_hyperparameters(xs, ys, cfg) if cfg.fit and len(xs) >= 2 else cfg
    center = ys.mean()
    mean, var = gp_predict(xs, ys - center, task.candidates[avail], fitted)
    mean = mean + center
    std = np.sqrt(np.maximum(var, 0.0))
    if acq == "ei":
        scores = gaussian_ei(mean, std, ys.max(), params.get("xi", 0.0))
    elif acq == "pi":
        gap = mean - ys.max() - params.get("xi", 0.0)
        scores = np.where(std > 0, _normal_cdf(np.where(std > 0, gap, 0.0) /
                                               np.where(std > 0, std, 1.0)),
                          (gap > 0).astype(float))
    elif acq == "ucb":
        scores = mean + params.get("beta", 1.0) * std
    else:
        raise ValueError(f"gp_step: unknown acquisition {acq!r}")
    return int(avail[int(np.argmax(scores))])


# ---------------------------------------------------------------------------
# surrogate-driven step


def _evaluated_mask(task: TaskPool, xs: np.ndarray) -> np.ndarray:
    mask = np.zeros(len(task.candidates), dtype=bool)
    for x in np.atleast_2d(xs):
        mask |= (task.candidates == x).all(axis=1)
    return mask


def bo_step_pfn(model: pfn.PfnSurrogate, history: pfn.ContextSet,
                task: TaskPool, acq="ei", params=None,
                forward=pfn.pfn_forward) -> int:
    """Score every unevaluated candidate with the surrogate's bar posterior.

    Returns the pool index of the acquisition argmax; ties resolve to the
    lowest candidate index.  ``forward`` is injectable so an oracle posterior
    can stand in for the transformer.
    """
    params = params or {}
    avail = np.flatnonzero(~_evaluated_mask(task, history.xs))
    if avail.size == 0:
        raise ValueError("bo_step_pfn: pool exhausted")
    dists = forward(model, history, task.candidates[avail])
    if acq in ("ei", "pi"):
        if history.ys.size == 0:
            raise ValueError("bo_step_pfn: improvement acquisitions need an "
                             "incumbent; seed the run with an initial design")
        best = float(history.standardize_y(history.ys.max()))
        if acq == "ei":
            scores = [bd.acq_ei(d, best) for d in dists]
        else:
            scores = [bd.acq_pi(d, best, params.get("xi", 0.0)) for d in dists]
    elif acq == "ucb":
        scores = [bd.acq_ucb(d, params.get("beta", 1.0)) for d in dists]
    else:
        raise ValueError(f"bo_step_pfn: unknown acquisition {acq!r}")
    return int(avail[int(np.argmax(scores))])


# ---------------------------------------------------------------------------
# full runs


def run_bo(method: str, task: TaskPool, horizon: int, seed: int, init: int = 1,
           model: pfn.PfnSurrogate | None = None,
           gp_cfg: GpBaselineConfig | None = None,
           acq: str = "ei", acq_params: dict | None = None) -> BoRun:
    """Run one method on one task to the horizon; deterministic per (task, seed).

    The initial design is drawn from an RNG keyed only by (seed, task), so
    every method sees the same starting observations under the same seed.
    Random search samples the pool with replacement; the surrogate and GP
    methods never re-query an evaluated candidate.
    """
    n = len(task.candidates)
    if horizon < 1:
        raise ValueError("run_bo: horizon must be positive")
    if not 1 <= init <= min(horizon, n):
        raise ValueError("run_bo: initial design must fit the horizon and pool")
    if method in SURROGATE_METHODS and model is None:
        raise ValueError(f"run_bo: method {method!r} needs a surrogate model")
    if method not in SURROGATE_METHODS and method not in ("gp", "random"):
        raise ValueError(f"run_bo: unknown method {method!r}")
    if gp_cfg is None:
        gp_cfg = GpBaselineConfig()
    init_rng = derive_rng(seed, "bo-init", task.task_id)
    method_rng = derive_rng(seed, "bo-method", task.task_id, method)
    picked = [int(i) for i in init_rng.choice(n, size=init, replace=False)]
    bounds = (task.candidates.min(axis=0), task.candidates.max(axis=0))
    for _ in range(init, horizon):
        if method == "random":
            nxt = int(method_rng.integers(0, n))
        elif method == "gp":
            nxt = gp_step(task, picked, gp_cfg, acq=acq, params=acq_params)
        else:
            history = pfn.make_context(task.candidates[picked],
                                       task.normalized[picked], bounds=bounds)
            nxt = bo_step_pfn(model, history, task, acq=acq, params=acq_params)
        picked.append(nxt)
    ys = task.normalized[picked]
    best = np.maximum.accumulate(ys)
    return BoRun(method=method, task_id=task.task_id, seed=seed,
                 horizon=horizon, xs=task.candidates[picked], ys=ys,
                 best=best, regret=1.0 - best)


# ---------------------------------------------------------------------------
# evaluation protocol


def competition_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ascending, with ties sharing the lower rank."""
    values = np.asarray(values)
    return 1 + (values[None, :] < values[:, None]).sum(axis=1)


def aggregate(runs: list[BoRun], methods=None) -> dict:
    """Reduce paired runs to per-iteration curves per method.

    Every method must cover the same (task, seed) pairs at the same horizon.
    Returns, per method, the mean regret, mean log10(regret + floor), mean
    competition rank, and 1.96 standard-error confidence half-widths.
    """
    if not runs:
        raise ValueError("aggregate: no runs")
    if methods is None:
        methods = sorted({r.method for r in runs})
    methods = list(methods)
    horizons = {r.horizon for r in runs}
    if len(horizons) != 1:
        raise ValueError("aggregate: mismatched horizons")
    horizon = horizons.pop()
    by_key = {}
    for run in runs:
        key = (run.task_id, run.seed, run.method)
        if key in by_key:
            raise ValueError(f"aggregate: duplicate run {key}")
        by_key[key] = run
    pairs = sorted({(r.task_id, r.seed) for r in runs})
    regrets = np.empty((len(pairs), len(methods), horizon))
    for i, (task_id, seed) in enumerate(pairs):
        for j, method in enumerate(methods):
            run = by_key.get((task_id, seed, method))
            if run is None:
                raise ValueError(f"aggregate: method {method!r} missing a run "
                                 f"for task {task_id!r} seed {seed}")
            regrets[i, j] = run.regret
    ranks = np.empty_like(regrets)
    for i in range(len(pairs)):
        for t in range(horizon):
            ranks[i, :, t] = competition_ranks(regrets[i, :, t])
    log_regret = np.log10(regrets + REGRET_FLOOR)

    def ci(samples):
        if samples.shape[0] < 2:
            return np.zeros(samples.shape[1])
        return 1.96 * samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])

    out = {}
    for j, method in enumerate(methods):
        out[method] = {
            "mean_regret": regrets[:, j, :].mean(axis=0),
            "mean_log_regret": log_regret[:, j, :].mean(axis=0),
            "log_regret_ci": ci(log_regret[:, j, :]),
            "mean_rank": ranks[:, j, :].mean(axis=0),
            "rank_ci": ci(ranks[:, j, :]),
        }
    return out
