"""Training-data generators: GP function prior, CSV task pools, synthetic families.

Pre-training consumes random functions drawn from an RBF-kernel GP over the
unit cube.  Benchmarks consume discrete candidate pools, either parsed from
CSV files or produced by one of the built-in related-task families.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class GpPriorConfig:
    """Sampling laws for random GP functions (log-uniform hyperpriors)."""

    input_dim_range: tuple[int, int] = (1, 3)
    lengthscale_range: tuple[float, float] = (0.05, 2.0)
    output_scale_range: tuple[float, float] = (0.5, 2.0)
    noise_std_range: tuple[float, float] = (1e-4, 1e-1)
    points_per_function: int = 40

    def __post_init__(self):
        if self.input_dim_range[0] < 1 or self.input_dim_range[1] < self.input_dim_range[0]:
            raise ValueError(f"bad input_dim_range {self.input_dim_range}")
        for name in ("lengthscale_range", "output_scale_range", "noise_std_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"bad {name} ({lo}, {hi}): bounds must be positive")
        if self.points_per_function < 2:
            raise ValueError("points_per_function must be at least 2")


@dataclass
class SequenceSample:
    """One ordered training sequence plus its context/query split point."""

    xs: np.ndarray
    ys: np.ndarray
    m: int

    def __post_init__(self):
        n = len(self.ys)
        if self.xs.shape[0] != n:
            raise ValueError("SequenceSample: xs and ys lengths differ")
        if not 1 <= self.m <= n - 1:
            raise ValueError(f"SequenceSample: split m={self.m} outside [1, {n - 1}]")


@dataclass
class TaskPool:
    """A discrete task: candidate points, raw values, [0,1]-normalized values."""

    task_id: str
    candidates: np.ndarray
    values: np.ndarray
    normalized: np.ndarray
    split: str = "train"


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi - lo <= 0:
        raise ValueError("degenerate objective range (constant values)")
    return (values - lo) / (hi - lo)


def make_task_pool(task_id, candidates, values, split="train") -> TaskPool:
    candidates = np.asarray(candidates, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if candidates.ndim != 2 or len(values) != len(candidates):
        raise ValueError(f"task {task_id!r}: need (n,d) candidates with n matching values")
    if len(values) < 2:
        raise ValueError(f"task {task_id!r}: need at least 2 rows")
    if len(np.unique(candidates, axis=0)) != len(candidates):
        raise ValueError(f"task {task_id!r}: duplicate candidate rows")
    return TaskPool(task_id, candidates, values, minmax_normalize(values), split)


# ---------------------------------------------------------------------------
# GP sampling


def rbf_kernel(x1: np.ndarray, x2: np.ndarray, lengthscale: float,
               output_scale: float) -> np.ndarray:
    """Squared-exponential kernel matrix; output_scale is the signal variance."""
    d2 = np.sum((x1[:, None, :] - x2[None, :, :]) ** 2, axis=-1)
    return output_scale * np.exp(-0.5 * d2 / lengthscale**2)


def chol_with_jitter(k: np.ndarray, max_jitter: float = 1e-4) -> np.ndarray:
    """Cholesky factor of k, escalating diagonal jitter 1e-8 -> max_jitter."""
    try:
        return np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-8
    while jitter <= max_jitter:
        try:
            return np.linalg.cholesky(k + jitter * np.eye(len(k)))
        except np.linalg.LinAlgError:
            jitter *= 10
    raise ValueError(f"matrix not positive definite after jitter up to {max_jitter}")


def gp_joint_sample(x: np.ndarray, lengthscale: float, output_scale: float,
                    noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """Raw joint draw of y over the rows of x (no standardization)."""
    k = rbf_kernel(x, x, lengthscale, output_scale) + noise_std**2 * np.eye(len(x))
    return chol_with_jitter(k) @ rng.standard_normal(len(x))


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_gp_function(cfg: GpPriorConfig, rng: np.random.Generator) -> SequenceSample:
    """Draw one random function: inputs in [0,1]^d, z-scored GP values."""
    d = int(rng.integers(cfg.input_dim_range[0], cfg.input_dim_range[1] + 1))
    lengthscale = _log_uniform(rng, *cfg.lengthscale_range)
    output_scale = _log_uniform(rng, *cfg.output_scale_range)
    noise_std = _log_uniform(rng, *cfg.noise_std_range)
    n = cfg.points_per_function
    xs = rng.uniform(size=(n, d))
    raw = gp_joint_sample(xs, lengthscale, output_scale, noise_std, rng)
    ys = (raw - raw.mean()) / max(raw.std(), 1e-12)
    m = int(rng.integers(1, n))
    return SequenceSample(xs, ys, m)


def gp_posterior(x_train, y_train, x_test, lengthscale, output_scale,
                 noise_var) -> tuple[np.ndarray, np.ndarray]:
    """Exact GP posterior mean and variance at x_test (noise-free latent)."""
    k_tt = rbf_kernel(x_train, x_train, lengthscale, output_scale)
    k_tt += noise_var * np.eye(len(x_train))
    k_ts = rbf_kernel(x_train, x_test, lengthscale, output_scale)
    chol = chol_with_jitter(k_tt)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y_train))
    mean = k_ts.T @ alpha
    v = np.linalg.solve(chol, k_ts)
    var = output_scale - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 1e-12)


# ---------------------------------------------------------------------------
# CSV ingestion


_HEADER_RE = re.compile(r"^x(\d+)$")


def load_task_csv(path, split: str = "train") -> TaskPool:
    """Parse one task file: header x1,...,xd,y then one row per candidate."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if len(header) < 2 or header[-1] != "y":
        raise ValueError(f"{path}: header must be x1,...,xd,y")
    for i, name in enumerate(header[:-1]):
        m = _HEADER_RE.match(name)
        if not m or int(m.group(1)) != i + 1:
            raise ValueError(f"{path}: header must be x1,...,xd,y (got {name!r})")
    width = len(header)
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ValueError(f"{path}: ragged row at line {lineno}")
        try:
            data.append([float(c) for c in row])
        except ValueError:
            raise ValueError(f"{path}: non-numeric cell at line {lineno}") from None
    if len(data) < 2:
        raise ValueError(f"{path}: need at least 2 data rows")
    arr = np.asarray(data, dtype=np.float64)
    return make_task_pool(path.stem, arr[:, :-1], arr[:, -1], split)


def load_manifest(path) -> list[TaskPool]:
    """Read `path,tag` lines; task paths are relative to the manifest."""
    path = Path(path)
    pools = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise ValueError(f"{path}: line {lineno} is not a path,tag pair")
        rel, tag = parts
        if tag not in ("train", "valid", "test"):
            raise ValueError(f"{path}: line {lineno} has unknown split tag {tag!r}")
        pools.append(load_task_csv(path.parent / rel, split=tag))
    if not pools:
        raise ValueError(f"{path}: manifest lists no tasks")
    return pools


def write_task_csv(path, pool: TaskPool) -> None:
    """Write one pool in the x1,...,xd,y format that load_task_csv parses."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = pool.candidates.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(d)] + ["y"])
        for x, y in zip(pool.candidates, pool.values):
            writer.writerow([repr(float(v)) for v in x] + [repr(float(y))])


def write_manifest(path, pools: list[TaskPool]) -> None:
    """Write each pool next to a `path,tag` manifest; ids become file names."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for pool in pools:
        name = f"{pool.task_id}.csv"
        write_task_csv(path.parent / name, pool)
        lines.append(f"{name},{pool.split}")
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic related-task families


def branin(x1, x2):
    """Standard Branin function on [-5, 10] x [0, 15] (minimization form)."""
    a, b, c = 1.0, 5.1 / (4 * np.pi**2), 5 / np.pi
    r, s, t = 6.0, 10.0, 1 / (8 * np.pi)
    return a * (x2 - b * x1**2 + c * x1 - r) ** 2 + s * (1 - t) * np.cos(x1) + s


def _shifted_sine_pools(n_tasks, rng, n_points=200, harmonics=0.0):
    """Maximization tasks y = sin(2*pi*(x - shift)) on a shared 1-D grid.

    Shifts are evenly spaced so the family covers the period; a nonzero
    harmonics weight mixes in a third harmonic, moving tasks off the pure
    sine while keeping them related.
    """
    grid = np.linspace(0.0, 1.0, n_points)[:, None]
    pools = []
    for t in range(n_tasks):
        shift = t / n_tasks
        y = np.sin(2 * np.pi * (grid[:, 0] - shift))
        if harmonics:
            y = (1 - harmonics) * y + harmonics * np.sin(6 * np.pi * (grid[:, 0] - shift))
        pools.append(make_task_pool(f"sine-{t}", grid, y))
    return pools


def _branin_variant_pools(n_tasks, rng, n_points=150):
    """Negated, domain-shifted Branin variants over random candidate pools."""
    pools = []
    for t in range(n_tasks):
        delta = rng.uniform(-0.5, 0.5, size=2)
        x1 = rng.uniform(-5.0, 10.0, size=n_points)
        x2 = rng.uniform(0.0, 15.0, size=n_points)
        y = -branin(x1 - delta[0], x2 - delta[1])
        pools.append(make_task_pool(f"branin-{t}", np.column_stack([x1, x2]), y))
    return pools


def _gp_sibling_pools(n_tasks, rng, n_points=100, cfg: GpPriorConfig | None = None,
                      correlation=0.0):
    """Draws from a single sampled GP hyperparameter setting.

    With correlation r > 0 every task is sqrt(r) * shared + sqrt(1 - r) * own
    over one common candidate grid, so the family ranges from independent
    landscapes (r = 0, per-task grids) to near-copies (r -> 1).  The shared
    component is what makes cross-task transfer informative.
    """
    if not 0.0 <= correlation < 1.0:
        raise ValueError("gp-siblings: correlation must be in [0, 1)")
    cfg = cfg or GpPriorConfig()
    d = int(rng.integers(cfg.input_dim_range[0], cfg.input_dim_range[1] + 1))
    lengthscale = _log_uniform(rng, *cfg.lengthscale_range)
    output_scale = _log_uniform(rng, *cfg.output_scale_range)
    noise_std = _log_uniform(rng, *cfg.noise_std_range)
    pools = []
    if correlation:
        xs = rng.uniform(size=(n_points, d))
        shared = gp_joint_sample(xs, lengthscale, output_scale, 0.0, rng)
        for t in range(n_tasks):
            own = gp_joint_sample(xs, lengthscale, output_scale, 0.0, rng)
            y = (np.sqrt(correlation) * shared
                 + np.sqrt(1.0 - correlation) * own
                 + noise_std * rng.standard_normal(n_points))
            pools.append(make_task_pool(f"gp-{t}", xs, y))
        return pools
    for t in range(n_tasks):
        xs = rng.uniform(size=(n_points, d))
        y = gp_joint_sample(xs, lengthscale, output_scale, noise_std, rng)
        pools.append(make_task_pool(f"gp-{t}", xs, y))
    return pools


_FAMILIES = {
    "shifted-sine": _shifted_sine_pools,
    "branin-variants": _branin_variant_pools,
    "gp-siblings": _gp_sibling_pools,
}


def synth_task_family(family: str, n_tasks: int, seed: int, **kwargs) -> list[TaskPool]:
    """Generate related discrete pools; same (family, seed, kwargs) is deterministic."""
    if family not in _FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {sorted(_FAMILIES)}")
    if n_tasks < 1:
        raise ValueError("n_tasks must be positive")
    rng = np.random.default_rng(seed)
    return _FAMILIES[family](n_tasks, rng, **kwargs)


# ---------------------------------------------------------------------------
# sequence splitting


def split_sequence(seq: SequenceSample, rng: np.random.Generator | None = None):
    """Prefix context / suffix queries; a fresh rng redraws the split point."""
    n = len(seq.ys)
    m = seq.m if rng is None else int(rng.integers(1, n))
    ctx = (seq.xs[: n - m], seq.ys[: n - m])
    queries = (seq.xs[n - m:], seq.ys[n - m:])
    return ctx, queries
