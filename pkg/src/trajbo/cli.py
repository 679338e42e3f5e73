"""Command-line pipeline driver.

Six subcommands cover the artifact life cycle: ``pretrain`` fits the
surrogate on random GP functions, ``train-priors`` trains one value network
per source task, ``gen-traj`` rolls those policies into a trajectory cache,
``finetune`` meta-trains the surrogate on the cache, ``benchmark`` runs the
optimization loop on held-out tasks, and ``report`` reduces the run records
to aggregate curves and tidy plot data.

Directory contract: ``train-priors`` writes ``<out>/mdp/<task-id>.ckpt``,
``gen-traj`` writes ``<out>/traj/<task-id>/<rollout-index>.csv`` and reads
value networks from ``<priors>/mdp``, ``finetune`` reads the cache from
``<traj>/traj``, ``benchmark`` writes ``<out>/runs/<method>/<task>/<seed>.csv``,
and ``report`` consumes such a runs directory.  Every output is written
atomically (temp file plus rename) and every command is a deterministic
function of its config, inputs, and seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import boloop
from . import checkpoint
from . import config as cfgmod
from . import mdprior
from . import metatrain
from . import pfn
from .priors import TaskPool, load_manifest
from .seeding import child_seed, derive_rng

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_EMPTY = 5

EXIT_CODE_DOC = """\
exit codes:
  0  success
  2  usage error or missing input file
  3  configuration or input validation failure
  4  checkpoint rejected (corrupt, wrong format, or config hash mismatch)
  5  empty result set (for example: no runs found, no tasks in the split)
"""

BENCH_METHODS = ("profbo", "gp", "random", "tnp-plus", "no-maml", "no-pos",
                 "no-maml-no-pos")


class CliError(Exception):
    """Structured failure: carries the process exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# shared plumbing


def _run_config(args) -> cfgmod.RunConfig:
    """Build the run configuration: profile defaults < file < CLI flags."""
    raw: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise CliError(EXIT_USAGE, f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config {path}: invalid JSON ({exc})")
        if not isinstance(raw, dict):
            raise CliError(EXIT_CONFIG, f"config {path}: top level must be an object")
    if getattr(args, "scale", None):
        raw["scale"] = args.scale
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    try:
        return cfgmod.config_from_dict(raw)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))


def _load_pools(args) -> list[TaskPool]:
    path = Path(args.tasks)
    if not path.is_file():
        raise CliError(EXIT_USAGE, f"tasks manifest not found: {path}")
    try:
        return load_manifest(path)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))


def _split_pools(pools: list[TaskPool], split: str) -> dict[str, TaskPool]:
    picked = {p.task_id: p for p in pools if p.split == split}
    if not picked:
        raise CliError(EXIT_EMPTY, f"no {split} tasks in manifest")
    return picked


def _write_text(path, text: str) -> None:
    """Atomic write: the file either keeps its old content or has the new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_ckpt(path, config: cfgmod.RunConfig, override: bool):
    """Read a checkpoint, enforcing the config hash unless overridden."""
    path = Path(path)
    if not path.is_file():
        raise CliError(EXIT_USAGE, f"checkpoint not found: {path}")
    try:
        return checkpoint.load_checkpoint(
            path, expected_hash=cfgmod.config_hash(config), override=override)
    except ValueError as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc))


def _load_surrogate(path, config: cfgmod.RunConfig,
                    override: bool) -> tuple[pfn.PfnSurrogate, dict]:
    arrays, meta = _load_ckpt(path, config, override)
    if "pair_embed/w" not in arrays:
        raise CliError(EXIT_CHECKPOINT,
                       f"checkpoint {path}: not a surrogate model")
    pfn_config = dataclasses.replace(
        config.pfn, positional_encoding=bool(meta.get("positional_encoding", False)))
    return pfn.PfnSurrogate(pfn_config, arrays), meta


def _save_ckpt(path, arrays: dict, config: cfgmod.RunConfig, stage: str,
               extra: dict | None = None) -> None:
    meta = {"config_hash": cfgmod.config_hash(config), "seed": config.seed,
            "stage": stage}
    meta.update(extra or {})
    checkpoint.save_checkpoint(path, arrays, meta)


# ---------------------------------------------------------------------------
# trajectory cache format: traj/<task-id>/<rollout-index>.csv


def _trajectory_csv_text(traj: mdprior.Trajectory) -> str:
    d = traj.xs.shape[1]
    header = ",".join(["t"] + [f"x{i + 1}" for i in range(d)] + ["y"])
    lines = [header]
    steps = np.rint(traj.ts * len(traj.ts)).astype(int)
    for t, x, y in zip(steps, traj.xs, traj.ys):
        cells = [str(int(t))] + [repr(float(v)) for v in x] + [repr(float(y))]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _read_trajectory_csv(path: Path, task_id: str) -> mdprior.Trajectory:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["t"] or rows[0][-1] != "y" or len(rows[0]) < 3:
        raise CliError(EXIT_CONFIG, f"{path}: expected header t,x1..xd,y")
    try:
        data = np.asarray([[float(c) for c in row] for row in rows[1:]],
                          dtype=np.float64)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"{path}: non-numeric cell")
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] != len(rows[0]):
        raise CliError(EXIT_CONFIG, f"{path}: ragged or empty rollout")
    steps = data.shape[0]
    return mdprior.Trajectory(xs=data[:, 1:-1], ys=data[:, -1],
                              ts=data[:, 0] / steps, task_id=task_id)


def _load_trajectories(root: Path,
                       pools: dict[str, TaskPool]) -> dict[str, list]:
    cache = root / "traj"
    out = {}
    for tid in sorted(pools):
        task_dir = cache / tid
        files = []
        if task_dir.is_dir():
            files = sorted((p for p in task_dir.glob("*.csv") if p.stem.isdigit()),
                           key=lambda p: int(p.stem))
        if not files:
            raise CliError(EXIT_USAGE,
                           f"no trajectories for task {tid!r} under {cache}")
        out[tid] = [_read_trajectory_csv(p, tid) for p in files]
    return out


# ---------------------------------------------------------------------------
# run records: runs/<method>/<task>/<seed>.csv


def _run_csv_text(run: boloop.BoRun) -> str:
    d = run.xs.shape[1]
    header = ",".join(["iteration"] + [f"x{i + 1}" for i in range(d)]
                      + ["y", "best", "regret"])
    lines = [header]
    for t in range(run.horizon):
        cells = [str(t + 1)]
        cells += [repr(float(v)) for v in run.xs[t]]
        cells += [repr(float(run.ys[t])), repr(float(run.best[t])),
                  repr(float(run.regret[t]))]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _read_run_csv(path: Path, method: str, task_id: str) -> boloop.BoRun:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["iteration"] or rows[0][-1] != "regret":
        raise CliError(EXIT_CONFIG, f"{path}: expected header iteration,x1..xd,y,best,regret")
    try:
        data = np.asarray([[float(c) for c in row] for row in rows[1:]],
                          dtype=np.float64)
        seed = int(path.stem)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"{path}: malformed run record")
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] != len(rows[0]):
        raise CliError(EXIT_CONFIG, f"{path}: ragged or empty run record")
    try:
        return boloop.BoRun(method=method, task_id=task_id, seed=seed,
                            horizon=data.shape[0], xs=data[:, 1:-3],
                            ys=data[:, -3], best=data[:, -2], regret=data[:, -1])
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: {exc}")


def _walk_runs(runs_dir: Path) -> list[boloop.BoRun]:
    runs = []
    if runs_dir.is_dir():
        for method_dir in sorted(p for p in runs_dir.iterdir() if p.is_dir()):
            for task_dir in sorted(p for p in method_dir.iterdir() if p.is_dir()):
                for f in sorted(task_dir.glob("*.csv")):
                    runs.append(_read_run_csv(f, method_dir.name, task_dir.name))
    if not runs:
        raise CliError(EXIT_EMPTY, "no runs found")
    return runs


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> None:
    config = _run_config(args)
    pfn_config = dataclasses.replace(config.pfn, positional_encoding=False)
    model = pfn.init_surrogate(pfn_config, derive_rng(config.seed, "init-surrogate"))
    try:
        model, info = metatrain.pretrain(model, config.gp_prior, config.train,
                                         derive_rng(config.seed, "pretrain"))
    except (ValueError, RuntimeError) as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    _save_ckpt(args.out, model.params, config, "pretrain",
               {"positional_encoding": False})
    print(f"pretrain: {config.train.k1} iterations, "
          f"final loss {info['losses'][-1]:.4f} -> {args.out}")


def cmd_train_priors(args) -> None:
    config = _run_config(args)
    train_pools = _split_pools(_load_pools(args), "train")
    out_dir = Path(args.out) / "mdp"
    for tid in sorted(train_pools):
        rng = derive_rng(config.seed, "dqn", tid)
        try:
            q, info = mdprior.train_dqn(train_pools[tid], config.dqn, rng)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc))
        path = out_dir / f"{tid}.ckpt"
        _save_ckpt(path, q.params, config, "mdp",
                   {"task_id": tid, "k": q.k, "d": q.d,
                    "hidden": list(q.hidden),
                    "gate_passed": bool(info["gate_passed"])})
        gate = "pass" if info["gate_passed"] else "timeout"
        print(f"train-priors: {tid} gate={gate} epochs={info['epochs']} -> {path}")


def cmd_gen_traj(args) -> None:
    config = _run_config(args)
    train_pools = _split_pools(_load_pools(args), "train")
    priors_dir = Path(args.priors) / "mdp"
    for tid in sorted(train_pools):
        arrays, meta = _load_ckpt(priors_dir / f"{tid}.ckpt", config, args.override)
        if "l0/w" not in arrays:
            raise CliError(EXIT_CHECKPOINT,
                           f"checkpoint {priors_dir / (tid + '.ckpt')}: "
                           "not a value network")
        q = mdprior.QNet(params=arrays, k=int(meta["k"]), d=int(meta["d"]),
                         hidden=tuple(meta["hidden"]))
        trajs = mdprior.generate_trajectories(
            q, train_pools[tid], count=config.bench.trajectories_per_task,
            T=config.dqn.episode_len, k=config.dqn.history_k,
            eps=config.bench.rollout_eps, noise_std=config.dqn.noise_std,
            rng=derive_rng(config.seed, "gen-traj", tid))
        task_dir = Path(args.out) / "traj" / tid
        for i, traj in enumerate(trajs):
            _write_text(task_dir / f"{i}.csv", _trajectory_csv_text(traj))
        print(f"gen-traj: {tid} x{len(trajs)} -> {task_dir}")


_VARIANT_TAGS = {(): "profbo", ("maml",): "no-maml", ("pos",): "no-pos",
                 ("maml", "pos"): "no-maml-no-pos"}


def cmd_finetune(args) -> None:
    config = _run_config(args)
    ablations = tuple(sorted(set(args.ablation or [])))
    if args.method == "tnp-plus":
        if ablations:
            raise CliError(EXIT_USAGE,
                           "--ablation does not combine with --method tnp-plus")
        tag = "tnp-plus"
    else:
        tag = _VARIANT_TAGS[ablations]
    base, _ = _load_surrogate(args.ckpt, config, args.override)
    train_pools = _split_pools(_load_pools(args), "train")
    if tag == "tnp-plus":
        data = metatrain.PoolSubsequenceSource(train_pools, config.pfn.seq_len)
    else:
        if not args.traj:
            raise CliError(EXIT_USAGE, "--traj is required unless --method tnp-plus")
        trajectories = _load_trajectories(Path(args.traj), train_pools)
        try:
            data = metatrain.TrajectoryDataset(train_pools, trajectories,
                                               config.pfn.seq_len)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc))
    positional = "pos" not in ablations
    try:
        model, info = metatrain.finetune_variant(
            base, data, config.train, derive_rng(config.seed, "finetune", tag),
            gp=config.gp_prior, adaptation="maml" not in ablations,
            positional=positional)
    except (ValueError, RuntimeError) as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    _save_ckpt(args.out, model.params, config, "finetune",
               {"method": tag, "positional_encoding": positional})
    final = info["history"][-1]["loss"]
    print(f"finetune[{tag}]: {config.train.k2} iterations, "
          f"final loss {final:.4f} -> {args.out}")


def _parse_ckpt_flags(entries) -> dict[str, str]:
    out = {}
    for entry in entries or []:
        name, sep, path = entry.partition("=")
        if not sep or not name or not path:
            raise CliError(EXIT_USAGE, f"--ckpt expects METHOD=PATH, got {entry!r}")
        if name not in boloop.SURROGATE_METHODS:
            raise CliError(EXIT_USAGE,
                           f"--ckpt method {name!r} is not a surrogate method")
        out[name] = path
    return out


def cmd_benchmark(args) -> None:
    config = _run_config(args)
    targets = _split_pools(_load_pools(args), "test")
    methods = list(dict.fromkeys(args.method or ["profbo", "gp", "random"]))
    ckpt_paths = _parse_ckpt_flags(args.ckpt)
    models = {}
    for method in methods:
        if method in boloop.SURROGATE_METHODS:
            if method not in ckpt_paths:
                raise CliError(EXIT_USAGE,
                               f"method {method!r} needs --ckpt {method}=PATH")
            model, meta = _load_surrogate(ckpt_paths[method], config, args.override)
            trained_as = meta.get("method")
            if trained_as is not None and trained_as != method:
                print(f"warning: checkpoint for {method!r} was fine-tuned "
                      f"as {trained_as!r}", file=sys.stderr)
            models[method] = model
    seeds = [child_seed(config.seed, "bench-seed", i) % 2**31
             for i in range(config.bench.seeds)]
    acq_params = {"beta": config.bench.ucb_beta, "xi": config.bench.pi_xi}
    runs_dir = Path(args.out) / "runs"
    finals = {method: [] for method in methods}
    for method in methods:
        for tid in sorted(targets):
            for seed in seeds:
                try:
                    run = boloop.run_bo(method, targets[tid],
                                        config.bench.horizon, seed,
                                        init=config.bench.init,
                                        model=models.get(method),
                                        gp_cfg=config.gp_baseline,
                                        acq=config.bench.acq,
                                        acq_params=acq_params)
                except ValueError as exc:
                    raise CliError(EXIT_CONFIG, str(exc))
                _write_text(runs_dir / method / tid / f"{seed}.csv",
                            _run_csv_text(run))
                finals[method].append(run.regret[-1])
    for method in methods:
        mean = float(np.mean(finals[method]))
        print(f"benchmark: {method} mean final regret {mean:.4f} "
              f"({len(finals[method])} runs)")
    print(f"benchmark: run records -> {runs_dir}")


def cmd_report(args) -> None:
    runs = _walk_runs(Path(args.runs))
    methods = sorted({r.method for r in runs})
    try:
        agg = boloop.aggregate(runs, methods)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    horizon = runs[0].horizon
    out_dir = Path(args.out)

    metrics = ("mean_regret", "mean_log_regret", "log_regret_ci",
               "mean_rank", "rank_ci")
    lines = [",".join(("method", "iteration") + metrics)]
    for method in methods:
        for t in range(horizon):
            cells = [method, str(t + 1)]
            cells += [repr(float(agg[method][m][t])) for m in metrics]
            lines.append(",".join(cells))
    _write_text(out_dir / "aggregate.csv", "\n".join(lines) + "\n")

    payload = {"horizon": horizon, "methods": {
        m: {k: [float(v) for v in agg[m][k]] for k in metrics} for m in methods}}
    _write_text(out_dir / "aggregate.json", cfgmod.canonical_json(payload) + "\n")

    by_key = {(r.task_id, r.seed, r.method): r for r in runs}
    pairs = sorted({(r.task_id, r.seed) for r in runs})
    rank_rows = {}
    for tid, seed in pairs:
        regrets = np.stack([by_key[(tid, seed, m)].regret for m in methods])
        for t in range(horizon):
            ranks = boloop.competition_ranks(regrets[:, t])
            for j, method in enumerate(methods):
                rank_rows[(method, tid, seed, t)] = (regrets[j, t], int(ranks[j]))
    lines = ["method,task,seed,iteration,regret,rank"]
    for (method, tid, seed, t), (regret, rank) in sorted(rank_rows.items()):
        lines.append(f"{method},{tid},{seed},{t + 1},{float(regret)!r},{rank}")
    _write_text(out_dir / "plot_data.csv", "\n".join(lines) + "\n")

    print(f"report: {len(runs)} runs over {len(methods)} methods -> {out_dir}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajbo",
        description="Few-shot Bayesian optimization pipeline: pretrain, "
                    "train-priors, gen-traj, finetune, benchmark, report.",
        epilog=EXIT_CODE_DOC,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration file")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--scale", choices=cfgmod.SCALES,
                        help="override the base profile")

    def add(name, func, help_text, parents=(common,)):
        p = sub.add_parser(name, parents=list(parents), help=help_text,
                           epilog=EXIT_CODE_DOC,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("pretrain", cmd_pretrain,
            "fit the surrogate on random GP functions")
    p.add_argument("--out", required=True, help="output checkpoint path")

    p = add("train-priors", cmd_train_priors,
            "train one value network per source task")
    p.add_argument("--tasks", required=True, help="task manifest CSV")
    p.add_argument("--out", required=True,
                   help="artifacts root; writes <out>/mdp/<task-id>.ckpt")

    p = add("gen-traj", cmd_gen_traj,
            "roll trained policies into a trajectory cache")
    p.add_argument("--tasks", required=True, help="task manifest CSV")
    p.add_argument("--priors", required=True,
                   help="artifacts root containing mdp/<task-id>.ckpt")
    p.add_argument("--out", required=True,
                   help="artifacts root; writes <out>/traj/<task-id>/<i>.csv")
    p.add_argument("--override", action="store_true",
                   help="accept checkpoints whose config hash differs")

    p = add("finetune", cmd_finetune,
            "meta-train the surrogate on cached trajectories")
    p.add_argument("--ckpt", required=True, help="pre-trained base checkpoint")
    p.add_argument("--tasks", required=True, help="task manifest CSV")
    p.add_argument("--traj",
                   help="artifacts root containing traj/<task-id>/<i>.csv")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--ablation", action="append", choices=("maml", "pos"),
                   help="disable a component (repeatable)")
    p.add_argument("--method", choices=("profbo", "tnp-plus"),
                   default="profbo",
                   help="training source: trajectories or raw pool subsequences")
    p.add_argument("--override", action="store_true",
                   help="accept checkpoints whose config hash differs")

    p = add("benchmark", cmd_benchmark,
            "run the optimization loop on held-out tasks")
    p.add_argument("--tasks", required=True, help="task manifest CSV")
    p.add_argument("--out", required=True,
                   help="artifacts root; writes <out>/runs/...")
    p.add_argument("--method", action="append", choices=BENCH_METHODS,
                   help="method to run (repeatable; default profbo, gp, random)")
    p.add_argument("--ckpt", action="append", metavar="METHOD=PATH",
                   help="surrogate checkpoint for a method (repeatable)")
    p.add_argument("--override", action="store_true",
                   help="accept checkpoints whose config hash differs")

    p = add("report", cmd_report,
            "aggregate run records into curves and plot data", parents=())
    p.add_argument("--runs", required=True,
                   help="directory containing <method>/<task>/<seed>.csv")
    p.add_argument("--out", required=True, help="output directory")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
