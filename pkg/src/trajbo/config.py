"""Run configuration: one JSON file covering every module, strictly validated.

A configuration is a flat set of sections, each mapping onto one module's
config dataclass.  Loading starts from the profile named by ``scale`` (desk
or full), overlays the file's values, and rejects any key that no section
defines, so typos fail loudly instead of silently training with defaults.
The canonical JSON form of a config hashes to a stable identifier that
checkpoints embed and verify on load.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .boloop import GpBaselineConfig
from .mdprior import DqnConfig
from .metatrain import TrainConfig
from .pfn import PfnConfig
from .priors import GpPriorConfig

SCALES = ("desk", "full")

ACQUISITIONS = ("ei", "pi", "ucb")


@dataclass(frozen=True)
class BenchmarkConfig:
    """Evaluation-protocol settings for the benchmark and report commands."""

    horizon: int = 20
    init: int = 1
    acq: str = "ei"
    ucb_beta: float = 1.0
    pi_xi: float = 0.0
    seeds: int = 5
    trajectories_per_task: int = 30
    rollout_eps: float = 0.1

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("BenchmarkConfig.horizon must be positive")
        if not 1 <= self.init <= self.horizon:
            raise ValueError("BenchmarkConfig.init must fit inside the horizon")
        if self.acq not in ACQUISITIONS:
            raise ValueError(f"BenchmarkConfig.acq must be one of {ACQUISITIONS}")
        if self.seeds < 1 or self.trajectories_per_task < 1:
            raise ValueError("BenchmarkConfig needs at least one seed and rollout")
        if not 0.0 <= self.rollout_eps <= 1.0:
            raise ValueError("BenchmarkConfig.rollout_eps must lie in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    """Bare construction gives the desk profile; ``full`` the production one."""

    seed: int = 0
    scale: str = "desk"
    pfn: PfnConfig = field(default_factory=PfnConfig.desk)
    gp_prior: GpPriorConfig = field(default_factory=GpPriorConfig)
    dqn: DqnConfig = field(default_factory=lambda: DqnConfig(max_epochs=80))
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    gp_baseline: GpBaselineConfig = field(default_factory=GpBaselineConfig)

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"RunConfig.scale must be one of {SCALES}")

    @classmethod
    def desk(cls, seed: int = 0) -> "RunConfig":
        return cls(seed=seed)

    @classmethod
    def full(cls, seed: int = 0) -> "RunConfig":
        return cls(seed=seed, scale="full", pfn=PfnConfig(), dqn=DqnConfig(),
                   train=TrainConfig.full_scale())


_SECTIONS = ("pfn", "gp_prior", "dqn", "train", "bench", "gp_baseline")


def _coerce(template, value):
    """JSON has no tuples; match the dataclass's tuple fields on the way in."""
    if isinstance(template, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from parsed JSON, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ValueError("config root must be a JSON object")
    scale = data.get("scale", "desk")
    if scale not in SCALES:
        raise ValueError(f"unknown config value scale={scale!r}")
    base = RunConfig.desk() if scale == "desk" else RunConfig.full()
    top = {}
    for key, value in data.items():
        if key in ("seed", "scale"):
            top[key] = value
        elif key in _SECTIONS:
            section = getattr(base, key)
            names = {f.name for f in dataclasses.fields(section)}
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be an object")
            overrides = {}
            for sub, sub_value in value.items():
                if sub not in names:
                    raise ValueError(f"unknown config key '{key}.{sub}'")
                overrides[sub] = _coerce(getattr(section, sub), sub_value)
            top[key] = dataclasses.replace(section, **overrides)
        else:
            raise ValueError(f"unknown config key {key!r}")
    return dataclasses.replace(base, **top)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: RunConfig) -> str:
    blob = canonical_json(config_to_dict(config)).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
