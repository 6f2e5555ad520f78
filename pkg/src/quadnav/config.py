"""Run configuration: a YAML file mapped onto nested frozen dataclasses.

Unknown keys are rejected with their dotted location. A single top-level
``seed`` drives every random source (training, wind draws, random walk,
sweep episodes), so the per-section seed fields are not accepted in files.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from typing import Optional

import yaml

from .env import EnvConfig, Variant
from .errors import ConfigError, QuadnavError
from .fmt import jsonable
from .metrics import SweepSpec
from .noise import RandomWalkConfig
from .ppo import PpoConfig
from .reach import Grid3
from .sim import DisturbanceSchedule, LowLevelConfig


@dataclass(frozen=True)
class RandomWalkSection:
    num_steps: int = 5000
    # None flies every waypoint at the environment's maximum target speed
    v_target: Optional[float] = None


@dataclass(frozen=True)
class TrainSection:
    variant: str = "dist-err"
    # nonempty switches `train` to one SER policy per weight vector
    pareto_weights: tuple = ()
    checkpoint_every: int = 10

    def __post_init__(self):
        Variant(self.variant)
        weights = tuple(tuple(float(x) for x in w) for w in self.pareto_weights)
        if any(len(w) != 2 for w in weights):
            raise ConfigError("each pareto weight vector needs two entries")
        object.__setattr__(self, "pareto_weights", weights)
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass(frozen=True)
class ReachConfig:
    grid: Grid3 = field(default_factory=Grid3)
    tau: float = 3.0
    kappa: float = 0.25
    step_duration: float = 0.1
    target_radius: float = 0.1
    cfl: float = 0.9
    dissipation: str = "hamiltonian"
    slice_axis: str = "z"
    slice_coordinate: float = 1.0
    # label -> error-statistics JSON file
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tau < 0 or self.kappa <= 0 or self.step_duration <= 0 or self.target_radius <= 0:
            raise ConfigError("tau must be >= 0 and kappa, step_duration, target_radius positive")
        if not 0 < self.cfl <= 1:
            raise ConfigError("cfl must lie in (0, 1]")
        if self.dissipation not in ("hamiltonian", "dynamics"):
            raise ConfigError(f"dissipation must be hamiltonian or dynamics, got {self.dissipation!r}")
        if self.slice_axis not in ("x", "y", "z"):
            raise ConfigError(f"slice_axis must be x, y or z, got {self.slice_axis!r}")
        object.__setattr__(self, "stats", {str(k): str(v) for k, v in dict(self.stats).items()})


@dataclass(frozen=True)
class RunConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs/experiment"
    env: EnvConfig = field(default_factory=EnvConfig)
    disturbance: DisturbanceSchedule = field(default_factory=DisturbanceSchedule.training)
    random_walk: RandomWalkSection = field(default_factory=RandomWalkSection)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    reach: ReachConfig = field(default_factory=ReachConfig)
    # label -> policy file; labels default to policies/<label>.policy
    policies: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "policies", {str(k): str(v) for k, v in dict(self.policies).items()})

    def ppo_config(self) -> PpoConfig:
        return replace(self.ppo, seed=self.seed)

    def training_schedule(self) -> DisturbanceSchedule:
        return replace(self.disturbance, seed=self.seed)

    def sweep_spec(self) -> SweepSpec:
        return replace(self.sweep, seed=self.seed)

    def random_walk_config(self) -> RandomWalkConfig:
        return RandomWalkConfig(
            num_steps=self.random_walk.num_steps,
            schedule=self.training_schedule(),
            seed=self.seed,
            v_target=self.random_walk.v_target,
        )

    def to_dict(self) -> dict:
        data = jsonable(self)
        for path in SEED_OWNED:
            section, key = path.split(".")
            data[section].pop(key, None)
        return data

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


NESTED = {
    (RunConfig, "env"): EnvConfig,
    (RunConfig, "disturbance"): DisturbanceSchedule,
    (RunConfig, "random_walk"): RandomWalkSection,
    (RunConfig, "ppo"): PpoConfig,
    (RunConfig, "train"): TrainSection,
    (RunConfig, "sweep"): SweepSpec,
    (RunConfig, "reach"): ReachConfig,
    (EnvConfig, "low_level"): LowLevelConfig,
    (ReachConfig, "grid"): Grid3,
}
MAPPING_FIELDS = {(RunConfig, "policies"), (ReachConfig, "stats")}
SEED_OWNED = ("ppo.seed", "disturbance.seed", "sweep.seed")


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(f"unknown key '{where}'")
        if where in SEED_OWNED:
            raise ConfigError(f"'{where}' is not configurable; set the top-level 'seed' instead")
        sub = NESTED.get((cls, key))
        if sub is not None:
            value = _build(sub, value, where)
        elif (cls, key) in MAPPING_FIELDS:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping of label to file")
        else:
            value = _freeze(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None
    except (QuadnavError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data) -> RunConfig:
    return _build(RunConfig, data, "")


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return config_from_dict(data)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def apply_override(data: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` (value parsed as YAML) to a raw config mapping."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} must look like section.key=value")
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r}: {p} is not a section")
    node[parts[-1]] = yaml.safe_load(raw)
    return data
