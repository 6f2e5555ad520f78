"""Waypoint-navigation MDP on top of the point-mass simulator.

The agent emits a relative waypoint (bounded per axis) plus a scalar target
speed. Observations are the 12 kinematic scalars, extended by the three
discounted action-error states for the error-aware variants.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError, DomainError
from .fmt import fmt_float
from .sim import (
    DisturbanceSchedule,
    KinematicState,
    LowLevelConfig,
    TransitionRecord,
    WaypointCommand,
    execute_waypoint,
    wind_at_step,
)

DELTA_LIMIT = 0.05


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    DIST = "dist"
    DIST_ERR = "dist-err"
    DIST_ERR_U = "dist-err-u"

    @property
    def uses_error_state(self) -> bool:
        return self in (Variant.DIST_ERR, Variant.DIST_ERR_U)

    @property
    def trains_with_disturbance(self) -> bool:
        return self is not Variant.BASELINE

    @property
    def obs_size(self) -> int:
        return 15 if self.uses_error_state else 12


@dataclass(frozen=True)
class ActionCommand:
    delta: np.ndarray
    v_target: float

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=float).reshape(3)
        object.__setattr__(self, "delta", d)
        if np.any(np.abs(d) > DELTA_LIMIT + 1e-12):
            raise DomainError(f"delta {d} outside the +/-{DELTA_LIMIT} m action cube")
        if not self.v_target >= 0:
            raise DomainError(f"v_target must be >= 0, got {self.v_target}")

    def as_array(self) -> np.ndarray:
        return np.append(self.delta, self.v_target)


class RewardVector(NamedTuple):
    r_nav: float
    r_err: float


@dataclass(frozen=True)
class EnvConfig:
    destination: tuple = (0.0, 0.0, 1.0)
    initial_position: tuple = (0.0, 0.0, 0.0)
    alpha: float = 0.9
    v_max: float = 0.5
    v_target_max: float = 10.0
    max_rl_steps: int = 150
    variant: Variant = Variant.DIST_ERR
    esr_weights: tuple = (1.0, 0.5)
    low_level: LowLevelConfig = field(default_factory=LowLevelConfig)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "destination", tuple(float(x) for x in self.destination))
        object.__setattr__(self, "initial_position", tuple(float(x) for x in self.initial_position))
        object.__setattr__(self, "esr_weights", tuple(float(x) for x in self.esr_weights))
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.v_max <= 0 or self.v_target_max <= 0:
            raise ConfigError("v_max and v_target_max must be positive")
        if self.max_rl_steps < 1:
            raise ConfigError("max_rl_steps must be >= 1")
        if len(self.esr_weights) != 2:
            raise ConfigError("esr_weights must have two entries")


def clip_velocity(v_target: float, delta, v_max: float) -> np.ndarray:
    return np.clip(v_target * np.abs(np.asarray(delta, dtype=float)), 0.0, v_max)


def update_error_state(prev, per_axis_error, alpha: float) -> np.ndarray:
    """One step of the discounted action-error recursion e <- alpha*err + alpha*e."""
    return alpha * np.asarray(per_axis_error, dtype=float) + alpha * np.asarray(prev, dtype=float)


def compute_rewards(next_pos, err, cfg: EnvConfig) -> RewardVector:
    d = np.asarray(next_pos, dtype=float) - np.asarray(cfg.destination)
    e = np.asarray(err, dtype=float)
    return RewardVector(-float(d @ d), -float(e @ e))


def scalarize_esr(r: RewardVector, weights) -> float:
    w0, w1 = weights
    return w0 * r.r_nav + w1 * r.r_err


def objective_vector(r: RewardVector, action: ActionCommand, variant: Variant) -> RewardVector:
    """Per-variant reward pair fed to the utility.

    The control-penalty variant replaces the error objective with the negative
    squared norm of the commanded displacement.
    """
    if variant is Variant.DIST_ERR_U:
        return RewardVector(r.r_nav, -float(action.delta @ action.delta))
    return r


def utility(r: RewardVector, action: ActionCommand, cfg: EnvConfig) -> float:
    if cfg.variant in (Variant.BASELINE, Variant.DIST):
        return scalarize_esr(r, (1.0, 0.0))
    return scalarize_esr(objective_vector(r, action, cfg.variant), cfg.esr_weights)


def squash_action(raw, cfg: EnvConfig) -> ActionCommand:
    """Map an unbounded 4-vector to a legal action via tanh."""
    raw = np.asarray(raw, dtype=float)
    t = np.tanh(raw)
    delta = np.clip(DELTA_LIMIT * t[:3], -DELTA_LIMIT, DELTA_LIMIT)
    v_target = float(cfg.v_target_max * 0.5 * (t[3] + 1.0))
    return ActionCommand(delta=delta, v_target=max(v_target, 0.0))


def observation_scale(variant: Variant) -> np.ndarray:
    """Fixed per-component input scaling so all features are O(1) for the network."""
    scale = np.concatenate([np.ones(3), np.ones(3), np.full(3, 2.0), np.ones(3)])
    if Variant(variant).uses_error_state:
        scale = np.concatenate([scale, np.full(3, 20.0)])
    return scale


class StepResult(NamedTuple):
    observation: np.ndarray
    reward: RewardVector
    done: bool
    scalar_reward: float
    objectives: RewardVector
    error: np.ndarray
    transition: TransitionRecord


class NavEnv:
    """Single-threaded navigation environment.

    ``schedule`` is the disturbance schedule for every episode. Training
    schedules get a per-episode seed so episodes see different wind draws.
    """

    def __init__(self, cfg: EnvConfig, schedule: Optional[DisturbanceSchedule] = None):
        self.cfg = cfg
        self.schedule = schedule if schedule is not None else DisturbanceSchedule.none()
        self.destination = np.array(cfg.destination)
        self.episode_index = -1
        self.state: KinematicState
        self.error = np.zeros(3)
        self.t = 0
        self._episode_schedule = self.schedule
        self.reset()

    @property
    def obs_size(self) -> int:
        return self.cfg.variant.obs_size

    def reset(self, initial_position=None, episode_seed: Optional[int] = None) -> np.ndarray:
        self.episode_index += 1
        pos = self.cfg.initial_position if initial_position is None else initial_position
        self.state = KinematicState.at_rest(pos)
        self.error = np.zeros(3)
        self.t = 0
        if not self.schedule.fixed:
            seed = episode_seed if episode_seed is not None else self.schedule.seed * 1_000_003 + self.episode_index
            self._episode_schedule = replace(self.schedule, seed=int(seed))
        return self.observe()

    def observe(self) -> np.ndarray:
        kin = self.state.as_array()
        if self.cfg.variant.uses_error_state:
            return np.concatenate([kin, self.error])
        return kin

    def step(self, action: ActionCommand) -> StepResult:
        if self.t >= self.cfg.max_rl_steps:
            raise DomainError("episode finished; call reset()")
        result = env_step(self.state, self.error, action, self._episode_schedule, self.t, self.cfg)
        self.state = result.transition.end_state
        self.error = result.error
        self.t += 1
        done = self.t >= self.cfg.max_rl_steps
        return result._replace(done=done)

    def get_state(self):
        return {
            "episode_index": self.episode_index,
            "state": self.state,
            "error": self.error.copy(),
            "t": self.t,
            "episode_schedule": self._episode_schedule,
        }

    def set_state(self, snap) -> None:
        self.episode_index = snap["episode_index"]
        self.state = snap["state"]
        self.error = np.array(snap["error"])
        self.t = snap["t"]
        self._episode_schedule = snap["episode_schedule"]


def env_step(
    state: KinematicState,
    error,
    action: ActionCommand,
    schedule: DisturbanceSchedule,
    t: int,
    cfg: EnvConfig,
) -> StepResult:
    """Execute one high-level action and score it."""
    speeds = clip_velocity(action.v_target, action.delta, cfg.v_max)
    cmd = WaypointCommand(target_position=state.position + action.delta, axis_velocities=speeds)
    rec = execute_waypoint(state, cmd, wind_at_step(schedule, t), cfg.low_level)
    new_error = update_error_state(error, rec.per_axis_error, cfg.alpha)
    reward = compute_rewards(rec.end_state.position, new_error, cfg)
    kin = rec.end_state.as_array()
    obs = np.concatenate([kin, new_error]) if cfg.variant.uses_error_state else kin
    objectives = objective_vector(reward, action, cfg.variant)
    return StepResult(
        observation=obs,
        reward=reward,
        done=t + 1 >= cfg.max_rl_steps,
        scalar_reward=utility(reward, action, cfg),
        objectives=objectives,
        error=new_error,
        transition=rec,
    )


def trace_header(variant: Variant) -> list:
    names = ["x", "y", "z", "roll", "pitch", "yaw", "vx", "vy", "vz", "wx", "wy", "wz"]
    if Variant(variant).uses_error_state:
        names += ["x_e", "y_e", "z_e"]
    return (
        ["step"]
        + [f"obs_{n}" for n in names]
        + ["dx", "dy", "dz", "v_target", "r_nav", "r_err", "reward", "done"]
    )


def write_trace_csv(path, variant, rows) -> None:
    """``rows`` are (obs, action, RewardVector, scalar, done) tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(variant))
        for k, (obs, action, r, scalar, done) in enumerate(rows):
            w.writerow(
                [str(k)]
                + [fmt_float(x) for x in obs]
                + [fmt_float(x) for x in action.as_array()]
                + [fmt_float(r.r_nav), fmt_float(r.r_err), fmt_float(scalar), str(int(done))]
            )
