"""Point-mass quadrotor simulator with a closed-loop waypoint executor.

The rigid-body attitude dynamics are not modelled. Orientation and angular
velocity are carried as zeros so the kinematic state keeps its 12 entries.
Each waypoint is flown by a per-axis cascaded controller: a proportional
position loop produces a velocity reference capped at the commanded axis
speed, and a PI velocity loop (the "derivative" and "integral" gains) turns
that into a saturated control force. Wind enters as an additive force.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, SimulationDiverged
from .fmt import fmt_float

_ZERO3 = (0.0, 0.0, 0.0)


def vec3(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"non-finite vector {arr!r}")
    return arr


@dataclass(frozen=True)
class KinematicState:
    position: np.ndarray
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def at_rest(cls, position) -> "KinematicState":
        return cls(position=vec3(position))

    def as_array(self) -> np.ndarray:
        """12 entries: position, roll/pitch/yaw, linear velocity, angular velocity."""
        return np.concatenate(
            [self.position, self.orientation, self.linear_velocity, self.angular_velocity]
        )


class DisturbanceMode(str, enum.Enum):
    NONE = "none"
    X = "x"
    Z = "z"
    XYZ = "xyz"

    @property
    def axes(self) -> tuple[int, ...]:
        return {"none": (), "x": (0,), "z": (2,), "xyz": (0, 1, 2)}[self.value]


@dataclass(frozen=True)
class DisturbanceSchedule:
    """Step/pulse wind force.

    ``fixed=True`` holds ``direction * magnitude`` on every active axis for the
    whole episode (evaluation). ``fixed=False`` redraws an independent sign per
    active axis every ``flip_period`` steps (training).
    """

    mode: DisturbanceMode = DisturbanceMode.NONE
    magnitude: float = 0.0
    flip_period: int = 20
    fixed: bool = True
    seed: int = 0
    direction: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", DisturbanceMode(self.mode))
        if not (self.magnitude >= 0 and math.isfinite(self.magnitude)):
            raise DomainError(f"disturbance magnitude must be finite and >= 0, got {self.magnitude}")
        if int(self.flip_period) < 1:
            raise DomainError(f"flip_period must be >= 1, got {self.flip_period}")
        if self.direction not in (1, -1):
            raise DomainError(f"direction must be +1 or -1, got {self.direction}")

    @classmethod
    def signed(cls, mode, value: float, **kw) -> "DisturbanceSchedule":
        """Fixed schedule from a signed magnitude, as used in evaluation sweeps."""
        return cls(mode=mode, magnitude=abs(value), direction=-1 if value < 0 else 1, fixed=True, **kw)

    @classmethod
    def none(cls) -> "DisturbanceSchedule":
        return cls(DisturbanceMode.NONE, 0.0)

    @classmethod
    def training(cls, mode=DisturbanceMode.XYZ, magnitude=0.025, flip_period=20, seed=0):
        return cls(mode=mode, magnitude=magnitude, flip_period=flip_period, fixed=False, seed=seed)


def wind_at_step(schedule: DisturbanceSchedule, sim_step: int) -> np.ndarray:
    if sim_step < 0:
        raise DomainError(f"sim_step must be >= 0, got {sim_step}")
    wind = np.zeros(3)
    axes = schedule.mode.axes
    if not axes or schedule.magnitude == 0.0:
        return wind
    if schedule.fixed:
        wind[list(axes)] = schedule.direction * schedule.magnitude
        return wind
    # Stateless: the signs of block k depend only on (seed, k).
    block = sim_step // schedule.flip_period
    rng = np.random.default_rng([schedule.seed, block])
    signs = rng.choice((-1.0, 1.0), size=len(axes))
    wind[list(axes)] = signs * schedule.magnitude
    return wind


@dataclass(frozen=True)
class WaypointCommand:
    target_position: np.ndarray
    axis_velocities: np.ndarray


@dataclass(frozen=True)
class LowLevelConfig:
    kp: tuple = (12.0, 12.0, 12.0)
    ki: tuple = (400.0, 400.0, 400.0)
    kd: tuple = (40.0, 40.0, 40.0)
    inner_dt: float = 0.004
    max_inner_steps: int = 120
    arrival_tolerance: float = 0.005
    mass: float = 0.027
    force_limit: float = 0.15

    def __post_init__(self):
        if self.inner_dt <= 0 or self.arrival_tolerance <= 0 or self.mass <= 0:
            raise DomainError("inner_dt, arrival_tolerance and mass must be positive")
        if self.max_inner_steps < 1:
            raise DomainError("max_inner_steps must be >= 1")
        if self.force_limit <= 0:
            raise DomainError("force_limit must be positive")


@dataclass(frozen=True)
class TransitionRecord:
    commanded: WaypointCommand
    start_state: KinematicState
    end_state: KinematicState
    per_axis_error: np.ndarray
    wind_applied: np.ndarray
    inner_steps_used: int


def execute_waypoint(
    state: KinematicState,
    cmd: WaypointCommand,
    wind,
    cfg: LowLevelConfig = LowLevelConfig(),
) -> TransitionRecord:
    """Fly ``cmd`` from ``state`` until arrival or the inner-step budget runs out."""
    p = [float(v) for v in state.position]
    v = [float(x) for x in state.linear_velocity]
    target = [float(x) for x in cmd.target_position]
    speed = [float(x) for x in cmd.axis_velocities]
    w = [float(x) for x in wind]
    for seq in (p, v, target, speed, w):
        for x in seq:
            if not math.isfinite(x):
                raise DomainError("execute_waypoint received a non-finite input")
    if min(speed) < 0:
        raise DomainError(f"axis velocities must be nonnegative, got {speed}")

    dt = cfg.inner_dt
    m = cfg.mass
    fmax = cfg.force_limit
    tol2 = cfg.arrival_tolerance ** 2
    kp, ki, kd = cfg.kp, cfg.ki, cfg.kd
    integ = [0.0, 0.0, 0.0]
    steps = 0
    while steps < cfg.max_inner_steps:
        e = [target[i] - p[i] for i in range(3)]
        if e[0] * e[0] + e[1] * e[1] + e[2] * e[2] <= tol2:
            break
        for i in range(3):
            s = speed[i]
            v_ref = kp[i] * e[i]
            if v_ref > s:
                v_ref = s
            elif v_ref < -s:
                v_ref = -s
            ev = v_ref - v[i]
            force = m * (kd[i] * ev + ki[i] * (integ[i] + ev * dt))
            if force > fmax:
                force = fmax
            elif force < -fmax:
                force = -fmax
            else:
                # conditional integration: no wind-up while saturated
                integ[i] += ev * dt
            v[i] += (force + w[i]) / m * dt
            p[i] += v[i] * dt
            if not (math.isfinite(p[i]) and math.isfinite(v[i])):
                raise SimulationDiverged(i, steps, p[i] if not math.isfinite(p[i]) else v[i])
        steps += 1

    end = KinematicState(position=np.array(p), linear_velocity=np.array(v))
    return TransitionRecord(
        commanded=cmd,
        start_state=state,
        end_state=end,
        per_axis_error=end.position - cmd.target_position,
        wind_applied=np.array(w),
        inner_steps_used=steps,
    )


TRANSITION_COLUMNS = (
    ["step"]
    + [f"cmd_{a}" for a in "xyz"]
    + [f"achieved_{a}" for a in "xyz"]
    + [f"error_{a}" for a in "xyz"]
    + [f"wind_{a}" for a in "xyz"]
)


def transition_rows(records: Iterable[TransitionRecord]):
    for k, rec in enumerate(records):
        yield [str(k)] + [
            fmt_float(x)
            for x in (
                *rec.commanded.target_position,
                *rec.end_state.position,
                *rec.per_axis_error,
                *rec.wind_applied,
            )
        ]


def write_transitions_csv(path, records: Sequence[TransitionRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRANSITION_COLUMNS)
        writer.writerows(transition_rows(records))
