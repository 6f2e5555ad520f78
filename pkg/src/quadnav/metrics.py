"""Trajectory metrics and the disturbance-sweep evaluation harness."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import List, Mapping, Optional

import numpy as np

from .env import DELTA_LIMIT, ActionCommand, EnvConfig, NavEnv, Variant
from .errors import ConfigError, DomainError, InsufficientDataError, QuadnavError
from .fmt import csv_text, fmt_float
from .sim import DisturbanceMode, DisturbanceSchedule

log = logging.getLogger(__name__)

MAX_ACTION_NORM = float(np.sqrt(3.0) * DELTA_LIMIT)


@dataclass
class Trajectory:
    """One evaluation episode.

    ``positions`` has one more row than there are actions: it starts with the
    initial position and then holds the position after every step.
    """

    positions: np.ndarray
    actions: List[ActionCommand] = field(default_factory=list)
    errors: Optional[np.ndarray] = None
    rewards: Optional[np.ndarray] = None
    scalar_rewards: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.positions) < 2:
            raise InsufficientDataError("a trajectory needs at least 2 points")
        if self.actions and len(self.actions) != len(self.positions) - 1:
            raise DomainError("need exactly one action per step")

    @property
    def num_steps(self) -> int:
        return len(self.positions) - 1


def _positions(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        return traj.positions
    return np.asarray(traj, dtype=float).reshape(-1, 3)


def distance_traveled(traj) -> float:
    p = _positions(traj)
    if len(p) < 2:
        raise InsufficientDataError("distance needs at least 2 points")
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def smoothness(traj) -> float:
    """Mean norm of the per-step second difference over the interior points."""
    p = _positions(traj)
    if len(p) < 3:
        raise InsufficientDataError("smoothness needs at least 3 points")
    second = p[2:] - 2.0 * p[1:-1] + p[:-2]
    return float(np.linalg.norm(second, axis=1).mean())


def avg_ascent_step(traj: Trajectory, k: int = 15) -> float:
    """Mean L2 norm of the commanded displacement over the first ``k`` steps."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    norms = [float(np.linalg.norm(a.delta)) for a in traj.actions[:k]]
    if not norms:
        raise InsufficientDataError("trajectory has no actions")
    return float(np.mean(norms))


def converged(traj, destination, tol: float = 0.1) -> bool:
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    final = _positions(traj)[-1]
    return bool(np.linalg.norm(final - np.asarray(destination, dtype=float)) <= tol)


def action_error_series(traj: Trajectory) -> np.ndarray:
    """Per step: commanded displacement norm minus executed displacement norm."""
    commanded = np.array([np.linalg.norm(a.delta) for a in traj.actions])
    if np.any(commanded > MAX_ACTION_NORM + 1e-12):
        raise DomainError(f"action norm exceeds the {MAX_ACTION_NORM:.4f} m cube diagonal")
    executed = np.linalg.norm(np.diff(traj.positions, axis=0), axis=1)
    return commanded - executed


def discounted_return(rewards, gamma: float) -> float:
    r = np.asarray(rewards, dtype=float)
    return float(np.sum(r * gamma ** np.arange(len(r))))


@dataclass(frozen=True)
class MetricsReport:
    distance_traveled: float
    smoothness: float
    avg_ascent_step: float
    converged: bool
    final_distance: float
    discounted_return: float
    action_errors: np.ndarray

    @property
    def mean_action_error(self) -> float:
        """Mean magnitude of the per-step action error."""
        return float(np.mean(np.abs(self.action_errors)))


def evaluate_trajectory(
    traj: Trajectory, destination, k: int = 15, tol: float = 0.1, gamma: float = 0.99
) -> MetricsReport:
    dest = np.asarray(destination, dtype=float)
    rewards = traj.scalar_rewards if traj.scalar_rewards is not None else np.zeros(traj.num_steps)
    return MetricsReport(
        distance_traveled=distance_traveled(traj),
        smoothness=smoothness(traj),
        avg_ascent_step=avg_ascent_step(traj, k),
        converged=converged(traj, dest, tol),
        final_distance=float(np.linalg.norm(traj.positions[-1] - dest)),
        discounted_return=discounted_return(rewards, gamma),
        action_errors=action_error_series(traj),
    )


def run_episode(
    policy,
    env_cfg: EnvConfig,
    schedule: DisturbanceSchedule,
    initial_position,
    seed,
    deterministic: bool = False,
) -> Trajectory:
    """Roll out ``policy`` for one full episode."""
    cfg = replace(env_cfg, variant=policy.variant)
    env = NavEnv(cfg, schedule)
    obs = env.reset(initial_position)
    rng = np.random.default_rng(seed)
    positions = [env.state.position.copy()]
    actions, errors, rewards, scalars = [], [], [], []
    for _ in range(cfg.max_rl_steps):
        action, _ = policy.act(obs, cfg, rng, deterministic=deterministic)
        res = env.step(action)
        positions.append(res.transition.end_state.position.copy())
        actions.append(action)
        errors.append(res.transition.per_axis_error)
        rewards.append(tuple(res.reward))
        scalars.append(res.scalar_reward)
        obs = res.observation
        if res.done:
            break
    return Trajectory(
        positions=np.array(positions),
        actions=actions,
        errors=np.array(errors),
        rewards=np.array(rewards),
        scalar_rewards=np.array(scalars),
        metadata={
            "variant": policy.variant.value,
            "mode": schedule.mode.value,
            "magnitude": schedule.direction * schedule.magnitude,
            "seed": seed,
        },
    )


@dataclass(frozen=True)
class SweepSpec:
    variants: tuple = ("baseline", "dist", "dist-err")
    modes: tuple = ("x", "z", "xyz")
    magnitudes: tuple = (-0.075, -0.05, -0.025, 0.0, 0.025, 0.05, 0.075)
    eval_initial_position: tuple = (2.0, 0.0, 0.0)
    episodes_per_cell: int = 5
    seed: int = 0
    ascent_steps: int = 15
    converge_tol: float = 0.1
    gamma: float = 0.99
    deterministic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(str(v) for v in self.variants))
        object.__setattr__(self, "modes", tuple(DisturbanceMode(m) for m in self.modes))
        object.__setattr__(self, "magnitudes", tuple(float(m) for m in self.magnitudes))
        object.__setattr__(self, "eval_initial_position", tuple(float(x) for x in self.eval_initial_position))
        if not self.variants or not self.modes or not self.magnitudes:
            raise ConfigError("sweep variants, modes and magnitudes must be nonempty")
        if DisturbanceMode.NONE in self.modes:
            raise ConfigError("sweep modes are x, z or xyz; use magnitude 0 for no wind")
        if self.episodes_per_cell < 1:
            raise ConfigError("episodes_per_cell must be >= 1")
        if not self.converge_tol > 0:
            raise ConfigError("converge_tol must be positive")

    def episode_seed(self, episode: int) -> list:
        # shared across cells so zero-magnitude rows match between modes
        return [int(self.seed), int(episode)]


@dataclass(frozen=True)
class EpisodeResult:
    label: str
    mode: str
    magnitude: float
    episode: int
    report: MetricsReport


@dataclass(frozen=True)
class CellFailure:
    label: str
    mode: str
    magnitude: float
    message: str


TABLE_COLUMNS = [
    "variant", "mode", "magnitude", "episode", "distance_traveled", "smoothness",
    "avg_ascent_step", "converged", "final_distance", "discounted_return", "mean_action_error",
]


@dataclass
class SweepResult:
    spec: SweepSpec
    episodes: List[EpisodeResult] = field(default_factory=list)
    failures: List[CellFailure] = field(default_factory=list)

    def cell(self, label: str, mode, magnitude: float) -> List[MetricsReport]:
        mode = DisturbanceMode(mode).value
        return [
            e.report for e in self.episodes
            if e.label == label and e.mode == mode and e.magnitude == float(magnitude)
        ]

    def cell_mean(self, label: str, mode, magnitude: float, metric: str) -> float:
        reports = self.cell(label, mode, magnitude)
        if not reports:
            return float("nan")
        return float(np.mean([float(getattr(r, metric)) for r in reports]))

    def table_csv(self) -> str:
        rows = []
        for e in self.episodes:
            r = e.report
            rows.append([
                e.label, e.mode, fmt_float(e.magnitude), str(e.episode),
                fmt_float(r.distance_traveled), fmt_float(r.smoothness), fmt_float(r.avg_ascent_step),
                "Yes" if r.converged else "No", fmt_float(r.final_distance),
                fmt_float(r.discounted_return), fmt_float(r.mean_action_error),
            ])
        return csv_text(TABLE_COLUMNS, rows)

    def action_error_csv(self) -> str:
        rows = []
        for e in self.episodes:
            for t, v in enumerate(e.report.action_errors):
                rows.append([e.label, e.mode, fmt_float(e.magnitude), str(e.episode), str(t), fmt_float(v)])
        return csv_text(["variant", "mode", "magnitude", "episode", "step", "action_error"], rows)

    def plot_data_csv(self, mode, metric: str = "discounted_return") -> str:
        """One row per variant, one column per magnitude, cell means of ``metric``."""
        mags = self.spec.magnitudes
        rows = (
            [label] + [fmt_float(self.cell_mean(label, mode, m, metric)) for m in mags]
            for label in self.spec.variants
        )
        return csv_text(["variant"] + [fmt_float(m) for m in mags], rows)

    def summary(self) -> dict:
        cells = []
        for label in self.spec.variants:
            for mode in self.spec.modes:
                for mag in self.spec.magnitudes:
                    reports = self.cell(label, mode, mag)
                    if not reports:
                        continue
                    cells.append({
                        "variant": label,
                        "mode": mode.value,
                        "magnitude": mag,
                        "episodes": len(reports),
                        "converged_fraction": float(np.mean([r.converged for r in reports])),
                        "mean_discounted_return": self.cell_mean(label, mode, mag, "discounted_return"),
                        "mean_action_error": self.cell_mean(label, mode, mag, "mean_action_error"),
                        "mean_distance_traveled": self.cell_mean(label, mode, mag, "distance_traveled"),
                        "mean_smoothness": self.cell_mean(label, mode, mag, "smoothness"),
                        "mean_avg_ascent_step": self.cell_mean(label, mode, mag, "avg_ascent_step"),
                    })
        return {
            "cells": cells,
            "failures": [
                {"variant": f.label, "mode": f.mode, "magnitude": f.magnitude, "message": f.message}
                for f in self.failures
            ],
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def run_sweep(spec: SweepSpec, policies: Mapping[str, object], env_cfg: EnvConfig = EnvConfig()) -> SweepResult:
    """Evaluate every policy on every (mode, magnitude) cell.

    ``policies`` maps each label in ``spec.variants`` to a trained policy.
    A cell that raises is recorded as a failure and the sweep carries on.
    """
    for label in spec.variants:
        if label not in policies:
            raise ConfigError(f"no policy supplied for {label!r}")
        pol = policies[label]
        if pol.params.obs_size != Variant(pol.variant).obs_size:
            raise ConfigError(f"policy {label!r} input size does not match variant {pol.variant.value}")
    result = SweepResult(spec)
    for label in spec.variants:
        pol = policies[label]
        for mode in spec.modes:
            for mag in spec.magnitudes:
                schedule = DisturbanceSchedule.signed(mode, mag)
                try:
                    cell = []
                    for ep in range(spec.episodes_per_cell):
                        traj = run_episode(
                            pol, env_cfg, schedule, spec.eval_initial_position,
                            spec.episode_seed(ep), spec.deterministic,
                        )
                        report = evaluate_trajectory(
                            traj, env_cfg.destination, spec.ascent_steps, spec.converge_tol, spec.gamma
                        )
                        cell.append(EpisodeResult(label, mode.value, mag, ep, report))
                    result.episodes.extend(cell)
                except QuadnavError as exc:
                    log.warning("sweep cell %s/%s/%s failed: %s", label, mode.value, mag, exc)
                    result.failures.append(CellFailure(label, mode.value, mag, str(exc)))
    return result


def mean_action_error(
    policy,
    env_cfg: EnvConfig,
    schedule: DisturbanceSchedule,
    initial_position=(2.0, 0.0, 0.0),
    episodes: int = 5,
    seed: int = 0,
) -> float:
    """Average per-step action-error magnitude over seeded episodes."""
    errs = []
    for ep in range(episodes):
        traj = run_episode(policy, env_cfg, schedule, initial_position, [seed, ep])
        errs.append(np.abs(action_error_series(traj)))
    return float(np.mean(np.concatenate(errs)))


def convergence_rate(
    policy,
    env_cfg: EnvConfig,
    schedule: DisturbanceSchedule,
    initial_position=None,
    episodes: int = 50,
    seed: int = 0,
    tol: float = 0.1,
) -> float:
    start = env_cfg.initial_position if initial_position is None else initial_position
    hits = 0
    for ep in range(episodes):
        traj = run_episode(policy, env_cfg, schedule, start, [seed, ep])
        hits += converged(traj, env_cfg.destination, tol)
    return hits / episodes
