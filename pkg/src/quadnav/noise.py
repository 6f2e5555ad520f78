"""Action-error characterisation: random walks, moment estimates, MVN sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import DELTA_LIMIT, ActionCommand, EnvConfig, env_step
from .errors import DomainError, InsufficientDataError
from .fmt import atomic_write_json, csv_text, fmt_float
from .sim import DisturbanceSchedule, KinematicState

PSD_TOLERANCE = 1e-12


@dataclass(frozen=True)
class ErrorStats:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(3)
        cov = np.asarray(self.covariance, dtype=float).reshape(3, 3)
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise DomainError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_json(cls, obj) -> "ErrorStats":
        return cls(mean=obj["mean"], covariance=obj["covariance"])

    def save(self, path) -> None:
        atomic_write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "ErrorStats":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class RandomWalkConfig:
    num_steps: int = 5000
    schedule: DisturbanceSchedule = field(default_factory=lambda: DisturbanceSchedule.training())
    seed: int = 0
    # None means the environment's maximum target speed
    v_target: Optional[float] = None

    def __post_init__(self):
        if self.num_steps < 1:
            raise DomainError("num_steps must be >= 1")


def run_random_walk(cfg: RandomWalkConfig, env_cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Fly uniformly random relative waypoints and return raw per-step errors, shape (N, 3)."""
    rng = np.random.default_rng(cfg.seed)
    v_target = env_cfg.v_target_max if cfg.v_target is None else cfg.v_target
    state = KinematicState.at_rest(env_cfg.initial_position)
    error = np.zeros(3)
    out = np.empty((cfg.num_steps, 3))
    for t in range(cfg.num_steps):
        delta = rng.uniform(-DELTA_LIMIT, DELTA_LIMIT, size=3)
        res = env_step(state, error, ActionCommand(delta, v_target), cfg.schedule, t, env_cfg)
        out[t] = res.transition.per_axis_error
        state = res.transition.end_state
        error = res.error
    return out


def estimate_stats(samples) -> ErrorStats:
    """Mean and covariance with 1/N normalisation."""
    x = np.asarray(samples, dtype=float).reshape(-1, 3)
    n = x.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n}")
    mean = x.sum(axis=0) / n
    cov = (x.T @ x) / n - np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)
    return ErrorStats(mean, cov)


def psd_sqrt(cov) -> np.ndarray:
    """Symmetric square root of a PSD matrix; tiny negative eigenvalues are clamped."""
    cov = np.asarray(cov, dtype=float)
    w, v = np.linalg.eigh(cov)
    bad = w[w < -PSD_TOLERANCE]
    if bad.size:
        raise DomainError(f"covariance is not positive semidefinite: eigenvalue {bad.min():.6g}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def sample_mvn(stats: ErrorStats, n: int, seed) -> np.ndarray:
    root = psd_sqrt(stats.covariance)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((int(n), 3))
    return stats.mean + z @ root


def expected_error_magnitude(stats: ErrorStats, n: int = 1_000_000, seed=0) -> float:
    if n < 1:
        raise DomainError("n must be >= 1")
    draws = sample_mvn(stats, n, seed)
    return float(np.sqrt(np.einsum("ij,ij->i", draws, draws)).mean())


def errors_csv(samples) -> str:
    rows = ([str(k)] + [fmt_float(v) for v in row] for k, row in enumerate(np.asarray(samples)))
    return csv_text(["step", "error_x", "error_y", "error_z"], rows)
