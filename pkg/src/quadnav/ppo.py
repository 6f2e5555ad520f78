"""PPO with a clipped surrogate, GAE and hand-written gradients.

Two modes are supported. ``esr`` scalarises the reward pair at every step
before computing returns. ``ser`` keeps a critic per objective, accumulates
the vector of discounted returns, and scalarises advantages only at update
time.
"""
from __future__ import annotations

import json
import logging
import math
import pickle
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .env import EnvConfig, NavEnv, Variant, observation_scale, squash_action
from .errors import ConfigError, TrainingDiverged
from .fmt import atomic_write_bytes, atomic_write_text, csv_text, fmt_float, jsonable
from .nn import Adam, Mlp, clip_grad_norm
from .sim import DisturbanceSchedule

log = logging.getLogger(__name__)

ACTION_DIM = 4
HIDDEN = (64, 64)
POLICY_FORMAT = "quadnav-policy"
POLICY_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PolicyParams:
    pi: Mlp
    log_std: np.ndarray
    vf: Mlp
    obs_scale: np.ndarray

    @classmethod
    def init(cls, obs_size: int, rng: np.random.Generator, n_values: int = 1, obs_scale=None):
        return cls(
            pi=Mlp.init([obs_size, *HIDDEN, ACTION_DIM], rng, out_gain=0.01),
            log_std=np.zeros(ACTION_DIM),
            vf=Mlp.init([obs_size, *HIDDEN, n_values], rng, out_gain=1.0),
            obs_scale=np.ones(obs_size) if obs_scale is None else np.asarray(obs_scale, float),
        )

    @property
    def obs_size(self) -> int:
        return self.pi.sizes[0]

    @property
    def n_values(self) -> int:
        return self.vf.sizes[-1]

    def tensors(self) -> List[np.ndarray]:
        """Trainable arrays in a fixed order (views, not copies)."""
        return self.pi.params() + [self.log_std] + self.vf.params()

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.pi.copy(), self.log_std.copy(), self.vf.copy(), self.obs_scale.copy())


def policy_forward(params: PolicyParams, obs):
    """Action mean, log-std and value estimate(s) for one observation or a batch."""
    x = np.asarray(obs, dtype=float)
    single = x.ndim == 1
    if x.shape[-1] != params.obs_size:
        raise ConfigError(f"observation has {x.shape[-1]} entries, network expects {params.obs_size}")
    xb = np.atleast_2d(x) * params.obs_scale
    mean, _ = params.pi.forward(xb)
    value, _ = params.vf.forward(xb)
    if params.n_values == 1:
        value = value[:, 0]
    if single:
        return mean[0], params.log_std.copy(), value[0]
    return mean, np.broadcast_to(params.log_std, mean.shape).copy(), value


def gaussian_log_prob(z, mean, log_std):
    std = np.exp(log_std)
    return -0.5 * np.sum(((z - mean) / std) ** 2, axis=-1) - np.sum(log_std, axis=-1) - 0.5 * ACTION_DIM * _LOG_2PI


@dataclass(frozen=True)
class PpoConfig:
    total_timesteps: int = 200_000
    rollout_length: int = 2048
    minibatch_size: int = 64
    epochs_per_update: int = 10
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("total_timesteps", "rollout_length", "minibatch_size", "epochs_per_update"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if self.clip_epsilon <= 0 or self.learning_rate < 0:
            raise ConfigError("clip_epsilon must be positive and learning_rate nonnegative")


def gae_advantages(rewards, values, dones, gamma, lam, last_value=0.0):
    """Generalised advantage estimation.

    ``dones[t]`` marks that the episode ended after step t. Works on (T,) or
    (T, k) reward/value arrays. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not (len(rewards) == len(values) == len(dones)):
        raise ConfigError("rewards, values and dones must have equal lengths")
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0]) if len(rewards) else 0.0
    next_value = np.asarray(last_value, dtype=float)
    for t in range(len(rewards) - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.obs)
        for name in ("actions", "log_probs", "rewards", "values", "dones"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"rollout field {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.obs)


def ppo_loss_and_grads(params: PolicyParams, batch: dict, cfg: PpoConfig):
    """Total loss, diagnostics and gradients (same order as ``params.tensors()``).

    ``batch`` holds obs, actions (pre-squash), old_log_probs, advantages
    (already scalar and normalised) and returns ((B,) or (B, k)).
    """
    obs = np.asarray(batch["obs"]) * params.obs_scale
    z = batch["actions"]
    adv = batch["advantages"]
    returns = batch["returns"]
    n = len(obs)

    mean, pi_acts = params.pi.forward(obs)
    value, vf_acts = params.vf.forward(obs)
    if returns.ndim == 1:
        returns = returns[:, None]

    log_std = params.log_std
    inv_var = np.exp(-2.0 * log_std)
    diff = z - mean
    logp = -0.5 * np.sum(diff * diff * inv_var, axis=1) - np.sum(log_std) - 0.5 * ACTION_DIM * _LOG_2PI
    ratio = np.exp(logp - batch["old_log_probs"])
    eps = cfg.clip_epsilon
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    surr1 = ratio * adv
    surr2 = clipped * adv
    pg_loss = -float(np.mean(np.minimum(surr1, surr2)))
    v_err = value - returns
    v_loss = float(np.mean(np.sum(v_err * v_err, axis=1)))
    entropy = float(np.sum(log_std) + 0.5 * ACTION_DIM * (1.0 + _LOG_2PI))
    loss = pg_loss - cfg.entropy_coef * entropy + cfg.value_coef * v_loss

    # dL/dlogp: the unclipped branch carries gradient; the clipped branch is flat.
    use_unclipped = surr1 <= surr2
    dlogp = np.where(use_unclipped, -adv * ratio / n, 0.0)
    dmean = (dlogp[:, None] * diff * inv_var)
    dlog_std = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - cfg.entropy_coef
    gw_pi, gb_pi = params.pi.backward(pi_acts, dmean)
    dvalue = cfg.value_coef * 2.0 * v_err / n
    gw_vf, gb_vf = params.vf.backward(vf_acts, dvalue)

    grads = []
    for w, b in zip(gw_pi, gb_pi):
        grads += [w, b]
    grads.append(dlog_std)
    for w, b in zip(gw_vf, gb_vf):
        grads += [w, b]

    log_ratio = logp - batch["old_log_probs"]
    diag = {
        "loss": loss,
        "policy_loss": pg_loss,
        "value_loss": v_loss,
        "entropy": entropy,
        "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
    }
    return loss, diag, grads


def ppo_update(
    params: PolicyParams,
    buffer: RolloutBuffer,
    cfg: PpoConfig,
    optimizer: Optional[Adam] = None,
    rng: Optional[np.random.Generator] = None,
    weights=None,
):
    """Run the epochs of minibatch gradient steps over one rollout.

    Returns (new_params, diagnostics). ``optimizer`` must have been built on
    ``params.tensors()`` of a structurally identical parameter set; it is
    rebound to the copy that gets updated.
    """
    if buffer.advantages is None or buffer.returns is None:
        raise ConfigError("buffer advantages/returns have not been computed")
    new = params.copy()
    if optimizer is None:
        optimizer = Adam(new.tensors(), lr=cfg.learning_rate)
    optimizer.lr = cfg.learning_rate
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    adv = buffer.advantages
    if adv.ndim > 1:
        w = np.asarray(weights if weights is not None else np.ones(adv.shape[1]), dtype=float)
        adv = adv @ w
    n = len(buffer)
    mb = min(cfg.minibatch_size, n)
    history = []
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start : start + mb]
            if len(idx) < 2:
                continue
            batch = {
                "obs": buffer.obs[idx],
                "actions": buffer.actions[idx],
                "old_log_probs": buffer.log_probs[idx],
                "advantages": normalize_advantages(adv[idx]),
                "returns": buffer.returns[idx],
            }
            loss, diag, grads = ppo_loss_and_grads(new, batch, cfg)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged("non-finite PPO loss", diag)
            diag["grad_norm"] = clip_grad_norm(grads, cfg.max_grad_norm)
            optimizer.step(new.tensors(), grads)
            history.append(diag)
    summary = {k: float(np.mean([h[k] for h in history])) for k in history[0]} if history else {}
    return new, summary


@dataclass
class TrainedPolicy:
    params: PolicyParams
    variant: Variant
    weights: tuple = (1.0, 0.0)
    mode: str = "esr"
    seed: int = 0
    config: dict = field(default_factory=dict)

    def act(self, obs, env_cfg: EnvConfig, rng: Optional[np.random.Generator] = None, deterministic=False):
        mean, log_std, _ = policy_forward(self.params, obs)
        if deterministic or rng is None:
            z = mean
        else:
            z = mean + np.exp(log_std) * rng.standard_normal(ACTION_DIM)
        return squash_action(z, env_cfg), z

    def to_json(self) -> dict:
        def layers(net: Mlp):
            return [
                {"shape": list(w.shape), "weights": w.ravel().tolist(), "bias": b.tolist()}
                for w, b in zip(net.weights, net.biases)
            ]

        return {
            "format": POLICY_FORMAT,
            "version": POLICY_VERSION,
            "variant": self.variant.value,
            "weights": list(self.weights),
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "obs_scale": self.params.obs_scale.tolist(),
            "log_std": self.params.log_std.tolist(),
            "pi": layers(self.params.pi),
            "vf": layers(self.params.vf),
        }

    @classmethod
    def from_json(cls, obj) -> "TrainedPolicy":
        if obj.get("format") != POLICY_FORMAT or obj.get("version") != POLICY_VERSION:
            raise ConfigError(f"unsupported policy file (format={obj.get('format')}, version={obj.get('version')})")

        def net(layers):
            ws = [np.array(l["weights"], dtype=float).reshape(l["shape"]) for l in layers]
            bs = [np.array(l["bias"], dtype=float) for l in layers]
            return Mlp(ws, bs)

        params = PolicyParams(
            pi=net(obj["pi"]),
            log_std=np.array(obj["log_std"], dtype=float),
            vf=net(obj["vf"]),
            obs_scale=np.array(obj["obs_scale"], dtype=float),
        )
        variant = Variant(obj["variant"])
        if params.obs_size != variant.obs_size:
            raise ConfigError(f"policy input size {params.obs_size} does not match variant {variant.value}")
        return cls(params, variant, tuple(obj["weights"]), obj["mode"], obj["seed"], obj.get("config", {}))

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "TrainedPolicy":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


CURVE_COLUMNS = [
    "update", "timesteps", "mean_episode_return", "episodes",
    "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction",
]


class Trainer:
    """Rollout/update loop. The whole object is checkpointable with pickle."""

    def __init__(
        self,
        variant,
        env_cfg: EnvConfig,
        schedule: DisturbanceSchedule,
        ppo_cfg: PpoConfig,
        weights=None,
        mode: str = "esr",
    ):
        variant = Variant(variant)
        if mode not in ("esr", "ser"):
            raise ConfigError(f"unknown mode {mode!r}")
        if weights is None:
            weights = env_cfg.esr_weights if variant.uses_error_state else (1.0, 0.0)
        self.weights = tuple(float(w) for w in weights)
        self.env_cfg = replace(env_cfg, variant=variant, esr_weights=self.weights)
        self.schedule = schedule if variant.trains_with_disturbance else DisturbanceSchedule.none()
        self.cfg = ppo_cfg
        self.mode = mode
        self.variant = variant
        self.rng = np.random.default_rng(ppo_cfg.seed)
        n_values = 2 if mode == "ser" else 1
        self.params = PolicyParams.init(
            variant.obs_size, self.rng, n_values=n_values, obs_scale=observation_scale(variant)
        )
        self.optimizer = Adam(self.params.tensors(), lr=ppo_cfg.learning_rate)
        self.env = NavEnv(self.env_cfg, self.schedule)
        self.obs = self.env.reset()
        self.timesteps = 0
        self.updates = 0
        self.episode_return = 0.0
        self.curves: List[list] = []

    @property
    def total_updates(self) -> int:
        return -(-self.cfg.total_timesteps // self.cfg.rollout_length)

    @property
    def finished(self) -> bool:
        return self.updates >= self.total_updates

    def snapshot(self) -> dict:
        return jsonable(
            {
                "variant": self.variant,
                "mode": self.mode,
                "weights": self.weights,
                "env": self.env_cfg,
                "schedule": self.schedule,
                "ppo": self.cfg,
            }
        )

    def collect(self) -> tuple:
        cfg = self.cfg
        T = cfg.rollout_length
        k = self.params.n_values
        obs_buf = np.empty((T, self.params.obs_size))
        act_buf = np.empty((T, ACTION_DIM))
        logp_buf = np.empty(T)
        rew_buf = np.empty((T, k)) if k > 1 else np.empty(T)
        val_buf = np.empty((T, k)) if k > 1 else np.empty(T)
        done_buf = np.empty(T)
        finished_returns = []
        std = np.exp(self.params.log_std)
        for t in range(T):
            mean, log_std, value = policy_forward(self.params, self.obs)
            z = mean + std * self.rng.standard_normal(ACTION_DIM)
            action = squash_action(z, self.env_cfg)
            res = self.env.step(action)
            obs_buf[t] = self.obs
            act_buf[t] = z
            logp_buf[t] = gaussian_log_prob(z, mean, log_std)
            val_buf[t] = value
            if k > 1:
                rew_buf[t] = res.objectives
                scalar = float(np.dot(self.weights, res.objectives))
            else:
                rew_buf[t] = res.scalar_reward
                scalar = res.scalar_reward
            done_buf[t] = float(res.done)
            self.episode_return += scalar
            if res.done:
                finished_returns.append(self.episode_return)
                self.episode_return = 0.0
                self.obs = self.env.reset()
            else:
                self.obs = res.observation
        _, _, last_value = policy_forward(self.params, self.obs)
        adv, ret = gae_advantages(rew_buf, val_buf, done_buf, cfg.gamma, cfg.gae_lambda, last_value)
        buf = RolloutBuffer(obs_buf, act_buf, logp_buf, rew_buf, val_buf, done_buf, adv, ret)
        self.timesteps += T
        return buf, finished_returns

    def step_update(self) -> dict:
        buf, returns = self.collect()
        self.params, diag = ppo_update(
            self.params, buf, self.cfg, optimizer=self.optimizer, rng=self.rng, weights=self.weights
        )
        self.updates += 1
        mean_ret = float(np.mean(returns)) if returns else float("nan")
        self.curves.append(
            [self.updates, self.timesteps, mean_ret, len(returns)]
            + [diag.get(c, float("nan")) for c in CURVE_COLUMNS[4:]]
        )
        log.debug("update %d return %.4f", self.updates, mean_ret)
        return diag

    def run(self, checkpoint_path=None, checkpoint_every: int = 0, max_updates: Optional[int] = None):
        """Train until done (or ``max_updates`` more updates). Returns the policy."""
        done_now = 0
        while not self.finished and (max_updates is None or done_now < max_updates):
            try:
                self.step_update()
            except TrainingDiverged:
                log.error("training diverged at update %d; last checkpoint kept", self.updates)
                raise
            done_now += 1
            if checkpoint_path and checkpoint_every and self.updates % checkpoint_every == 0:
                self.save_checkpoint(checkpoint_path)
        return self.policy()

    def policy(self) -> TrainedPolicy:
        return TrainedPolicy(
            self.params.copy(), self.variant, self.weights, self.mode, self.cfg.seed, self.snapshot()
        )

    def curves_csv(self) -> str:
        rows = ([str(r[0]), str(r[1])] + [fmt_float(x) if x == x else "nan" for x in r[2:3]] + [str(r[3])]
                + [fmt_float(x) for x in r[4:]] for r in self.curves)
        return csv_text(CURVE_COLUMNS, rows)

    def save_checkpoint(self, path) -> None:
        # Adam holds references into self.params; pickle preserves the aliasing.
        atomic_write_bytes(path, pickle.dumps(self, protocol=pickle.HIGHEST_PROTOCOL))

    @staticmethod
    def load_checkpoint(path) -> "Trainer":
        with open(path, "rb") as fh:
            trainer = pickle.load(fh)
        if not isinstance(trainer, Trainer):
            raise ConfigError(f"{path} is not a trainer checkpoint")
        return trainer


def train(variant, env_cfg: EnvConfig, schedule: DisturbanceSchedule, ppo_cfg: PpoConfig,
          weights=None, mode="esr", checkpoint_path=None, checkpoint_every=0) -> TrainedPolicy:
    trainer = Trainer(variant, env_cfg, schedule, ppo_cfg, weights=weights, mode=mode)
    return trainer.run(checkpoint_path=checkpoint_path, checkpoint_every=checkpoint_every)


class ParetoTrainingError(TrainingDiverged):
    def __init__(self, failures, partial):
        self.failures = failures
        self.partial = partial
        super().__init__(f"{len(failures)} of {len(partial)} weight vectors failed to train")


def train_pareto(weight_set: Sequence, env_cfg: EnvConfig, schedule: DisturbanceSchedule,
                 ppo_cfg: PpoConfig, variant=Variant.DIST_ERR) -> List[TrainedPolicy]:
    """One SER policy per weight vector, in input order."""
    if not weight_set:
        raise ConfigError("weight set must be nonempty")
    out, failures = [], {}
    for i, w in enumerate(weight_set):
        try:
            out.append(train(variant, env_cfg, schedule, ppo_cfg, weights=tuple(w), mode="ser"))
        except TrainingDiverged as exc:
            failures[i] = exc
            out.append(None)
    if failures:
        raise ParetoTrainingError(failures, out)
    return out
