import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import max_relative_error, random_problem
from quadnav.env import EnvConfig, NavEnv, RewardVector, Variant, squash_action, utility
from quadnav.errors import ConfigError, TrainingDiverged
from quadnav.nn import Adam, Mlp
from quadnav.ppo import (
    ACTION_DIM,
    PolicyParams,
    PpoConfig,
    RolloutBuffer,
    Trainer,
    TrainedPolicy,
    gae_advantages,
    gaussian_log_prob,
    normalize_advantages,
    policy_forward,
    ppo_loss_and_grads,
    ppo_update,
    train,
    train_pareto,
)
from quadnav.sim import DisturbanceSchedule

TINY = PpoConfig(total_timesteps=256, rollout_length=128, minibatch_size=32, epochs_per_update=2, seed=3)


def zero_params(obs_size=12, n_values=1):
    return PolicyParams(
        pi=Mlp.zeros([obs_size, 64, 64, ACTION_DIM]),
        log_std=np.zeros(ACTION_DIM),
        vf=Mlp.zeros([obs_size, 64, 64, n_values]),
        obs_scale=np.ones(obs_size),
    )


def tensors_equal(a: PolicyParams, b: PolicyParams) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a.tensors(), b.tensors()))


# ---- networks --------------------------------------------------------------

def test_zero_network_outputs_zero():
    mean, log_std, value = policy_forward(zero_params(), np.arange(12.0))
    assert np.all(mean == 0) and np.all(log_std == 0) and value == 0


def test_value_output_layer_is_linear():
    params = PolicyParams.init(12, np.random.default_rng(0))
    params.vf.biases[-1][:] = 0.0
    obs = np.random.default_rng(1).normal(size=12)
    before = policy_forward(params, obs)[2]
    params.vf.weights[-1] *= 2.0
    assert policy_forward(params, obs)[2] == pytest.approx(2.0 * before)


def test_forward_is_deterministic():
    params = PolicyParams.init(15, np.random.default_rng(0))
    obs = np.linspace(-1, 1, 15)
    a, b = policy_forward(params, obs), policy_forward(params, obs)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_forward_shape_mismatch():
    with pytest.raises(ConfigError):
        policy_forward(PolicyParams.init(12, np.random.default_rng(0)), np.zeros(15))


def test_layer_shapes():
    params = PolicyParams.init(15, np.random.default_rng(0))
    assert params.pi.sizes == [15, 64, 64, 4]
    assert params.vf.sizes == [15, 64, 64, 1]


def test_batched_log_prob_matches_rowwise():
    rng = np.random.default_rng(0)
    z, mean = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    log_std = np.broadcast_to(rng.normal(size=4), (5, 4))
    rows = [gaussian_log_prob(z[i], mean[i], log_std[i]) for i in range(5)]
    assert np.allclose(gaussian_log_prob(z, mean, log_std), rows)


def test_log_prob_standard_normal_at_origin():
    assert gaussian_log_prob(np.zeros(4), np.zeros(4), np.zeros(4)) == pytest.approx(-2 * np.log(2 * np.pi))


# ---- gradients -------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    assert max_relative_error(seed, step=1e-5) < 1e-4


def test_clipped_samples_contribute_no_gradient():
    params, batch, cfg = random_problem(0)
    mean, log_std, _ = policy_forward(params, batch["obs"])
    logp = gaussian_log_prob(batch["actions"], mean, log_std)
    # ratio 2 with positive advantage: the clipped branch is the minimum
    batch["old_log_probs"] = logp - np.log(2.0)
    batch["advantages"] = np.abs(batch["advantages"]) + 0.1
    cfg = PpoConfig(entropy_coef=0.0, value_coef=0.0)
    _, diag, grads = ppo_loss_and_grads(params, batch, cfg)
    assert diag["clip_fraction"] == 1.0
    pi_count = 2 * len(params.pi.weights) + 1
    assert all(np.all(g == 0.0) for g in grads[:pi_count])


def test_ratio_one_surrogates_coincide():
    params, batch, _ = random_problem(4)
    mean, log_std, _ = policy_forward(params, batch["obs"])
    batch["old_log_probs"] = gaussian_log_prob(batch["actions"], mean, log_std)
    cfg = PpoConfig(entropy_coef=0.0)
    _, diag, _ = ppo_loss_and_grads(params, batch, cfg)
    assert diag["clip_fraction"] == 0.0
    assert diag["approx_kl"] == pytest.approx(0.0, abs=1e-12)
    assert diag["policy_loss"] == pytest.approx(-np.mean(batch["advantages"]))


# ---- GAE -------------------------------------------------------------------

def gae_direct(rewards, values, dones, gamma, lam, last_value):
    """Advantages as the explicit lambda-weighted sum of TD residuals."""
    n = len(rewards)
    nxt = np.append(values[1:], last_value)
    deltas = rewards + gamma * nxt * (1 - dones) - values
    adv = np.zeros(n)
    for t in range(n):
        weight = 1.0
        for k in range(t, n):
            adv[t] += weight * deltas[k]
            if dones[k]:
                break
            weight *= gamma * lam
    return adv


def test_gae_single_terminal_step():
    adv, ret = gae_advantages([1.0], [0.0], [1.0], 1.0, 1.0)
    assert adv[0] == 1.0 and ret[0] == 1.0


def test_gae_all_zero():
    adv, ret = gae_advantages(np.zeros(6), np.zeros(6), np.zeros(6), 0.99, 0.95)
    assert np.all(adv == 0) and np.all(ret == 0)


def test_gae_gamma_zero_is_td_residual():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=8), rng.normal(size=8)
    adv, _ = gae_advantages(r, v, np.zeros(8), 0.0, 0.95, last_value=5.0)
    assert np.array_equal(adv, r - v)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.floats(0.0, 0.999), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_gae_matches_direct_sum(n, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=n), rng.normal(size=n)
    dones = (rng.random(n) < 0.2).astype(float)
    last = float(rng.normal())
    adv, ret = gae_advantages(r, v, dones, gamma, lam, last)
    assert np.allclose(adv, gae_direct(r, v, dones, gamma, lam, last), atol=1e-10)
    assert np.allclose(ret, adv + v)


def test_gae_vector_rewards_columnwise():
    rng = np.random.default_rng(2)
    r, v = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    dones = np.zeros(10)
    dones[4] = 1
    adv, _ = gae_advantages(r, v, dones, 0.9, 0.8, np.array([0.3, -0.2]))
    for k, last in enumerate((0.3, -0.2)):
        col, _ = gae_advantages(r[:, k], v[:, k], dones, 0.9, 0.8, last)
        assert np.allclose(adv[:, k], col)


def test_gae_length_mismatch():
    with pytest.raises(ConfigError):
        gae_advantages([1, 2], [0], [0, 0], 0.9, 0.9)


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200))
def test_advantage_normalisation(values):
    adv = np.array(values)
    if adv.std() < 1e-3:
        return
    out = normalize_advantages(adv)
    assert abs(out.mean()) < 1e-10
    assert abs(out.std() - 1.0) < 1e-6


# ---- updates ---------------------------------------------------------------

def toy_buffer(params, n=64, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(n, params.obs_size))
    mean, log_std, value = policy_forward(params, obs)
    z = mean + np.exp(log_std) * rng.normal(size=mean.shape)
    adv = rng.normal(size=n)
    return RolloutBuffer(obs, z, gaussian_log_prob(z, mean, log_std), rng.normal(size=n), value,
                         np.zeros(n), adv, adv + value)


def test_zero_learning_rate_leaves_params():
    params = PolicyParams.init(12, np.random.default_rng(0))
    cfg = PpoConfig(learning_rate=0.0, minibatch_size=16, epochs_per_update=2)
    new, diag = ppo_update(params, toy_buffer(params), cfg)
    assert tensors_equal(params, new)
    assert np.isfinite(diag["loss"])


def test_update_changes_params_and_not_input():
    params = PolicyParams.init(12, np.random.default_rng(0))
    snapshot = params.copy()
    new, _ = ppo_update(params, toy_buffer(params), PpoConfig(minibatch_size=16, epochs_per_update=2))
    assert tensors_equal(params, snapshot)
    assert not tensors_equal(params, new)


def test_update_without_advantages_rejected():
    params = PolicyParams.init(12, np.random.default_rng(0))
    buf = toy_buffer(params)
    buf.advantages = None
    with pytest.raises(ConfigError):
        ppo_update(params, buf, PpoConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises_training_diverged():
    params = PolicyParams.init(12, np.random.default_rng(0))
    buf = toy_buffer(params)
    buf.returns = np.full(len(buf), np.inf)
    with pytest.raises(TrainingDiverged) as info:
        ppo_update(params, buf, PpoConfig(minibatch_size=16))
    assert "value_loss" in info.value.diagnostics


def test_rollout_buffer_lengths_checked():
    with pytest.raises(ConfigError):
        RolloutBuffer(np.zeros((3, 12)), np.zeros((2, 4)), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))


def test_adam_first_step_moves_by_learning_rate():
    p = [np.array([1.0, -2.0])]
    Adam(p, lr=0.1).step(p, [np.array([3.0, -0.5])])
    assert np.allclose(p[0], [0.9, -1.9], atol=1e-5)


@settings(max_examples=30)
@given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4))
def test_sampled_actions_are_legal(raw):
    params = PolicyParams.init(12, np.random.default_rng(0))
    params.pi.biases[-1][:] = raw
    policy = TrainedPolicy(params, Variant.BASELINE)
    action, _ = policy.act(np.zeros(12), EnvConfig(), np.random.default_rng(0))
    assert np.all(np.abs(action.delta) <= 0.05)
    assert action.v_target >= 0


# ---- training --------------------------------------------------------------

def test_training_is_reproducible():
    a = train(Variant.DIST_ERR, EnvConfig(), DisturbanceSchedule.training(seed=3), TINY)
    b = train(Variant.DIST_ERR, EnvConfig(), DisturbanceSchedule.training(seed=3), TINY)
    assert tensors_equal(a.params, b.params)


def test_training_seed_matters():
    a = train(Variant.BASELINE, EnvConfig(), DisturbanceSchedule.none(), TINY)
    b = train(Variant.BASELINE, EnvConfig(), DisturbanceSchedule.none(), PpoConfig(**{**TINY.__dict__, "seed": 4}))
    assert not tensors_equal(a.params, b.params)


def test_baseline_trains_without_wind():
    trainer = Trainer(Variant.BASELINE, EnvConfig(), DisturbanceSchedule.training(seed=0), TINY)
    assert trainer.schedule == DisturbanceSchedule.none()


def test_update_count_and_curves():
    trainer = Trainer(Variant.DIST, EnvConfig(), DisturbanceSchedule.training(seed=0), TINY)
    trainer.run()
    assert trainer.updates == trainer.total_updates == 2
    lines = trainer.curves_csv().splitlines()
    assert lines[0].startswith("update,timesteps,mean_episode_return")
    assert len(lines) == 3


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    cfg = PpoConfig(**{**TINY.__dict__, "total_timesteps": 384})
    full = Trainer(Variant.DIST_ERR, EnvConfig(), DisturbanceSchedule.training(seed=1), cfg)
    full.run()
    part = Trainer(Variant.DIST_ERR, EnvConfig(), DisturbanceSchedule.training(seed=1), cfg)
    part.run(max_updates=1)
    part.save_checkpoint(tmp_path / "t.ckpt")
    resumed = Trainer.load_checkpoint(tmp_path / "t.ckpt")
    resumed.run()
    assert tensors_equal(full.params, resumed.params)
    assert full.curves_csv() == resumed.curves_csv()


def test_checkpoint_rejects_foreign_pickle(tmp_path):
    import pickle

    path = tmp_path / "x.ckpt"
    path.write_bytes(pickle.dumps({"not": "a trainer"}))
    with pytest.raises(ConfigError):
        Trainer.load_checkpoint(path)


def test_policy_json_round_trip(tmp_path):
    policy = train(Variant.DIST_ERR, EnvConfig(), DisturbanceSchedule.training(seed=3), TINY)
    policy.save(tmp_path / "p.policy")
    back = TrainedPolicy.load(tmp_path / "p.policy")
    assert tensors_equal(policy.params, back.params)
    assert np.array_equal(policy.params.obs_scale, back.params.obs_scale)
    assert back.variant is Variant.DIST_ERR
    obs = np.linspace(-1, 1, 15)
    assert np.array_equal(policy_forward(policy.params, obs)[0], policy_forward(back.params, obs)[0])


def test_policy_file_with_wrong_input_size_rejected(tmp_path):
    policy = TrainedPolicy(PolicyParams.init(12, np.random.default_rng(0)), Variant.BASELINE)
    obj = policy.to_json()
    obj["variant"] = Variant.DIST_ERR.value
    path = tmp_path / "bad.policy"
    path.write_text(json.dumps(obj))
    with pytest.raises(ConfigError):
        TrainedPolicy.load(path)


def test_policy_file_version_checked():
    obj = TrainedPolicy(PolicyParams.init(12, np.random.default_rng(0)), Variant.BASELINE).to_json()
    obj["version"] = 99
    with pytest.raises(ConfigError):
        TrainedPolicy.from_json(obj)


def test_pareto_returns_one_policy_per_weight_in_order():
    weights = [(1.0, 0.0), (1.0, 0.5), (1.0, 1.0)]
    cfg = PpoConfig(total_timesteps=64, rollout_length=64, minibatch_size=32, epochs_per_update=1)
    policies = train_pareto(weights, EnvConfig(), DisturbanceSchedule.training(seed=0), cfg)
    assert [p.weights for p in policies] == weights
    assert all(p.mode == "ser" and p.params.n_values == 2 for p in policies)


def test_pareto_empty_weight_set():
    with pytest.raises(ConfigError):
        train_pareto([], EnvConfig(), DisturbanceSchedule.none(), TINY)


def test_zero_error_weight_matches_dist_objective():
    rewards = RewardVector(-1.7, -0.3)
    action = squash_action(np.zeros(4), EnvConfig())
    ser = utility(rewards, action, EnvConfig(variant=Variant.DIST_ERR, esr_weights=(1.0, 0.0)))
    assert ser == utility(rewards, action, EnvConfig(variant=Variant.DIST))


def test_ser_collects_objective_vectors():
    trainer = Trainer(Variant.DIST_ERR, EnvConfig(), DisturbanceSchedule.training(seed=0), TINY,
                      weights=(1.0, 0.5), mode="ser")
    buf, _ = trainer.collect()
    assert buf.rewards.shape == (TINY.rollout_length, 2)
    assert np.all(buf.rewards <= 0)
    env = NavEnv(trainer.env_cfg, trainer.schedule)
    assert env.observe().shape == (15,)
