"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s``; the verdict lines are
also printed when the capture is on. Criterion 7 trains five policies at
2e5 steps each and takes roughly ten minutes on one core.
"""
import time

import numpy as np
import pytest

from quadnav.cli import main
from quadnav.env import ActionCommand, EnvConfig, Variant, update_error_state
from quadnav.metrics import (
    MAX_ACTION_NORM,
    SweepSpec,
    Trajectory,
    avg_ascent_step,
    converged,
    convergence_rate,
    distance_traveled,
    mean_action_error,
    run_sweep,
    smoothness,
)
from quadnav.noise import expected_error_magnitude
from quadnav.ppo import PpoConfig, Trainer
from quadnav.reach import (
    DynamicsBounds,
    Grid3,
    ValueField,
    bounds_from_stats,
    extract_slice,
    integrate_brt,
    signed_distance_sphere,
)
from quadnav.sim import DisturbanceSchedule

from gradcheck import max_relative_error
from reference_tables import BASELINE, DIST_ERR, RANDOM_WALK

DESTINATION = (0.0, 0.0, 1.0)
EVAL_START = (2.0, 0.0, 0.0)
DESK_STEPS = 200_000
SER_WEIGHTS = [(1.0, 0.0), (1.0, 0.5), (1.0, 1.0)]


@pytest.fixture
def verdict(capsys):
    def emit(criterion, ok, detail):
        line = f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


# ---- 1 ---------------------------------------------------------------------

def test_criterion_1_expected_error_magnitude(verdict):
    start = time.perf_counter()
    value = expected_error_magnitude(RANDOM_WALK, 1_000_000, 0)
    elapsed = time.perf_counter() - start
    ok = abs(value - 0.08168) <= 0.003 and elapsed < 10
    verdict(1, ok, f"E|e| = {value:.5f} (target 0.08168 +/- 0.003), {elapsed:.1f} s")


# ---- 2 ---------------------------------------------------------------------

def test_criterion_2_error_recursion_fixed_point(verdict):
    details, ok = [], True
    for alpha in (0.5, 0.9):
        for delta in (0.01, -0.03, 0.05):
            e = np.zeros(3)
            target = alpha * delta / (1 - alpha)
            for _ in range(200):
                e = update_error_state(e, (delta, 0.0, 0.0), alpha)
            gap = abs(e[0] - target)
            ok &= gap < 1e-9
            details.append(f"a={alpha} d={delta}: {gap:.1e}")
    verdict(2, ok, "; ".join(details))


# ---- 3 ---------------------------------------------------------------------

def test_criterion_3_one_dimensional_oracle(verdict):
    start = time.perf_counter()
    grid = Grid3((-2, -0.5, -0.5), (2, 0.5, 0.5), (81, 8, 8))
    x, _, _ = grid.mesh()
    initial = ValueField(grid, np.abs(x) - 0.1)
    details, ok = [], True
    for u_max, d_max, tau in [(0.5, 0.0, 1.0), (0.5, 0.2, 1.5), (1.0, 0.3, 0.8)]:
        tube = integrate_brt(initial, DynamicsBounds(u_max, (d_max,) * 3), tau).tube.cube()[:, 3, 3]
        front = grid.axis(0)[tube < 0].max()
        expected = 0.1 + (u_max - d_max) * tau
        cells = (front - expected) / grid.spacing[0]
        ok &= abs(cells) <= 2
        details.append(f"(u={u_max}, d={d_max}, tau={tau}): {cells:+.2f} cells")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 5
    verdict(3, ok, "; ".join(details) + f"; {elapsed:.1f} s")


# ---- 4 ---------------------------------------------------------------------

def tube_slice(stats, kappa):
    grid = Grid3()
    initial = signed_distance_sphere(grid, DESTINATION, 0.1)
    result = integrate_brt(initial, bounds_from_stats(stats, 0.1, kappa, DESTINATION), 3.0)
    contains = bool(np.all(result.tube.values[initial.values < 0] < 0))
    return extract_slice(result, "z", 1.0).area, contains


def test_criterion_4_brt_comparison(verdict):
    start = time.perf_counter()
    details, ok = [], True
    for kappa in (0.15, 0.25, 0.35):
        base_area, base_in = tube_slice(BASELINE, kappa)
        ours_area, ours_in = tube_slice(DIST_ERR, kappa)
        good = ours_area > base_area and base_in and ours_in
        ok &= good
        details.append(f"kappa={kappa}: dist-err {ours_area:.4f} vs baseline {base_area:.4f} m^2"
                       f"{'' if good else ' (not larger)'}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300
    verdict(4, ok, "; ".join(details) + f"; {elapsed:.0f} s")


# ---- 5 ---------------------------------------------------------------------

def test_criterion_5_tube_properties(verdict):
    start = time.perf_counter()
    grid = Grid3((-1, -1, 0), (1, 1, 2), (41, 41, 41))
    initial = signed_distance_sphere(grid, DESTINATION, 0.2)
    checks = {"time-monotone": True, "contains-target": True, "disturbance-monotone": True}
    for u_max in (0.3, 0.5):
        previous = None
        for level in (0.0, 0.3, 0.6, 0.9):
            result = integrate_brt(initial, DynamicsBounds(u_max, (level * u_max,) * 3), 1.5,
                                   record_times=(0.5, 1.0))
            fields = [initial.values] + [s.values for s in result.snapshots] + [result.tube.values]
            checks["time-monotone"] &= all(np.all(b <= a) for a, b in zip(fields, fields[1:]))
            checks["contains-target"] &= bool(np.all(result.tube.values[initial.values < 0] < 0))
            if previous is not None:
                checks["disturbance-monotone"] &= bool(np.all(result.tube.values >= previous))
            previous = result.tube.values
    elapsed = time.perf_counter() - start
    ok = all(checks.values()) and elapsed < 120
    verdict(5, ok, ", ".join(f"{k}={v}" for k, v in checks.items()) + f"; {elapsed:.1f} s")


# ---- 6 ---------------------------------------------------------------------

def test_criterion_6_gradient_check(verdict):
    errors = [max_relative_error(seed, step=1e-5) for seed in range(20)]
    worst = max(errors)
    verdict(6, worst < 1e-4, f"max relative error over 20 nets {worst:.2e}")


# ---- 7 ---------------------------------------------------------------------

def desk_train(variant, weights=None, mode="esr"):
    trainer = Trainer(variant, EnvConfig(), DisturbanceSchedule.training(seed=0),
                      PpoConfig(total_timesteps=DESK_STEPS, seed=0), weights=weights, mode=mode)
    return trainer.run()


@pytest.fixture(scope="session")
def desk_policies():
    policies = {"baseline": desk_train(Variant.BASELINE), "dist-err": desk_train(Variant.DIST_ERR)}
    for w in SER_WEIGHTS:
        policies[w] = desk_train(Variant.DIST_ERR, weights=w, mode="ser")
    return policies


def xyz_action_error(policy):
    return mean_action_error(policy, EnvConfig(), DisturbanceSchedule.signed("xyz", 0.075), EVAL_START,
                             episodes=20, seed=0)


@pytest.mark.slow
def test_criterion_7a_baseline_converges(verdict, desk_policies):
    rate = convergence_rate(desk_policies["baseline"], EnvConfig(), DisturbanceSchedule.none(), EVAL_START,
                            episodes=50, seed=0, tol=0.1)
    verdict("7a", rate >= 0.8, f"baseline converged in {rate:.0%} of 50 episodes from {EVAL_START}")


@pytest.mark.slow
def test_criterion_7b_dist_err_beats_baseline(verdict, desk_policies):
    ours = xyz_action_error(desk_policies["dist-err"])
    base = xyz_action_error(desk_policies["baseline"])
    verdict("7b", ours < base, f"mean |action error| under +0.075 N xyz: dist-err {ours:.5f} m, baseline {base:.5f} m")


@pytest.mark.slow
def test_criterion_7c_error_weight_tunes_conservativeness(verdict, desk_policies):
    errors = [xyz_action_error(desk_policies[w]) for w in SER_WEIGHTS]
    ok = all(b <= 1.1 * a for a, b in zip(errors, errors[1:]))
    listing = ", ".join(f"w={w}: {e:.5f}" for w, e in zip(SER_WEIGHTS, errors))
    verdict("7c", ok, f"mean |action error| {listing}")


# ---- 8 ---------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_metric_examples(verdict, desk_policies):
    line = np.column_stack([np.zeros(11), np.zeros(11), np.linspace(0, 1, 11)])
    h = 0.2
    steps = [ActionCommand(np.array(d), 1.0) for d in ((0.03, 0.04, 0), (0, 0, 0.05), (0.05, 0, 0))]
    checks = {
        "distance-line": distance_traveled(line) == pytest.approx(1.0),
        "distance-segment": distance_traveled([(0, 0, 0), (3, 4, 0)]) == pytest.approx(5.0),
        "distance-out-back": distance_traveled([(0, 0, 0), (0.4, 0, 0), (0, 0, 0)]) == pytest.approx(0.8),
        "smooth-collinear": smoothness(line) == pytest.approx(0.0, abs=1e-15),
        "smooth-corner": smoothness([(0, 0, 0), (h, 0, 0), (h, h, 0)]) == pytest.approx(np.sqrt(2) * h),
        "smooth-zigzag": smoothness([(0, 0, 0), (1, 1, 0), (2, 0, 0)]) > smoothness([(0, 0, 0), (1, 0, 0), (2, 0, 0)]),
        "ascent-constant": avg_ascent_step(Trajectory(np.zeros((4, 3)), steps), 3) == pytest.approx(0.05),
        "ascent-first": avg_ascent_step(Trajectory(np.zeros((4, 3)), steps), 1) == pytest.approx(0.05),
        "converged-0.95": converged([(2, 0, 0), (0, 0, 0.95)], DESTINATION),
        "not-converged-0.85": not converged([(2, 0, 0), (0, 0, 0.85)], DESTINATION),
    }
    spec = SweepSpec(variants=("baseline", "dist-err"), episodes_per_cell=1, seed=0)
    sweep = run_sweep(spec, {k: desk_policies[k] for k in ("baseline", "dist-err")})
    largest = max(float(np.abs(e.report.action_errors).max()) for e in sweep.episodes)
    checks["action-norm-bound"] = all(
        np.all(np.abs(e.report.action_errors) <= MAX_ACTION_NORM + 1e-12) for e in sweep.episodes
    ) and not sweep.failures
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(8, ok, f"{len(checks)} checks, failed: {failed or 'none'}; largest |action error| {largest:.4f} m "
                   f"(bound {MAX_ACTION_NORM:.4f})")


# ---- 9 ---------------------------------------------------------------------

def test_criterion_9_command_determinism(verdict, tmp_path):
    stats = {}
    for label, table in (("baseline", BASELINE), ("dist-err", DIST_ERR)):
        stats[label] = tmp_path / f"{label}.json"
        table.save(stats[label])
    quick = [
        "--set", "random_walk.num_steps=300",
        "--set", "ppo.total_timesteps=512", "--set", "ppo.rollout_length=256",
        "--set", "sweep.variants=[baseline]", "--set", "sweep.episodes_per_cell=1",
        "--set", "sweep.magnitudes=[-0.05, 0.0, 0.05]", "--set", "env.max_rl_steps=40",
        "--set", "reach.grid.resolution=[31, 31, 31]", "--set", "reach.tau=1.0",
    ]
    commands = [
        ["random-walk"],
        ["train", "--variant", "baseline"],
        ["sweep"],
        ["brt", "--stats", f"baseline={stats['baseline']}", "--stats", f"dist-err={stats['dist-err']}"],
    ]
    snapshots = []
    for run in ("a", "b"):
        root = tmp_path / run
        for cmd in commands:
            assert main([*cmd, "--output-dir", str(root), *quick]) == 0, cmd
        snapshots.append({p.relative_to(root): p.read_bytes() for p in root.rglob("*.csv")})
    same = snapshots[0] == snapshots[1]
    verdict(9, same and len(snapshots[0]) > 0,
            f"{len(snapshots[0])} CSV artifacts across {len(commands)} commands, identical={same}")
