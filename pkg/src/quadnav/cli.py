"""Command-line entry point: ``quadnav <command> --config run.yaml``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
divergence (simulation, training or level-set), 4 sweep finished with
failed cells.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import RunConfig, apply_override, config_from_dict
from .env import Variant
from .errors import ConfigError, InstabilityError, SimulationDiverged, TrainingDiverged
from .fmt import atomic_write_json, atomic_write_text, fmt_float
from .metrics import run_sweep
from .noise import ErrorStats, errors_csv, estimate_stats, expected_error_magnitude, run_random_walk
from .ppo import TrainedPolicy, Trainer
from .reach import bounds_from_stats, extract_slice, integrate_brt, signed_distance_sphere
from .svgplot import line_plot_svg

log = logging.getLogger("quadnav")

OUTPUT_DIR_ENV = "QUADNAV_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4


class ArtifactStore:
    """Output directory with policies/, traces/, stats/, brt/ and reports/.

    Every artifact gets a ``.meta.json`` sidecar holding the command, seed
    and config snapshot. Writes go through a temp file and a rename.
    """

    SUBDIRS = ("policies", "traces", "stats", "brt", "reports")

    def __init__(self, root, config: RunConfig, command: str):
        self.root = Path(root)
        self.config = config
        self.command = command
        for sub in self.SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _meta(self, rel: str) -> None:
        meta = {"command": self.command, "seed": self.config.seed, "config": self.config.to_dict()}
        atomic_write_json(self.path(rel + ".meta.json"), meta)

    def write_text(self, rel: str, text: str) -> Path:
        atomic_write_text(self.path(rel), text)
        self._meta(rel)
        return self.path(rel)

    def write_json(self, rel: str, obj) -> Path:
        atomic_write_json(self.path(rel), obj)
        self._meta(rel)
        return self.path(rel)

    def write_with(self, rel: str, saver) -> Path:
        saver(self.path(rel))
        self._meta(rel)
        return self.path(rel)


def resolve_output_dir(cfg: RunConfig, flag) -> str:
    if flag:
        return flag
    return os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir


def cmd_random_walk(cfg: RunConfig, store: ArtifactStore, args) -> int:
    samples = run_random_walk(cfg.random_walk_config(), cfg.env)
    stats = estimate_stats(samples)
    magnitude = expected_error_magnitude(stats, seed=cfg.seed)
    store.write_text("stats/errors.csv", errors_csv(samples))
    store.write_json("stats/stats.json", stats.to_json())
    store.write_json("stats/expected_magnitude.json", {
        "expected_magnitude": magnitude,
        "empirical_mean_magnitude": float(np.linalg.norm(samples, axis=1).mean()),
        "num_steps": int(len(samples)),
    })
    print(f"expected error magnitude: {fmt_float(magnitude)} m")
    return EXIT_OK


def _policy_name(weights) -> str:
    return "ser_" + "_".join(fmt_float(w) for w in weights)


def _train_one(cfg, store, name, variant, weights, mode, args) -> bool:
    ckpt = store.path(f"policies/{name}.ckpt")
    if args.resume and ckpt.exists():
        trainer = Trainer.load_checkpoint(ckpt)
        log.info("resumed %s at update %d", name, trainer.updates)
    else:
        trainer = Trainer(variant, cfg.env, cfg.training_schedule(), cfg.ppo_config(), weights=weights, mode=mode)
    every = cfg.train.checkpoint_every
    try:
        trainer.run(checkpoint_path=ckpt if every else None, checkpoint_every=every, max_updates=args.max_updates)
    except TrainingDiverged as exc:
        log.error("%s: %s (checkpoint kept at %s)", name, exc, ckpt)
        return False
    store.write_text(f"reports/{name}_curves.csv", trainer.curves_csv())
    if trainer.finished:
        store.write_with(f"policies/{name}.policy", trainer.policy().save)
        print(f"trained {name}: {store.path(f'policies/{name}.policy')}")
    else:
        trainer.save_checkpoint(ckpt)
        print(f"paused {name} at update {trainer.updates}/{trainer.total_updates}; rerun with --resume")
    return True


def cmd_train(cfg: RunConfig, store: ArtifactStore, args) -> int:
    jobs = []
    if args.pareto or cfg.train.pareto_weights:
        weight_set = cfg.train.pareto_weights or ((1.0, 0.0), (1.0, 0.5), (1.0, 1.0))
        for w in weight_set:
            jobs.append((_policy_name(w), Variant.DIST_ERR, w, "ser"))
    else:
        variant = Variant(args.variant or cfg.train.variant)
        jobs.append((variant.value, variant, None, "esr"))
    ok = [_train_one(cfg, store, *job, args) for job in jobs]
    return EXIT_OK if all(ok) else EXIT_DIVERGED


def _load_policies(cfg: RunConfig, store: ArtifactStore, labels) -> dict:
    out = {}
    for label in labels:
        path = Path(cfg.policies.get(label, store.path(f"policies/{label}.policy")))
        if not path.exists():
            raise ConfigError(f"policy for {label!r} not found at {path}; train it or list it under 'policies'")
        out[label] = TrainedPolicy.load(path)
    return out


def cmd_sweep(cfg: RunConfig, store: ArtifactStore, args) -> int:
    spec = cfg.sweep_spec()
    policies = _load_policies(cfg, store, spec.variants)
    result = run_sweep(spec, policies, cfg.env)
    store.write_text("reports/sweep_table.csv", result.table_csv())
    store.write_text("reports/action_errors.csv", result.action_error_csv())
    store.write_text("reports/sweep_summary.json", result.summary_json())
    for mode in spec.modes:
        for metric in ("discounted_return", "mean_action_error", "converged"):
            store.write_text(f"reports/plot_{mode.value}_{metric}.csv", result.plot_data_csv(mode, metric))
        if args.svg:
            series = {
                label: [result.cell_mean(label, mode, m, "discounted_return") for m in spec.magnitudes]
                for label in spec.variants
            }
            svg = line_plot_svg(list(spec.magnitudes), series, title=f"return vs wind ({mode.value})",
                                xlabel="wind force (N)", ylabel="discounted return")
            store.write_text(f"reports/plot_{mode.value}_discounted_return.svg", svg)
    for f in result.failures:
        print(f"cell failed: {f.label} {f.mode} {fmt_float(f.magnitude)}: {f.message}", file=sys.stderr)
    print(f"sweep: {len(result.episodes)} episodes, {len(result.failures)} failed cells")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def brt_for_stats(cfg: RunConfig, stats: ErrorStats):
    rc = cfg.reach
    bounds = bounds_from_stats(stats, rc.step_duration, rc.kappa, reference=cfg.env.destination)
    initial = signed_distance_sphere(rc.grid, cfg.env.destination, rc.target_radius)
    return initial, integrate_brt(initial, bounds, rc.tau, rc.cfl, rc.target_radius, dissipation=rc.dissipation)


def cmd_brt(cfg: RunConfig, store: ArtifactStore, args) -> int:
    stats_files = dict(cfg.reach.stats)
    for item in args.stats or ():
        label, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--stats expects label=path, got {item!r}")
        stats_files[label] = path
    if not stats_files:
        raise ConfigError("no error statistics given; use --stats label=path or reach.stats")
    rc = cfg.reach
    summary = {"tau": rc.tau, "kappa": rc.kappa, "slice": {"axis": rc.slice_axis, "coordinate": rc.slice_coordinate},
               "models": {}}
    for label in sorted(stats_files):
        try:
            stats = ErrorStats.load(stats_files[label])
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read statistics {stats_files[label]}: {exc}") from None
        initial, result = brt_for_stats(cfg, stats)
        sl = extract_slice(result, rc.slice_axis, rc.slice_coordinate)
        store.write_with(f"brt/{label}.field", result.tube.save)
        store.write_text(f"brt/{label}_slice.csv", sl.values_csv())
        store.write_text(f"brt/{label}_contour.csv", sl.contour_csv())
        store.write_json(f"brt/{label}_meta.json", result.metadata())
        summary["models"][label] = {
            "slice_area": sl.area,
            "slice_cell_area": sl.cell_area,
            "contains_target": bool(np.all(result.tube.values <= initial.values)),
            "u_max": result.bounds.u_max,
            "d_max": result.bounds.d_max.tolist(),
        }
    ranking = sorted(summary["models"], key=lambda k: -summary["models"][k]["slice_area"])
    summary["ranking_by_area"] = ranking
    store.write_json("reports/brt_summary.json", summary)
    for label in ranking:
        print(f"{label}: slice area {fmt_float(summary['models'][label]['slice_area'])} m^2")
    return EXIT_OK


def cmd_report(cfg: RunConfig, store: ArtifactStore, args) -> int:
    """Collect whatever results exist into reports/report.md."""
    lines = [f"# {cfg.name}", "", f"seed: {cfg.seed}", ""]
    mag = store.path("stats/expected_magnitude.json")
    if mag.exists():
        data = json.loads(mag.read_text())
        lines += ["## Random walk", "", f"expected error magnitude: {fmt_float(data['expected_magnitude'])} m", ""]
    sweep = store.path("reports/sweep_summary.json")
    if sweep.exists():
        data = json.loads(sweep.read_text())
        lines += ["## Sweep", "", "| variant | mode | magnitude | converged | mean action error | return |",
                  "|---|---|---|---|---|---|"]
        for c in data["cells"]:
            lines.append(
                f"| {c['variant']} | {c['mode']} | {fmt_float(c['magnitude'])} | "
                f"{fmt_float(c['converged_fraction'])} | {fmt_float(c['mean_action_error'])} | "
                f"{fmt_float(c['mean_discounted_return'])} |"
            )
        lines.append("")
    brt = store.path("reports/brt_summary.json")
    if brt.exists():
        data = json.loads(brt.read_text())
        lines += ["## Reachability", "", "| model | slice area (m^2) |", "|---|---|"]
        for label in data["ranking_by_area"]:
            lines.append(f"| {label} | {fmt_float(data['models'][label]['slice_area'])} |")
        lines.append("")
    text = "\n".join(lines)
    store.write_text("reports/report.md", text)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadnav", description="Error-aware waypoint navigation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration (defaults used when omitted)")
        sp.add_argument("--output-dir", help=f"artifact root (overrides ${OUTPUT_DIR_ENV} and the config)")
        sp.add_argument("--seed", type=int, help="override the top-level seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. ppo.total_timesteps=50000")

    sp = sub.add_parser("random-walk", help="estimate action-error statistics from a random walk")
    common(sp)
    sp = sub.add_parser("train", help="train one variant or an SER weight sweep")
    common(sp)
    sp.add_argument("--variant", choices=[v.value for v in Variant])
    sp.add_argument("--pareto", action="store_true", help="train one SER policy per weight vector")
    sp.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    sp.add_argument("--max-updates", type=int, help="stop after this many updates (checkpoint kept)")
    sp = sub.add_parser("sweep", help="evaluate policies across wind modes and magnitudes")
    common(sp)
    sp.add_argument("--svg", action="store_true", help="also write SVG line plots")
    sp = sub.add_parser("brt", help="compute reachability tubes from error statistics")
    common(sp)
    sp.add_argument("--stats", action="append", metavar="LABEL=PATH", help="error statistics JSON per model")
    sp = sub.add_parser("report", help="summarise existing artifacts")
    common(sp)
    return p


COMMANDS = {
    "random-walk": cmd_random_walk,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "brt": cmd_brt,
    "report": cmd_report,
}


def _load(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {args.config}: {exc}") from None
    for assignment in args.set:
        apply_override(data, assignment)
    if args.seed is not None:
        data["seed"] = args.seed
    return config_from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = _load(args)
        store = ArtifactStore(resolve_output_dir(cfg, args.output_dir), cfg, args.command)
        return COMMANDS[args.command](cfg, store, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationDiverged, TrainingDiverged, InstabilityError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
