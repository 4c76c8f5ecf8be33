import argparse
import os
import sys
import time
import traceback
from typing import Optional

import numpy as np
import pandas as pd

from config import RunConfig, parse_config, apply_setting, validate, echo_config
from errors import ConfigError, MissingArtifactError
from eval_harness import run_grid, write_grid, eval_ladders, log_trajectory, read_trajectory, trajectory_rmse, \
    perturbation_test, write_perturbation_report
from ladder_env import LadderEnv
from ladder_terrain import curriculum_sample, generate_ladder, dump_terrain
from models import CurriculumState
from planar_sim import PlanarSimulator
from policy_learn import train_teacher, distill_student
from util import log, derive_seed
from visualization import plot_training_curves, plot_trajectory_overlay

COMMANDS = ("gen-terrain", "train-teacher", "distill", "eval", "perturb")
DEFAULT_PULLS = [(2.0, "LF", (0.0, -300.0), 0.5)]
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def get_time_stamp():
    return time.strftime("%Y%m%d_%H%M%S")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laddergym", description="Planar quadruped ladder climbing")
    parser.add_argument("command", choices=COMMANDS, help="what to run")
    parser.add_argument("--config", type=str, default=None, help="profile file with 'section.key = value' lines")
    parser.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    parser.add_argument("--workers", type=int, default=None, help="overrides run.workers")
    parser.add_argument("--out", type=str, default=None,
                        help="output root (default: $LADDERGYM_OUT or ./Output)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a single config key, may be repeated")
    parser.add_argument("--checkpoint", type=str, default=None,
                        help="policy checkpoint for eval/perturb, teacher checkpoint for distill")
    parser.add_argument("--resume", type=str, default=None,
                        help="train-teacher: continue from a teacher checkpoint written by an earlier run")
    parser.add_argument("--compare", action="store_true", help="eval: run both the hook and the ball grid")
    parser.add_argument("--verbose", action="store_true", help="print incidents and tracebacks")
    return parser


def load_run_config(args) -> RunConfig:
    config = parse_config(args.config, args.overrides)
    for key, value in (("run.seed", args.seed), ("run.workers", args.workers), ("run.out", args.out)):
        if value is not None:
            apply_setting(config, key, repr(value), "flag")
    if args.verbose:
        apply_setting(config, "run.verbose", "True", "flag")
    validate(config)
    return config


def make_run_dir(config: RunConfig, command: str) -> str:
    name = f"{command}_{config.run.tag}" if config.run.tag else f"{command}_{get_time_stamp()}"
    run_dir = os.path.join(config.output_root(), name)
    os.makedirs(run_dir, exist_ok=True)
    config.run_dir = run_dir
    echo_config(config, os.path.join(run_dir, "config.echo"))
    return run_dir


def cmd_gen_terrain(config: RunConfig, run_dir: str, args) -> int:
    """eval.num_ladders ladders at terrain.start_level, one text file each plus an index."""
    out = os.path.join(run_dir, "terrain")
    os.makedirs(out, exist_ok=True)
    schedule = config.terrain.schedule()
    level = min(config.terrain.start_level, schedule.max_level)
    rows = []
    for k in range(config.eval.num_ladders):
        seed = derive_seed(config.seed, 3, k)
        rng = np.random.default_rng(seed)
        spec = curriculum_sample(CurriculumState(level=level, schedule=schedule), rng)
        terrain = generate_ladder(spec, rng, level=level, seed=seed,
                                  heading_range=config.terrain.heading_range_rad)
        path = os.path.join(out, f"ladder_{k:03d}.txt")
        dump_terrain(terrain, path)
        rows.append({"file": os.path.basename(path), "seed": seed, "level": level, "rungs": len(terrain.rung_centers),
                     "incline_deg": float(np.degrees(spec.incline_rad)), "spacing_m": spec.spacing_m,
                     "major_radius_m": spec.rung_major_radius_m})
    pd.DataFrame(rows).to_csv(os.path.join(out, "index.csv"), index=False)
    log(f"wrote {len(rows)} terrains to {out}")
    return EXIT_OK


def cmd_train_teacher(config: RunConfig, run_dir: str, args) -> int:
    if args.resume and not os.path.exists(args.resume):
        raise MissingArtifactError("teacher checkpoint", args.resume)
    _, metrics = train_teacher(config, run_dir, progress=sys.stderr.isatty(), resume=args.resume)
    plot_training_curves(metrics, os.path.join(run_dir, "curves.svg"))
    log(f"teacher checkpoint: {os.path.join(run_dir, 'ckpt', 'teacher.ckpt')}")
    return EXIT_OK


def cmd_distill(config: RunConfig, run_dir: str, args) -> int:
    teacher = args.checkpoint or config.train.teacher_checkpoint
    if not teacher or not os.path.exists(teacher):
        raise MissingArtifactError("teacher checkpoint", teacher or "<set train.teacher_checkpoint or --checkpoint>")
    _, metrics = distill_student(config, teacher, run_dir, progress=sys.stderr.isatty())
    plot_training_curves(metrics, os.path.join(run_dir, "curves.svg"), ("imitation", "pose_error", "goal_rate"))
    log(f"student checkpoint: {os.path.join(run_dir, 'ckpt', 'student.ckpt')}")
    return EXIT_OK


def _policy_checkpoint(config: RunConfig, args) -> Optional[str]:
    checkpoint = args.checkpoint or config.eval.checkpoint
    if config.eval.policy in ("teacher", "student") and (not checkpoint or not os.path.exists(checkpoint)):
        raise MissingArtifactError(f"{config.eval.policy} checkpoint",
                                   checkpoint or "<set eval.checkpoint or --checkpoint>")
    return checkpoint


def cmd_eval(config: RunConfig, run_dir: str, args) -> int:
    checkpoint = _policy_checkpoint(config, args)
    out = os.path.join(run_dir, "eval")
    end_effectors = ("hook", "ball") if args.compare else (config.eval.end_effector,)
    trajectories = []
    for end_effector in end_effectors:
        grid = run_grid(config, end_effector, checkpoint=checkpoint, progress=sys.stderr.isatty())
        write_grid(grid, out, f"grid_{end_effector}")
        print(grid.to_string(index=False))
        terrain = eval_ladders(config, config.eval.inclines_deg[0], config.eval.radii_m[0])[0]
        path = os.path.join(out, f"trajectory_{end_effector}.txt")
        summary = log_trajectory(config, terrain, path, checkpoint=checkpoint, end_effector=end_effector)
        log(f"{end_effector} trajectory: {summary}")
        trajectories.append(read_trajectory(path))
    if len(trajectories) == 2:
        plot_trajectory_overlay(trajectories, end_effectors, os.path.join(out, "trajectory_overlay.svg"),
                                trajectory_rmse(*trajectories))
    return EXIT_OK


def cmd_perturb(config: RunConfig, run_dir: str, args) -> int:
    checkpoint = _policy_checkpoint(config, args)
    terrain = eval_ladders(config, config.eval.inclines_deg[0], config.eval.radii_m[0])[0]
    pulls = config.eval.pulls or DEFAULT_PULLS
    report = perturbation_test(config, terrain, pulls, checkpoint=checkpoint)
    path = write_perturbation_report(report, os.path.join(run_dir, "eval"))
    for pull, flag in zip(report["pulls"], report["flags"]):
        print(f"pull {pull.body} {pull.force} N at {pull.time_s:g} s for {pull.duration_s:g} s: {flag}")
    print(f"tension events {report['tension_events']}, breakaways {report['breakaways']}")
    log(f"report: {path}")
    return EXIT_OK


HANDLERS = {"gen-terrain": cmd_gen_terrain, "train-teacher": cmd_train_teacher, "distill": cmd_distill,
            "eval": cmd_eval, "perturb": cmd_perturb}


def main(argv: Optional[list[str]] = None) -> int:
    """0 on success, 1 on a runtime failure, 2 on a usage error or a missing prerequisite."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    verbose = args.verbose
    try:
        config = load_run_config(args)
        verbose = config.run.verbose
        PlanarSimulator.verbose = LadderEnv.verbose = verbose
        run_dir = make_run_dir(config, args.command)
        return HANDLERS[args.command](config, run_dir, args)
    except (ConfigError, MissingArtifactError) as e:
        print(f"laddergym {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"laddergym {args.command} failed: {e}", file=sys.stderr)
        if verbose:
            traceback.print_exc()
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
