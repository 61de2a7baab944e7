"""Command-line entry point: ``mgpf {gen-map,gen-traj,run,diag,report}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .errors import MapError, TrajectoryError
from .filters import TASKS
from .world import MapSpec, WallMap, generate_map, generate_trajectory, noisy_odometry, trajectory_to_csv


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_map(args) -> int:
    wall_map = generate_map(MapSpec(rooms=(args.rooms_min, args.rooms_max)), seed=args.seed)
    _emit(wall_map.to_text(), args.out)
    return 0


def cmd_gen_traj(args) -> int:
    if args.map:
        wall_map = WallMap.load(args.map)
    else:
        wall_map = generate_map(MapSpec(rooms=(args.rooms_min, args.rooms_max)), seed=args.seed)
    rng = np.random.default_rng(args.seed)
    traj = generate_trajectory(wall_map, args.steps, seed=rng)
    cov = np.diag(np.square([args.odo_sigma_xy, args.odo_sigma_xy, args.odo_sigma_theta]))
    # entry 0 keeps its zero odometry; later readings carry sensor noise
    noisy = [traj[0]] + [(p, noisy_odometry(u, cov, rng)) for p, u in traj[1:]]
    _emit(trajectory_to_csv(noisy, args.seed), args.out)
    return 0


def _config_from_args(args) -> harness.ExperimentConfig:
    base = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    overrides = {
        name: getattr(args, name)
        for name in ("task", "filter", "k", "reduce", "steps", "trajectories", "seed", "maps")
        if getattr(args, name) is not None
    }
    return harness.ExperimentConfig(**{**base.__dict__, **overrides})


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    result = harness.run_experiment(cfg, workers=args.workers)
    summary = harness.save_results(result, args.out) if args.out else harness.compute_metrics(result)
    sys.stdout.write(harness.summary_text(summary))
    if summary.failures == summary.trajectories:
        logging.error("every trajectory failed")
        return 1
    return 0


def cmd_diag(args) -> int:
    rows = harness.sampling_diagnostics(args.dims, tuple(args.k), args.trials, args.seed)
    _emit(harness.diagnostics_csv(rows), args.out)
    return 0


def cmd_report(args) -> int:
    summaries = [harness.compute_metrics(harness.load_results(p)) for p in args.runs]
    _emit(harness.summary_table(summaries), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgpf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log filter warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def map_flags(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--rooms-min", type=int, default=4)
        p.add_argument("--rooms-max", type=int, default=7)
        p.add_argument("--out", help="output file (default: stdout)")

    p = sub.add_parser("gen-map", help="generate a building and write it in the text map format")
    map_flags(p)
    p.set_defaults(func=cmd_gen_map)

    p = sub.add_parser("gen-traj", help="simulate a trajectory with noisy odometry as CSV")
    map_flags(p)
    p.add_argument("--map", help="map file to walk in (default: generate one from --seed)")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--odo-sigma-xy", type=float, default=2.0)
    p.add_argument("--odo-sigma-theta", type=float, default=0.02)
    p.set_defaults(func=cmd_gen_traj)

    p = sub.add_parser("run", help="run a seeded batch of trajectories")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--filter", choices=harness.FILTERS)
    p.add_argument("--k", type=int)
    p.add_argument("--reduce", choices=tuple(harness.REDUCE_FLAGS))
    p.add_argument("--steps", type=int)
    p.add_argument("--trajectories", type=int)
    p.add_argument("--maps", type=int, help="number of distinct buildings cycled over")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="output directory for config, CSVs and summary")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("diag", help="sampled-product error against K as CSV")
    p.add_argument("--dims", type=int, default=2)
    p.add_argument("--k", type=int, nargs="+", default=[8, 32, 128, 512])
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("report", help="summary table over saved run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValueError as err:
        parser.error(str(err))
    except (MapError, TrajectoryError, OSError) as err:
        logging.error("%s", err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
