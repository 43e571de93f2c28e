# simulator/main.py

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError
from tqdm import tqdm

# --------------------------------------------------
# Ensure current directory is on PYTHONPATH when run from elsewhere
# --------------------------------------------------
SIMULATOR_DIR = Path(__file__).resolve().parent
if str(SIMULATOR_DIR) not in sys.path:
    sys.path.insert(0, str(SIMULATOR_DIR))

# --------------------------------------------------
# Local imports
# --------------------------------------------------
from models.errors import ReconError
from models.schema import PlannerMode, RunConfig
from services.orchestrator import export_run_pointcloud, reevaluate_run, run_episode
from services.routing import held_karp_path, open_path_tsp, tour_cost
from utils.logger import setup_logger

logger = logging.getLogger("reconsim.cli")


# --------------------------------------------------
# Commands
# --------------------------------------------------
def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.model_validate_json(Path(args.config).read_text(encoding="utf-8"))
    overrides = {}
    if args.mode:
        overrides["mode"] = PlannerMode.from_cli(args.mode)
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if args.budget is not None:
        overrides["budget"] = args.budget
    if args.no_progress:
        overrides["progress"] = False
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    elif os.getenv("RECON_OUTPUT_DIR"):
        overrides["output_dir"] = str(Path(os.environ["RECON_OUTPUT_DIR"]) / Path(cfg.output_dir).name)
    # round-trip through validation so overrides obey the same constraints
    return RunConfig.model_validate({**cfg.model_dump(), **overrides})


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    report = run_episode(cfg)
    logger.info(f"📁 Artifacts in {cfg.output_dir}")
    print(report.model_dump_json(indent=2))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    reports = reevaluate_run(args.run_dir)
    for report in reports:
        logger.info(
            f"step {report.step}: completion {report.completion_cm:.2f} cm, "
            f"ratio {report.completion_ratio_pct:.2f}%, AUSE {report.ause:.4f}"
        )
    return 0


def cmd_export_pointcloud(args: argparse.Namespace) -> int:
    paths = export_run_pointcloud(args.run_dir)
    for name, path in paths.items():
        logger.info(f"💾 {name} point cloud written to {path}")
    return 0


def bench_tsp(n: int, trials: int, seed: int = 0, progress: bool = True) -> dict:
    """Open-path heuristic against the Held-Karp optimum on random Euclidean instances."""
    rng = np.random.default_rng(seed)
    gaps: List[float] = []
    for _ in tqdm(range(trials), desc=f"bench-tsp n={n}", disable=not progress):
        points = rng.random((n, 2))
        cost = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
        heuristic = tour_cost(cost, open_path_tsp(cost, 0))
        optimum, _ = held_karp_path(cost, 0)
        gaps.append((heuristic - optimum) / optimum if optimum > 0 else 0.0)
    gaps_arr = np.asarray(gaps)
    return {
        "n": n,
        "trials": trials,
        "mean_gap_pct": float(gaps_arr.mean() * 100.0),
        "max_gap_pct": float(gaps_arr.max() * 100.0),
        "optimal_pct": float(np.mean(gaps_arr <= 1e-9) * 100.0),
    }


def cmd_bench_tsp(args: argparse.Namespace) -> int:
    summary = bench_tsp(args.n, args.trials, args.seed, progress=not args.no_progress)
    logger.info(
        f"📊 N={summary['n']}, {summary['trials']} trials: mean gap {summary['mean_gap_pct']:.2f}%, "
        f"max gap {summary['max_gap_pct']:.2f}%, optimal in {summary['optimal_pct']:.1f}%"
    )
    return 0


# --------------------------------------------------
# Argument parsing
# --------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Active 3D reconstruction simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one exploration episode")
    run.add_argument("--config", required=True, help="RunConfig JSON file")
    run.add_argument("--mode", choices=["full", "frontier", "frontier_only", "random", "random_walk"])
    run.add_argument("--seed", type=int)
    run.add_argument("--budget", type=int)
    run.add_argument("--output-dir")
    run.add_argument("--no-progress", action="store_true")
    run.set_defaults(handler=cmd_run)

    evaluate = sub.add_parser("eval", help="recompute metrics from a run's map snapshots")
    evaluate.add_argument("--run-dir", required=True)
    evaluate.set_defaults(handler=cmd_eval)

    export = sub.add_parser("export-pointcloud", help="write PLY point clouds for a run")
    export.add_argument("--run-dir", required=True)
    export.set_defaults(handler=cmd_export_pointcloud)

    bench = sub.add_parser("bench-tsp", help="open-path TSP heuristic vs exact optimum")
    bench.add_argument("--n", type=int, default=10)
    bench.add_argument("--trials", type=int, default=200)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--no-progress", action="store_true")
    bench.set_defaults(handler=cmd_bench_tsp)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    setup_logger("reconsim", os.getenv("RECON_LOG_LEVEL", "INFO").upper())
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ReconError, ValidationError) as exc:
        logger.error(f"❌ {type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
