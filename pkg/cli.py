"""
Command-line entry point: run, simulate, evaluate and ablate.

    python cli.py simulate --fixture square_loop --scans 352 --out data/loop
    python cli.py run data/loop --out runs/loop --single-thread
    python cli.py evaluate runs/loop data/loop/groundtruth.csv
    python cli.py ablate data/loop data/loop/groundtruth.csv --out runs/ablation
"""
import argparse
import os
import sys
from pathlib import Path

from pydantic import ValidationError

import simulator
from config import ConfigError, load_config, preset_scan_params
from evaluation import evaluate_run
from pipeline import PipelineError, ablate, run
from scan_model import Pose2, ScanFormatError

FIXTURES = {
    "stationary": (simulator.room, lambda args: simulator.stationary_script(duration=(args.scans or 200) * 0.25 + 1.0)),
    "straight": (simulator.gallery,
                 lambda args: simulator.straight_script(speed=1.0, duration=(args.scans or 200) * 0.25 + 1.0,
                                                        start=Pose2(-60.0, 0.0, 0.0))),
    "square_loop": (simulator.hall, lambda args: simulator.square_loop_script()),
}


def _default_seed() -> int:
    return int(os.getenv("MMSLAM_SEED", "0"))


def _default_output(name: str) -> str:
    return str(Path(os.getenv("MMSLAM_OUTPUT_DIR", "runs")) / name)


def _overrides(args) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["pipeline.seed"] = str(args.seed)
    if getattr(args, "matching", None):
        overrides["pipeline.matching"] = args.matching
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects namespace.key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    run(cfg, args.input_dir, args.out or _default_output("run"), single_thread=args.single_thread,
        progress_callback=print, max_scans=args.max_scans)
    return 0


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    params = preset_scan_params(args.preset or cfg.preset)
    if args.world:
        world = simulator.read_world(args.world)
    else:
        world = FIXTURES[args.fixture][0]()
    script = simulator.read_script(args.script) if args.script else FIXTURES[args.fixture][1](args)
    artifacts = simulator.ArtifactConfig(speckle_prob=args.speckle, ghost_prob=args.ghost,
                                         saturation_prob=args.saturation, noise_seed=cfg.seed)
    n_scans = args.scans
    if n_scans is None:
        n_scans = int((script.end - script.start) / params.scan_period)
    simulator.generate_sequence(world, script, n_scans, params, args.out or _default_output("sim"), artifacts,
                                suffix=".csv" if args.csv else ".rscan", progress_callback=print)
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    estimates = {"odometry": run_dir / "odometry.csv"}
    if (run_dir / "corrected.csv").exists():
        estimates["corrected"] = run_dir / "corrected.csv"
    rows = evaluate_run(estimates, args.groundtruth, args.out or run_dir, progress_callback=print)
    if not rows:
        print(f"❌ no trajectories found in {run_dir}")
        return 1
    for row in rows:
        drift = ("n/a" if row["trans_pct"] is None
                 else f"{row['trans_pct']:.3f} % / {row['rot_deg_per_100m']:.3f} deg/100m")
        print(f"   {row['trajectory']:<10} drift {drift}  ATE {row['ate_rmse']:.3f} m")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    ablate(cfg, args.input_dir, args.groundtruth, args.out or _default_output("ablation"), frames=args.frames,
           single_thread=args.single_thread, progress_callback=print)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmslam", description="Millimeter-wave radar odometry and mapping")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="namespace.key=value config file")
        p.add_argument("--seed", type=int, default=_default_seed())
        p.add_argument("--set", action="append", metavar="NS.KEY=VALUE", help="override one config key")

    p = sub.add_parser("run", help="process a scan directory")
    p.add_argument("input_dir")
    p.add_argument("--out")
    p.add_argument("--matching", help="scan_to_map or scan_to_frames(n)")
    p.add_argument("--single-thread", action="store_true", help="run the loop back-end inline")
    p.add_argument("--max-scans", type=int)
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="render a synthetic scan sequence")
    p.add_argument("--fixture", choices=sorted(FIXTURES), default="square_loop")
    p.add_argument("--world", help="world CSV (x1,y1,x2,y2,reflectivity)")
    p.add_argument("--script", help="waypoint CSV (t,x,y,yaw)")
    p.add_argument("--scans", type=int)
    p.add_argument("--preset")
    p.add_argument("--speckle", type=float, default=0.0)
    p.add_argument("--ghost", type=float, default=0.0)
    p.add_argument("--saturation", type=float, default=0.0)
    p.add_argument("--csv", action="store_true", help="write the text scan variant")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="drift and ATE of a finished run")
    p.add_argument("run_dir")
    p.add_argument("groundtruth")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the ablation variants and tabulate their accuracy")
    p.add_argument("input_dir")
    p.add_argument("groundtruth")
    p.add_argument("--out")
    p.add_argument("--frames", type=int, default=9)
    p.add_argument("--single-thread", action="store_true")
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as e:
        print(f"❌ invalid config: {e}")
        return 2
    except (PipelineError, ScanFormatError, FileNotFoundError, ValueError) as e:
        print(f"❌ {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
