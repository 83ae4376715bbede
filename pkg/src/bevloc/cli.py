"""Command-line entry point: ``bevloc {scene,rasterize,solve,bench}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .geometry import ConfigError, Se2Pose, compose, crop_local_map
from .harness import (
    BenchConfig, Degradation, PerturbRanges, SceneParams, SolverConfig, aggregate, generate_scene,
    grids_from_steps, run_bench, solve, with_grids, write_probs, write_summary, write_trials_csv,
)
from .hdmap import MapFormatError, load_map, save_map
from .raster import BevSpec, GridFormatError, downsample, grid_read, grid_write, rasterize

log = logging.getLogger("bevloc")


def parse_pose(text: str) -> Se2Pose:
    try:
        x, y, yaw = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,yaw_deg, got {text!r}") from None
    return Se2Pose.from_degrees(x, y, yaw)


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _pool_for(shape, pool):
    if pool is not None:
        return pool
    # aim for the 100-row solver grid when the input divides evenly
    h, w = shape
    factor = max(1, h // 100)
    return factor if h % factor == 0 and w % factor == 0 else 1


def cmd_scene(args) -> int:
    params = SceneParams(n_dividers=args.dividers, crossings=(args.min_crossings, args.max_crossings))
    save_map(generate_scene(args.seed, params), args.out)
    return 0


def cmd_rasterize(args) -> int:
    spec = BevSpec(args.xr, args.yr, args.res, args.lw)
    vmap = load_map(args.map)
    grid_write(rasterize(crop_local_map(vmap, args.pose, spec), spec), args.out)
    return 0


def cmd_solve(args) -> int:
    vmap = load_map(args.map)
    obs = grid_read(args.obs, line_width=args.lw)
    ref = rasterize(crop_local_map(vmap, args.init, obs.spec), obs.spec)
    pool = _pool_for(obs.spec.shape, args.pool)
    if pool > 1:
        obs, ref = downsample(obs, pool), downsample(ref, pool)
    config = SolverConfig(solver=args.solver)
    est = solve(obs, ref, config)
    corrected = compose(args.init, est.delta)

    def dist_doc(dist, degrees=False):
        values = np.degrees(dist.grid.values) if degrees else dist.grid.values
        return {"values": values.tolist(), "probs": dist.probs.tolist()}

    doc = {
        "solver": args.solver,
        "delta": {"x": est.delta.x, "y": est.delta.y, "yaw_deg": est.delta.yaw_deg},
        "pose": {"x": corrected.x, "y": corrected.y, "yaw_deg": corrected.yaw_deg},
        "probs": {
            "x": dist_doc(est.dist_x),
            "y": dist_doc(est.dist_y),
            "yaw_deg": dist_doc(est.dist_yaw, degrees=True),
        },
        "confidence": dict(zip(("x", "y", "yaw"), est.confidence)),
        "evals": est.cost.evaluations,
    }
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    if not 0.0 <= args.noise_dropout <= 1.0:
        raise ConfigError(f"--noise-dropout must be in [0, 1], got {args.noise_dropout}")
    if not 0.0 <= args.tc <= 1.0:
        raise ConfigError(f"--tc must be in [0, 1], got {args.tc}")
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    grids = grids_from_steps(args.range_x, args.range_y, args.range_yaw,
                             args.step_x, args.step_y, args.step_yaw)
    solver = with_grids(SolverConfig(solver=args.solver, t_c=args.tc, refiner=args.refiner), grids)
    bench = BenchConfig(
        seed=args.seed,
        trials=args.trials,
        ranges=PerturbRanges(args.range_x, args.range_y, args.range_yaw),
        on_grid=args.on_grid,
        degradation=Degradation(dropout=args.noise_dropout),
        solver=solver,
        workers=args.workers,
    )
    records = run_bench(bench)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trials_csv(records, out / "trials.csv", timing=not args.no_timing)
    report = aggregate(records)
    write_summary(report, out / "summary.json")
    if args.save_probs:
        (out / "probs").mkdir(exist_ok=True)
        for r in records:
            write_probs(r, out / "probs")
    print(f"{report.n_trials} trials, recovery {report.recovery_rate:.3f}, "
          f"MAE x={report.mae['x']:.3f} m y={report.mae['y']:.3f} m yaw={report.mae['yaw']:.3f} deg, "
          f"trigger rate {report.trigger_rate:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevloc", description="BEV map-matching localization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scene", help="write a synthetic road map")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dividers", type=int, default=3)
    p.add_argument("--min-crossings", type=int, default=0)
    p.add_argument("--max-crossings", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("rasterize", help="render a map at a pose into a BEVG grid")
    p.add_argument("--map", required=True)
    p.add_argument("--pose", type=parse_pose, required=True, help="x,y,yaw_deg")
    p.add_argument("--out", required=True)
    p.add_argument("--res", type=float, default=0.15)
    p.add_argument("--xr", type=float, default=30.0)
    p.add_argument("--yr", type=float, default=15.0)
    p.add_argument("--lw", type=int, default=2)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("solve", help="estimate the pose correction of an observation grid")
    p.add_argument("--map", required=True)
    p.add_argument("--init", type=parse_pose, required=True, help="initial pose x,y,yaw_deg")
    p.add_argument("--obs", required=True, help="observation grid (BEVG)")
    p.add_argument("--solver", choices=("dema", "fuma"), default="dema")
    p.add_argument("--out", required=True)
    p.add_argument("--lw", type=int, default=2, help="line width used to render the map grid")
    p.add_argument("--pool", type=int, default=None,
                   help="pooling factor before solving (default: down to about 100 rows)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", help="run a seeded synthetic benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--solver", choices=("dema", "fuma", "adaptive"), default="dema")
    p.add_argument("--tc", type=float, default=0.4)
    p.add_argument("--refiner", choices=("null", "oracle"), default="null")
    p.add_argument("--range-x", type=float, default=2.0)
    p.add_argument("--range-y", type=float, default=1.0)
    p.add_argument("--range-yaw", type=float, default=2.0)
    p.add_argument("--step-x", type=float, default=0.4)
    p.add_argument("--step-y", type=float, default=0.2)
    p.add_argument("--step-yaw", type=float, default=0.4)
    p.add_argument("--on-grid", type=parse_bool, default=True)
    p.add_argument("--noise-dropout", type=float, default=0.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--save-probs", action="store_true", help="write probs/<id>.json per trial")
    p.add_argument("--no-timing", action="store_true",
                   help="write 0 in the ms column so reruns are byte-identical")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MapFormatError, GridFormatError, ValueError, OSError) as exc:
        print(f"bevloc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
