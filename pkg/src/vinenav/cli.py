"""Command-line entry point.

Subcommands: run (scenario experiments), replay (recorded sequences),
bench (pipeline throughput), gen-world (inspect world geometry).
Flag precedence: CLI > scenario file > built-in defaults.

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 collision-terminated run when --strict is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import harness
from .scenario import ScenarioSpec, load_scenario
from .simworld import WorldParams, generate_world

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_COLLISION = 3


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--s-window", type=int, default=None, help="segmentation maps fused per control frame")
    p.add_argument("--l-depth", type=float, default=None, help="line-of-sight fraction of the max depth")
    p.add_argument("--fusion-threshold", type=int, default=None, help="detections required per fused pixel")
    p.add_argument("--alpha-ema", type=float, default=None, help="EMA smoothing factor")
    p.add_argument("--vmax", type=float, default=None, help="max linear velocity [m/s]")
    p.add_argument("--wmax", type=float, default=None, help="max angular velocity [rad/s]")
    p.add_argument("--noise-frac", type=float, default=None, help="row-noise threshold fraction")
    p.add_argument("--min-cluster", type=int, default=None, help="minimum zero-cluster length [columns]")
    p.add_argument("--pcc-tol", type=float, default=None, help="near-cluster tolerance [columns]")
    p.add_argument("--fault-timeout", type=int, default=None,
                   help="consecutive faults before a zero command is published")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vinenav", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a simulated scenario")
    run.add_argument("--scenario", type=Path, required=True, help="scenario JSON file")
    run.add_argument("--out", type=Path, default=None,
                     help="output directory (falls back to the scenario's out_dir)")
    run.add_argument("--seed", type=int, default=None, help="re-seed episode i with seed+i")
    run.add_argument("--profile", choices=("straight", "curved"), default=None)
    run.add_argument("--strict", action="store_true", help="exit 3 if any episode collides")
    _add_pipeline_flags(run)

    replay = sub.add_parser("replay", help="replay a recorded mask/depth sequence")
    replay.add_argument("--replay", type=Path, required=True, metavar="MANIFEST",
                        help="replay manifest file")
    replay.add_argument("--out", type=Path, default=None, help="output directory")
    _add_pipeline_flags(replay)

    bench = sub.add_parser("bench", help="benchmark the control pipeline")
    bench.add_argument("--resolutions", type=str, default="224",
                       help="comma-separated square resolutions")
    bench.add_argument("--iterations", type=int, default=50)
    bench.add_argument("--out", type=Path, default=None, help="write the report here too")

    gen = sub.add_parser("gen-world", help="generate and export a world")
    gen.add_argument("--out", type=Path, required=True, help="output directory")
    gen.add_argument("--profile", choices=("straight", "curved"), default="straight")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--inter-row", type=float, default=1.8)
    gen.add_argument("--plant-spacing", type=float, default=0.85)
    gen.add_argument("--row-length", type=float, default=32.0)
    gen.add_argument("--curvature", type=float, default=None,
                     help="1/m, defaults to 1/30 for curved profiles")
    return parser


def _apply_overrides(spec: ScenarioSpec, args) -> ScenarioSpec:
    raster_over = {}
    if args.s_window is not None:
        raster_over["s_window"] = args.s_window
    if args.l_depth is not None:
        raster_over["l_depth"] = args.l_depth
    if args.fusion_threshold is not None:
        raster_over["fusion_threshold"] = args.fusion_threshold
    spc_over = {}
    if args.alpha_ema is not None:
        spc_over["alpha_ema"] = args.alpha_ema
    if args.vmax is not None:
        spc_over["v_max"] = args.vmax
    if args.wmax is not None:
        spc_over["w_max"] = args.wmax
    if args.noise_frac is not None:
        spc_over["th_noise_frac"] = args.noise_frac
    if args.min_cluster is not None:
        spc_over["min_cluster_len"] = args.min_cluster
    if args.pcc_tol is not None:
        spc_over["pcc_near_tol"] = args.pcc_tol
    if args.fault_timeout is not None:
        spc_over["fault_timeout"] = args.fault_timeout
    top = {}
    if raster_over:
        top["raster"] = dataclasses.replace(spec.raster, **raster_over)
    if spc_over:
        top["spc"] = dataclasses.replace(spec.spc, **spc_over)
    if getattr(args, "profile", None):
        top["profile"] = args.profile
    if getattr(args, "seed", None) is not None:
        top["episodes"] = tuple(
            dataclasses.replace(ep, seed=args.seed + i)
            for i, ep in enumerate(spec.episodes)
        )
    return dataclasses.replace(spec, **top) if top else spec


def cmd_run(args) -> int:
    spec = load_scenario(args.scenario)
    spec = _apply_overrides(spec, args)
    out = args.out if args.out is not None else spec.out_dir
    if out is None:
        raise ValueError("no output directory: pass --out or set out_dir in the scenario")
    results = harness.run_scenario(spec, out_dir=out)
    print(harness.format_report(results), end="")
    print(f"artifacts written to {out}")
    if args.strict and any(r.log.collision for r in results):
        return EXIT_COLLISION
    return EXIT_OK


def cmd_replay(args) -> int:
    spec = _apply_overrides(ScenarioSpec(), args)
    result = harness.run_replay(args.replay, spec.raster, spec.spc)
    stats = result.stats()
    n_faults = sum(r.fault for r in result.records)
    print(f"{len(result.records)} commands, {n_faults} faults")
    if stats:
        print(harness.format_class_stats(stats), end="")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        harness.write_command_log(args.out / "command_log.csv", result.records)
        if stats:
            (args.out / "class_stats.txt").write_text(harness.format_class_stats(stats))
        print(f"artifacts written to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        resolutions = [int(r) for r in args.resolutions.split(",") if r.strip()]
    except ValueError:
        raise ValueError(f"bad --resolutions value {args.resolutions!r}") from None
    if not resolutions:
        raise ValueError("--resolutions is empty")
    report = harness.run_benchmark(resolutions, iterations=args.iterations)
    text = harness.format_benchmark(report)
    print(text, end="")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "bench.txt").write_text(text)
    # the full step must fit the 5 Hz command period at the deployed resolution
    if 224 in report and report[224]["full_step"]["mean_ms"] >= 200.0:
        print("error: 224x224 full step exceeds the 200 ms budget", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gen_world(args) -> int:
    curvature = args.curvature
    if args.profile == "curved" and curvature is None:
        curvature = 1.0 / 30.0
    params = WorldParams(
        inter_row=args.inter_row,
        plant_spacing=args.plant_spacing,
        row_length=args.row_length,
        curvature=curvature or 0.0,
    )
    world = generate_world(params, args.profile, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    payload = {
        "profile": args.profile,
        "seed": args.seed,
        "inter_row": world.inter_row,
        "plant_spacing": world.plant_spacing,
        "curvature": world.curvature,
        "rows": [row.centerline.tolist() for row in world.rows],
    }
    (args.out / "world.json").write_text(json.dumps(payload, indent=2) + "\n")
    from .evaluation import compute_midline
    from .simworld import EpisodeLog

    harness.write_episode_svg(args.out / "world.svg", world, compute_midline(world), EpisodeLog())
    print(f"world written to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "run": cmd_run,
    "replay": cmd_replay,
    "bench": cmd_bench,
    "gen-world": cmd_gen_world,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
