"""Experiment harness: scenario runs, dataset replay, artifact writers,
and the pipeline throughput benchmark.

All artifacts are byte-reproducible for a fixed scenario and seed: floats
are written with a fixed format, timestamps are simulated (step * dt) or
frame indices, and the embedded configuration excludes the output path.
"""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import raster as rst
from .evaluation import (
    ClassStats,
    CommandRecord,
    Metrics,
    compute_midline,
    orientation_stats,
    trajectory_mae,
)
from .raster import RasterConfig
from .scenario import ScenarioSpec, scenario_to_dict
from .simworld import (
    EpisodeLog,
    Pose2D,
    World,
    default_start_pose,
    generate_world,
    run_episode,
)
from .spc import (
    ControllerState,
    SpcConfig,
    control_function,
    fault_fallback,
    fault_rate,
    spc_step,
)


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.10g}"
    return str(value)


def _config_lines(spec: ScenarioSpec) -> list[str]:
    # the output location is excluded so identical runs into different
    # directories stay byte-identical
    data = scenario_to_dict(spec)
    data.pop("out_dir", None)
    blob = json.dumps(data, sort_keys=True)
    return [f"# config = {blob}"]


@dataclass
class EpisodeResult:
    index: int
    seed: int
    log: EpisodeLog
    mae: float
    fault_rate_pct: float

    @property
    def outcome(self) -> str:
        return self.log.outcome

    def metrics(self) -> Metrics:
        return Metrics(
            mae=self.mae,
            fault_rate=self.fault_rate_pct,
            collision=self.log.collision,
        )


def resolve_start_pose(spec: ScenarioSpec, world: World, seed: int) -> Pose2D:
    base = default_start_pose(world)
    if spec.start_lateral_jitter == 0.0 and spec.start_heading_jitter == 0.0:
        return base
    rng = np.random.default_rng([seed, 101])
    dy = rng.uniform(-spec.start_lateral_jitter, spec.start_lateral_jitter)
    dth = rng.uniform(-spec.start_heading_jitter, spec.start_heading_jitter)
    return Pose2D(
        base.x - dy * math.sin(base.theta),
        base.y + dy * math.cos(base.theta),
        base.theta + dth,
    )


def run_scenario_episode(spec: ScenarioSpec, index: int) -> EpisodeResult:
    ep = spec.episodes[index]
    world = generate_world(spec.world, spec.profile, ep.seed)
    if ep.start_pose is not None:
        start = Pose2D(*ep.start_pose)
    else:
        start = resolve_start_pose(spec, world, ep.seed)
    noise_rng = np.random.default_rng([ep.seed, 202]) if spec.noise_flip_prob > 0 else None
    log = run_episode(
        world,
        spec.raster,
        spec.spc,
        spec.camera,
        spec.kinematics,
        ep.max_steps if ep.max_steps is not None else spec.max_steps,
        start_pose=start,
        noise_flip_prob=spec.noise_flip_prob,
        noise_rng=noise_rng,
        end_margin=spec.end_margin,
    )
    positions = log.positions()
    if positions.size:
        midline = compute_midline(world)
        mae = trajectory_mae(positions, midline)
    else:
        mae = math.nan
    fr = fault_rate(log.controller) if log.controller.step_count else 0.0
    return EpisodeResult(index=index, seed=ep.seed, log=log, mae=mae, fault_rate_pct=fr)


def run_scenario(spec: ScenarioSpec, out_dir=None) -> list[EpisodeResult]:
    """Run all episodes of a scenario; write artifacts when out_dir is set."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results = []
    for index in range(len(spec.episodes)):
        res = run_scenario_episode(spec, index)
        results.append(res)
        if out is not None:
            write_episode_csv(out / f"episode_{index:03d}.csv", spec, res)
            world = generate_world(spec.world, spec.profile, res.seed)
            write_episode_svg(
                out / f"episode_{index:03d}.svg", world, compute_midline(world), res.log
            )
    if out is not None:
        write_metrics_csv(out / "metrics.csv", spec, results)
        (out / "report.txt").write_text(format_report(results))
    return results


def format_report(results: list[EpisodeResult]) -> str:
    lines = ["episode  seed  outcome    steps  fault%   mae_m"]
    for r in results:
        lines.append(
            f"{r.index:7d}  {r.seed:4d}  {r.outcome:<9s}  {len(r.log.steps):5d}"
            f"  {_fmt(round(r.fault_rate_pct, 4)):>6s}  {_fmt(round(r.mae, 6))}"
        )
    maes = [r.mae for r in results if not math.isnan(r.mae)]
    if maes:
        lines.append(f"mean MAE over {len(maes)} episodes: {_fmt(round(float(np.mean(maes)), 6))} m")
    collisions = sum(1 for r in results if r.log.collision)
    lines.append(f"collisions: {collisions}/{len(results)}")
    return "\n".join(lines) + "\n"


def write_episode_csv(path, spec: ScenarioSpec, result: EpisodeResult) -> None:
    dt = spec.kinematics.dt
    rows = ["step,timestamp,x,y,theta,x_c,v_ema,w_ema,fault,outcome"]
    for s in result.log.steps:
        rows.append(
            ",".join(
                [
                    str(s.step),
                    _fmt(s.step * dt),
                    _fmt(s.x),
                    _fmt(s.y),
                    _fmt(s.theta),
                    _fmt(s.x_c),
                    _fmt(s.v_ema),
                    _fmt(s.w_ema),
                    str(s.fault),
                    result.outcome,
                ]
            )
        )
    header = ["# vinenav episode log", f"# episode_seed = {result.seed}"]
    header += _config_lines(spec)
    Path(path).write_text("\n".join(header + rows) + "\n")


def write_metrics_csv(path, spec: ScenarioSpec, results: list[EpisodeResult]) -> None:
    rows = ["episode,seed,outcome,steps,ctrl_steps,faults,fault_rate_pct,mae_m"]
    for r in results:
        c = r.log.controller
        rows.append(
            ",".join(
                [
                    str(r.index),
                    str(r.seed),
                    r.outcome,
                    str(len(r.log.steps)),
                    str(c.step_count),
                    str(c.fault_count),
                    _fmt(r.fault_rate_pct),
                    _fmt(r.mae),
                ]
            )
        )
    header = ["# vinenav metrics"] + _config_lines(spec)
    Path(path).write_text("\n".join(header + rows) + "\n")


# ---------------------------------------------------------------------------
# SVG plot: rows, midline (cyan), trajectory (dashed red)
# ---------------------------------------------------------------------------


def write_episode_svg(path, world: World, midline, log: EpisodeLog, width_px: int = 900) -> None:
    pts = [row.centerline for row in world.rows]
    positions = log.positions()
    if positions.size:
        pts = pts + [positions]
    allp = np.concatenate(pts, axis=0)
    x0, y0 = allp.min(axis=0) - 1.0
    x1, y1 = allp.max(axis=0) + 1.0
    scale = width_px / (x1 - x0)
    height_px = max(int((y1 - y0) * scale), 40)

    def to_px(p):
        return (p[0] - x0) * scale, (y1 - p[1]) * scale

    def polyline(points, style):
        coords = " ".join(f"{px:.2f},{py:.2f}" for px, py in (to_px(p) for p in points))
        return f'<polyline fill="none" {style} points="{coords}"/>'

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width_px}" '
        f'height="{height_px}" viewBox="0 0 {width_px} {height_px}">',
        f'<rect width="{width_px}" height="{height_px}" fill="white"/>',
    ]
    for row in world.rows:
        r_px = max(row.canopy_halfwidth * scale, 1.0)
        for p in row.centerline:
            px, py = to_px(p)
            parts.append(
                f'<circle cx="{px:.2f}" cy="{py:.2f}" r="{r_px:.2f}" fill="#3a7d3a"/>'
            )
    s0, s1 = midline.domain
    grid = np.linspace(s0, s1, 200)
    parts.append(polyline(midline.point(grid), 'stroke="cyan" stroke-width="2"'))
    if positions.size:
        parts.append(
            polyline(
                positions,
                'stroke="red" stroke-width="2" stroke-dasharray="8,5"',
            )
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# Dataset replay
# ---------------------------------------------------------------------------


@dataclass
class ReplayResult:
    records: list[CommandRecord] = field(default_factory=list)
    by_class: dict[str, list[CommandRecord]] = field(default_factory=dict)
    state: ControllerState = field(default_factory=ControllerState)

    def stats(self) -> dict[str, ClassStats]:
        return orientation_stats(self.by_class) if self.by_class else {}


def run_replay(manifest_path, raster_config: RasterConfig, spc_config: SpcConfig) -> ReplayResult:
    """Stream a recorded mask/depth sequence through the full pipeline.

    The command stream is uninterrupted: fault frames publish the
    fault_fallback command and are flagged in the log.
    """
    entries = rst.load_manifest(manifest_path)
    if not entries:
        raise ValueError(f"empty replay manifest {manifest_path}")
    result = ReplayResult()
    state = result.state
    window: deque[rst.SegMap] = deque(maxlen=raster_config.s_window)
    shape = None
    step = 0
    for entry in entries:
        seg = rst.load_mask(entry.mask_path, timestamp=entry.frame_index, expect_shape=shape)
        depth = rst.load_depth(entry.depth_path, expect_shape=seg.cells.shape)
        shape = seg.cells.shape
        window.append(seg)
        if len(window) < raster_config.s_window:
            continue
        ctrl = rst.preprocess_frame(list(window), depth, raster_config)
        cmd = spc_step(ctrl, state, spc_config)
        w = ctrl.width
        if cmd is None:
            published = fault_fallback(state, spc_config)
            rec = CommandRecord(
                step=step,
                timestamp=float(entry.frame_index),
                x_c=math.nan,
                d=math.nan,
                v_raw=math.nan,
                w_raw=math.nan,
                v_ema=published.v_x,
                w_ema=published.omega_z,
                fault=1,
            )
        else:
            x_c = state.previous_cluster_center
            v_raw, w_raw = control_function(x_c, w, spc_config.v_max, spc_config.w_max)
            rec = CommandRecord(
                step=step,
                timestamp=float(entry.frame_index),
                x_c=x_c,
                d=x_c - w / 2.0,
                v_raw=v_raw,
                w_raw=w_raw,
                v_ema=cmd.v_x,
                w_ema=cmd.omega_z,
                fault=0,
            )
        result.records.append(rec)
        if entry.label is not None:
            result.by_class.setdefault(entry.label, []).append(rec)
        step += 1
    return result


def write_command_log(path, records: list[CommandRecord]) -> None:
    rows = ["step,timestamp,x_c,d,v_raw,w_raw,v_ema,w_ema,fault"]
    for r in records:
        rows.append(
            ",".join(
                [
                    str(r.step),
                    _fmt(r.timestamp),
                    _fmt(r.x_c),
                    _fmt(r.d),
                    _fmt(r.v_raw),
                    _fmt(r.w_raw),
                    _fmt(r.v_ema),
                    _fmt(r.w_ema),
                    str(r.fault),
                ]
            )
        )
    Path(path).write_text("\n".join(rows) + "\n")


def format_class_stats(stats: dict[str, ClassStats]) -> str:
    lines = ["class    n      abscissa(mu/sd)    v_raw(mu/sd)     w_raw(mu/sd)     v_ema(mu/sd)     w_ema(mu/sd)     FR%"]
    for label in sorted(stats):
        s = stats[label]
        def pair(t):
            return f"{t[0]:.4f}/{t[1]:.4f}"
        lines.append(
            f"{label:<8s} {s.n_steps:<6d} {pair(s.abscissa):<18s} {pair(s.v_raw):<16s} "
            f"{pair(s.w_raw):<16s} {pair(s.v_ema):<16s} {pair(s.w_ema):<16s} {s.fault_rate:.2f}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Pipeline throughput benchmark
# ---------------------------------------------------------------------------

BENCH_STAGES = (
    "fusion",
    "depth_mask",
    "ctrl_map",
    "noise_reduction",
    "histogram",
    "clustering",
    "selection_control",
    "full_step",
)


def run_benchmark(
    resolutions=(224,), iterations: int = 50, s_window: int = 3, seed: int = 0
) -> dict[int, dict[str, dict[str, float]]]:
    """Time each pipeline stage on random maps at the given resolutions.

    Returns {resolution: {stage: {"mean_ms": .., "std_ms": ..}}}.
    """
    from .spc import column_histogram, find_zero_clusters, noise_reduction, select_cluster

    report: dict[int, dict[str, dict[str, float]]] = {}
    rng = np.random.default_rng(seed)
    for res in resolutions:
        h = w = int(res)
        if h < 4:
            raise ValueError(f"resolution {res} too small")
        segs = [
            rst.SegMap(cells=(rng.random((h, w)) < 0.3).astype(np.uint8), timestamp=t)
            for t in range(s_window)
        ]
        depth = rst.DepthMap(cells=(rng.random((h, w)) * 5.0 + 0.5).astype(np.float32))
        config = RasterConfig(s_window=s_window)
        spc_config = SpcConfig()

        samples: dict[str, list[float]] = {stage: [] for stage in BENCH_STAGES}
        for _ in range(iterations):
            t0 = time.perf_counter()
            cum = rst.fuse_segmentations(segs)
            t1 = time.perf_counter()
            dmask = rst.depth_binary_mask(depth, config.l_depth)
            t2 = time.perf_counter()
            ctrl = rst.make_ctrl_map(cum, dmask, config.fusion_threshold)
            t3 = time.perf_counter()
            cleaned = noise_reduction(ctrl, spc_config.th_noise_frac)
            t4 = time.perf_counter()
            profile = column_histogram(cleaned)
            t5 = time.perf_counter()
            clusters = find_zero_clusters(profile, spc_config.resolved_min_cluster_len(w))
            t6 = time.perf_counter()
            state = ControllerState()
            select_cluster(clusters, state, w, spc_config)
            t7 = time.perf_counter()
            state2 = ControllerState()
            rst_ctrl = rst.preprocess_frame(segs, depth, config)
            spc_step(rst_ctrl, state2, spc_config)
            t8 = time.perf_counter()
            for stage, dt_s in zip(
                BENCH_STAGES,
                (t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4, t6 - t5, t7 - t6, t8 - t7),
            ):
                samples[stage].append(dt_s * 1000.0)
        report[h] = {
            stage: {
                "mean_ms": float(np.mean(vals)),
                "std_ms": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
            }
            for stage, vals in samples.items()
        }
    return report


def format_benchmark(report: dict[int, dict[str, dict[str, float]]]) -> str:
    lines = []
    for res in sorted(report):
        lines.append(f"resolution {res}x{res}")
        for stage in BENCH_STAGES:
            s = report[res][stage]
            lines.append(f"  {stage:<18s} {s['mean_ms']:9.4f} ms +/- {s['std_ms']:.4f}")
        budget = "ok" if report[res]["full_step"]["mean_ms"] < 200.0 else "EXCEEDED"
        lines.append(f"  5 Hz budget (200 ms): {budget}")
    return "\n".join(lines) + "\n"
