import math

import numpy as np
import pytest

from vinenav.evaluation import (
    ClassStats,
    CommandRecord,
    Metrics,
    compute_midline,
    midline_row_gap,
    orientation_stats,
    point_to_midline_distance,
    trajectory_mae,
)
from vinenav.simworld import VineRow, World, WorldParams, generate_world


def straight_world(y0=0.0, y1=1.8, x_end=16.0, x0=0.0):
    a = VineRow(np.array([[x0, y0], [x_end, y0]]))
    b = VineRow(np.array([[x0, y1], [x_end, y1]]))
    return World((a, b), 1.8, 0.85, 0.0, 0)


# ---------------------------------------------------------------------------
# midline construction
# ---------------------------------------------------------------------------


def test_midline_of_parallel_lines_is_flat():
    mid = compute_midline(straight_world())
    assert abs(mid.y_coeffs[0] - 0.9) < 1e-9
    assert np.all(np.abs(mid.y_coeffs[1:]) < 1e-9)
    assert np.all(np.abs(mid.x_coeffs[2:]) < 1e-9)  # x(s) is linear
    assert mid.fit_residual < 1e-9


def test_midline_of_concentric_arcs_is_mid_radius():
    radius = 30.0
    params = WorldParams(curvature=1.0 / radius, jitter=0.0, row_length=30.0)
    world = generate_world(params, "curved", seed=0)
    mid = compute_midline(world)
    center = np.array([0.0, radius])
    grid = np.linspace(mid.domain[0], mid.domain[1], 300)
    pts = mid.point(grid)
    dists = np.linalg.norm(pts - center, axis=1)
    # analytic oracle: the mid-arc radius is R - inter_row / 2
    assert np.max(np.abs(dists - (radius - 0.9))) <= 0.02


def test_midline_with_jitter_stays_near_clean_midline():
    clean = compute_midline(generate_world(
        WorldParams(jitter=0.0, row_length=24.0), "straight", seed=5))
    jittered = compute_midline(generate_world(
        WorldParams(jitter=0.05, row_length=24.0), "straight", seed=5))
    grid = np.linspace(jittered.domain[0], jittered.domain[1], 200)
    for p in jittered.point(grid):
        assert point_to_midline_distance(p, clean) <= 0.05


def test_midline_rejects_intersecting_rows():
    a = VineRow(np.array([[0.0, 0.0], [10.0, 1.0]]))
    b = VineRow(np.array([[0.0, 1.0], [10.0, 0.0]]))
    world = World((a, b), 1.8, 0.85, 0.0, 0)
    with pytest.raises(ValueError, match="degenerate"):
        compute_midline(world)


def test_midline_betweenness_jitter_free():
    # equidistance is exact geometry here: the gap is bounded by the fit
    for profile, curvature in (("straight", 0.0), ("curved", 1 / 30.0)):
        world = generate_world(
            WorldParams(curvature=curvature, jitter=0.0, row_length=24.0), profile, seed=1)
        mid = compute_midline(world)
        assert mid.fit_residual <= 0.05
        assert midline_row_gap(world, mid) <= 2 * mid.fit_residual + 0.005


def test_midline_betweenness_with_jitter():
    # jittered plants make the equidistant locus wiggle faster than a cubic
    # can follow; the gap is bounded by jitter plus fit error
    for seed in (1, 2, 3):
        world = generate_world(
            WorldParams(jitter=0.05, row_length=24.0), "straight", seed=seed)
        mid = compute_midline(world)
        assert mid.fit_residual <= 0.05
        assert midline_row_gap(world, mid) <= 2 * 0.05 + 2 * mid.fit_residual


# ---------------------------------------------------------------------------
# trajectory MAE
# ---------------------------------------------------------------------------


def test_mae_zero_on_midline():
    mid = compute_midline(straight_world())
    xs = np.linspace(1.0, 15.0, 40)
    traj = np.stack([xs, np.full_like(xs, 0.9)], axis=1)
    assert trajectory_mae(traj, mid) < 1e-9


def test_mae_constant_offset():
    mid = compute_midline(straight_world())
    xs = np.linspace(1.0, 15.0, 40)
    traj = np.stack([xs, np.full_like(xs, 1.0)], axis=1)
    assert abs(trajectory_mae(traj, mid) - 0.1) < 1e-6


def test_mae_empty_trajectory_rejected():
    mid = compute_midline(straight_world())
    with pytest.raises(ValueError, match="empty"):
        trajectory_mae(np.empty((0, 2)), mid)


def test_mae_translation_invariance():
    rng = np.random.default_rng(8)
    world = generate_world(WorldParams(jitter=0.05, row_length=16.0), "straight", seed=2)
    mid = compute_midline(world)
    xs = np.linspace(1.0, 14.0, 30)
    traj = np.stack([xs, 0.9 + 0.05 * np.sin(xs)], axis=1)
    base = trajectory_mae(traj, mid)
    for _ in range(3):
        shift = rng.uniform(-40, 40, 2)
        moved = World(
            tuple(
                VineRow(r.centerline + shift, r.canopy_height, r.canopy_halfwidth)
                for r in world.rows
            ),
            world.inter_row, world.plant_spacing, world.curvature, world.rng_seed,
        )
        mae = trajectory_mae(traj + shift, compute_midline(moved))
        assert abs(mae - base) < 1e-9


def test_point_distance_accuracy_against_analytic_line():
    mid = compute_midline(straight_world())
    for y in (0.85, 0.93, 1.4):
        d = point_to_midline_distance((5.0, y), mid)
        assert abs(d - abs(y - 0.9)) < 1e-3  # 1 mm accuracy


# ---------------------------------------------------------------------------
# controller statistics
# ---------------------------------------------------------------------------


def rec(x_c, v, w, fault=0, step=0):
    return CommandRecord(
        step=step, timestamp=float(step), x_c=x_c, d=x_c - 112.0,
        v_raw=v, w_raw=w, v_ema=v, w_ema=w, fault=fault,
    )


def test_stats_constant_abscissa():
    records = [rec(112.0, 0.99, 0.0, step=i) for i in range(20)]
    stats = orientation_stats({"center": records})
    s = stats["center"]
    assert s.abscissa == (112.0, 0.0)
    assert s.fault_rate == 0.0
    assert s.n_steps == 20


def test_stats_match_two_pass_oracle():
    rng = np.random.default_rng(21)
    for _ in range(20):
        n = int(rng.integers(2, 60))
        xs = rng.uniform(0, 224, n)
        vs = rng.uniform(0, 1, n)
        ws = rng.uniform(-1, 1, n)
        records = [rec(float(x), float(v), float(w), step=i)
                   for i, (x, v, w) in enumerate(zip(xs, vs, ws))]
        stats = orientation_stats({"c": records})["c"]
        # independent two-pass oracle
        mu = sum(xs) / n
        sd = math.sqrt(sum((x - mu) ** 2 for x in xs) / (n - 1))
        assert abs(stats.abscissa[0] - mu) <= 1e-12 * max(1.0, abs(mu))
        assert abs(stats.abscissa[1] - sd) <= 1e-12 * max(1.0, sd)


def test_stats_fault_steps_counted_in_rate_only():
    records = [rec(100.0, 0.9, 0.1, step=i) for i in range(9)]
    records.append(CommandRecord(step=9, timestamp=9.0, x_c=math.nan, d=math.nan,
                                 v_raw=math.nan, w_raw=math.nan,
                                 v_ema=0.9, w_ema=0.1, fault=1))
    s = orientation_stats({"left": records})["left"]
    assert s.fault_rate == 10.0
    assert s.abscissa[0] == 100.0  # fault row excluded from command stats


def test_stats_reject_empty_class():
    with pytest.raises(ValueError, match="no records"):
        orientation_stats({"right": []})


def test_stats_single_sample_sigma_zero():
    s = orientation_stats({"c": [rec(50.0, 0.5, 0.2)]})["c"]
    assert s.abscissa == (50.0, 0.0)


def test_metrics_validation():
    m = Metrics(mae=0.05, fault_rate=0.5, collision=False)
    assert m.per_class_stats == {}
    with pytest.raises(ValueError):
        Metrics(mae=-0.1, fault_rate=0.0, collision=False)
    with pytest.raises(ValueError):
        Metrics(mae=0.1, fault_rate=120.0, collision=False)
