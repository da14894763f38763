"""Ground-truth midlines, trajectory error, and controller statistics.

The reference path between a pair of vine rows is the cubic fit through
the midpoints of nearest-point pairs across the rows, parametrized by arc
length so curved rows fit as well as straight ones.  Trajectory quality is
the mean absolute point-to-curve distance against that midline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import minimize_scalar

from .simworld import World, point_polyline_distance


@dataclass(frozen=True)
class Midline:
    """Arc-length parametrized cubic curve (x(s), y(s)) on s in [domain]."""

    x_coeffs: np.ndarray  # ascending-power cubic coefficients
    y_coeffs: np.ndarray
    domain: tuple[float, float]
    fit_residual: float = 0.0  # max distance of a fitted midpoint to the curve

    def point(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.stack([P.polyval(s, self.x_coeffs), P.polyval(s, self.y_coeffs)], axis=-1)


def _resample_polyline(pts: np.ndarray, step: float) -> np.ndarray:
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    s = np.concatenate(([0.0], np.cumsum(seg_len)))
    total = s[-1]
    grid = np.arange(0.0, total, step)
    grid = np.append(grid, total)
    x = np.interp(grid, s, pts[:, 0])
    y = np.interp(grid, s, pts[:, 1])
    return np.stack([x, y], axis=1)


def _nearest_on_polyline(p: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a, b = pts[:-1], pts[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", p[None, :] - a, ab) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    d2 = np.einsum("ij,ij->i", p[None, :] - closest, p[None, :] - closest)
    return closest[int(np.argmin(d2))]


def _polylines_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    def ccw(p, q, r):
        return (r[..., 1] - p[..., 1]) * (q[..., 0] - p[..., 0]) > (
            q[..., 1] - p[..., 1]
        ) * (r[..., 0] - p[..., 0])

    for p1, p2 in zip(a[:-1], a[1:]):
        q1, q2 = b[:-1], b[1:]
        hit = (ccw(p1, q1, q2) != ccw(p2, q1, q2)) & (
            ccw(p1, p2, q1) != ccw(p1, p2, q2)
        )
        if hit.any():
            return True
    return False


def compute_midline(world: World, sample_step: float = 0.25) -> Midline:
    """Cubic midline between the first two rows of the world.

    Sample points along row 0 are paired with their nearest points on
    row 1; the midpoints of those pairs are fitted with least squares in
    arc length.
    """
    row_a = world.rows[0].centerline
    row_b = world.rows[1].centerline
    if _polylines_intersect(row_a, row_b):
        raise ValueError("degenerate geometry: rows intersect")
    samples = _resample_polyline(row_a, sample_step)
    mids = np.empty_like(samples)
    for i, p in enumerate(samples):
        q = _nearest_on_polyline(p, row_b)
        if np.linalg.norm(q - p) < 1e-9:
            raise ValueError("degenerate geometry: rows touch")
        mids[i] = 0.5 * (p + q)

    seg_len = np.linalg.norm(np.diff(mids, axis=0), axis=1)
    s = np.concatenate(([0.0], np.cumsum(seg_len)))
    x_coeffs = P.polyfit(s, mids[:, 0], 3)
    y_coeffs = P.polyfit(s, mids[:, 1], 3)
    fitted = np.stack([P.polyval(s, x_coeffs), P.polyval(s, y_coeffs)], axis=1)
    residual = float(np.linalg.norm(fitted - mids, axis=1).max())
    return Midline(
        x_coeffs=x_coeffs,
        y_coeffs=y_coeffs,
        domain=(float(s[0]), float(s[-1])),
        fit_residual=residual,
    )


def point_to_midline_distance(p, midline: Midline, coarse_step: float = 0.01) -> float:
    """Unsigned distance from a point to the midline curve.

    Dense sampling at coarse_step picks the best segment of the curve,
    then a bounded scalar minimization refines to well under a millimeter.
    """
    p = np.asarray(p, dtype=np.float64)
    s0, s1 = midline.domain
    grid = np.arange(s0, s1, coarse_step)
    grid = np.append(grid, s1)
    pts = midline.point(grid)
    d2 = ((pts - p[None, :]) ** 2).sum(axis=1)
    i = int(np.argmin(d2))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    if hi <= lo:
        return float(math.sqrt(d2[i]))

    def dist2(s):
        q = midline.point(s)
        return float((q[0] - p[0]) ** 2 + (q[1] - p[1]) ** 2)

    res = minimize_scalar(dist2, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-7})
    return float(math.sqrt(min(res.fun, d2[i])))


def trajectory_mae(positions: np.ndarray, midline: Midline) -> float:
    """Mean absolute lateral distance of a trajectory from the midline."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.size == 0:
        raise ValueError("empty trajectory")
    dists = [point_to_midline_distance(p, midline) for p in positions]
    return float(np.mean(dists))


def midline_row_gap(world: World, midline: Midline, n_samples: int = 200) -> float:
    """Max difference between a midline point's distances to the two rows."""
    s0, s1 = midline.domain
    grid = np.linspace(s0, s1, n_samples)
    pts = midline.point(grid)
    worst = 0.0
    for p in pts:
        da = point_polyline_distance(p, world.rows[0].centerline)
        db = point_polyline_distance(p, world.rows[1].centerline)
        worst = max(worst, abs(da - db))
    return worst


# ---------------------------------------------------------------------------
# Controller statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommandRecord:
    """One row of the controller command log."""

    step: int
    timestamp: float
    x_c: float  # NaN on fault steps
    d: float
    v_raw: float
    w_raw: float
    v_ema: float
    w_ema: float
    fault: int


def _mean_std(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        raise ValueError("empty sample")
    mu = float(np.mean(values))
    sigma = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return mu, sigma


@dataclass(frozen=True)
class ClassStats:
    n_steps: int
    abscissa: tuple[float, float]  # (mean, sample std)
    v_raw: tuple[float, float]
    w_raw: tuple[float, float]
    v_ema: tuple[float, float]
    w_ema: tuple[float, float]
    fault_rate: float  # percent


def orientation_stats(groups: dict[str, list[CommandRecord]]) -> dict[str, ClassStats]:
    """Per-class mean/std of abscissa and velocities, plus fault rate.

    Fault steps contribute to the fault rate but not to the command
    statistics (they carry no abscissa or raw command).
    """
    out = {}
    for label, records in groups.items():
        if not records:
            raise ValueError(f"class {label!r} has no records")
        ok = [r for r in records if not r.fault]
        if not ok:
            raise ValueError(f"class {label!r} has only fault steps")
        xs = np.array([r.x_c for r in ok])
        out[label] = ClassStats(
            n_steps=len(records),
            abscissa=_mean_std(xs),
            v_raw=_mean_std(np.array([r.v_raw for r in ok])),
            w_raw=_mean_std(np.array([r.w_raw for r in ok])),
            v_ema=_mean_std(np.array([r.v_ema for r in ok])),
            w_ema=_mean_std(np.array([r.w_ema for r in ok])),
            fault_rate=100.0 * sum(r.fault for r in records) / len(records),
        )
    return out


@dataclass(frozen=True)
class Metrics:
    """Episode-level summary."""

    mae: float
    fault_rate: float  # percent
    collision: bool
    per_class_stats: dict[str, ClassStats] = field(default_factory=dict)

    def __post_init__(self):
        if self.mae < 0:
            raise ValueError("mae must be non-negative")
        if not (0.0 <= self.fault_rate <= 100.0):
            raise ValueError("fault_rate must lie in [0, 100]")
