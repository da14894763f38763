"""Deterministic vineyard simulator.

Worlds are rows of vine plants on a plane, straight or gently arced.  Each
plant is modeled as a vertical axis-aligned box around a centerline point,
so the gaps between plants are real see-through gaps.  A raycast camera
plays the role of the RGB-D sensor: it returns a perfect segmentation mask
(canopy vs everything else) plus a depth image, which feed the same raster
pipeline used on recorded data.

Everything here is a pure function of its inputs; the only randomness is
the seeded plant jitter at world-generation time and the optional
segmentation noise injected by the episode loop.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .raster import DepthMap, RasterConfig, SegMap, preprocess_frame
from .spc import (
    ControllerState,
    SpcConfig,
    VelocityCommand,
    fault_fallback,
    spc_step,
)

INTER_ROW_RANGE = (1.70, 2.00)
PLANT_SPACING_RANGE = (0.70, 1.00)


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    t = math.remainder(theta, math.tau)
    if t <= -math.pi:
        t += math.tau
    return t


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))


@dataclass(frozen=True)
class VineRow:
    """One row of plants; centerline points double as plant locations."""

    centerline: np.ndarray  # (n, 2) meters
    canopy_height: float = 1.8
    canopy_halfwidth: float = 0.25

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("centerline needs at least two 2D points")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise ValueError("consecutive centerline points must be distinct")
        pts.flags.writeable = False
        object.__setattr__(self, "centerline", pts)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.centerline, axis=0), axis=1).sum())


@dataclass(frozen=True)
class World:
    rows: tuple[VineRow, ...]
    inter_row: float
    plant_spacing: float
    curvature: float  # 1/m, 0 = straight, positive = left turn
    rng_seed: int

    def __post_init__(self):
        if len(self.rows) < 2:
            raise ValueError("a world needs at least two rows")
        object.__setattr__(self, "rows", tuple(self.rows))


@dataclass(frozen=True)
class WorldParams:
    inter_row: float = 1.8
    plant_spacing: float = 0.85
    row_length: float = 32.0
    n_rows: int = 2
    curvature: float = 0.0
    jitter: float = 0.05  # max per-axis plant displacement, meters
    canopy_height: float = 1.8
    canopy_halfwidth: float = 0.25


@dataclass(frozen=True)
class CameraModel:
    hfov: float = 1.204  # radians
    vfov: float = 0.737
    width: int = 224
    height: int = 224
    mount_height: float = 0.10  # meters above ground
    tilt: float = 0.0  # radians, positive pitches up
    max_range: float = 6.0

    def __post_init__(self):
        if not (0.0 < self.hfov < math.pi and 0.0 < self.vfov < math.pi):
            raise ValueError("fields of view must lie in (0, pi)")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be positive")


@dataclass(frozen=True)
class KinematicParams:
    dt: float = 0.2  # seconds per command period
    wheelbase: float = 0.4  # platform descriptor; the unicycle update ignores it

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")


def generate_world(params: WorldParams, profile: str = "straight", seed: int = 0) -> World:
    """Build a seeded world of parallel (or concentric) plant rows.

    Plants sit at plant_spacing intervals along each row centerline with
    uniform jitter of at most ``params.jitter`` per axis.  Identical seed
    and parameters give a bit-identical world.
    """
    if profile not in ("straight", "curved"):
        raise ValueError(f"unknown profile {profile!r}")
    lo, hi = INTER_ROW_RANGE
    if not (lo <= params.inter_row <= hi):
        raise ValueError(f"inter_row must lie in [{lo}, {hi}] m")
    lo, hi = PLANT_SPACING_RANGE
    if not (lo <= params.plant_spacing <= hi):
        raise ValueError(f"plant_spacing must lie in [{lo}, {hi}] m")
    if params.n_rows < 2:
        raise ValueError("n_rows must be >= 2")
    if params.row_length < 2 * params.plant_spacing:
        raise ValueError("row_length too short for a row of plants")
    if not (0.0 <= params.jitter <= 0.05):
        raise ValueError("jitter must lie in [0, 0.05] m")
    if profile == "straight":
        curvature = 0.0
    else:
        curvature = params.curvature
        if curvature == 0.0:
            raise ValueError("curved profile needs a nonzero curvature")
        if 1.0 / abs(curvature) <= params.n_rows * params.inter_row:
            raise ValueError("curve radius too small for the row stack")

    rng = np.random.default_rng(seed)
    rows = []
    for k in range(params.n_rows):
        if curvature == 0.0:
            n = int(math.floor(params.row_length / params.plant_spacing)) + 1
            s = np.arange(n) * params.plant_spacing
            pts = np.stack([s, np.full(n, k * params.inter_row)], axis=1)
        else:
            c = 1.0 / curvature
            sg = 1.0 if curvature > 0 else -1.0
            rho = sg * c - k * params.inter_row  # radius of this row's arc
            n = int(math.floor(params.row_length / params.plant_spacing)) + 1
            phi = (np.arange(n) * params.plant_spacing) / rho
            pts = np.stack(
                [rho * np.sin(phi), c - sg * rho * np.cos(phi)],
                axis=1,
            )
        if params.jitter > 0:
            pts = pts + rng.uniform(-params.jitter, params.jitter, size=pts.shape)
        rows.append(
            VineRow(
                centerline=pts,
                canopy_height=params.canopy_height,
                canopy_halfwidth=params.canopy_halfwidth,
            )
        )
    return World(
        rows=tuple(rows),
        inter_row=params.inter_row,
        plant_spacing=params.plant_spacing,
        curvature=curvature,
        rng_seed=seed,
    )


# ---------------------------------------------------------------------------
# Raycast camera
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def _raycast(ox, oy, oz, fwd, right, down, u, v, boxes, max_range, depth, seg):
    h = v.shape[0]
    w = u.shape[0]
    nb = boxes.shape[0]
    for p in prange(h * w):
        i = p // w
        j = p - i * w
        dx = fwd[0] + u[j] * right[0] + v[i] * down[0]
        dy = fwd[1] + u[j] * right[1] + v[i] * down[1]
        dz = fwd[2] + u[j] * right[2] + v[i] * down[2]
        norm = math.sqrt(dx * dx + dy * dy + dz * dz)
        dx /= norm
        dy /= norm
        dz /= norm

        # ground plane z = 0
        t_ground = math.inf
        if dz < -1e-12:
            t_ground = -oz / dz

        t_box = math.inf
        for b in range(nb):
            tmin = 0.0
            tmax = math.inf
            hit = True
            # x slab
            if dx > 1e-15 or dx < -1e-15:
                t1 = (boxes[b, 0] - ox) / dx
                t2 = (boxes[b, 1] - ox) / dx
                if t1 > t2:
                    t1, t2 = t2, t1
                if t1 > tmin:
                    tmin = t1
                if t2 < tmax:
                    tmax = t2
            elif ox < boxes[b, 0] or ox > boxes[b, 1]:
                hit = False
            # y slab
            if hit:
                if dy > 1e-15 or dy < -1e-15:
                    t1 = (boxes[b, 2] - oy) / dy
                    t2 = (boxes[b, 3] - oy) / dy
                    if t1 > t2:
                        t1, t2 = t2, t1
                    if t1 > tmin:
                        tmin = t1
                    if t2 < tmax:
                        tmax = t2
                elif oy < boxes[b, 2] or oy > boxes[b, 3]:
                    hit = False
            # z slab
            if hit:
                if dz > 1e-15 or dz < -1e-15:
                    t1 = (boxes[b, 4] - oz) / dz
                    t2 = (boxes[b, 5] - oz) / dz
                    if t1 > t2:
                        t1, t2 = t2, t1
                    if t1 > tmin:
                        tmin = t1
                    if t2 < tmax:
                        tmax = t2
                elif oz < boxes[b, 4] or oz > boxes[b, 5]:
                    hit = False
            if hit and tmin <= tmax and tmax > 0.0:
                if tmin < t_box:
                    t_box = tmin

        if t_box <= t_ground and t_box < max_range:
            seg[i, j] = 1
            depth[i, j] = t_box
        elif t_ground < max_range:
            seg[i, j] = 0
            depth[i, j] = t_ground
        else:
            seg[i, j] = 0
            depth[i, j] = np.nan


def _world_boxes(world: World) -> np.ndarray:
    """All plant bounding boxes as rows of (xlo, xhi, ylo, yhi, zlo, zhi)."""
    parts = []
    for row in world.rows:
        pts = row.centerline
        hw = row.canopy_halfwidth
        box = np.empty((pts.shape[0], 6))
        box[:, 0] = pts[:, 0] - hw
        box[:, 1] = pts[:, 0] + hw
        box[:, 2] = pts[:, 1] - hw
        box[:, 3] = pts[:, 1] + hw
        box[:, 4] = 0.0
        box[:, 5] = row.canopy_height
        parts.append(box)
    return np.concatenate(parts, axis=0)


def _cull_boxes(boxes: np.ndarray, pose: Pose2D, max_range: float) -> np.ndarray:
    """Keep only boxes reachable by forward rays within max_range."""
    cx = 0.5 * (boxes[:, 0] + boxes[:, 1])
    cy = 0.5 * (boxes[:, 2] + boxes[:, 3])
    radius = np.hypot(boxes[:, 1] - boxes[:, 0], boxes[:, 3] - boxes[:, 2]) * 0.5
    rx = cx - pose.x
    ry = cy - pose.y
    dist = np.hypot(rx, ry)
    ahead = rx * math.cos(pose.theta) + ry * math.sin(pose.theta)
    keep = (dist <= max_range + radius) & (ahead >= -radius)
    return np.ascontiguousarray(boxes[keep])


def render_views(
    world: World, pose: Pose2D, camera: CameraModel, timestamp: int = 0
) -> tuple[SegMap, DepthMap]:
    """Raycast the scene: segmentation oracle plus depth image.

    A pixel is canopy (1) when the first surface its ray meets within
    max_range is a plant box; ground hits give 0 with a valid depth; rays
    that meet nothing within range have no depth return.
    """
    w, h = camera.width, camera.height
    fx = (w / 2.0) / math.tan(camera.hfov / 2.0)
    fy = (h / 2.0) / math.tan(camera.vfov / 2.0)
    u = (np.arange(w) + 0.5 - w / 2.0) / fx
    v = (np.arange(h) + 0.5 - h / 2.0) / fy

    ct, st = math.cos(pose.theta), math.sin(pose.theta)
    cp, sp = math.cos(camera.tilt), math.sin(camera.tilt)
    fwd = np.array([ct * cp, st * cp, sp])
    right = np.array([st, -ct, 0.0])
    down = np.array([sp * ct, sp * st, -cp])  # fwd x right

    boxes = _cull_boxes(_world_boxes(world), pose, camera.max_range)
    depth = np.empty((h, w), dtype=np.float64)
    seg = np.empty((h, w), dtype=np.uint8)
    _raycast(
        pose.x, pose.y, camera.mount_height,
        fwd, right, down, u, v,
        boxes, camera.max_range, depth, seg,
    )
    return (
        SegMap(cells=seg, timestamp=timestamp),
        DepthMap(cells=depth.astype(np.float32)),
    )


def flip_noise(seg: SegMap, flip_prob: float, rng: np.random.Generator) -> SegMap:
    """Flip each pixel independently with the given probability."""
    if not (0.0 <= flip_prob <= 0.05):
        raise ValueError("flip_prob must lie in [0, 0.05]")
    if flip_prob == 0.0:
        return seg
    flips = rng.random(seg.cells.shape) < flip_prob
    return SegMap(cells=np.where(flips, 1 - seg.cells, seg.cells), timestamp=seg.timestamp)


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

_OMEGA_EPS = 1e-9


def step_kinematics(pose: Pose2D, cmd: VelocityCommand, dt: float) -> Pose2D:
    """Exact unicycle integration of (v, omega) over one command period."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v, w = cmd.v_x, cmd.omega_z
    if abs(w) > _OMEGA_EPS:
        x = pose.x + (v / w) * (math.sin(pose.theta + w * dt) - math.sin(pose.theta))
        y = pose.y - (v / w) * (math.cos(pose.theta + w * dt) - math.cos(pose.theta))
    else:
        x = pose.x + v * dt * math.cos(pose.theta)
        y = pose.y + v * dt * math.sin(pose.theta)
    return Pose2D(x, y, pose.theta + w * dt)


# ---------------------------------------------------------------------------
# Episode loop
# ---------------------------------------------------------------------------


def _segment_distances(p: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment squared distances from p and the projection parameters."""
    a = pts[:-1]
    b = pts[1:]
    ab = b - a
    ap = p[None, :] - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", ap, ab) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    d2 = np.einsum("ij,ij->i", (p[None, :] - closest), (p[None, :] - closest))
    return d2, t


def point_polyline_distance(p, pts: np.ndarray) -> float:
    d2, _ = _segment_distances(np.asarray(p, dtype=np.float64), pts)
    return float(np.sqrt(d2.min()))


def polyline_project_arclength(p, pts: np.ndarray) -> float:
    """Arc length along the polyline of the point nearest to p."""
    p = np.asarray(p, dtype=np.float64)
    d2, t = _segment_distances(p, pts)
    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    i = int(np.argmin(d2))
    return float(seg_len[:i].sum() + t[i] * seg_len[i])


def collides(world: World, pose: Pose2D) -> bool:
    p = (pose.x, pose.y)
    return any(
        point_polyline_distance(p, row.centerline) < row.canopy_halfwidth
        for row in world.rows
    )


def default_start_pose(world: World) -> Pose2D:
    """One meter into the corridor between the first two rows, centered.

    The heading is taken over a few plants of baseline so per-plant jitter
    does not skew it.
    """
    a = world.rows[0].centerline
    b = world.rows[1].centerline
    k = min(4, a.shape[0] - 1, b.shape[0] - 1)
    start_mid = 0.5 * (a[0] + b[0])
    ahead_mid = 0.5 * (a[k] + b[k])
    heading = math.atan2(ahead_mid[1] - start_mid[1], ahead_mid[0] - start_mid[0])
    return Pose2D(
        float(start_mid[0] + math.cos(heading)),
        float(start_mid[1] + math.sin(heading)),
        heading,
    )


@dataclass(frozen=True)
class EpisodeStep:
    step: int
    x: float
    y: float
    theta: float
    x_c: float  # selected cluster center, NaN on warmup/fault steps
    v_ema: float
    w_ema: float
    fault: int


@dataclass
class EpisodeLog:
    steps: list[EpisodeStep] = field(default_factory=list)
    outcome: str = "truncated"  # completed | collision | truncated
    controller: ControllerState = field(default_factory=ControllerState)

    @property
    def collision(self) -> bool:
        return self.outcome == "collision"

    def positions(self) -> np.ndarray:
        return np.array([[s.x, s.y] for s in self.steps], dtype=np.float64)


def run_episode(
    world: World,
    raster_config: RasterConfig,
    spc_config: SpcConfig,
    camera: CameraModel,
    kinematics: KinematicParams,
    max_steps: int,
    start_pose: Pose2D | None = None,
    noise_flip_prob: float = 0.0,
    noise_rng: np.random.Generator | None = None,
    end_margin: float = 1.0,
) -> EpisodeLog:
    """Closed-loop run: render, preprocess, control, integrate, repeat.

    Terminates on canopy collision, on reaching the end of the row pair
    (projection within end_margin of the shorter row's length), or after
    max_steps.  During the fusion warmup and during faults the published
    command follows the fault_fallback rule.
    """
    if start_pose is None:
        start_pose = default_start_pose(world)
    if noise_flip_prob > 0.0 and noise_rng is None:
        noise_rng = np.random.default_rng(world.rng_seed)

    exit_s = min(world.rows[0].length, world.rows[1].length) - end_margin
    entry = world.rows[0].centerline
    state = ControllerState()
    window: deque[SegMap] = deque(maxlen=raster_config.s_window)
    log = EpisodeLog(controller=state)
    pose = start_pose

    for step in range(max_steps):
        if collides(world, pose):
            log.outcome = "collision"
            log.steps.append(
                EpisodeStep(step, pose.x, pose.y, pose.theta, math.nan, 0.0, 0.0, 0)
            )
            return log
        if polyline_project_arclength((pose.x, pose.y), entry) >= exit_s:
            log.outcome = "completed"
            return log

        seg, depth = render_views(world, pose, camera, timestamp=step)
        if noise_flip_prob > 0.0:
            seg = flip_noise(seg, noise_flip_prob, noise_rng)
        window.append(seg)

        x_c = math.nan
        fault = 0
        if len(window) < raster_config.s_window:
            published = VelocityCommand(0.0, 0.0)  # fusion warmup
        else:
            ctrl = preprocess_frame(list(window), depth, raster_config)
            cmd = spc_step(ctrl, state, spc_config)
            if cmd is None:
                fault = 1
                published = fault_fallback(state, spc_config)
            else:
                x_c = state.previous_cluster_center
                published = cmd

        log.steps.append(
            EpisodeStep(
                step, pose.x, pose.y, pose.theta,
                x_c, published.v_x, published.omega_z, fault,
            )
        )
        pose = step_kinematics(pose, published, kinematics.dt)

    return log
