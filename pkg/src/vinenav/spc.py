"""Segmentation-to-proportional-control: turn a binary obstacle map into
linear and angular velocity commands.

Pipeline per control frame: suppress sparse noise rows, collapse the map
into a per-column obstacle histogram, find the runs of obstacle-free
columns (zero clusters), pick the cluster that represents the corridor
ahead, and convert its center column into a velocity pair smoothed by an
exponential moving average.

A frame where no usable cluster exists is a fault: the controller state
keeps its memory and the caller decides what to publish (see
``fault_fallback``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .raster import CtrlMap


@dataclass(frozen=True)
class ColumnProfile:
    """Per-column obstacle counts of a control map."""

    values: np.ndarray  # (w,) int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.int64)
        if vals.ndim != 1 or vals.size == 0:
            raise ValueError("column profile must be a non-empty 1D array")
        if (vals < 0).any():
            raise ValueError("column counts must be non-negative")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def width(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class RowProfile:
    """Per-row obstacle counts, used for noise suppression."""

    values: np.ndarray  # (h,) int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.int64)
        if vals.ndim != 1 or vals.size == 0:
            raise ValueError("row profile must be a non-empty 1D array")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class ZeroCluster:
    """A maximal run of obstacle-free columns, inclusive on both ends.

    ``center`` is the midpoint of the continuous column span [start, end+1),
    so a cluster covering the full width of a w-column map is centered at
    exactly w/2.  This keeps the steering offset antisymmetric under a
    horizontal flip of the map.
    """

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start <= self.end):
            raise ValueError(f"invalid cluster bounds [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    @property
    def center(self) -> float:
        return (self.start + self.end + 1) / 2.0

    def contains(self, column: float) -> bool:
        return self.start <= column < self.end + 1

    def distance_to(self, column: float) -> float:
        """Distance from a column coordinate to the cluster span (0 inside)."""
        if column < self.start:
            return self.start - column
        if column >= self.end + 1:
            return column - (self.end + 1)
        return 0.0


@dataclass(frozen=True)
class VelocityCommand:
    v_x: float  # m/s, forward
    omega_z: float  # rad/s, positive counterclockwise


@dataclass(frozen=True)
class SpcConfig:
    """Controller parameters.

    min_cluster_len and pcc_near_tol default to 5% and 10% of the frame
    width when left as None.
    """

    v_max: float = 1.0
    w_max: float = 1.0
    alpha_ema: float = 0.1
    th_noise_frac: float = 0.03
    min_cluster_len: int | None = None
    pcc_near_tol: float | None = None
    fault_timeout: int = 10  # consecutive faults before a zero command is published

    def __post_init__(self):
        if self.v_max <= 0 or self.w_max <= 0:
            raise ValueError("velocity limits must be positive")
        if not (0.0 < self.alpha_ema <= 1.0):
            raise ValueError("alpha_ema must lie in (0, 1]")
        if self.th_noise_frac < 0:
            raise ValueError("th_noise_frac must be non-negative")
        if self.min_cluster_len is not None and self.min_cluster_len < 1:
            raise ValueError("min_cluster_len must be >= 1")
        if self.pcc_near_tol is not None and self.pcc_near_tol <= 0:
            raise ValueError("pcc_near_tol must be positive")
        if self.fault_timeout < 1:
            raise ValueError("fault_timeout must be >= 1")

    def resolved_min_cluster_len(self, width: int) -> int:
        if self.min_cluster_len is not None:
            return self.min_cluster_len
        return math.ceil(0.05 * width)

    def resolved_pcc_near_tol(self, width: int) -> float:
        if self.pcc_near_tol is not None:
            return self.pcc_near_tol
        return math.ceil(0.10 * width)


@dataclass
class ControllerState:
    """Mutable memory of the control loop; owned by a single caller."""

    previous_cluster_center: float | None = None
    ema: tuple[float, float] = (0.0, 0.0)  # (v_x, omega_z)
    initial: bool = True
    fault_count: int = 0
    step_count: int = 0
    consecutive_faults: int = 0
    frame_shape: tuple[int, int] | None = None  # pinned on the first step


def noise_reduction(ctrl: CtrlMap, th_noise_frac: float) -> CtrlMap:
    """Zero out rows whose obstacle count falls below a fraction of the
    busiest row; removes sparse detections from grass on the terrain."""
    g_noise = ctrl.cells.sum(axis=1, dtype=np.int64)
    th = th_noise_frac * float(g_noise.max())
    out = ctrl.cells.copy()
    out[g_noise < th, :] = 0
    return CtrlMap(cells=out)


def row_histogram(ctrl: CtrlMap) -> RowProfile:
    return RowProfile(values=ctrl.cells.sum(axis=1, dtype=np.int64))


def column_histogram(ctrl: CtrlMap) -> ColumnProfile:
    return ColumnProfile(values=ctrl.cells.sum(axis=0, dtype=np.int64))


def find_zero_clusters(profile: ColumnProfile, min_cluster_len: int) -> list[ZeroCluster]:
    """Maximal runs of zero columns, left to right, shorter runs discarded."""
    zero = np.concatenate(([0], (profile.values == 0).astype(np.int8), [0]))
    edges = np.diff(zero)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [
        ZeroCluster(int(s), int(e))
        for s, e in zip(starts, ends)
        if e - s + 1 >= min_cluster_len
    ]


def select_cluster(
    clusters: list[ZeroCluster],
    state: ControllerState,
    width: int,
    config: SpcConfig,
) -> ZeroCluster | None:
    """Pick the corridor cluster, or None when the frame must be discarded.

    A single cluster is taken as-is.  With several candidates the first
    frame drops clusters touching the image borders and keeps the longest
    survivor; later frames keep the cluster containing (or nearest to) the
    previously selected center.
    """
    if not clusters:
        return None
    if len(clusters) == 1:
        return clusters[0]

    if state.initial:
        inner = [c for c in clusters if c.start > 0 and c.end < width - 1]
        if not inner:
            return None
        best_len = max(c.length for c in inner)
        cands = [c for c in inner if c.length == best_len]
        if len(cands) > 1:
            half = width / 2.0
            best = min(abs(c.center - half) for c in cands)
            cands = [c for c in cands if abs(c.center - half) == best]
        return cands[0]

    pcc = state.previous_cluster_center
    assert pcc is not None
    for c in clusters:
        if c.contains(pcc):
            return c
    tol = config.resolved_pcc_near_tol(width)
    near = [c for c in clusters if c.distance_to(pcc) <= tol]
    if not near:
        return None
    best = min(c.distance_to(pcc) for c in near)
    near = [c for c in near if c.distance_to(pcc) == best]
    if len(near) > 1:
        near.sort(key=lambda c: (-c.length, c.start))
    return near[0]


def control_function(
    x_c: float, width: int, v_max: float, w_max: float
) -> tuple[float, float]:
    """Proportional velocity laws on the cluster-center offset.

    d = x_c - w/2; the angular speed grows with the square of the relative
    offset and steers back toward the image center, the linear speed drops
    by the same quadratic factor.  Outputs are clamped to [0, v_max] and
    [-w_max, w_max].
    """
    half = width / 2.0
    d = x_c - half
    gain = (d * d) / (half * half)
    if d >= 0:
        w_raw = -w_max * gain
    else:
        w_raw = w_max * gain
    v_raw = v_max * (1.0 - gain)
    v_raw = min(max(v_raw, 0.0), v_max)
    w_raw = min(max(w_raw, -w_max), w_max)
    return v_raw, w_raw + 0.0  # +0.0 normalizes -0.0


def ema_update(
    state: ControllerState, raw: VelocityCommand, alpha_ema: float
) -> VelocityCommand:
    """Blend the raw command into the running average and publish it."""
    v = state.ema[0] * (1.0 - alpha_ema) + raw.v_x * alpha_ema
    w = state.ema[1] * (1.0 - alpha_ema) + raw.omega_z * alpha_ema
    state.ema = (v, w)
    return VelocityCommand(v_x=v, omega_z=w)


def spc_step(
    ctrl: CtrlMap, state: ControllerState, config: SpcConfig
) -> VelocityCommand | None:
    """Run one control iteration; returns None on a fault frame.

    On success the cluster memory and the EMA advance; a fault leaves both
    untouched and only bumps the fault counters.
    """
    shape = ctrl.cells.shape
    if state.frame_shape is None:
        state.frame_shape = shape
    elif state.frame_shape != shape:
        raise ValueError(
            f"control map dimensions changed mid-stream: {shape} vs {state.frame_shape}"
        )
    state.step_count += 1

    cleaned = noise_reduction(ctrl, config.th_noise_frac)
    profile = column_histogram(cleaned)
    clusters = find_zero_clusters(
        profile, config.resolved_min_cluster_len(ctrl.width)
    )
    selected = select_cluster(clusters, state, ctrl.width, config)
    if selected is None:
        state.fault_count += 1
        state.consecutive_faults += 1
        return None

    v_raw, w_raw = control_function(
        selected.center, ctrl.width, config.v_max, config.w_max
    )
    cmd = ema_update(state, VelocityCommand(v_raw, w_raw), config.alpha_ema)
    state.previous_cluster_center = selected.center
    state.initial = False
    state.consecutive_faults = 0
    return cmd


def fault_fallback(state: ControllerState, config: SpcConfig) -> VelocityCommand:
    """Command to publish during a fault: hold the last smoothed command,
    or stop once faults have persisted past the timeout."""
    if state.consecutive_faults >= config.fault_timeout:
        return VelocityCommand(0.0, 0.0)
    return VelocityCommand(state.ema[0], state.ema[1])


def fault_rate(state: ControllerState) -> float:
    """Percentage of control iterations that produced no command."""
    if state.step_count == 0:
        raise ValueError("no control iterations recorded")
    return 100.0 * state.fault_count / state.step_count
