"""Raster data model and preprocessing for the navigation pipeline.

A frame enters the pipeline as a binary segmentation mask (1 = vine canopy,
0 = free space) plus a depth image in meters.  Consecutive masks are fused
into a per-pixel count map, the depth image is turned into a binary
near-field mask by a dynamic threshold, and the intersection of the two is
the control map handed to the steering algorithm.

Coordinate convention for all rasters: origin top-left, i = row index
(downward), j = column index (rightward).  All raster objects are immutable
after construction.
"""

from __future__ import annotations

import math
import re
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

MASK_FREE = 0
MASK_VINE = 255


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SegMap:
    """Binary segmentation mask: 1 = vine/obstacle, 0 = free space."""

    cells: np.ndarray  # (h, w) uint8 in {0, 1}
    timestamp: int = 0

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.uint8)
        if cells.ndim != 2 or cells.size == 0:
            raise ValueError("segmentation map must be a non-empty 2D grid")
        if cells.max(initial=0) > 1:
            raise ValueError("segmentation cells must be 0 or 1")
        object.__setattr__(self, "cells", _frozen(cells))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel distances in meters; NaN marks pixels with no depth return."""

    cells: np.ndarray  # (h, w) float32, meters
    invalid_marker: float = math.nan

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.float32)
        if cells.ndim != 2 or cells.size == 0:
            raise ValueError("depth map must be a non-empty 2D grid")
        valid = np.isfinite(cells)
        if np.any(cells[valid] < 0):
            raise ValueError("depth values must be non-negative")
        object.__setattr__(self, "cells", _frozen(cells))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.cells)


@dataclass(frozen=True)
class CumSegMap:
    """Per-pixel detection counts over a window of fused segmentation maps."""

    cells: np.ndarray  # (h, w) int32 in [0, window]
    window: int

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int32)
        if cells.ndim != 2:
            raise ValueError("cumulative map must be 2D")
        if cells.min(initial=0) < 0 or cells.max(initial=0) > self.window:
            raise ValueError("cumulative counts must lie in [0, window]")
        object.__setattr__(self, "cells", _frozen(cells))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]


@dataclass(frozen=True)
class CtrlMap:
    """Binary control map: 1 = obstacle, 0 = free space."""

    cells: np.ndarray  # (h, w) uint8 in {0, 1}

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.uint8)
        if cells.ndim != 2 or cells.size == 0:
            raise ValueError("control map must be a non-empty 2D grid")
        if cells.max(initial=0) > 1:
            raise ValueError("control cells must be 0 or 1")
        object.__setattr__(self, "cells", _frozen(cells))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]


@dataclass(frozen=True)
class RasterConfig:
    """Preprocessing parameters.

    s_window: number of consecutive masks fused per control frame.
    l_depth: fraction of the maximum depth kept in the line of sight.
    fusion_threshold: minimum detection count for a fused pixel to count
        as an obstacle (1 = any detection, s_window = unanimous vote).
    """

    s_window: int = 3
    l_depth: float = 0.5
    fusion_threshold: int = 1

    def __post_init__(self):
        if self.s_window < 1:
            raise ValueError("s_window must be >= 1")
        if not (0.0 < self.l_depth <= 1.0):
            raise ValueError("l_depth must lie in (0, 1]")
        if not (1 <= self.fusion_threshold <= self.s_window):
            raise ValueError("fusion_threshold must lie in [1, s_window]")


def fuse_segmentations(maps: Sequence[SegMap]) -> CumSegMap:
    """Sum a window of consecutive segmentation maps cell by cell.

    Requires identical dimensions and strictly consecutive timestamps.
    """
    if len(maps) == 0:
        raise ValueError("cannot fuse an empty window")
    shape = maps[0].cells.shape
    for m in maps[1:]:
        if m.cells.shape != shape:
            raise ValueError(
                f"dimension mismatch in fusion window: {m.cells.shape} vs {shape}"
            )
    t0 = maps[0].timestamp
    for n, m in enumerate(maps):
        if m.timestamp != t0 + n:
            raise ValueError(
                f"fusion window timestamps must be consecutive, got "
                f"{[m.timestamp for m in maps]}"
            )
    total = np.zeros(shape, dtype=np.int32)
    for m in maps:
        total += m.cells
    return CumSegMap(cells=total, window=len(maps))


def depth_binary_mask(depth: DepthMap, l_depth: float) -> np.ndarray:
    """Binary near-field mask: 1 where depth < l_depth * max(valid depth).

    Cells at or beyond the dynamic threshold, and cells without a depth
    return, map to 0.
    """
    if not (0.0 < l_depth <= 1.0):
        raise ValueError("l_depth must lie in (0, 1]")
    valid = depth.valid_mask
    if not valid.any():
        raise ValueError("depth map has no valid cells")
    d_depth = l_depth * float(depth.cells[valid].max())
    mask = np.zeros(depth.cells.shape, dtype=np.uint8)
    mask[valid & (depth.cells < d_depth)] = 1
    return mask


def make_ctrl_map(cum: CumSegMap, depth_mask: np.ndarray, fusion_threshold: int) -> CtrlMap:
    """Intersect the fused detections with the near-field depth mask."""
    depth_mask = np.asarray(depth_mask)
    if depth_mask.shape != cum.cells.shape:
        raise ValueError(
            f"dimension mismatch: cum {cum.cells.shape} vs depth mask {depth_mask.shape}"
        )
    out = ((cum.cells >= fusion_threshold) & (depth_mask != 0)).astype(np.uint8)
    return CtrlMap(cells=out)


def preprocess_frame(window: Sequence[SegMap], depth: DepthMap, config: RasterConfig) -> CtrlMap:
    """Full preprocessing for one control frame: fuse, gate by depth, intersect."""
    if len(window) != config.s_window:
        raise ValueError(f"expected {config.s_window} maps, got {len(window)}")
    cum = fuse_segmentations(window)
    mask = depth_binary_mask(depth, config.l_depth)
    return make_ctrl_map(cum, mask, config.fusion_threshold)


# ---------------------------------------------------------------------------
# File I/O: mask and depth rasters, replay manifests
# ---------------------------------------------------------------------------

_RAW_MAGIC_LEN = 8  # width u32 LE, height u32 LE


def _frame_index_from_name(path: Path) -> int:
    m = re.search(r"(\d+)(?!.*\d)", path.stem)
    return int(m.group(1)) if m else 0


def load_mask(path, timestamp: int | None = None, expect_shape=None) -> SegMap:
    """Load an 8-bit mask image (0 = free, 255 = vine).

    The frame index is parsed from the filename unless given explicitly.
    """
    path = Path(path)
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError(f"malformed mask file {path}: expected single-channel 8-bit")
    bad = ~np.isin(arr, (MASK_FREE, MASK_VINE))
    if bad.any():
        raise ValueError(f"malformed mask file {path}: values other than 0/255 present")
    if expect_shape is not None and arr.shape != tuple(expect_shape):
        raise ValueError(f"mask {path} has shape {arr.shape}, expected {tuple(expect_shape)}")
    if timestamp is None:
        timestamp = _frame_index_from_name(path)
    return SegMap(cells=(arr == MASK_VINE).astype(np.uint8), timestamp=timestamp)


def save_mask(seg: SegMap, path) -> None:
    arr = (seg.cells * MASK_VINE).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(Path(path))


def load_depth(path, expect_shape=None) -> DepthMap:
    """Load a depth raster.

    ``.png``: 16-bit single channel in millimeters, 0 = no return.
    Anything else: raw little-endian float32 meters with an 8-byte
    width/height header; NaN = no return.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        arr = np.asarray(Image.open(path))
        if arr.ndim != 2:
            raise ValueError(f"malformed depth file {path}: expected single channel")
        arr = arr.astype(np.uint16)
        meters = arr.astype(np.float32) / 1000.0
        meters[arr == 0] = np.nan
    else:
        blob = path.read_bytes()
        if len(blob) < _RAW_MAGIC_LEN:
            raise ValueError(f"malformed depth file {path}: truncated header")
        w, h = struct.unpack("<II", blob[:_RAW_MAGIC_LEN])
        expected = _RAW_MAGIC_LEN + 4 * w * h
        if len(blob) != expected:
            raise ValueError(
                f"malformed depth file {path}: payload is {len(blob)} bytes, expected {expected}"
            )
        meters = np.frombuffer(blob, dtype="<f4", offset=_RAW_MAGIC_LEN).reshape(h, w).copy()
    if expect_shape is not None and meters.shape != tuple(expect_shape):
        raise ValueError(f"depth {path} has shape {meters.shape}, expected {tuple(expect_shape)}")
    return DepthMap(cells=meters)


def save_depth(depth: DepthMap, path) -> None:
    """Save a depth raster; format chosen by suffix (see load_depth)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        mm = np.where(
            depth.valid_mask,
            np.round(depth.cells.astype(np.float64) * 1000.0),
            0.0,
        )
        if np.any(mm > 65535):
            raise ValueError("depth exceeds 65.535 m, not representable in 16-bit mm")
        Image.fromarray(mm.astype(np.uint16)).save(path)
    else:
        header = struct.pack("<II", depth.width, depth.height)
        path.write_bytes(header + depth.cells.astype("<f4").tobytes())


class FrameBuffer:
    """Thread-safe handoff between a frame producer and the control loop.

    The producer pushes (segmentation, depth) pairs at camera rate; only
    the most recent ``window`` frames are kept, so a slower consumer never
    blocks the producer and always sees the latest consecutive window.
    """

    def __init__(self, window: int):
        if window < 1:
            raise ValueError("window must be >= 1")
        self._window = window
        self._frames: list[tuple[SegMap, DepthMap]] = []
        self._lock = threading.Lock()

    def push(self, seg: SegMap, depth: DepthMap) -> None:
        with self._lock:
            self._frames.append((seg, depth))
            if len(self._frames) > self._window:
                del self._frames[: len(self._frames) - self._window]

    def snapshot(self) -> tuple[list[SegMap], DepthMap] | None:
        """Latest window of masks plus the newest depth, or None while filling."""
        with self._lock:
            if len(self._frames) < self._window:
                return None
            frames = list(self._frames)
        return [seg for seg, _ in frames], frames[-1][1]


@dataclass(frozen=True)
class ManifestEntry:
    frame_index: int
    mask_path: Path
    depth_path: Path
    label: str | None = None


def load_manifest(path) -> list[ManifestEntry]:
    """Parse a replay manifest: one `frame_index mask depth [label]` per line.

    Relative paths are resolved against the manifest's directory.  Blank
    lines and ``#`` comments are skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ValueError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
        try:
            idx = int(parts[0])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: frame index {parts[0]!r} is not an integer")
        mask_p = base / parts[1]
        depth_p = base / parts[2]
        label = parts[3] if len(parts) == 4 else None
        entries.append(ManifestEntry(idx, mask_p, depth_p, label))
    return entries
