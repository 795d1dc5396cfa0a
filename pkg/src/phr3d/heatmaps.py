"""Landmark <-> heatmap codecs.

Two ground-truth encodings and one decoder:

* binary disks (detection targets): all pixels within a radius of the
  landmark are 1, radius scales with face size and map resolution;
* unnormalized Gaussians (regression targets and depth-net input), peak
  amplitude 1 at the landmark;
* argmax decoding with quarter-pixel refinement back to crop coordinates.

Landmark coordinates are (x, y) in pixels of a square crop.  Heatmaps may
live at a reduced resolution; the stack records the crop->map scale so
decoding can restore crop coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "LandmarkSet2D",
    "LandmarkSet3D",
    "HeatmapStack",
    "encode_binary_disk",
    "encode_gaussian",
    "decode_argmax",
    "write_pgm_strip",
    "DISK_RADIUS_BASE",
    "DISK_RADIUS_FACE_HEIGHT",
]

# anchor of the disk-radius rule: 7 px for a face bbox of height 220 px,
# scaled linearly with face height and with map resolution
DISK_RADIUS_BASE = 7.0
DISK_RADIUS_FACE_HEIGHT = 220.0


def _check_points(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DataError(f"landmark points must be [N,2], got {pts.shape}")
    if pts.shape[0] < 1:
        raise DataError("landmark set needs at least one point")
    if not np.isfinite(pts).all():
        raise DataError("landmark coordinates must be finite")
    return pts


def _check_flags(flags: Optional[np.ndarray], n: int, what: str) -> Optional[np.ndarray]:
    if flags is None:
        return None
    arr = np.asarray(flags)
    if arr.shape != (n,):
        raise DataError(f"{what} must have shape ({n},), got {arr.shape}")
    return arr


@dataclass
class LandmarkSet2D:
    """N ordered (x, y) points in pixels of a crop of size ``crop_size``.

    ``visible`` flags points that are inside the frame and annotated;
    ``None`` means all visible.  ``confidence`` is decoder output (peak
    heatmap value, 0 for degenerate maps) and is ``None`` on ground truth.
    """

    points: np.ndarray
    crop_size: Tuple[int, int]
    visible: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = _check_points(self.points)
        h, w = self.crop_size
        if h <= 0 or w <= 0:
            raise DataError(f"crop size must be positive, got {self.crop_size}")
        self.crop_size = (int(h), int(w))
        n = self.points.shape[0]
        self.visible = _check_flags(self.visible, n, "visible flags")
        self.confidence = _check_flags(self.confidence, n, "confidence")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def visible_mask(self) -> np.ndarray:
        if self.visible is None:
            return np.ones(self.n_points, dtype=bool)
        return self.visible.astype(bool)


@dataclass
class LandmarkSet3D:
    """A 2D landmark set plus per-point depth ``z`` in pixels."""

    points: np.ndarray
    z: np.ndarray
    crop_size: Tuple[int, int]
    visible: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = _check_points(self.points)
        self.z = np.asarray(self.z, dtype=np.float64)
        n = self.points.shape[0]
        if self.z.shape != (n,):
            raise DataError(f"z must have shape ({n},), got {self.z.shape}")
        if not np.isfinite(self.z).all():
            raise DataError("z values must be finite")
        h, w = self.crop_size
        if h <= 0 or w <= 0:
            raise DataError(f"crop size must be positive, got {self.crop_size}")
        self.crop_size = (int(h), int(w))
        self.visible = _check_flags(self.visible, n, "visible flags")
        self.confidence = _check_flags(self.confidence, n, "confidence")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def visible_mask(self) -> np.ndarray:
        if self.visible is None:
            return np.ones(self.n_points, dtype=bool)
        return self.visible.astype(bool)

    def to_2d(self) -> LandmarkSet2D:
        return LandmarkSet2D(
            self.points.copy(), self.crop_size,
            None if self.visible is None else self.visible.copy(),
            None if self.confidence is None else self.confidence.copy(),
        )

    def xyz(self) -> np.ndarray:
        """Points as an [N,3] array (x, y, z)."""
        return np.concatenate([self.points, self.z[:, None]], axis=1)


@dataclass
class HeatmapStack:
    """Per-landmark maps [N,Hm,Wm] plus the crop->map scale factor."""

    maps: np.ndarray
    kind: str  # binary_disk | gaussian | predicted
    scale: float  # map pixels per crop pixel

    def __post_init__(self):
        self.maps = np.asarray(self.maps)
        if self.maps.ndim != 3:
            raise DataError(f"heatmap stack must be [N,H,W], got {self.maps.shape}")
        if self.kind not in ("binary_disk", "gaussian", "predicted"):
            raise ConfigError(f"unknown heatmap kind {self.kind!r}")
        if not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")

    @property
    def n_maps(self) -> int:
        return self.maps.shape[0]

    @property
    def map_size(self) -> Tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


def _map_geometry(landmarks, map_size: int):
    h, w = landmarks.crop_size
    if h != w:
        raise ConfigError(f"codec expects square crops, got {landmarks.crop_size}")
    if map_size <= 0:
        raise ConfigError(f"map size must be positive, got {map_size}")
    scale = map_size / float(h)
    # a point participates only if inside the crop's pixel grid and visible
    pts = landmarks.points
    inside = (
        (pts[:, 0] >= 0.0) & (pts[:, 0] <= w - 1)
        & (pts[:, 1] >= 0.0) & (pts[:, 1] <= h - 1)
    )
    active = inside & landmarks.visible_mask()
    return scale, pts * scale, active


def encode_binary_disk(landmarks: LandmarkSet2D, face_bbox_height: float,
                       map_size: int, dtype=np.float64) -> HeatmapStack:
    """Disk targets: 1 within radius ``7 * (face_h/220) * (map/crop)`` px.

    The radius floors at 1 px so every in-frame landmark has a nonempty
    target.  Out-of-frame or invisible landmarks give all-zero maps.
    """
    if not face_bbox_height > 0:
        raise ConfigError(f"face bbox height must be positive, got {face_bbox_height}")
    scale, centers, active = _map_geometry(landmarks, map_size)
    r = DISK_RADIUS_BASE * (face_bbox_height / DISK_RADIUS_FACE_HEIGHT) * scale
    r = max(r, 1.0)
    n = landmarks.n_points
    maps = np.zeros((n, map_size, map_size), dtype=dtype)
    ys = np.arange(map_size, dtype=np.float64)
    xs = np.arange(map_size, dtype=np.float64)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    r2 = r * r
    for i in range(n):
        if not active[i]:
            continue
        cx, cy = centers[i]
        d2 = (gx - cx) ** 2 + (gy - cy) ** 2
        maps[i] = (d2 <= r2).astype(dtype)
    return HeatmapStack(maps, "binary_disk", scale)


def encode_gaussian(landmarks: LandmarkSet2D, map_size: int, std: float = 6.0,
                    dtype=np.float64) -> HeatmapStack:
    """Gaussian targets ``exp(-||p - landmark||^2 / (2 std^2))``, peak 1.

    ``std`` is in map pixels.  Out-of-frame or invisible landmarks give
    all-zero maps.
    """
    if not std > 0:
        raise ConfigError(f"gaussian std must be positive, got {std}")
    scale, centers, active = _map_geometry(landmarks, map_size)
    n = landmarks.n_points
    maps = np.zeros((n, map_size, map_size), dtype=dtype)
    ys = np.arange(map_size, dtype=np.float64)
    xs = np.arange(map_size, dtype=np.float64)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    inv = 1.0 / (2.0 * std * std)
    for i in range(n):
        if not active[i]:
            continue
        cx, cy = centers[i]
        d2 = (gx - cx) ** 2 + (gy - cy) ** 2
        maps[i] = np.exp(-d2 * inv).astype(dtype)
    return HeatmapStack(maps, "gaussian", scale)


def _refine_quarter(m: np.ndarray, row: int, col: int) -> Tuple[float, float]:
    # quarter-pixel shift toward the larger axis neighbor; none at borders
    h, w = m.shape
    x = float(col)
    y = float(row)
    if 0 < col < w - 1:
        if m[row, col + 1] > m[row, col - 1]:
            x += 0.25
        elif m[row, col - 1] > m[row, col + 1]:
            x -= 0.25
    if 0 < row < h - 1:
        if m[row + 1, col] > m[row - 1, col]:
            y += 0.25
        elif m[row - 1, col] > m[row + 1, col]:
            y -= 0.25
    return x, y


def decode_argmax(stack: HeatmapStack) -> LandmarkSet2D:
    """Peak location per map, refined by a quarter pixel, in crop coords.

    Flat maps (all-zero included) decode to the map center with
    confidence 0; everything else reports the peak value as confidence.
    Argmax ties break toward the smallest row-major index.
    """
    if stack.n_maps < 1:
        raise DataError("cannot decode an empty heatmap stack")
    n = stack.n_maps
    hm, wm = stack.map_size
    out = np.empty((n, 2), dtype=np.float64)
    conf = np.empty(n, dtype=np.float64)
    for i in range(n):
        m = stack.maps[i]
        mmax = m.max()
        if mmax == m.min():
            out[i] = ((wm - 1) / 2.0, (hm - 1) / 2.0)
            conf[i] = 0.0
            continue
        row, col = np.unravel_index(int(np.argmax(m)), m.shape)
        out[i] = _refine_quarter(m, int(row), int(col))
        conf[i] = float(mmax)
    crop = int(round(hm / stack.scale))
    return LandmarkSet2D(out / stack.scale, (crop, crop), confidence=conf)


def write_pgm_strip(stack: HeatmapStack, out_dir, prefix: str = "map") -> list:
    """Dump each map as an 8-bit binary PGM, scaled so the peak is 255."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hm, wm = stack.map_size
    paths = []
    for i in range(stack.n_maps):
        m = np.clip(stack.maps[i], 0.0, None)
        peak = m.max()
        if peak > 0:
            m = m / peak
        data = np.round(m * 255.0).astype(np.uint8)
        path = out / f"{prefix}_{i:03d}.pgm"
        with open(path, "wb") as fh:
            fh.write(f"P5\n{wm} {hm}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
        paths.append(path)
    return paths
