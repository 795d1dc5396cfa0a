"""Synthetic face-like scenes with exact 3D landmark ground truth.

Each record poses a rigid 5-point template (two outer eye corners, nose
tip, two mouth corners) with sampled yaw/pitch/roll, scale, and
translation, then renders one shaded blob per landmark plus an elliptical
face outline for context.  Blob brightness increases toward the camera,
so depth is recoverable from appearance.  Ground truth is the projected
template itself: x,y in image pixels, z in the same pixel scale
(positive toward the viewer).

Records carry subject and view ids; views of the same subject share one
template instance, so their 3D ground truths are related by an exact
similarity transform.  That makes same-subject pairs suitable for
cross-view consistency scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import DatasetRecord, write_manifest, write_pairs, save_image_rgb
from .errors import ConfigError
from .geometry import BBox
from .heatmaps import LandmarkSet3D

__all__ = [
    "SyntheticFaceSpec",
    "SyntheticRecord",
    "canonical_template",
    "generate_synthetic",
    "write_synthetic_dataset",
]

# unit-scale template: x right, y down, z toward the viewer
_TEMPLATE_5 = np.array([
    [-0.50, -0.35, 0.12],   # left outer eye corner
    [0.50, -0.35, 0.12],    # right outer eye corner
    [0.00, 0.10, 0.45],     # nose tip
    [-0.35, 0.50, 0.08],    # left mouth corner
    [0.35, 0.50, 0.08],     # right mouth corner
])

_PALETTE = np.array([
    [1.00, 0.55, 0.25],
    [0.25, 0.85, 1.00],
    [1.00, 1.00, 0.45],
    [0.95, 0.35, 0.85],
    [0.45, 1.00, 0.45],
])


def canonical_template() -> np.ndarray:
    return _TEMPLATE_5.copy()


def _check_range(name: str, rng_pair) -> Tuple[float, float]:
    lo, hi = float(rng_pair[0]), float(rng_pair[1])
    if hi < lo:
        raise ConfigError(f"{name} range {rng_pair} has hi < lo")
    return lo, hi


@dataclass(frozen=True)
class SyntheticFaceSpec:
    """Generation parameters; one spec determines the whole dataset."""

    image_size: int = 96
    yaw_range_deg: Tuple[float, float] = (-25.0, 25.0)
    pitch_range_deg: Tuple[float, float] = (-15.0, 15.0)
    roll_range_deg: Tuple[float, float] = (-12.0, 12.0)
    scale_range: Tuple[float, float] = (26.0, 36.0)  # template units -> pixels
    translation_range: Tuple[float, float] = (-6.0, 6.0)
    views_per_subject: int = 2
    shape_jitter: float = 0.0  # per-subject template perturbation, template units
    blob_sigma_factor: float = 0.09  # blob sigma as a fraction of the scale
    outline: bool = True
    noise_level: float = 0.02
    seed: int = 0
    template: Optional[np.ndarray] = None  # [N,3]; default 5-point scheme

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.views_per_subject < 1:
            raise ConfigError("views_per_subject must be >= 1")
        if self.noise_level < 0 or self.shape_jitter < 0:
            raise ConfigError("noise_level and shape_jitter must be >= 0")
        for name in ("yaw_range_deg", "pitch_range_deg", "roll_range_deg",
                     "translation_range"):
            _check_range(name, getattr(self, name))
        lo, hi = _check_range("scale_range", self.scale_range)
        if lo <= 0:
            raise ConfigError(f"scale_range must be positive, got {self.scale_range}")
        tmpl = self.resolved_template()
        if tmpl.ndim != 2 or tmpl.shape[1] != 3 or tmpl.shape[0] < 3:
            raise ConfigError(f"template must be [N>=3,3], got {tmpl.shape}")
        centered = tmpl - tmpl.mean(axis=0)
        svals = np.linalg.svd(centered, compute_uv=False)
        if svals[1] < 1e-9 * max(svals[0], 1.0):
            raise ConfigError("template points are collinear; similarity "
                              "fitting needs rank >= 2")

    def resolved_template(self) -> np.ndarray:
        if self.template is None:
            return _TEMPLATE_5.copy()
        return np.asarray(self.template, dtype=np.float64)

    @property
    def n_landmarks(self) -> int:
        return self.resolved_template().shape[0]

    def depth_bound(self) -> float:
        """Hard cap on |z|: largest template radius times the largest scale."""
        tmpl = self.resolved_template()
        radius = float(np.linalg.norm(tmpl - tmpl.mean(axis=0), axis=1).max())
        return self.scale_range[1] * radius

    def nominal_depth_span(self) -> Tuple[float, float]:
        """Z extent of the unrotated template across the scale range."""
        tz = self.resolved_template()[:, 2]
        tz = tz - self.resolved_template().mean(axis=0)[2]
        lo = min(self.scale_range[0] * tz.min(), self.scale_range[1] * tz.min())
        hi = max(self.scale_range[0] * tz.max(), self.scale_range[1] * tz.max())
        return lo, hi


@dataclass
class SyntheticRecord:
    image: np.ndarray  # [S,S,3] float in [0,1]
    bbox: BBox
    landmarks: LandmarkSet3D  # source-frame pixels
    subject: str
    view: str
    pose: dict = field(default_factory=dict)


def _rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ rx @ ry


def _render(spec: SyntheticFaceSpec, pts3: np.ndarray, scale: float,
            rot: np.ndarray, center: np.ndarray,
            rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size, 3))
    depth_cap = max(spec.depth_bound(), 1e-9)

    if spec.outline:
        # projected image of a template-plane circle of radius 1.1
        lin = scale * rot[:2, :2] * 1.1
        det = np.linalg.det(lin)
        if abs(det) > 1e-9:
            inv = np.linalg.inv(lin)
            rel = np.stack([xx - center[0], yy - center[1]], axis=-1) @ inv.T
            ru = np.linalg.norm(rel, axis=-1)
            ring = np.exp(-((ru - 1.0) ** 2) / (2 * 0.03 ** 2))
            img += 0.22 * ring[..., None]

    sigma = max(spec.blob_sigma_factor * scale, 0.8)
    for i, (x, y, z) in enumerate(pts3):
        shade = np.clip(0.55 + 0.45 * z / depth_cap, 0.1, 1.0)
        blob = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma ** 2))
        img += shade * blob[..., None] * _PALETTE[i % len(_PALETTE)]

    if spec.noise_level > 0:
        img += spec.noise_level * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _face_bbox(pts2: np.ndarray, margin: float = 0.45) -> BBox:
    cx, cy = pts2.mean(axis=0)
    span = max(np.ptp(pts2[:, 0]), np.ptp(pts2[:, 1]), 8.0)
    half = (0.5 + margin) * span
    return BBox(cx - half, cy - half, cx + half, cy + half)


def generate_synthetic(spec: SyntheticFaceSpec, count: int) -> List[SyntheticRecord]:
    """Deterministic dataset of ``count`` posed renderings.

    Subjects are filled round-robin with ``views_per_subject`` views each;
    ground-truth landmarks are the exact transformed template points.
    """
    if count < 2:
        raise ConfigError(f"count must be >= 2, got {count}")
    rng = np.random.default_rng(spec.seed)
    base = spec.resolved_template()
    size = spec.image_size
    out: List[SyntheticRecord] = []
    subject = -1
    tmpl = base
    while len(out) < count:
        view = len(out) % spec.views_per_subject
        if view == 0:
            subject += 1
            tmpl = base
            if spec.shape_jitter > 0:
                tmpl = base + spec.shape_jitter * rng.standard_normal(base.shape)
        yaw = math.radians(rng.uniform(*spec.yaw_range_deg))
        pitch = math.radians(rng.uniform(*spec.pitch_range_deg))
        roll = math.radians(rng.uniform(*spec.roll_range_deg))
        scale = rng.uniform(*spec.scale_range)
        tx = rng.uniform(*spec.translation_range)
        ty = rng.uniform(*spec.translation_range)

        rot = _rotation(yaw, pitch, roll)
        center = np.array([(size - 1) / 2.0 + tx, (size - 1) / 2.0 + ty])
        posed = scale * (tmpl - tmpl.mean(axis=0)) @ rot.T
        pts3 = posed + np.array([center[0], center[1], 0.0])
        img = _render(spec, pts3, scale, rot, center, rng)

        inside = ((pts3[:, 0] >= 0) & (pts3[:, 0] <= size - 1)
                  & (pts3[:, 1] >= 0) & (pts3[:, 1] <= size - 1))
        lm = LandmarkSet3D(pts3[:, :2], pts3[:, 2], (size, size),
                           visible=inside)
        out.append(SyntheticRecord(
            image=img, bbox=_face_bbox(pts3[:, :2]), landmarks=lm,
            subject=f"s{subject:04d}", view=f"v{view}",
            pose={"yaw_deg": math.degrees(yaw), "pitch_deg": math.degrees(pitch),
                  "roll_deg": math.degrees(roll), "scale": scale,
                  "tx": tx, "ty": ty},
        ))
    return out


def _same_subject_pairs(records: Sequence[DatasetRecord]) -> List[Tuple[str, str]]:
    by_subject: dict = {}
    for rec in records:
        by_subject.setdefault(rec.subject, []).append(rec.image_path)
    pairs = []
    for paths in by_subject.values():
        for a in paths:
            for b in paths:
                if a != b:
                    pairs.append((a, b))
    return pairs


def write_synthetic_dataset(spec: SyntheticFaceSpec, count: int, out_dir,
                            val_fraction: float = 1.0 / 6.0) -> dict:
    """Render to PNGs and emit train/val manifests plus cross-view pairs.

    Whole subjects go to one split, so same-subject pairs never straddle
    the train/val boundary.  Returns the written file paths.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0,1), got {val_fraction}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = generate_synthetic(spec, count)
    n_val = max(1, round(count * val_fraction))

    dataset: List[DatasetRecord] = []
    for i, rec in enumerate(records):
        rel = f"images/{i:05d}.png"
        save_image_rgb(out_dir / rel, rec.image)
        dataset.append(DatasetRecord(rel, rec.bbox, rec.landmarks,
                                     rec.subject, rec.view))

    # split on subject boundaries, filling val from the tail
    val: List[DatasetRecord] = []
    train = list(dataset)
    while len(val) < n_val and train:
        subj = train[-1].subject
        chunk = [r for r in train if r.subject == subj]
        train = [r for r in train if r.subject != subj]
        val = chunk + val
    paths = {
        "train_manifest": out_dir / "train.csv",
        "val_manifest": out_dir / "val.csv",
        "train_pairs": out_dir / "pairs_train.csv",
        "val_pairs": out_dir / "pairs_val.csv",
    }
    write_manifest(train, paths["train_manifest"])
    write_manifest(val, paths["val_manifest"])
    write_pairs(_same_subject_pairs(train), paths["train_pairs"])
    write_pairs(_same_subject_pairs(val), paths["val_pairs"])
    return {k: str(v) for k, v in paths.items()}
