"""Face-crop geometry and augmentation.

Covers the path from a source image with a face bounding box to a square
training crop and back: bbox expansion, bilinear crop/resize with the
exact source->crop affine, random similarity augmentation applied
consistently to pixels and landmarks, and the inverse mapping of
predictions to source coordinates.

Conventions: images are float arrays [H,W,3] with values in [0,1];
landmark coordinates are (x, y) pixel positions; depth z shares the image
pixel scale, so it multiplies by the isotropic scale of any transform
applied to x,y and ignores in-plane rotation and flips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .heatmaps import LandmarkSet3D

__all__ = [
    "BBox",
    "Affine2D",
    "AugmentConfig",
    "expand_bbox",
    "crop_resize",
    "warp_affine",
    "random_augment",
    "to_source_coords",
    "apply_to_landmarks3d",
    "flip_permutation",
    "FLIP_PERMUTATION_66",
    "FLIP_PERMUTATION_5",
]


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise DataError(
                f"degenerate bbox ({self.x_min},{self.y_min},{self.x_max},{self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def expand_bbox(bbox: BBox, fraction: float) -> BBox:
    """Grow width and height by ``fraction`` symmetrically about the center."""
    if fraction < 0:
        raise ConfigError(f"expansion fraction must be >= 0, got {fraction}")
    dx = bbox.width * fraction / 2.0
    dy = bbox.height * fraction / 2.0
    return BBox(bbox.x_min - dx, bbox.y_min - dy, bbox.x_max + dx, bbox.y_max + dy)


class Affine2D:
    """2x3 affine map ``p' = A p + t`` on (x, y) points."""

    __slots__ = ("matrix",)

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ConfigError(f"affine matrix must be 2x3, got {m.shape}")
        if abs(np.linalg.det(m[:, :2])) <= 1e-9:
            raise NumericError("affine linear part is singular")
        self.matrix = m

    @staticmethod
    def identity() -> "Affine2D":
        return Affine2D(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @staticmethod
    def from_parts(linear: np.ndarray, translation: np.ndarray) -> "Affine2D":
        m = np.zeros((2, 3))
        m[:, :2] = linear
        m[:, 2] = translation
        return Affine2D(m)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2]

    @property
    def isotropic_scale(self) -> float:
        """Area-preserving scalar scale, ``sqrt(|det A|)``."""
        return math.sqrt(abs(float(np.linalg.det(self.linear))))

    def is_identity(self) -> bool:
        return np.array_equal(self.matrix, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    def compose(self, inner: "Affine2D") -> "Affine2D":
        """The map ``p -> self(inner(p))``."""
        a = self.linear @ inner.linear
        t = self.linear @ inner.translation + self.translation
        return Affine2D.from_parts(a, t)

    def inverse(self) -> "Affine2D":
        inv = np.linalg.inv(self.linear)
        return Affine2D.from_parts(inv, -inv @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        out = pts @ self.linear.T + self.translation
        return out[0] if single else out


def _check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"image must be [H,W,3], got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise DataError(f"image dimensions must be positive, got {img.shape}")
    return img


def warp_affine(image: np.ndarray, transform: Affine2D,
                out_hw: Tuple[int, int]) -> np.ndarray:
    """Resample ``image`` under a source->output affine, zeros outside.

    Bilinear interpolation at the inverse-mapped source position of every
    output pixel.  An exact identity transform onto the same canvas size
    returns a bit-identical copy.
    """
    img = _check_image(image)
    out_h, out_w = int(out_hw[0]), int(out_hw[1])
    if transform.is_identity() and (out_h, out_w) == img.shape[:2]:
        return img.copy()

    inv = transform.inverse()
    gy, gx = np.meshgrid(np.arange(out_h, dtype=np.float64),
                         np.arange(out_w, dtype=np.float64), indexing="ij")
    src = np.stack([gx.ravel(), gy.ravel()], axis=1) @ inv.linear.T + inv.translation
    sx = src[:, 0]
    sy = src[:, 1]

    h, w = img.shape[:2]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    flat = img.reshape(-1, img.shape[2]).astype(np.float64, copy=False)
    acc = np.zeros((out_h * out_w, img.shape[2]), dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        yy = y0 + dy
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xx = x0 + dx
            ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            idx = np.where(ok, yy * w + xx, 0)
            weight = (wy * wx * ok)[:, None]
            acc += flat[idx] * weight
    return acc.reshape(out_h, out_w, img.shape[2]).astype(img.dtype, copy=False)


def crop_resize(image: np.ndarray, bbox: BBox, size: int) -> Tuple[np.ndarray, Affine2D]:
    """Crop ``bbox`` and resize to ``size`` x ``size``; returns the crop and
    the exact source->crop affine (regions outside the image fill with 0)."""
    img = _check_image(image)
    if size <= 0:
        raise ConfigError(f"crop size must be positive, got {size}")
    sx = size / bbox.width
    sy = size / bbox.height
    transform = Affine2D.from_parts(
        np.array([[sx, 0.0], [0.0, sy]]),
        np.array([-bbox.x_min * sx, -bbox.y_min * sy]),
    )
    return warp_affine(img, transform, (size, size)), transform


# Mirror pairs of the 66-point annotation scheme (the common 68-point
# layout with the two inner mouth corners dropped): jaw 0-16, brows 17-26,
# nose 27-35, eyes 36-47, outer mouth 48-59, inner mouth 60-65.
_FLIP_PAIRS_66 = (
    [(i, 16 - i) for i in range(8)]
    + [(17, 26), (18, 25), (19, 24), (20, 23), (21, 22)]
    + [(31, 35), (32, 34)]
    + [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]
    + [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]
    + [(60, 62), (63, 65)]
)


def _permutation_from_pairs(n: int, pairs) -> np.ndarray:
    perm = np.arange(n)
    for a, b in pairs:
        perm[a], perm[b] = b, a
    return perm


FLIP_PERMUTATION_66 = _permutation_from_pairs(66, _FLIP_PAIRS_66)

# synthetic 5-point scheme: left eye, right eye, nose, left mouth, right mouth
FLIP_PERMUTATION_5 = np.array([1, 0, 2, 4, 3])

_KNOWN_FLIP = {66: FLIP_PERMUTATION_66, 5: FLIP_PERMUTATION_5}


def flip_permutation(n_points: int) -> np.ndarray:
    """Left/right index permutation for a known point scheme."""
    try:
        return _KNOWN_FLIP[n_points].copy()
    except KeyError:
        raise ConfigError(
            f"no built-in flip permutation for {n_points} points; supply one"
        ) from None


@dataclass
class AugmentConfig:
    """Similarity + color-jitter augmentation ranges.

    All geometric pieces compose into one affine about the crop center.
    ``flip_permutation`` reorders landmarks when a horizontal flip fires
    and must be an involution.
    """

    flip_permutation: np.ndarray
    flip_prob: float = 0.5
    rotation_range_deg: Tuple[float, float] = (-35.0, 35.0)
    scale_range: Tuple[float, float] = (0.85, 1.15)
    jitter_range: Tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        self.flip_permutation = np.asarray(self.flip_permutation, dtype=np.int64)
        perm = self.flip_permutation
        n = perm.shape[0]
        if sorted(perm.tolist()) != list(range(n)):
            raise ConfigError("flip_permutation is not a permutation")
        if not np.array_equal(perm[perm], np.arange(n)):
            raise ConfigError("flip_permutation must be an involution")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        for name in ("rotation_range_deg", "scale_range", "jitter_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"{name} must be ordered, got ({lo},{hi})")
        if self.scale_range[0] <= 0:
            raise ConfigError("scale range must be positive")
        if self.jitter_range[0] < 0:
            raise ConfigError("jitter range must be non-negative")

    @staticmethod
    def disabled(flip_permutation: np.ndarray) -> "AugmentConfig":
        """Identity geometry and unit jitter; useful for deterministic eval."""
        return AugmentConfig(
            flip_permutation=flip_permutation,
            flip_prob=0.0,
            rotation_range_deg=(0.0, 0.0),
            scale_range=(1.0, 1.0),
            jitter_range=(1.0, 1.0),
        )


def similarity_about_center(crop_hw: Tuple[int, int], flip: bool,
                            angle_deg: float, scl: float) -> Affine2D:
    """Flip, then rotate, then scale, all about the crop center."""
    h, w = crop_hw
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    th = math.radians(angle_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    lin = scl * rot
    if flip:
        lin = lin @ np.array([[-1.0, 0.0], [0.0, 1.0]])
    return Affine2D.from_parts(lin, c - lin @ c)


def random_augment(image: np.ndarray, landmarks: LandmarkSet3D,
                   cfg: AugmentConfig, rng: np.random.Generator):
    """Sample one augmentation and apply it to pixels and landmarks.

    Returns (image, landmarks, transform).  Draw order is fixed (flip,
    rotation, scale, jitter) so a seeded generator reproduces the stream
    regardless of outcomes.  Z scales with the sampled isotropic factor;
    flips permute landmark order (and z with it) without touching signs.
    """
    img = _check_image(image)
    if landmarks.n_points != cfg.flip_permutation.shape[0]:
        raise ConfigError(
            f"flip permutation size {cfg.flip_permutation.shape[0]} does not "
            f"match landmark count {landmarks.n_points}"
        )
    do_flip = bool(rng.random() < cfg.flip_prob)
    angle = float(rng.uniform(*cfg.rotation_range_deg))
    scl = float(rng.uniform(*cfg.scale_range))
    jitter = rng.uniform(cfg.jitter_range[0], cfg.jitter_range[1], size=3)

    transform = similarity_about_center(img.shape[:2], do_flip, angle, scl)
    out = warp_affine(img, transform, img.shape[:2])
    if not np.all(jitter == 1.0):
        out = np.clip(out * jitter[None, None, :], 0.0, 1.0).astype(img.dtype, copy=False)

    pts = transform.apply(landmarks.points)
    z = landmarks.z * scl
    vis = None if landmarks.visible is None else landmarks.visible.copy()
    if do_flip:
        perm = cfg.flip_permutation
        pts = pts[perm]
        z = z[perm]
        if vis is not None:
            vis = vis[perm]
    h, w = landmarks.crop_size
    inside = (
        (pts[:, 0] >= 0.0) & (pts[:, 0] <= w - 1)
        & (pts[:, 1] >= 0.0) & (pts[:, 1] <= h - 1)
    )
    if vis is None:
        vis = inside
    else:
        vis = vis & inside
    lm = LandmarkSet3D(pts, z, landmarks.crop_size, visible=vis)
    return out, lm, transform


def apply_to_landmarks3d(landmarks: LandmarkSet3D, transform: Affine2D,
                         crop_size: Optional[Tuple[int, int]] = None) -> LandmarkSet3D:
    """Map x,y through ``transform`` and scale z by its isotropic factor."""
    pts = transform.apply(landmarks.points)
    z = landmarks.z * transform.isotropic_scale
    size = crop_size if crop_size is not None else landmarks.crop_size
    vis = None if landmarks.visible is None else landmarks.visible.copy()
    return LandmarkSet3D(pts, z, size, visible=vis)


def to_source_coords(pred: LandmarkSet3D, crop_transform: Affine2D,
                     source_size: Optional[Tuple[int, int]] = None) -> LandmarkSet3D:
    """Undo a source->crop transform on a prediction made in crop coords."""
    inv = crop_transform.inverse()
    pts = inv.apply(pred.points)
    z = pred.z / crop_transform.isotropic_scale
    if source_size is None:
        # conservative frame: large enough to contain the mapped points
        extent = max(float(np.abs(pts).max()) + 1.0, 1.0)
        source_size = (int(math.ceil(extent)), int(math.ceil(extent)))
    vis = None if pred.visible is None else pred.visible.copy()
    conf = None if pred.confidence is None else pred.confidence.copy()
    return LandmarkSet3D(pts, z, source_size, visible=vis, confidence=conf)
