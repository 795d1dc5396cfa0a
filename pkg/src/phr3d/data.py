"""Dataset manifests, prediction files, pair lists, and run configuration.

All list files are UTF-8 text, one record per line, comma-separated;
lines that are blank or start with ``#`` are skipped.  Formats:

  manifest     image_path, x0, y0, x1, y1, X1, Y1, Z1, ..., XN, YN, ZN
               with two optional trailing tokens: subject id, view id
  predictions  image_path, X1, Y1, Z1, ..., XN, YN, ZN
  pairs        path_a, path_b   (score prediction for a against GT for b)

Coordinates are source-image pixels (x right, y down); Z shares the
pixel scale.  The bbox is the face box corners (x0, y0) to (x1, y1).
Floats are written with ``repr`` so a write / read / write cycle is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .geometry import (
    AugmentConfig,
    BBox,
    apply_to_landmarks3d,
    crop_resize,
    expand_bbox,
    flip_permutation,
)
from .heatmaps import LandmarkSet3D
from .metrics import DEFAULT_EYE_INDICES_5, DEFAULT_EYE_INDICES_66
from .model import TrainSample, TrainSchedule

__all__ = [
    "DatasetRecord",
    "PredictionRecord",
    "MetricSettings",
    "RunConfig",
    "load_dataset",
    "write_manifest",
    "load_predictions",
    "write_predictions",
    "load_pairs",
    "write_pairs",
    "resolve_pairs",
    "load_image_rgb",
    "save_image_rgb",
    "prepare_samples",
    "default_eye_indices",
    "config_hash",
    "convert_external_annotations",
]

CROP_EXPAND_FRACTION = 0.225  # face box growth before cropping, both sides total


@dataclass
class DatasetRecord:
    """One annotated image: path, face box, and 3D landmarks in source pixels."""

    image_path: str
    bbox: BBox
    landmarks: LandmarkSet3D
    subject: Optional[str] = None
    view: Optional[str] = None


@dataclass
class PredictionRecord:
    image_path: str
    points: np.ndarray  # [N,3]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError(f"prediction points must be [N,3], got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise DataError(f"non-finite prediction for {self.image_path}")


def _data_lines(path) -> List[Tuple[int, List[str]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file {path} does not exist")
    out = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        out.append((lineno, [tok.strip() for tok in line.split(",")]))
    return out


def _floats(tokens: Sequence[str], lineno: int, path) -> List[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise DataError(f"{path} line {lineno}: {exc}") from None


def _coord_block(values: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    xyz = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    return xyz[:, :2], xyz[:, 2]


def _frame_for(points: np.ndarray, bbox: BBox) -> Tuple[int, int]:
    # coordinate-frame extent when the image itself is not consulted
    w = max(bbox.x_max, points[:, 0].max(), 1.0)
    h = max(bbox.y_max, points[:, 1].max(), 1.0)
    return (int(np.ceil(h)) + 1, int(np.ceil(w)) + 1)


def load_dataset(manifest_path, require_images: bool = True) -> List[DatasetRecord]:
    """Parse a manifest into records; landmark count must be uniform.

    With ``require_images`` each referenced image must exist and its size
    becomes the landmark coordinate frame; without it (evaluation never
    opens pixels) the frame is derived from the bbox/landmark extent.
    """
    manifest_path = Path(manifest_path)
    records: List[DatasetRecord] = []
    n_points: Optional[int] = None
    for lineno, tokens in _data_lines(manifest_path):
        if len(tokens) < 1 + 4 + 3:
            raise DataError(
                f"{manifest_path} line {lineno}: expected path, 4 bbox values, "
                f"and at least one landmark triple, got {len(tokens)} fields"
            )
        img = tokens[0]
        rest = tokens[1:]
        tail = (len(rest) - 4) % 3
        subject = view = None
        if tail == 2:
            subject, view = rest[-2], rest[-1]
            rest = rest[:-2]
        elif tail != 0:
            raise DataError(
                f"{manifest_path} line {lineno}: coordinate block of {len(rest) - 4} "
                f"values is not a multiple of 3 (optionally plus subject, view)"
            )
        values = _floats(rest, lineno, manifest_path)
        try:
            bbox = BBox(*values[:4])
        except DataError as exc:
            raise DataError(f"{manifest_path} line {lineno}: {exc}") from None
        pts, z = _coord_block(values[4:])
        if n_points is None:
            n_points = pts.shape[0]
        elif pts.shape[0] != n_points:
            raise DataError(
                f"{manifest_path} line {lineno}: {pts.shape[0]} landmarks, "
                f"expected {n_points} as in the first record"
            )
        img_path = Path(img)
        if not img_path.is_absolute():
            img_path = manifest_path.parent / img_path
        if require_images:
            if not img_path.exists():
                raise DataError(
                    f"{manifest_path} line {lineno}: image {img_path} does not exist"
                )
            with Image.open(img_path) as im:
                frame = (im.height, im.width)
        else:
            frame = _frame_for(pts, bbox)
        try:
            lm = LandmarkSet3D(pts, z, frame)
        except DataError as exc:
            raise DataError(f"{manifest_path} line {lineno}: {exc}") from None
        records.append(DatasetRecord(img, bbox, lm, subject, view))
    if not records:
        warnings.warn(f"manifest {manifest_path} contains no records")
    return records


def _record_line(rec: DatasetRecord) -> str:
    parts = [rec.image_path]
    parts += [repr(float(v)) for v in rec.bbox.as_tuple()]
    for (x, y), z in zip(rec.landmarks.points, rec.landmarks.z):
        parts += [repr(float(x)), repr(float(y)), repr(float(z))]
    if rec.subject is not None or rec.view is not None:
        parts += [rec.subject or "", rec.view or ""]
    return ",".join(parts)


def write_manifest(records: Sequence[DatasetRecord], path) -> None:
    Path(path).write_text(
        "".join(_record_line(r) + "\n" for r in records), encoding="utf-8")


def load_predictions(path) -> List[PredictionRecord]:
    out: List[PredictionRecord] = []
    n_points: Optional[int] = None
    for lineno, tokens in _data_lines(path):
        if len(tokens) < 4 or (len(tokens) - 1) % 3 != 0:
            raise DataError(
                f"{path} line {lineno}: expected path plus landmark triples, "
                f"got {len(tokens)} fields"
            )
        values = _floats(tokens[1:], lineno, path)
        pts = np.asarray(values).reshape(-1, 3)
        if n_points is None:
            n_points = pts.shape[0]
        elif pts.shape[0] != n_points:
            raise DataError(
                f"{path} line {lineno}: {pts.shape[0]} landmarks, "
                f"expected {n_points} as in the first record"
            )
        out.append(PredictionRecord(tokens[0], pts))
    if not out:
        warnings.warn(f"prediction file {path} contains no records")
    return out


def write_predictions(records: Sequence[PredictionRecord], path) -> None:
    lines = []
    for rec in records:
        parts = [rec.image_path]
        parts += [repr(float(v)) for v in rec.points.ravel()]
        lines.append(",".join(parts) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_pairs(path) -> List[Tuple[str, str]]:
    out = []
    for lineno, tokens in _data_lines(path):
        if len(tokens) != 2:
            raise DataError(f"{path} line {lineno}: expected 'path_a,path_b'")
        out.append((tokens[0], tokens[1]))
    return out


def write_pairs(pairs: Sequence[Tuple[str, str]], path) -> None:
    Path(path).write_text(
        "".join(f"{a},{b}\n" for a, b in pairs), encoding="utf-8")


def resolve_pairs(pairs: Sequence[Tuple[str, str]], pred_paths: Sequence[str],
                  gt_paths: Sequence[str]) -> List[Tuple[int, int]]:
    """Map (prediction path, GT path) pairs to index pairs."""
    pred_idx = {p: i for i, p in enumerate(pred_paths)}
    gt_idx = {p: i for i, p in enumerate(gt_paths)}
    out = []
    for a, b in pairs:
        if a not in pred_idx:
            raise DataError(f"pair references unknown prediction path {a!r}")
        if b not in gt_idx:
            raise DataError(f"pair references unknown GT path {b!r}")
        out.append((pred_idx[a], gt_idx[b]))
    return out


def load_image_rgb(path) -> np.ndarray:
    """PNG (or any raster) to float [H,W,3] in [0,1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image {path} does not exist")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image_rgb(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"image must be [H,W,3], got {arr.shape}")
    out = np.clip(arr, 0.0, 1.0) * 255.0
    Image.fromarray(np.round(out).astype(np.uint8), mode="RGB").save(Path(path))


def prepare_samples(records: Sequence[DatasetRecord], crop_size: int,
                    expand_fraction: float = CROP_EXPAND_FRACTION,
                    image_root=None) -> List[TrainSample]:
    """Load, crop, and rescale records into crop-space training samples.

    The face box grows by ``expand_fraction``, the crop is warped to
    ``crop_size`` square, landmark x,y map through the same affine, and z
    scales with the warp's isotropic factor.  ``face_height`` becomes the
    face box height in crop pixels, which sets the detection disk radius.
    """
    root = Path(image_root) if image_root is not None else None
    out: List[TrainSample] = []
    for rec in records:
        img_path = Path(rec.image_path)
        if root is not None and not img_path.is_absolute():
            img_path = root / img_path
        image = load_image_rgb(img_path)
        box = expand_bbox(rec.bbox, expand_fraction)
        crop, transform = crop_resize(image, box, crop_size)
        lm = apply_to_landmarks3d(rec.landmarks, transform,
                                  (crop_size, crop_size))
        face_h = rec.bbox.height * transform.isotropic_scale
        out.append(TrainSample(crop, lm, face_height=float(face_h)))
    return out


def default_eye_indices(n_landmarks: int) -> Tuple[int, int]:
    """Outer-eye-corner indices for the built-in point schemes."""
    if n_landmarks == 66:
        return DEFAULT_EYE_INDICES_66
    if n_landmarks == 5:
        return DEFAULT_EYE_INDICES_5
    raise ConfigError(
        f"no default eye indices for {n_landmarks} landmarks; set them explicitly"
    )


@dataclass(frozen=True)
class MetricSettings:
    eye_indices: Optional[Tuple[int, int]] = None  # None: scheme default
    cvgtce_include_translation: bool = True

    def resolved_eyes(self, n_landmarks: int) -> Tuple[int, int]:
        if self.eye_indices is not None:
            return tuple(self.eye_indices)
        return default_eye_indices(n_landmarks)


_AUGMENT_KEYS = ("enabled", "flip_prob", "rotation_range_deg", "scale_range",
                 "jitter_range")


@dataclass
class RunConfig:
    """Everything a training run needs, loadable from one JSON file.

    ``schedule`` holds overrides onto :class:`TrainSchedule` defaults;
    ``augment`` holds ranges (the flip permutation comes from the landmark
    scheme).  Relative paths are resolved against the config file's
    directory when loaded through ``from_json_file``.
    """

    preset: str = "desk"
    crop_size: int = 96
    n_landmarks: int = 5
    seed: int = 0
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    out_dir: str = "run"
    schedule: TrainSchedule = field(default_factory=TrainSchedule.desk)
    augment_enabled: bool = True
    flip_prob: float = 0.5
    rotation_range_deg: Tuple[float, float] = (-15.0, 15.0)
    scale_range: Tuple[float, float] = (0.9, 1.1)
    jitter_range: Tuple[float, float] = (0.9, 1.1)
    metrics: MetricSettings = field(default_factory=MetricSettings)

    def __post_init__(self):
        if self.preset not in ("desk", "full", "paper"):
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.n_landmarks < 1:
            raise ConfigError(f"n_landmarks must be >= 1, got {self.n_landmarks}")
        if self.crop_size < 16:
            raise ConfigError(f"crop_size must be >= 16, got {self.crop_size}")
        # fail on impossible metric indices before any compute happens
        eyes = self.metrics.resolved_eyes(self.n_landmarks)
        if not all(0 <= e < self.n_landmarks for e in eyes):
            raise ConfigError(
                f"eye indices {eyes} out of range for {self.n_landmarks} landmarks"
            )
        if self.augment_enabled and self.flip_prob > 0.0:
            flip_permutation(self.n_landmarks)  # raises if no scheme exists

    def augment_config(self) -> Optional[AugmentConfig]:
        if not self.augment_enabled:
            return None
        return AugmentConfig(
            flip_prob=self.flip_prob,
            flip_permutation=flip_permutation(self.n_landmarks)
            if self.flip_prob > 0.0 else np.arange(self.n_landmarks),
            rotation_range_deg=tuple(self.rotation_range_deg),
            scale_range=tuple(self.scale_range),
            jitter_range=tuple(self.jitter_range),
        )

    def canonical_dict(self) -> dict:
        d = {
            "preset": self.preset,
            "crop_size": self.crop_size,
            "n_landmarks": self.n_landmarks,
            "seed": self.seed,
            "train_manifest": self.train_manifest,
            "val_manifest": self.val_manifest,
            "out_dir": self.out_dir,
            "schedule": {f.name: getattr(self.schedule, f.name)
                         for f in fields(TrainSchedule)},
            "augment": {
                "enabled": self.augment_enabled,
                "flip_prob": self.flip_prob,
                "rotation_range_deg": list(self.rotation_range_deg),
                "scale_range": list(self.scale_range),
                "jitter_range": list(self.jitter_range),
            },
            "metrics": {
                "eye_indices": None if self.metrics.eye_indices is None
                else list(self.metrics.eye_indices),
                "cvgtce_include_translation":
                    self.metrics.cvgtce_include_translation,
            },
        }
        return d

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
        top_keys = {"preset", "crop_size", "n_landmarks", "seed", "train_manifest",
                    "val_manifest", "out_dir", "schedule", "augment", "metrics"}
        unknown = sorted(set(raw) - top_keys)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        sched_over = raw.get("schedule", {})
        sched_fields = {f.name for f in fields(TrainSchedule)}
        bad = sorted(set(sched_over) - sched_fields)
        if bad:
            raise ConfigError(f"unknown schedule keys: {bad}")
        sched_over = {k: tuple(v) if isinstance(v, list) else v
                      for k, v in sched_over.items()}
        schedule = replace(TrainSchedule.desk(), **sched_over)
        aug = raw.get("augment", {})
        bad = sorted(set(aug) - set(_AUGMENT_KEYS))
        if bad:
            raise ConfigError(f"unknown augment keys: {bad}")
        met = raw.get("metrics", {})
        bad = sorted(set(met) - {"eye_indices", "cvgtce_include_translation"})
        if bad:
            raise ConfigError(f"unknown metrics keys: {bad}")
        eyes = met.get("eye_indices")
        settings = MetricSettings(
            eye_indices=None if eyes is None else tuple(int(e) for e in eyes),
            cvgtce_include_translation=bool(
                met.get("cvgtce_include_translation", True)),
        )
        return RunConfig(
            preset=raw.get("preset", "desk"),
            crop_size=int(raw.get("crop_size", 96)),
            n_landmarks=int(raw.get("n_landmarks", 5)),
            seed=int(raw.get("seed", 0)),
            train_manifest=raw.get("train_manifest"),
            val_manifest=raw.get("val_manifest"),
            out_dir=raw.get("out_dir", "run"),
            schedule=schedule,
            augment_enabled=bool(aug.get("enabled", True)),
            flip_prob=float(aug.get("flip_prob", 0.5)),
            rotation_range_deg=tuple(aug.get("rotation_range_deg", (-15.0, 15.0))),
            scale_range=tuple(aug.get("scale_range", (0.9, 1.1))),
            jitter_range=tuple(aug.get("jitter_range", (0.9, 1.1))),
            metrics=settings,
        )

    @staticmethod
    def from_json_file(path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        cfg = RunConfig.from_dict(raw)
        for name in ("train_manifest", "val_manifest", "out_dir"):
            value = getattr(cfg, name)
            if value is not None and not Path(value).is_absolute():
                setattr(cfg, name, str(path.parent / value))
        return cfg

    def to_json_file(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.canonical_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")


def config_hash(cfg: RunConfig) -> str:
    """Stable digest of the resolved configuration, for report provenance."""
    blob = json.dumps(cfg.canonical_dict(), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def convert_external_annotations(source_dir, out_manifest) -> None:
    """Plug-in point for converting a third-party annotation layout.

    Benchmark distributions ship their own per-image annotation files;
    redistribution terms keep a ready-made converter out of this package.
    Implement this to walk ``source_dir`` and emit the manifest format at
    the top of this module (one line per image: path, bbox, 3N landmark
    floats, optional subject/view ids), then train/eval as usual.
    """
    raise NotImplementedError(
        "dataset-specific converter not bundled; see docstring for the "
        "manifest format to emit"
    )
