"""Stage-wise training for the cascade.

Four stages run in order, each with its own optimizer and learning-rate
span: detection alone (pixel-wise sigmoid cross-entropy on disk
targets), regression with the detection net frozen (pixel-wise L2 on
Gaussian targets), joint refinement of both with the two losses summed,
and finally the depth net on the RGB crop stacked with heatmaps, mixing
ground-truth Gaussians with predicted maps at a configurable rate.

Frozen subnetworks also run in eval mode so their batch-norm buffers
stay bit-identical across the stage.  Every epoch logs the mean training
loss and validation scores to a CSV (columns: epoch, stage, loss,
val_gte_xy, val_gte_z, lr); a checkpoint is written after each stage.
All randomness flows from the single generator passed in, so a fixed
seed reproduces the loss curves exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..autograd import (
    LrSchedule,
    SGD,
    Tensor,
    add,
    freeze,
    l2_pixelwise,
    l2_z,
    load_arrays,
    no_grad,
    save_arrays,
    scale,
    sigmoid,
    sigmoid_cross_entropy_pixelwise,
    unfreeze,
)
from ..errors import ConfigError, DataError, NumericError
from ..geometry import AugmentConfig, random_augment
from ..heatmaps import (
    HeatmapStack,
    LandmarkSet3D,
    decode_argmax,
    encode_binary_disk,
    encode_gaussian,
)
from ..metrics import gte
from .cascade import CascadeModel, build_cascade

__all__ = [
    "TrainSchedule",
    "TrainSample",
    "EpochRecord",
    "TrainLog",
    "train_stagewise",
    "validation_gte_xy",
    "validation_z_scores",
    "save_checkpoint",
    "load_checkpoint",
    "LOG_COLUMNS",
]

LOG_COLUMNS = ("epoch", "stage", "loss", "val_gte_xy", "val_gte_z", "lr")


@dataclass(frozen=True)
class TrainSchedule:
    """Per-stage epoch counts, learning-rate spans, and batch sizes.

    Defaults are the published full-scale schedule; ``desk()`` shrinks the
    epoch counts for the synthetic harness.  ``gt_heatmap_mix`` is the
    probability that a depth-stage batch sees ground-truth Gaussian
    heatmaps instead of predicted regression maps.
    """

    detection_epochs: int = 30
    detection_lr: Tuple[float, float] = (1e-3, 2.5e-5)
    regression_epochs: int = 30
    regression_lr: Tuple[float, float] = (1e-4, 2.5e-5)
    joint_epochs: int = 30
    joint_lr: Tuple[float, float] = (1e-4, 2.5e-5)
    z_epochs: int = 100
    z_lr: Tuple[float, float] = (1e-2, 2.5e-4)
    batch_xy: int = 8
    batch_z: int = 16
    gt_heatmap_mix: float = 0.5
    momentum: float = 0.9
    gaussian_std: float = 6.0
    face_height_reference: Optional[float] = None  # None: per-sample bbox height

    def __post_init__(self):
        for name in ("detection_epochs", "regression_epochs", "joint_epochs",
                     "z_epochs", "batch_xy", "batch_z"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.gt_heatmap_mix <= 1.0:
            raise ConfigError(
                f"gt_heatmap_mix must be in [0,1], got {self.gt_heatmap_mix}"
            )

    @staticmethod
    def desk() -> "TrainSchedule":
        """Short schedule for the synthetic harness.

        The benchmark-scale spans pair with per-landmark-summed map
        gradients; our map losses average over pixels instead, which
        shrinks the gradient by the per-map pixel count.  The spans
        below multiply that count back in (24^2 detection maps, 96^2
        regression maps), which by linearity of the SGD update gives
        the identical trajectory.  The depth loss already averages per
        landmark, so its span is unchanged.
        """
        det = 24 * 24
        reg = 96 * 96
        return TrainSchedule(
            detection_epochs=8, detection_lr=(1e-3 * det, 2.5e-5 * det),
            regression_epochs=8, regression_lr=(1e-4 * reg, 2.5e-5 * reg),
            joint_epochs=8, joint_lr=(1e-4 * reg, 2.5e-5 * reg),
            z_epochs=20,
        )

    def stage_plan(self) -> List[Tuple[str, int, Tuple[float, float]]]:
        return [
            ("detection", self.detection_epochs, self.detection_lr),
            ("regression", self.regression_epochs, self.regression_lr),
            ("joint_xy", self.joint_epochs, self.joint_lr),
            ("z", self.z_epochs, self.z_lr),
        ]


@dataclass
class TrainSample:
    """One training crop: float image [H,W,3] in [0,1] plus crop-space GT."""

    image: np.ndarray
    landmarks: LandmarkSet3D
    face_height: float  # face bbox height in crop pixels; sets the disk radius


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    loss: float
    val_gte_xy: Optional[float]
    val_gte_z: Optional[float]
    lr: float
    val_z_loss: Optional[float] = None  # depth stage only; not a CSV column


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    z_gt_batches: int = 0
    z_pred_batches: int = 0

    def losses(self, stage: Optional[str] = None) -> List[float]:
        return [r.loss for r in self.records if stage is None or r.stage == stage]

    def stage_records(self, stage: str) -> List[EpochRecord]:
        return [r for r in self.records if r.stage == stage]

    def write_csv(self, path) -> None:
        lines = [",".join(LOG_COLUMNS)]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.stage},{r.loss!r},"
                f"{'' if r.val_gte_xy is None else repr(r.val_gte_xy)},"
                f"{'' if r.val_gte_z is None else repr(r.val_gte_z)},"
                f"{r.lr!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _to_batch(images: Sequence[np.ndarray], dtype) -> np.ndarray:
    return np.stack([np.moveaxis(im, 2, 0) for im in images]).astype(dtype)


def _targets_xy(samples: Sequence[TrainSample], heat_size: int, crop_size: int,
                std: float, face_height_ref: Optional[float], dtype):
    disks, gausses, masks = [], [], []
    for s in samples:
        face_h = face_height_ref if face_height_ref is not None else s.face_height
        lm2 = s.landmarks.to_2d()
        disks.append(encode_binary_disk(lm2, face_h, heat_size, dtype=dtype).maps)
        gausses.append(encode_gaussian(lm2, crop_size, std=std, dtype=dtype).maps)
        masks.append(s.landmarks.visible_mask())
    return (np.stack(disks), np.stack(gausses),
            np.stack(masks).astype(np.float64))


def _decode_batch(maps: np.ndarray, crop_size: int) -> List[np.ndarray]:
    scale = maps.shape[2] / crop_size
    return [
        decode_argmax(HeatmapStack(m, "predicted", scale)).points for m in maps
    ]


def _apply_stage_modes(model: CascadeModel, stage: str) -> None:
    """Train mode for what the stage updates, eval for frozen subnets."""
    model.train()
    if stage == "regression":
        model.detection.eval()
    elif stage == "z":
        model.detection.eval()
        model.regression.eval()


class _Validator:
    """Fixed validation set, evaluated without augmentation or gradients."""

    def __init__(self, samples: Sequence[TrainSample], model: CascadeModel,
                 eye_indices: Tuple[int, int], batch: int,
                 schedule: TrainSchedule, dtype):
        self.samples = list(samples)
        self.model = model
        self.eye_indices = eye_indices
        self.batch = batch
        self.dtype = dtype
        cfg = model.config
        self.images = _to_batch([s.image for s in self.samples], dtype)
        _, self.gauss, self.mask = _targets_xy(
            self.samples, cfg.detection.heatmap_size, cfg.crop_size,
            schedule.gaussian_std, schedule.face_height_reference, dtype)
        self.z_gt = np.stack([s.landmarks.z for s in self.samples]).astype(dtype)

    def _chunks(self):
        for lo in range(0, len(self.samples), self.batch):
            yield lo, Tensor(self.images[lo:lo + self.batch])

    def gte_xy(self, source: str) -> float:
        """Mean GTE(x,y) of decoded maps; source is detection or regression."""
        self.model.eval()
        crop = self.model.config.crop_size
        scores = []
        with no_grad():
            for lo, imgs in self._chunks():
                logits, reg = self.model.forward_xy(imgs)
                maps = sigmoid(logits).data if source == "detection" else reg.data
                for i, pts in enumerate(_decode_batch(maps, crop)):
                    gt = self.samples[lo + i].landmarks
                    pred = LandmarkSet3D(pts, gt.z, gt.crop_size)
                    scores.append(gte(pred, gt, "xy", self.eye_indices))
        return float(np.mean(scores))

    def z_scores(self) -> Tuple[float, float]:
        """(validation depth loss on GT heatmaps, mean GTE(z))."""
        self.model.eval()
        losses, scores = [], []
        with no_grad():
            for lo, imgs in self._chunks():
                hm = Tensor(self.gauss[lo:lo + self.batch])
                zs = self.model.forward_z(imgs, hm)
                hi = lo + zs.shape[0]
                losses.append(
                    l2_z(zs, Tensor(self.z_gt[lo:hi]),
                         mask=self.mask[lo:hi]).item() * (hi - lo)
                )
                for i in range(zs.shape[0]):
                    s = self.samples[lo + i]
                    pred = LandmarkSet3D(s.landmarks.points, zs.data[i],
                                         s.landmarks.crop_size)
                    scores.append(gte(pred, s.landmarks, "z", self.eye_indices))
        return (float(np.sum(losses) / len(self.samples)), float(np.mean(scores)))


def validation_gte_xy(model: CascadeModel, samples: Sequence[TrainSample],
                      eye_indices: Tuple[int, int], source: str = "regression",
                      batch: int = 16,
                      schedule: Optional[TrainSchedule] = None) -> float:
    """Mean validation GTE(x,y) from decoded maps; works on any stage."""
    if source not in ("detection", "regression"):
        raise ConfigError(f"source must be detection or regression, got {source!r}")
    validator = _Validator(samples, model, eye_indices, batch,
                           schedule if schedule is not None else TrainSchedule(),
                           model.dtype)
    return validator.gte_xy(source)


def validation_z_scores(model: CascadeModel, samples: Sequence[TrainSample],
                        eye_indices: Tuple[int, int], batch: int = 16,
                        schedule: Optional[TrainSchedule] = None) -> Tuple[float, float]:
    """(depth loss on GT heatmaps, mean GTE(z)) over a validation set."""
    validator = _Validator(samples, model, eye_indices, batch,
                           schedule if schedule is not None else TrainSchedule(),
                           model.dtype)
    return validator.z_scores()


def _check_loss_finite(value: float, stage: str, epoch: int, batch_idx: int) -> None:
    if not np.isfinite(value):
        raise NumericError(
            f"non-finite loss {value} in stage {stage}, epoch {epoch}, "
            f"batch {batch_idx}"
        )


def train_stagewise(model: CascadeModel, train_samples: Sequence[TrainSample],
                    val_samples: Sequence[TrainSample], schedule: TrainSchedule,
                    rng: np.random.Generator,
                    augment: Optional[AugmentConfig] = None,
                    eye_indices: Tuple[int, int] = (0, 1),
                    log_path=None, checkpoint_dir=None,
                    seed: Optional[int] = None) -> TrainLog:
    """Run the four-stage schedule; returns the epoch log.

    ``augment`` applies per sample per epoch during the x,y stages; the
    depth stage trains on unaugmented crops so its heatmap inputs match
    the regression net's inference-time output distribution.
    """
    if len(train_samples) == 0:
        raise DataError("training set is empty")
    if len(val_samples) == 0:
        raise DataError("validation set is empty")
    cfg = model.config
    dtype = model.dtype
    heat = cfg.detection.heatmap_size
    crop = cfg.crop_size
    log = TrainLog()
    validator = _Validator(val_samples, model, eye_indices,
                           batch=max(schedule.batch_xy, schedule.batch_z),
                           schedule=schedule, dtype=dtype)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    def xy_batch_loss(stage: str, chunk: List[TrainSample], images: Tensor) -> Tensor:
        disks, gauss, mask = _targets_xy(chunk, heat, crop, schedule.gaussian_std,
                                         schedule.face_height_reference, dtype)
        if stage == "detection":
            logits = model.forward_detection(images)
            return sigmoid_cross_entropy_pixelwise(logits, Tensor(disks), mask=mask)
        logits, reg = model.forward_xy(images)
        reg_loss = l2_pixelwise(reg, Tensor(gauss), mask=mask)
        if stage == "regression":
            return reg_loss
        det_loss = sigmoid_cross_entropy_pixelwise(logits, Tensor(disks), mask=mask)
        # both losses average over their own pixel grid, so the summed-
        # gradient weight of the detection term is off by the map-area
        # ratio; scaling it back keeps each subnet at the per-landmark
        # gradient scale of its solo stage
        return add(scale(det_loss, (heat / crop) ** 2), reg_loss)

    def z_batch_loss(chunk: List[TrainSample], images: Tensor) -> Tensor:
        use_gt = bool(rng.random() < schedule.gt_heatmap_mix)
        _, gauss, mask = _targets_xy(chunk, heat, crop, schedule.gaussian_std,
                                     schedule.face_height_reference, dtype)
        if use_gt:
            log.z_gt_batches += 1
            hm = Tensor(gauss)
        else:
            log.z_pred_batches += 1
            model.eval()
            with no_grad():
                _, reg = model.forward_xy(images)
            _apply_stage_modes(model, "z")
            hm = Tensor(reg.data)
        z_gt = np.stack([s.landmarks.z for s in chunk]).astype(dtype)
        return l2_z(model.forward_z(images, hm), Tensor(z_gt), mask=mask)

    stage_subnets = {
        "detection": ("detection",),
        "regression": ("regression",),
        "joint_xy": ("detection", "regression"),
        "z": ("z_net",),
    }

    def run_stage(stage: str, epochs: int, lr_span: Tuple[float, float],
                  batch_size: int) -> None:
        subnets = stage_subnets[stage]
        trainable = {k: p for k, p in model.named_parameters().items()
                     if not p.frozen and k.split(".", 1)[0] in subnets}
        opt = SGD(trainable, LrSchedule.geometric(lr_span[0], lr_span[1], epochs),
                  momentum=schedule.momentum)
        n = len(train_samples)
        for epoch in range(epochs):
            _apply_stage_modes(model, stage)
            order = rng.permutation(n)
            epoch_losses = []
            lr_used = opt.schedule.lr_at(epoch)
            for batch_idx, lo in enumerate(range(0, n, batch_size)):
                chunk = [train_samples[i] for i in order[lo:lo + batch_size]]
                if augment is not None and stage != "z":
                    auged = []
                    for s in chunk:
                        img, lm, _ = random_augment(s.image, s.landmarks,
                                                    augment, rng)
                        auged.append(TrainSample(img, lm, s.face_height))
                    chunk = auged
                images = Tensor(_to_batch([s.image for s in chunk], dtype))
                opt.zero_grad()
                if stage == "z":
                    loss = z_batch_loss(chunk, images)
                else:
                    loss = xy_batch_loss(stage, chunk, images)
                value = loss.item()
                _check_loss_finite(value, stage, epoch, batch_idx)
                loss.backward()
                opt.step(epoch)
                epoch_losses.append(value * len(chunk))
            mean_loss = float(np.sum(epoch_losses) / n)
            if stage == "z":
                val_z_loss, val_gte_z = validator.z_scores()
                rec = EpochRecord(epoch, stage, mean_loss, None, val_gte_z,
                                  lr_used, val_z_loss=val_z_loss)
            else:
                src = "detection" if stage == "detection" else "regression"
                rec = EpochRecord(epoch, stage, mean_loss, validator.gte_xy(src),
                                  None, lr_used)
            log.records.append(rec)

    for stage, epochs, lr_span in schedule.stage_plan():
        if stage == "regression":
            freeze(model.named_parameters(), "detection")
        elif stage == "joint_xy":
            unfreeze(model.named_parameters(), "detection")
        elif stage == "z":
            freeze(model.named_parameters(), "detection")
            freeze(model.named_parameters(), "regression")
        batch = schedule.batch_z if stage == "z" else schedule.batch_xy
        run_stage(stage, epochs, lr_span, batch)
        model.set_stage(stage)
        if ckpt_dir is not None:
            save_checkpoint(model, ckpt_dir / f"stage_{stage}.bin",
                            schedule=schedule, epoch=epochs - 1, seed=seed,
                            rng_state=rng.bit_generator.state)
    unfreeze(model.named_parameters(), "detection")
    unfreeze(model.named_parameters(), "regression")
    model.set_stage("done")
    model.eval()
    if ckpt_dir is not None:
        save_checkpoint(model, ckpt_dir / "final.bin", schedule=schedule,
                        epoch=-1, seed=seed, rng_state=rng.bit_generator.state)
    if log_path is not None:
        log.write_csv(log_path)
    return log


def save_checkpoint(model: CascadeModel, path, schedule: Optional[TrainSchedule] = None,
                    epoch: int = -1, seed: Optional[int] = None,
                    rng_state: Optional[dict] = None) -> None:
    """Weight container plus a JSON sidecar describing how to rebuild."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_arrays(path, model.state_arrays())
    sidecar = {
        "format": 1,
        "preset": model.config.preset,
        "n_landmarks": model.config.n_landmarks,
        "crop_size": model.config.crop_size,
        "dtype": np.dtype(model.dtype).name,
        "stage": model.stage,
        "epoch": epoch,
        "seed": seed,
        "schedule": None if schedule is None else asdict(schedule),
        "rng_state": rng_state,
    }
    path.with_suffix(".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> CascadeModel:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    if not sidecar_path.exists():
        raise DataError(f"checkpoint sidecar {sidecar_path} does not exist")
    meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
    model = build_cascade(
        preset=meta["preset"], n_landmarks=meta["n_landmarks"],
        crop_size=meta["crop_size"] if meta["preset"] == "desk" else None,
        dtype=np.dtype(meta["dtype"]).type,
    )
    model.load_state_arrays(load_arrays(path))
    model.set_stage(meta["stage"])
    model.eval()
    return model
