"""The three-stage landmark cascade.

Stage 1 (detection): a deep residual backbone over the face crop, ending
in a stride-1 final stage, a bilinear-initialized deconvolution, and a
1x1 head producing one logit map per landmark at quarter-crop
resolution.  Trained against binary disk targets with pixel-wise sigmoid
cross-entropy.

Stage 2 (regression): an hourglass over the detection heatmaps stacked
with backbone image features, refining them into confidence maps, with a
final deconvolution up to full crop resolution.  Trained with pixel-wise
L2 against Gaussian targets.

Stage 3 (depth): a residual regressor over the RGB crop stacked with the
N heatmaps (3+N input channels) emitting one depth value per landmark.

Two presets share the topology: ``full`` at benchmark scale
(buildable and auditable; not trainable on a desk) and ``desk`` with
channels divided by 8 and short block chains for the synthetic harness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..autograd import (
    Constant,
    Tensor,
    Zeros,
    avgpool_global,
    concat_channels,
    maxpool2d,
    no_grad,
    relu,
    sigmoid,
    upsample_nearest,
)
from ..errors import ConfigError, ShapeError, UntrainedModelError
from ..geometry import BBox, crop_resize, expand_bbox, to_source_coords
from ..heatmaps import HeatmapStack, LandmarkSet3D, decode_argmax
from .blocks import Bottleneck, Hourglass
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module, ModuleList

__all__ = [
    "DetectionNetConfig",
    "HourglassConfig",
    "ZRegressorConfig",
    "CascadeConfig",
    "DetectionNet",
    "RegressionNet",
    "ZRegressor",
    "CascadeModel",
    "build_cascade",
    "full_config",
    "desk_config",
    "TRAINING_STAGES",
]

TRAINING_STAGES = ("untrained", "detection", "regression", "joint_xy", "z", "done")

# Disk targets cover roughly 1% of heatmap pixels, so a freshly drawn head
# drowns early training in background-suppression gradient.  Starting the
# logit head at zero weights with the bias at the sparse-class prior keeps
# the first steps focused on the peaks instead.
SPARSE_PRIOR_LOGIT = -4.0


@dataclass(frozen=True)
class DetectionNetConfig:
    """Backbone block plan plus the deconvolution head geometry."""

    n_landmarks: int
    crop_size: int
    heatmap_size: int
    stem_channels: int
    stage_blocks: Tuple[int, ...]
    stage_mid: Tuple[int, ...]
    stage_out: Tuple[int, ...]
    final_stage_stride: int = 1  # published override of the usual stride 2
    head_channels: int = 32

    def __post_init__(self):
        if not (len(self.stage_blocks) == len(self.stage_mid) == len(self.stage_out)):
            raise ConfigError("stage plan lists must have equal length")
        if self.crop_size % 16 != 0:
            raise ConfigError(f"crop size must be divisible by 16, got {self.crop_size}")
        if self.heatmap_size <= 0 or self.crop_size % self.heatmap_size != 0:
            raise ConfigError(
                f"heatmap size {self.heatmap_size} must divide crop {self.crop_size}"
            )

    @property
    def backbone_size(self) -> int:
        # stem /4, two stride-2 stages, final stage stride per config
        return self.crop_size // 4 // 2 // 2 // self.final_stage_stride

    @property
    def deconv_factor(self) -> int:
        factor, rem = divmod(self.heatmap_size, self.backbone_size)
        if rem != 0 or factor < 2:
            raise ConfigError(
                f"heatmap size {self.heatmap_size} must be an upsampling of the "
                f"backbone output {self.backbone_size}"
            )
        return factor


@dataclass(frozen=True)
class HourglassConfig:
    """Pyramid depth/width and the final up-to-crop deconvolution."""

    n_landmarks: int
    input_size: int
    output_size: int
    feature_channels: int  # image-feature channels stacked with the heatmaps
    width: int
    depth: int

    def __post_init__(self):
        if self.output_size % self.input_size != 0:
            raise ConfigError(
                f"hourglass output {self.output_size} must be a multiple of "
                f"input {self.input_size}"
            )
        if self.input_size % (2 ** self.depth) != 0:
            raise ConfigError(
                f"hourglass input {self.input_size} must be divisible by 2^{self.depth}"
            )

    @property
    def final_factor(self) -> int:
        return self.output_size // self.input_size


@dataclass(frozen=True)
class ZRegressorConfig:
    """Residual depth regressor plan; input is RGB plus N heatmaps."""

    n_landmarks: int
    crop_size: int
    stem_channels: int
    stage_blocks: Tuple[int, ...]
    stage_mid: Tuple[int, ...]
    stage_out: Tuple[int, ...]

    def __post_init__(self):
        if not (len(self.stage_blocks) == len(self.stage_mid) == len(self.stage_out)):
            raise ConfigError("stage plan lists must have equal length")

    @property
    def in_channels(self) -> int:
        return 3 + self.n_landmarks


@dataclass(frozen=True)
class CascadeConfig:
    preset: str
    detection: DetectionNetConfig
    hourglass: HourglassConfig
    z: ZRegressorConfig

    def __post_init__(self):
        n = self.detection.n_landmarks
        if self.hourglass.n_landmarks != n or self.z.n_landmarks != n:
            raise ConfigError("landmark count differs between subnetworks")
        if self.hourglass.input_size != self.detection.heatmap_size:
            raise ConfigError("hourglass input must match the detection heatmap size")
        if self.hourglass.output_size != self.detection.crop_size:
            raise ConfigError("hourglass output must match the crop size")
        if self.z.crop_size != self.detection.crop_size:
            raise ConfigError("depth net crop size must match the detection crop")

    @property
    def n_landmarks(self) -> int:
        return self.detection.n_landmarks

    @property
    def crop_size(self) -> int:
        return self.detection.crop_size


def _stage_chain(in_ch: int, blocks: int, mid: int, out: int, stride: int,
                 dtype) -> ModuleList:
    chain = ModuleList()
    for i in range(blocks):
        chain.append(Bottleneck(in_ch if i == 0 else out, mid, out,
                                stride=stride if i == 0 else 1, dtype=dtype))
    return chain


class _ResidualTrunk(Module):
    """Stem + four bottleneck stages, shared by detection and depth nets."""

    def __init__(self, in_channels: int, stem_channels: int,
                 stage_blocks, stage_mid, stage_out,
                 stage_strides, dtype):
        super().__init__()
        self.stem_conv = Conv2d(in_channels, stem_channels, 7, stride=2, padding=3,
                                bias=False, dtype=dtype)
        self.stem_bn = BatchNorm2d(stem_channels, dtype=dtype)
        self.stages = ModuleList()
        ch = stem_channels
        for blocks, mid, out, stride in zip(stage_blocks, stage_mid, stage_out,
                                            stage_strides):
            self.stages.append(_stage_chain(ch, blocks, mid, out, stride, dtype))
            ch = out
        self.final_bn = BatchNorm2d(ch, dtype=dtype)
        self.out_channels = ch

    def forward(self, x: Tensor) -> Tensor:
        h = self.stem_conv(x)
        h = relu(self.stem_bn(h))
        h = maxpool2d(h, (3, 3), (2, 2), padding=(1, 1))
        for stage in self.stages:
            for block in stage:
                h = block(h)
        return relu(self.final_bn(h))


class DetectionNet(Module):
    def __init__(self, cfg: DetectionNetConfig, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        strides = [1] + [2] * (len(cfg.stage_blocks) - 2) + [cfg.final_stage_stride]
        self.trunk = _ResidualTrunk(3, cfg.stem_channels, cfg.stage_blocks,
                                    cfg.stage_mid, cfg.stage_out, strides, dtype)
        factor = cfg.deconv_factor
        self.reduce = Conv2d(self.trunk.out_channels, cfg.head_channels, 1,
                             bias=True, dtype=dtype)
        self.deconv = ConvTranspose2d(cfg.head_channels, cfg.head_channels,
                                      kernel=2 * factor, stride=factor,
                                      padding=factor // 2, bias=False, dtype=dtype)
        self.head = Conv2d(cfg.head_channels, cfg.n_landmarks, 1, bias=True,
                           init=Zeros(), bias_init=Constant(SPARSE_PRIOR_LOGIT),
                           dtype=dtype)

    def forward(self, images: Tensor, return_features: bool = False):
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected [B,3,H,W] images, got {images.shape}")
        if images.shape[2] != cfg.crop_size or images.shape[3] != cfg.crop_size:
            raise ShapeError(
                f"detection net configured for {cfg.crop_size}px crops, "
                f"got {images.shape[2]}x{images.shape[3]}"
            )
        feats = self.trunk(images)
        reduced = self.reduce(feats)
        logits = self.head(relu(self.deconv(reduced)))
        if return_features:
            return logits, reduced
        return logits


class RegressionNet(Module):
    """Hourglass refiner over detection heatmaps + image features."""

    def __init__(self, cfg: HourglassConfig, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        in_ch = cfg.n_landmarks + cfg.feature_channels
        self.entry = Conv2d(in_ch, cfg.width, 1, bias=True, dtype=dtype)
        self.hourglass = Hourglass(cfg.depth, cfg.width, dtype=dtype)
        self.post_bn = BatchNorm2d(cfg.width, dtype=dtype)
        # zero-init so the net starts from blank maps and grows peaks,
        # rather than spending its first epochs unlearning filter noise
        self.mid = Conv2d(cfg.width, cfg.n_landmarks, 1, bias=True,
                          init=Zeros(), dtype=dtype)
        factor = cfg.final_factor
        self.final_deconv = ConvTranspose2d(cfg.n_landmarks, cfg.n_landmarks,
                                            kernel=2 * factor, stride=factor,
                                            padding=factor // 2, bias=True,
                                            dtype=dtype)

    def forward(self, heatmaps: Tensor, features: Tensor) -> Tensor:
        cfg = self.cfg
        if heatmaps.shape[1] != cfg.n_landmarks:
            raise ShapeError(
                f"expected {cfg.n_landmarks} heatmap channels, got {heatmaps.shape[1]}"
            )
        if features.shape[1] != cfg.feature_channels:
            raise ShapeError(
                f"expected {cfg.feature_channels} feature channels, "
                f"got {features.shape[1]}"
            )
        if heatmaps.shape[2] != cfg.input_size:
            raise ShapeError(
                f"hourglass configured for {cfg.input_size}px maps, "
                f"got {heatmaps.shape[2]}"
            )
        h = self.entry(concat_channels([heatmaps, features]))
        h = self.hourglass(h)
        h = relu(self.post_bn(h))
        return self.final_deconv(self.mid(h))


class ZRegressor(Module):
    def __init__(self, cfg: ZRegressorConfig, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        strides = [1] + [2] * (len(cfg.stage_blocks) - 1)
        self.trunk = _ResidualTrunk(cfg.in_channels, cfg.stem_channels,
                                    cfg.stage_blocks, cfg.stage_mid, cfg.stage_out,
                                    strides, dtype)
        self.fc = Linear(self.trunk.out_channels, cfg.n_landmarks, dtype=dtype)

    def forward(self, stacked: Tensor) -> Tensor:
        cfg = self.cfg
        if stacked.ndim != 4 or stacked.shape[1] != cfg.in_channels:
            raise ShapeError(
                f"depth net expects {cfg.in_channels} input channels "
                f"(3 + {cfg.n_landmarks}), got {stacked.shape}"
            )
        return self.fc(avgpool_global(self.trunk(stacked)))


class CascadeModel(Module):
    def __init__(self, config: CascadeConfig, dtype=np.float64):
        super().__init__()
        self.config = config
        self.dtype = dtype
        self.detection = DetectionNet(config.detection, dtype=dtype)
        self.regression = RegressionNet(config.hourglass, dtype=dtype)
        self.z_net = ZRegressor(config.z, dtype=dtype)
        self.stage = "untrained"
        self.finalize_names()

    def set_stage(self, stage: str) -> None:
        if stage not in TRAINING_STAGES:
            raise ConfigError(f"unknown training stage {stage!r}")
        self.stage = stage

    def forward_detection(self, images: Tensor, return_features: bool = False):
        return self.detection(images, return_features=return_features)

    def _features_for_regression(self, features: Tensor) -> Tensor:
        factor = self.config.detection.deconv_factor
        return upsample_nearest(features, factor)

    def forward_regression(self, det_heatmaps: Tensor, features: Tensor) -> Tensor:
        return self.regression(det_heatmaps, features)

    def forward_xy(self, images: Tensor):
        """Detection logits plus regression heatmaps in one pass."""
        logits, reduced = self.detection(images, return_features=True)
        feats = self._features_for_regression(reduced)
        reg = self.regression(sigmoid(logits), feats)
        return logits, reg

    def forward_z(self, images: Tensor, heatmaps: Tensor) -> Tensor:
        if heatmaps.shape[2] != self.config.crop_size:
            raise ShapeError(
                f"depth net heatmaps must be at crop resolution "
                f"{self.config.crop_size}, got {heatmaps.shape[2]}"
            )
        return self.z_net(concat_channels([images, heatmaps]))

    def predict_landmarks_3d(self, image: np.ndarray, bbox: BBox,
                             expand_fraction: float = 0.225) -> LandmarkSet3D:
        """Full pipeline on one source image; output in source coordinates."""
        if self.stage == "untrained":
            raise UntrainedModelError(
                "model has not been trained; run the stage-wise schedule or "
                "load a checkpoint first"
            )
        crop_px = self.config.crop_size
        crop, transform = crop_resize(image, expand_bbox(bbox, expand_fraction),
                                      crop_px)
        batch = np.moveaxis(crop, 2, 0)[None].astype(self.dtype)
        self.eval()
        with no_grad():
            logits, reg = self.forward_xy(Tensor(batch))
            zs = self.forward_z(Tensor(batch), reg)
        stack = HeatmapStack(reg.data[0], "predicted", 1.0)
        decoded = decode_argmax(stack)
        lm_crop = LandmarkSet3D(decoded.points, zs.data[0], (crop_px, crop_px),
                                confidence=decoded.confidence)
        return to_source_coords(lm_crop, transform,
                                source_size=image.shape[:2])

    def census(self) -> dict:
        """Structural audit: block counts, widths, and parameter totals."""
        def stage_summary(trunk: _ResidualTrunk):
            stages = []
            for chain in trunk.stages:
                blocks = list(chain)
                stages.append({
                    "bottlenecks": len(blocks),
                    "mid_channels": blocks[0].mid_channels,
                    "out_channels": blocks[0].out_channels,
                })
            return stages

        z_first_conv = self.z_net.trunk.stem_conv
        return {
            "preset": self.config.preset,
            "n_landmarks": self.config.n_landmarks,
            "crop_size": self.config.crop_size,
            "heatmap_size": self.config.detection.heatmap_size,
            "detection": {
                "stages": stage_summary(self.detection.trunk),
                "parameters": self.detection.parameter_count(),
            },
            "regression": {
                "hourglass_depth": self.config.hourglass.depth,
                "hourglass_width": self.config.hourglass.width,
                "parameters": self.regression.parameter_count(),
            },
            "z": {
                "input_channels": z_first_conv.in_channels,
                "stem": {
                    "channels": z_first_conv.out_channels,
                    "kernel": z_first_conv.kernel,
                    "stride": z_first_conv.stride[0],
                },
                "stages": stage_summary(self.z_net.trunk),
                "fc_out": self.z_net.fc.out_features,
                "parameters": self.z_net.parameter_count(),
            },
            "total_parameters": self.parameter_count(),
        }


def full_config(n_landmarks: int = 66) -> CascadeConfig:
    """Full published scale: crop 384, deep residual chains, wide stages."""
    crop = 384
    heat = crop // 4
    det = DetectionNetConfig(
        n_landmarks=n_landmarks, crop_size=crop, heatmap_size=heat,
        stem_channels=64,
        stage_blocks=(3, 8, 36, 3),
        stage_mid=(64, 128, 256, 512),
        stage_out=(256, 512, 1024, 2048),
        head_channels=256,
    )
    hg = HourglassConfig(
        n_landmarks=n_landmarks, input_size=heat, output_size=crop,
        feature_channels=det.head_channels, width=256, depth=4,
    )
    z = ZRegressorConfig(
        n_landmarks=n_landmarks, crop_size=crop, stem_channels=64,
        stage_blocks=(3, 24, 38, 3),
        stage_mid=(64, 128, 256, 512),
        stage_out=(256, 512, 1024, 2048),
    )
    return CascadeConfig("full", det, hg, z)


def desk_config(n_landmarks: int = 5, crop_size: int = 96) -> CascadeConfig:
    """Same topology at desk scale: channels / 8, short stage chains."""
    heat = crop_size // 4
    det = DetectionNetConfig(
        n_landmarks=n_landmarks, crop_size=crop_size, heatmap_size=heat,
        stem_channels=8,
        stage_blocks=(2, 2, 3, 2),
        stage_mid=(8, 16, 32, 64),
        stage_out=(32, 64, 128, 256),
        head_channels=16,
    )
    hg = HourglassConfig(
        n_landmarks=n_landmarks, input_size=heat, output_size=crop_size,
        feature_channels=det.head_channels, width=32, depth=2,
    )
    z = ZRegressorConfig(
        n_landmarks=n_landmarks, crop_size=crop_size, stem_channels=8,
        stage_blocks=(2, 2, 3, 2),
        stage_mid=(8, 16, 32, 64),
        stage_out=(32, 64, 128, 256),
    )
    return CascadeConfig("desk", det, hg, z)


def build_cascade(preset: str = "desk", n_landmarks: Optional[int] = None,
                  crop_size: Optional[int] = None, dtype=np.float64,
                  rng: Optional[np.random.Generator] = None) -> CascadeModel:
    """Construct a cascade; pass ``rng`` to initialize the weights."""
    if preset == "paper":  # accepted alias for the benchmark-scale preset
        preset = "full"
    if preset == "full":
        cfg = full_config(n_landmarks if n_landmarks is not None else 66)
        if crop_size is not None and crop_size != cfg.crop_size:
            raise ConfigError("the full preset is fixed at 384px crops")
    elif preset == "desk":
        cfg = desk_config(
            n_landmarks if n_landmarks is not None else 5,
            crop_size if crop_size is not None else 96,
        )
    else:
        raise ConfigError(f"unknown preset {preset!r} (expected full or desk)")
    model = CascadeModel(cfg, dtype=dtype)
    if rng is not None:
        model.initialize(rng)
    return model
