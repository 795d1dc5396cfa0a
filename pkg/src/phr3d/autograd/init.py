"""Parameter initialization rules.

Five specs cover everything the cascade needs: gaussian draws for fresh
filters, zeros for biases, a constant fill for prior-matched head biases,
the classic triangle-filter bilinear stack for deconvolution weights, and
identity (ones) for normalization gains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class Gaussian:
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise ConfigError(f"gaussian init std must be > 0, got {self.std}")


@dataclass(frozen=True)
class Zeros:
    pass


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class BilinearUpsample:
    pass


@dataclass(frozen=True)
class Identity:
    pass


InitSpec = Gaussian | Zeros | Constant | BilinearUpsample | Identity


def bilinear_filter(kh: int, kw: int, dtype=np.float64) -> np.ndarray:
    """2D triangle filter whose taps, sampled at the matching stride, sum to 1."""

    def axis(k):
        factor = (k + 1) // 2
        center = factor - 1 if k % 2 == 1 else factor - 0.5
        og = np.arange(k, dtype=np.float64)
        return 1.0 - np.abs(og - center) / factor

    return np.outer(axis(kh), axis(kw)).astype(dtype)


def bilinear_deconv_weight(in_ch: int, out_ch: int, kh: int, kw: int, dtype=np.float64) -> np.ndarray:
    """Deconvolution weight [in_ch, out_ch, kh, kw] acting as bilinear upsampling.

    Channel-preserving (diagonal) when in_ch == out_ch; otherwise each output
    channel averages the inputs so constant maps stay constant.
    """
    filt = bilinear_filter(kh, kw, dtype)
    w = np.zeros((in_ch, out_ch, kh, kw), dtype=dtype)
    if in_ch == out_ch:
        for c in range(in_ch):
            w[c, c] = filt
    else:
        w[:] = filt / in_ch
    return w


def materialize(spec: InitSpec, shape: tuple[int, ...], rng: np.random.Generator, dtype) -> np.ndarray:
    """Draw/build the initial value for a parameter of the given shape."""
    if isinstance(spec, Gaussian):
        return (rng.standard_normal(shape) * spec.std).astype(dtype)
    if isinstance(spec, Zeros):
        return np.zeros(shape, dtype=dtype)
    if isinstance(spec, Constant):
        return np.full(shape, spec.value, dtype=dtype)
    if isinstance(spec, Identity):
        return np.ones(shape, dtype=dtype)
    if isinstance(spec, BilinearUpsample):
        if len(shape) != 4:
            raise ConfigError("bilinear_upsample init applies to 4D deconvolution weights only")
        cin, cout, kh, kw = shape
        return bilinear_deconv_weight(cin, cout, kh, kw, dtype)
    raise ConfigError(f"unknown init spec {spec!r}")
