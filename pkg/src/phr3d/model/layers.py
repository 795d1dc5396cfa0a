"""Module system and trainable layers.

A ``Module`` owns parameters, persistent buffers (batch-norm running
stats), and child modules, discovered through attribute assignment.
Construction allocates zero-filled parameter storage so that very large
presets can be built and audited cheaply; ``initialize(rng)`` fills every
parameter from its recorded init spec.  ``finalize_names`` stamps
hierarchical dotted names onto parameters, which the optimizer's
freeze/unfreeze selectors match against.
"""

from __future__ import annotations

import math
from typing import Dict, Iterator, Optional

import numpy as np

from ..autograd import (
    BilinearUpsample,
    Gaussian,
    Identity,
    Parameter,
    Tensor,
    Zeros,
    batchnorm2d,
    conv2d,
    conv_transpose2d,
    linear,
    materialize,
)
from ..autograd.init import InitSpec
from ..errors import ConfigError

__all__ = [
    "Module",
    "ModuleList",
    "Conv2d",
    "ConvTranspose2d",
    "BatchNorm2d",
    "Linear",
]


class Module:
    """Base class: tracks parameters, buffers, children, and train mode."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        out = {}
        for name, p in self._params.items():
            out[f"{prefix}{name}"] = p
        for cname, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {}
        for name, b in self._buffers.items():
            out[f"{prefix}{name}"] = b
        for cname, child in self._children.items():
            out.update(child.named_buffers(f"{prefix}{cname}."))
        return out

    def finalize_names(self, prefix: str = "") -> None:
        """Stamp dotted path names onto every parameter."""
        for name, p in self.named_parameters(prefix).items():
            p.name = name

    def initialize(self, rng: np.random.Generator) -> None:
        """Fill parameters from their init specs, in name order."""
        params = self.named_parameters()
        for name in sorted(params):
            p = params[name]
            p.tensor.data[...] = materialize(
                p.init_spec, p.tensor.data.shape, rng, p.tensor.data.dtype
            )

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def parameter_count(self) -> int:
        return sum(p.tensor.data.size for p in self.named_parameters().values())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """All persistent state (parameters + buffers) by dotted name."""
        out = {f"param.{k}": p.tensor.data for k, p in self.named_parameters().items()}
        out.update({f"buffer.{k}": b for k, b in self.named_buffers().items()})
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        state = self.state_arrays()
        missing = sorted(set(state) - set(arrays))
        extra = sorted(set(arrays) - set(state))
        if missing or extra:
            raise ConfigError(
                f"state mismatch: missing {missing[:3]}..., unexpected {extra[:3]}..."
                if len(missing) + len(extra) > 6
                else f"state mismatch: missing {missing}, unexpected {extra}"
            )
        for key, arr in arrays.items():
            dst = state[key]
            if dst.shape != arr.shape:
                raise ConfigError(
                    f"shape mismatch for {key}: checkpoint {arr.shape} vs model {dst.shape}"
                )
            dst[...] = arr.astype(dst.dtype, copy=False)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """An ordered child container; children register by index."""

    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def _he_std(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


def _new_param(shape, spec: InitSpec, dtype) -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype), spec)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 init: Optional[InitSpec] = None,
                 bias_init: Optional[InitSpec] = None, dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = (stride, stride)
        self.padding = (padding, padding)
        spec = init if init is not None else Gaussian(_he_std(in_channels * kernel * kernel))
        self.weight = _new_param((out_channels, in_channels, kernel, kernel), spec, dtype)
        bias_spec = bias_init if bias_init is not None else Zeros()
        self.bias = _new_param((out_channels,), bias_spec, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.tensor,
                      None if self.bias is None else self.bias.tensor,
                      stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int, padding: int = 0, bias: bool = True,
                 init: Optional[InitSpec] = None, dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = (stride, stride)
        self.padding = (padding, padding)
        spec = init if init is not None else BilinearUpsample()
        self.weight = _new_param((in_channels, out_channels, kernel, kernel), spec, dtype)
        self.bias = _new_param((out_channels,), Zeros(), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight.tensor,
                                None if self.bias is None else self.bias.tensor,
                                stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = _new_param((channels,), Identity(), dtype)
        self.beta = _new_param((channels,), Zeros(), dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma.tensor, self.beta.tensor,
                           self.running_mean, self.running_var,
                           training=self.training, momentum=self.momentum,
                           eps=self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 init: Optional[InitSpec] = None, dtype=np.float64):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        spec = init if init is not None else Gaussian(_he_std(in_features))
        self.weight = _new_param((out_features, in_features), spec, dtype)
        self.bias = _new_param((out_features,), Zeros(), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight.tensor,
                      None if self.bias is None else self.bias.tensor)
