"""SGD with momentum, learning-rate schedules, and subnetwork freezing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .tensor import Parameter, check_finite


@dataclass
class LrSchedule:
    """Learning rate as a function of the (0-based) epoch.

    ``breakpoints`` are (epoch, rate) pairs with strictly increasing epochs;
    ``mode`` picks piecewise-constant ("step") or linear interpolation
    between neighbors.  Before the first breakpoint the first rate applies,
    after the last the last one.
    """

    breakpoints: list[tuple[int, float]]
    mode: str = "step"

    def __post_init__(self):
        if not self.breakpoints:
            raise ConfigError("schedule needs at least one (epoch, rate) breakpoint")
        epochs = [e for e, _ in self.breakpoints]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError(f"schedule epochs must be strictly increasing, got {epochs}")
        if any(r <= 0 for _, r in self.breakpoints):
            raise ConfigError("all schedule rates must be positive")
        if self.mode not in ("step", "linear"):
            raise ConfigError(f"schedule mode must be 'step' or 'linear', got {self.mode!r}")

    def lr_at(self, epoch: int) -> float:
        bps = self.breakpoints
        if epoch <= bps[0][0]:
            return bps[0][1]
        if epoch >= bps[-1][0]:
            return bps[-1][1]
        for (e0, r0), (e1, r1) in zip(bps, bps[1:]):
            if e0 <= epoch < e1:
                if self.mode == "step":
                    return r0
                frac = (epoch - e0) / (e1 - e0)
                return r0 + frac * (r1 - r0)
        return bps[-1][1]

    @classmethod
    def geometric(cls, start: float, end: float, epochs: int, steps: int = 4) -> "LrSchedule":
        """Piecewise-constant over ``steps`` equal spans, rates spaced geometrically.

        "Progressively decreasing from A to B" over E epochs becomes rates
        A * (B/A)^(i/(steps-1)) switching every E/steps epochs, so both
        endpoints are visited.
        """
        if start <= 0 or end <= 0 or epochs < 1 or steps < 1:
            raise ConfigError("geometric schedule needs positive rates and counts")
        if steps == 1:
            return cls([(0, start)])
        rates = [start * (end / start) ** (i / (steps - 1)) for i in range(steps)]
        marks = [round(i * epochs / steps) for i in range(steps)]
        # collapse duplicate epochs from rounding on tiny stage lengths,
        # then pin epoch 0 back to the start rate
        bps: list[tuple[int, float]] = []
        for m, r in zip(marks, rates):
            if bps and bps[-1][0] == m:
                bps[-1] = (m, r)
            else:
                bps.append((m, r))
        bps[0] = (bps[0][0], start)
        return cls(bps, mode="step")


class SGD:
    """Momentum SGD over a name-keyed parameter dict.

    Velocity buffers live here (one per parameter name); frozen parameters
    are skipped entirely.  ``v = momentum*v + grad; p -= lr*v``.
    """

    def __init__(self, params: dict[str, Parameter], schedule: LrSchedule,
                 momentum: float = 0.9):
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {momentum}")
        self.params = params
        self.schedule = schedule
        self.momentum = float(momentum)
        self.velocity: dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in params.items()
        }

    def step(self, epoch: int) -> float:
        lr = self.schedule.lr_at(epoch)
        for name, p in self.params.items():
            if p.frozen:
                continue
            g = p.grad
            if g is None:
                raise ConfigError(f"parameter {name!r} has no gradient; run backward first")
            v = self.velocity[name]
            if self.momentum != 0.0:
                v *= self.momentum
                v += g
            else:
                v[...] = g
            p.data -= lr * v
            check_finite(p.data, f"parameter {name!r} after sgd step")
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def _matching(params: dict[str, Parameter], prefix: str) -> list[Parameter]:
    hits = [p for name, p in params.items()
            if name == prefix or name.startswith(prefix + ".")]
    if not hits:
        raise ConfigError(f"no parameters under subnetwork {prefix!r}")
    return hits


def freeze(params: dict[str, Parameter], prefix: str) -> int:
    """Exclude every parameter under ``prefix`` from optimizer updates."""
    hits = _matching(params, prefix)
    for p in hits:
        p.freeze()
    return len(hits)


def unfreeze(params: dict[str, Parameter], prefix: str) -> int:
    hits = _matching(params, prefix)
    for p in hits:
        p.unfreeze()
    return len(hits)
