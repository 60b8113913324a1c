"""Learning-rate schedule, global-norm clipping and Nesterov momentum."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import RunConfig
from .tensor import Tensor


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup followed by ``cycles`` cosine cycles with warm restarts.

    Cycle i (from 1) lasts ``first_cycle_steps * 2^(i-1)`` steps and anneals
    from ``max_lr * shrink^(i-1)`` down to ``min_lr * shrink^(i-1)``.
    """

    warmup_steps: int = 16000
    warmup_init: float = 1e-7
    max_lr: float = 1.0
    min_lr: float = 1e-5
    cycles: int = 4
    first_cycle_steps: int = 18000
    shrink: float = 0.75

    def __post_init__(self):
        if self.cycles < 1 or self.first_cycle_steps < 1 or self.warmup_steps < 0:
            raise ValueError("schedule needs cycles >= 1, first_cycle_steps >= 1, warmup_steps >= 0")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "LrSchedule":
        return cls(
            warmup_steps=cfg["optim.warmup_steps"],
            warmup_init=cfg["optim.warmup_init"],
            max_lr=cfg["optim.lr_max"],
            min_lr=cfg["optim.lr_min"],
            cycles=cfg["optim.cycles"],
            first_cycle_steps=cfg["optim.first_cycle_steps"],
            shrink=cfg["optim.shrink"],
        )

    def cycle_lengths(self) -> list[int]:
        return [self.first_cycle_steps * 2**i for i in range(self.cycles)]

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + sum(self.cycle_lengths())

    def cycle_of(self, step: int) -> tuple[int, float]:
        """(cycle index from 0, fraction in [0, 1)) for a post-warmup step."""
        t = step - self.warmup_steps
        for i, n in enumerate(self.cycle_lengths()):
            if t < n:
                return i, t / n
            t -= n
        raise ValueError(f"step {step} is past the schedule end {self.total_steps}")

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError(f"negative step {step}")
        if step < self.warmup_steps:
            return self.warmup_init + (self.max_lr - self.warmup_init) * step / self.warmup_steps
        if step >= self.total_steps:
            warnings.warn(f"step {step} is past the schedule end {self.total_steps}; using the final minimum", stacklevel=2)
            return self.min_lr * self.shrink ** (self.cycles - 1)
        i, f = self.cycle_of(step)
        hi = self.max_lr * self.shrink**i
        lo = self.min_lr * self.shrink**i
        return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * f))


def lr_at(schedule: LrSchedule, step: int) -> float:
    return schedule.lr_at(step)


class NonFiniteError(FloatingPointError):
    pass


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], threshold: float = 0.1) -> tuple[list[np.ndarray], float]:
    """Rescale all gradients jointly when their global 2-norm exceeds ``threshold``.

    Returns the (possibly rescaled) gradients and the norm observed before clipping.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteError(f"gradient norm is {norm}; step aborted")
    if norm <= threshold:
        return list(grads), norm
    factor = threshold / norm
    return [g * factor for g in grads], norm


class Nesterov:
    """Momentum SGD in the corrected-update form:

    ``v <- mu v - lr g``;  ``p <- p + mu v - lr g``  (= ``p + mu^2 v_old - (1 + mu) lr g``).

    One velocity per distinct parameter object, so tied storage updates once.
    """

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.99):
        self.params = []
        seen = set()
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                self.params.append(p)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"{len(grads)} gradients for {len(self.params)} parameters")
        mu = self.momentum
        for p, v, g in zip(self.params, self.velocity, grads):
            g = np.asarray(g, dtype=p.data.dtype)
            v *= mu
            v -= lr * g
            p.data += mu * v - lr * g
        self.steps += 1


def nesterov_step(optimizer: Nesterov, grads: Sequence[np.ndarray], lr: float) -> None:
    optimizer.step(grads, lr)
