"""Linear warmup followed by cosine decay to zero, evaluated per optimizer step."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class WarmupCosine:
    lr_max: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.lr_max < 0 or self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"invalid schedule {self}")

    def __call__(self, step: int) -> float:
        if step >= self.total_steps:
            return 0.0
        if step < self.warmup_steps:
            return self.lr_max * (step + 1) / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        progress = (step - self.warmup_steps) / span
        return 0.5 * self.lr_max * (1.0 + math.cos(math.pi * progress))

    @classmethod
    def for_epochs(cls, lr_max, epochs, steps_per_epoch, warmup_epochs=0):
        return cls(lr_max, max(1, epochs * steps_per_epoch), min(warmup_epochs, epochs) * steps_per_epoch)
