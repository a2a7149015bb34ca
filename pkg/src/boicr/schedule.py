"""Step-indexed IoU thresholds for supervision mining.

The positive threshold grows logarithmically from 0 to 0.5 over training; the
ignore threshold is its complement with respect to ``lambda_max``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class AggregationSchedule:
    """Positive/ignore IoU thresholds as a function of the optimizer step.

    Attributes:
        total_steps: number of optimizer steps ``S``.
        l_b: growth-velocity constant; smaller values rise faster early on.
        lambda_max: origin of the ignore band, ``lambda_ign(0)``.
        mode: ``"adaptive"`` or ``"fixed"``.
        fixed_lambda: threshold used in fixed mode.
        floor: optional lower bound applied to the adaptive threshold.
    """

    total_steps: int
    l_b: float = 100.0
    lambda_max: float = 0.51
    mode: str = "adaptive"
    fixed_lambda: float = 0.5
    floor: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.l_b <= 0:
            raise ValueError(f"l_b must be positive, got {self.l_b}")
        if not 0.0 < self.lambda_max <= 1.0:
            raise ValueError(f"lambda_max must lie in (0, 1], got {self.lambda_max}")
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")

    @classmethod
    def fixed(cls, total_steps: int, value: float = 0.5) -> "AggregationSchedule":
        return cls(total_steps=total_steps, mode="fixed", fixed_lambda=value)

    def _check(self, s: int) -> None:
        if not 0 <= s <= self.total_steps:
            raise ValueError(f"step {s} outside [0, {self.total_steps}]")

    def lambda_at(self, s: int) -> float:
        self._check(s)
        if self.mode == "fixed":
            return self.fixed_lambda
        num = math.log(s + self.l_b) - math.log(self.l_b)
        den = math.log(self.total_steps + self.l_b) - math.log(self.l_b)
        return max(self.floor, 0.5 * num / den)

    def lambda_ign_at(self, s: int) -> float:
        # fixed mode has no ignore band: everything under the threshold is background
        if self.mode == "fixed":
            self._check(s)
            return 0.0
        return self.lambda_max - self.lambda_at(s)

    def crossover_step(self) -> float:
        """Real-valued step where the two thresholds meet (``lambda = lambda_max / 2``)."""
        if self.mode != "adaptive":
            raise ValueError("crossover only defined for the adaptive schedule")
        ratio = (self.total_steps + self.l_b) / self.l_b
        return self.l_b * ratio**self.lambda_max - self.l_b


def lambda_at(sched: AggregationSchedule, s: int) -> float:
    return sched.lambda_at(s)


def lambda_ign_at(sched: AggregationSchedule, s: int) -> float:
    return sched.lambda_ign_at(s)


def dump_rows(sched: AggregationSchedule, every: int = 1):
    """Yield ``(step, lambda, lambda_ign)`` for steps 0..S (always including S)."""
    steps = list(range(0, sched.total_steps + 1, max(1, every)))
    if steps[-1] != sched.total_steps:
        steps.append(sched.total_steps)
    for s in steps:
        yield s, sched.lambda_at(s), sched.lambda_ign_at(s)
