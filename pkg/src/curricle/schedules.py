"""Curriculum curves for the per-epoch replacement rates.

Every curve maps normalized training progress ``x`` in [0, 1] to a
multiplier in [0, 1]; a schedule stretches that multiplier between its start
and end rate.
"""

import math
from dataclasses import dataclass

KINDS = ("linear", "scurve", "exp_increase", "static")


def normalized_progress(epoch, total_epochs):
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return epoch / total_epochs


def curve(kind, x):
    if kind == "linear":
        return x
    if kind == "scurve":
        return 0.5 * (1.0 + math.sin(math.pi * x - math.pi / 2))
    if kind == "exp_increase":
        # 2 / (e^{10x} + 1) mirrored so the mass sits late in training
        return 2.0 / (math.exp(10.0 * (1.0 - x)) + 1.0)
    if kind == "static":
        return 1.0
    raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "static"
    start: float = 0.0
    end: float = 0.0
    total_epochs: int = 40

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if not (0.0 <= self.start <= 1.0 and 0.0 <= self.end <= 1.0):
            raise ValueError("schedule rates must lie in [0, 1]")
        if self.start > self.end:
            raise ValueError(f"schedule start {self.start} exceeds end {self.end}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")

    @property
    def is_off(self):
        return self.end == 0.0


def rate(spec, epoch):
    """Replacement probability for ``epoch`` under ``spec``.

    ``static`` ignores the start value and holds the end rate throughout.
    """
    x = normalized_progress(epoch, spec.total_epochs)
    if spec.kind == "static":
        return spec.end
    r = spec.start + (spec.end - spec.start) * curve(spec.kind, x)
    return min(max(r, spec.start), spec.end)


@dataclass(frozen=True)
class RatePair:
    epsilon: float
    gamma: float


def rate_pair(ss_spec, nnrs_spec, epoch):
    return RatePair(rate(ss_spec, epoch), rate(nnrs_spec, epoch))
