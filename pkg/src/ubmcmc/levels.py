"""Dyadic discretization levels and the randomized-level distribution.

A model is discretized on a ladder of resolutions indexed by l = 0, 1, 2, ...
with mesh/step width halving at every level:

    delta(l) = base * 2^(-(l + l0))

Debiasing draws a random level L from the geometric-type distribution

    P(L = l) = (1 - 2^(-eta)) * 2^(-eta*l),

whose decay rate eta trades variance (needs eta < 2*beta, with beta the
weak-error rate of the discretization) against cost (needs eta > omega, the
cost exponent per level).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

from .errors import LevelCapExceededError, LevelTooLargeError
from .rng import RngStream


@dataclass(frozen=True)
class LevelSchedule:
    """Mesh widths ``delta(l) = base * 2^-(l+l0)`` for a model family."""

    base: float
    l0: int = 0

    def __post_init__(self) -> None:
        if not (self.base > 0 and math.isfinite(self.base)):
            raise ValueError(f"base width must be positive and finite, got {self.base}")
        if self.l0 < 0:
            raise ValueError(f"l0 must be >= 0, got {self.l0}")

    def delta(self, level: int) -> float:
        """Width at ``level``; exact halving via power-of-two scaling."""
        if level < 0:
            raise ValueError(f"level must be >= 0, got {level}")
        width = math.ldexp(self.base, -int(level + self.l0))
        if width <= 0.0:
            # 2^-(l+l0) underflowed: the level is not representable.
            raise LevelTooLargeError(
                f"mesh width underflows at level {level} (l0={self.l0})"
            )
        return width

    def cost_units(self, level: int, omega: float) -> float:
        """Cost of one forward-model application at ``level``: delta^(-omega)."""
        return self.delta(level) ** (-omega)


@dataclass(frozen=True)
class LevelDistribution:
    """Geometric level law ``P(L=l) = (1-r) r^l`` with ``r = 2^-eta``."""

    eta: float
    cap: int = 30

    def __post_init__(self) -> None:
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ValueError(f"eta must be positive and finite, got {self.eta}")
        if self.cap < 0:
            raise ValueError(f"cap must be >= 0, got {self.cap}")

    @cached_property
    def ratio(self) -> float:
        return 2.0 ** (-self.eta)

    def mass(self, level: int) -> float:
        """P(L = level), exact in floating point: ``(1-r) * r**level``."""
        if level < 0:
            raise ValueError(f"level must be >= 0, got {level}")
        return (1.0 - self.ratio) * self.ratio**level

    def survival(self, level: int) -> float:
        """P(L >= level) = r**level (the independent-sum weight denominators)."""
        if level < 0:
            raise ValueError(f"level must be >= 0, got {level}")
        return self.ratio**level

    def sample(self, stream: RngStream) -> int:
        """Draw L by inverting the geometric CDF: floor(log U / log r).

        Raises :class:`LevelCapExceededError` if the draw lands beyond the
        cap — levels that deep signal a misconfigured eta, so the run is
        aborted rather than silently truncated (truncation would bias the
        estimator).
        """
        u = stream.random()
        if u <= 0.0:  # pragma: no cover - probability 2^-53 edge draw
            raise LevelCapExceededError("level sampler drew u=0 (infinite level)")
        level = int(math.log(u) / math.log(self.ratio))
        if level > self.cap:
            raise LevelCapExceededError(
                f"sampled level {level} exceeds cap {self.cap}; "
                f"increase eta or the cap"
            )
        return level
