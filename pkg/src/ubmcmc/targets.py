"""Level-indexed unnormalized targets and the cost ledger.

A :class:`DiscretizedTarget` exposes one unnormalized log-density per
discretization level l — typically a Bayesian posterior whose likelihood runs
a numerical forward model at mesh width ``delta(l)``.  Evaluations at level l
cost ``delta(l)^-omega`` ledger units, so runs at different levels are
comparable in units of fine-level kernel applications.

All evaluation entry points that touch the forward model go through the
``eval_*`` helpers so that the ledger sees every charge.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Optional

import numpy as np

from .errors import (
    GradientUnavailableError,
    InitializationError,
    ScoreUnavailableError,
)
from .levels import LevelSchedule
from .rng import RngStream

_INIT_RETRY_CAP = 1_000_000


class CostLedger:
    """Monotone accumulator of forward-model cost, in delta^-omega units."""

    __slots__ = ("units",)

    def __init__(self) -> None:
        self.units = 0.0

    def charge(self, units: float) -> None:
        if units < 0:
            raise ValueError(f"cost must be non-negative, got {units}")
        self.units += units


class DiscretizedTarget(ABC):
    """One unnormalized density per level, plus optional derivatives.

    Subclasses must set ``dim``, ``schedule``, ``cost_exponent`` and ``theta``
    and implement ``log_gamma``, ``in_support`` and ``sample_initial``.
    Gradients (for HMC) and parameter scores (for stochastic gradient runs)
    are optional; the default implementations raise.
    """

    dim: int
    schedule: LevelSchedule
    cost_exponent: float
    theta: np.ndarray

    # - mandatory interface -------------------------------------------------

    @abstractmethod
    def log_gamma(self, level: int, x: np.ndarray) -> float:
        """Unnormalized log-density at ``level`` (-inf outside the support)."""

    @abstractmethod
    def in_support(self, x: np.ndarray) -> bool:
        """Level-free support indicator (necessary, not sufficient:
        individual levels may exclude further states)."""

    @abstractmethod
    def sample_initial(self, level: int, stream: RngStream) -> np.ndarray:
        """Draw an initial state with finite ``log_gamma(level, .)``."""

    # - optional interface --------------------------------------------------

    has_gradient: bool = False
    has_score: bool = False

    def grad_log_gamma(self, level: int, x: np.ndarray) -> np.ndarray:
        raise GradientUnavailableError(
            f"{type(self).__name__} does not implement state gradients"
        )

    def score(self, level: int, x: np.ndarray) -> np.ndarray:
        raise ScoreUnavailableError(
            f"{type(self).__name__} does not implement a parameter score"
        )

    def with_theta(self, theta) -> "DiscretizedTarget":
        """Return a copy of the target at a new parameter value."""
        raise NotImplementedError

    # - cost ----------------------------------------------------------------

    def cost_units(self, level: int) -> float:
        """delta(level)^-omega, memoized per level."""
        cache = self.__dict__.setdefault("_cost_cache", {})
        units = cache.get(level)
        if units is None:
            units = self.schedule.cost_units(level, self.cost_exponent)
            cache[level] = units
        return units


def eval_log_gamma(
    target: DiscretizedTarget,
    level: int,
    x: np.ndarray,
    ledger: Optional[CostLedger] = None,
) -> float:
    """Evaluate ``log_gamma`` and charge the ledger one forward application."""
    if ledger is not None:
        ledger.charge(target.cost_units(level))
    return target.log_gamma(level, x)


def eval_grad_log_gamma(
    target: DiscretizedTarget,
    level: int,
    x: np.ndarray,
    ledger: Optional[CostLedger] = None,
) -> np.ndarray:
    """Evaluate the state gradient; charged like a density evaluation."""
    if ledger is not None:
        ledger.charge(target.cost_units(level))
    return target.grad_log_gamma(level, x)


def eval_score(
    target: DiscretizedTarget,
    level: int,
    x: np.ndarray,
    ledger: Optional[CostLedger] = None,
) -> np.ndarray:
    """Evaluate the parameter score; charged like a density evaluation."""
    if x.shape != (target.dim,):
        raise ValueError(f"state shape {x.shape} != ({target.dim},)")
    if ledger is not None:
        ledger.charge(target.cost_units(level))
    return target.score(level, x)


def rejection_initial(
    target: DiscretizedTarget,
    level: int,
    stream: RngStream,
    draw,
    cap: int = _INIT_RETRY_CAP,
) -> np.ndarray:
    """Redraw ``draw(stream)`` until ``log_gamma(level, .)`` is finite.

    Shared helper for subclasses whose prior support is larger than the
    level-l target support.
    """
    for _ in range(cap):
        x = draw(stream)
        if target.log_gamma(level, x) > -np.inf:
            return x
    raise InitializationError(
        f"no in-support initial state at level {level} within {cap} draws"
    )
