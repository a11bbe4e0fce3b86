"""Stochastic gradient ascent on the marginal likelihood (or posterior).

Each iteration forms an unbiased estimate of the score

    g(theta) = E_pi_theta[ d/dtheta log gamma_theta(x) ]  = grad log Z(theta)

by running the debiased estimator with the model's own score function as
the test function, then takes a Robbins-Monro step with learning rate
alpha_i = alpha_1 / i.  Positivity-constrained coordinates are updated in
log space, which multiplies their gradient by theta (chain rule) and keeps
them positive by construction.  Adding the gradient of a prior density
turns the MLE iteration into MAP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, UbmcmcError
from .estimators import EstimatorConfig, UnbiasedEstimate, independent_sum, single_term
from .rng import replicate_streams
from .targets import DiscretizedTarget

TargetFactory = Callable[[np.ndarray], DiscretizedTarget]
EstimatorFor = Union[EstimatorConfig, Callable[[np.ndarray], EstimatorConfig]]
PriorGrad = Callable[[np.ndarray], np.ndarray]


class SgdDivergedError(UbmcmcError):
    """A score estimate or iterate went non-finite; carries diagnostics."""

    def __init__(
        self,
        iteration: int,
        theta: np.ndarray,
        est: Optional[UnbiasedEstimate],
        reason: str = "non-finite score estimate",
    ):
        self.iteration = iteration
        self.theta = theta
        self.level = None if est is None else est.level
        self.meeting_times = None if est is None else est.meeting_times
        detail = (
            ""
            if est is None
            else f", level={est.level}, meeting_times={est.meeting_times}"
        )
        super().__init__(
            f"{reason} at iteration {iteration} (theta={theta}{detail})"
        )


@dataclass(frozen=True)
class SgdConfig:
    """Robbins-Monro schedule and parameterization.

    ``log_transform_mask`` marks the coordinates that must stay positive;
    ``True`` entries are updated on the log scale.  A scalar ``theta0`` is
    promoted to a 1-vector.
    """

    theta0: Sequence[float]
    alpha1: float
    iterations: int
    replicates_per_step: int = 1
    log_transform_mask: Optional[Sequence[bool]] = None
    prior_grad: Optional[PriorGrad] = None
    flavor: str = "single-term"

    def __post_init__(self) -> None:
        if not self.alpha1 > 0:
            raise ConfigError(f"alpha1 must be positive, got {self.alpha1}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.replicates_per_step < 1:
            raise ConfigError(
                f"replicates_per_step must be >= 1, got {self.replicates_per_step}"
            )
        if self.flavor not in ("single-term", "independent-sum"):
            raise ConfigError(f"unknown estimator flavor {self.flavor!r}")

    def initial_theta(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.theta0, dtype=float)).copy()

    def mask(self, dim: int) -> np.ndarray:
        if self.log_transform_mask is None:
            return np.zeros(dim, dtype=bool)
        mask = np.asarray(self.log_transform_mask, dtype=bool)
        if mask.shape != (dim,):
            raise ConfigError(
                f"log_transform_mask has shape {mask.shape}, expected ({dim},)"
            )
        return mask


@dataclass(slots=True)
class SgdTrace:
    """Iterate history: thetas has one more row than grads/costs (theta0)."""

    thetas: np.ndarray  # (iterations + 1, d)
    grads: np.ndarray  # (iterations, d)
    costs: np.ndarray  # (iterations,)

    @property
    def final_theta(self) -> np.ndarray:
        return self.thetas[-1]

    @property
    def cumulative_cost(self) -> np.ndarray:
        return np.cumsum(self.costs)


def _score_phi(target: DiscretizedTarget):
    def phi(level: int, x: np.ndarray):
        return target.score(level, x)

    return phi


def sgd_run(
    config: SgdConfig,
    make_target: TargetFactory,
    estimator: EstimatorFor,
    root_seed: int,
) -> SgdTrace:
    """Run the stochastic gradient iteration; the trace is a pure function
    of (config, estimator, root_seed).

    ``make_target`` maps the current parameter vector to the target whose
    score is estimated (models expose ``with_theta`` for this).
    ``estimator`` is either a fixed :class:`EstimatorConfig` or a callable
    of theta, so kernel scales can track the moving parameter.
    """
    theta = config.initial_theta()
    dim = theta.size
    mask = config.mask(dim)
    estimate = single_term if config.flavor == "single-term" else independent_sum

    thetas = np.empty((config.iterations + 1, dim))
    grads = np.empty((config.iterations, dim))
    costs = np.empty(config.iterations)
    thetas[0] = theta

    rep = 0
    for i in range(1, config.iterations + 1):
        target = make_target(theta)
        est_config = estimator(theta) if callable(estimator) else estimator
        phi = _score_phi(target)

        g = np.zeros(dim)
        cost = 0.0
        for _ in range(config.replicates_per_step):
            est = estimate(phi, target, est_config, replicate_streams(root_seed, rep))
            rep += 1
            if not np.all(np.isfinite(est.value)):
                raise SgdDivergedError(i, theta, est)
            g += est.value
            cost += est.cost_units
        g /= config.replicates_per_step
        if config.prior_grad is not None:
            g = g + config.prior_grad(theta)

        alpha = config.alpha1 / i
        theta = theta.copy()
        theta[mask] *= np.exp(alpha * theta[mask] * g[mask])
        theta[~mask] += alpha * g[~mask]
        # exp() can under/overflow the positivity the log-space update
        # guarantees in exact arithmetic; surface that instead of letting
        # the target factory fail opaquely later.
        bad = ~np.isfinite(theta)
        bad[mask] |= theta[mask] <= 0.0
        if np.any(bad):
            raise SgdDivergedError(i, theta, est, reason="degenerate iterate")

        thetas[i] = theta
        grads[i - 1] = g
        costs[i - 1] = cost

    return SgdTrace(thetas=thetas, grads=grads, costs=costs)
