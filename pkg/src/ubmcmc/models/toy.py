"""Linear-Gaussian test model with an analytically solvable limit.

The forward map sends x = (x1, x2) to the solution of -h'' = x1 sin(2t) +
x2 sin(t) on (0, 2pi) with zero boundary values, observed at P = 50 points;
the exact solution is h(t; x) = (x1/4) sin(2t) + x2 sin(t), so the exact
observation operator is the P x 2 matrix G with columns sin(2 t_p)/4 and
sin(t_p).  Level l replaces the exact solve by piecewise-linear finite
elements on a mesh of width 2*pi*2^-(l+5), giving a genuine discretization
ladder whose observation matrices G_l converge to G at second order.

With a N(0, 16 I) prior and Gaussian observation noise of precision theta,
the exact-limit posterior is Gaussian with moments available in closed
form, which makes this model the oracle for the estimator tests.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from ..errors import ConfigError
from ..levels import LevelSchedule
from ..rng import RngStream
from ..targets import DiscretizedTarget
from . import fem

P_OBS = 50
DOMAIN = 2.0 * math.pi
PRIOR_VARIANCE = 16.0

#: observation locations 2*pi*(2p-1)/(2P), p = 1..P
OBS_POINTS = DOMAIN * (2.0 * np.arange(1, P_OBS + 1) - 1.0) / (2.0 * P_OBS)


def exact_g() -> np.ndarray:
    """The exact P x 2 observation matrix."""
    return np.column_stack([0.25 * np.sin(2.0 * OBS_POINTS), np.sin(OBS_POINTS)])


class ToyModel(DiscretizedTarget):
    """Gaussian posterior over the two forcing coefficients."""

    dim = 2
    schedule = LevelSchedule(base=DOMAIN, l0=5)
    cost_exponent = 1.0
    has_gradient = True
    has_score = True

    def __init__(self, y: np.ndarray, theta: float = 1.0):
        y = np.asarray(y, dtype=float)
        if y.shape != (P_OBS,):
            raise ConfigError(f"y must have shape ({P_OBS},), got {y.shape}")
        if not theta > 0:
            raise ConfigError(f"theta must be positive, got {theta}")
        self.y = y
        self.theta = float(theta)
        self._g_cache: dict[int, np.ndarray] = {}
        self._suff_cache: dict[int, tuple] = {}

    def with_theta(self, theta: float) -> "ToyModel":
        other = ToyModel(self.y, theta)
        # level matrices and their sufficient statistics are theta-free
        other._g_cache = self._g_cache
        other._suff_cache = self._suff_cache
        return other

    # - forward map ---------------------------------------------------------

    def g_matrix(self, level: int) -> np.ndarray:
        """Observation matrix of the level-l FEM forward solve (cached)."""
        g = self._g_cache.get(level)
        if g is None:
            delta = self.schedule.delta(level)
            n_elem = round(DOMAIN / delta)
            nodes = delta * np.arange(1, n_elem)
            phi_mid = np.ones(n_elem)
            cols = []
            for forcing in (lambda t: np.sin(2.0 * t), np.sin):
                nodal = fem.solve_dirichlet(
                    phi_mid, delta, fem.trapezoid_load(forcing(nodes), delta)
                )
                cols.append(fem.interpolate(nodal, delta, OBS_POINTS))
            g = np.column_stack(cols)
            self._g_cache[level] = g
        return g

    def forward(self, level: int, x: np.ndarray) -> np.ndarray:
        return self.g_matrix(level) @ x

    def _suff(self, level: int) -> tuple:
        """Scalar sufficient statistics of ||y - G_l x||^2 (cached).

        The residual norm is c - 2 b.x + x.A x with A = G^T G, b = G^T y,
        c = y.y, which avoids the P x 2 matmul in the density hot path.
        """
        s = self._suff_cache.get(level)
        if s is None:
            g = self.g_matrix(level)
            a = g.T @ g
            b = g.T @ self.y
            s = (
                float(a[0, 0]),
                float(a[0, 1]),
                float(a[1, 1]),
                float(b[0]),
                float(b[1]),
                float(self.y @ self.y),
            )
            self._suff_cache[level] = s
        return s

    def _residual_sq(self, level: int, x: np.ndarray) -> float:
        a11, a12, a22, b1, b2, c = self._suff(level)
        x1 = float(x[0])
        x2 = float(x[1])
        return c - 2.0 * (b1 * x1 + b2 * x2) + (
            a11 * x1 * x1 + 2.0 * a12 * x1 * x2 + a22 * x2 * x2
        )

    # - target interface ----------------------------------------------------

    def in_support(self, x: np.ndarray) -> bool:
        return True

    def log_gamma(self, level: int, x: np.ndarray) -> float:
        x1 = float(x[0])
        x2 = float(x[1])
        return -0.5 * self.theta * self._residual_sq(level, x) - (
            x1 * x1 + x2 * x2
        ) / (2.0 * PRIOR_VARIANCE)

    def grad_log_gamma(self, level: int, x: np.ndarray) -> np.ndarray:
        a11, a12, a22, b1, b2, _ = self._suff(level)
        x1 = float(x[0])
        x2 = float(x[1])
        th = self.theta
        return np.array(
            [
                th * (b1 - a11 * x1 - a12 * x2) - x1 / PRIOR_VARIANCE,
                th * (b2 - a12 * x1 - a22 * x2) - x2 / PRIOR_VARIANCE,
            ]
        )

    def score(self, level: int, x: np.ndarray) -> np.ndarray:
        return np.atleast_1d(
            0.5 * P_OBS / self.theta - 0.5 * self._residual_sq(level, x)
        )

    def sample_initial(self, level: int, stream: RngStream) -> np.ndarray:
        return math.sqrt(PRIOR_VARIANCE) * stream.standard_normal(self.dim)

    # - closed-form reference -----------------------------------------------

    def posterior_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact-limit posterior mean and covariance."""
        g = exact_g()
        precision = self.theta * (g.T @ g) + np.eye(2) / PRIOR_VARIANCE
        cov = np.linalg.inv(precision)
        mean = self.theta * (cov @ (g.T @ self.y))
        return mean, cov

    def marginal_log_z(self, theta: float) -> float:
        """Log marginal likelihood of y at observation precision theta.

        The P-dimensional Gaussian with covariance 16 G G^T + I/theta is
        evaluated through the 2x2 core of the Woodbury identity.
        """
        if not theta > 0:
            raise ConfigError(f"theta must be positive, got {theta}")
        g = exact_g()
        gtg = g.T @ g
        gty = g.T @ self.y
        core = np.eye(2) / PRIOR_VARIANCE + theta * gtg
        # log det(16 G G^T + I/theta) via Sylvester's determinant identity
        logdet = -P_OBS * math.log(theta) + math.log(
            np.linalg.det(PRIOR_VARIANCE * core)
        )
        quad = theta * float(self.y @ self.y) - theta**2 * float(
            gty @ np.linalg.solve(core, gty)
        )
        return -0.5 * (P_OBS * math.log(2.0 * math.pi) + logdet + quad)

    def mle_theta(self, bounds: tuple[float, float] = (1e-3, 1e4)) -> float:
        """Observation precision maximizing the marginal likelihood."""
        res = minimize_scalar(
            lambda t: -self.marginal_log_z(t),
            bounds=bounds,
            method="bounded",
            options={"xatol": 1e-8},
        )
        return float(res.x)


def make_toy_data(
    stream: RngStream,
    x_true: tuple[float, float] = (2.0, -2.0),
    theta: float = 1.0,
) -> np.ndarray:
    """Draw observations from the exact forward map at x_true."""
    mean = exact_g() @ np.asarray(x_true, dtype=float)
    return mean + stream.standard_normal(P_OBS) / math.sqrt(theta)
