"""One-dimensional elliptic inverse problem.

The forward map solves -(Phi(t; x) h'(t))' = 100 t on (0, 1) with zero
boundary values, where the permeability

    Phi(t; x) = 0.15 + x1 * sin(pi t)/10 + x2 * cos(2 pi t)/40

stays positive for every x in the prior box [-1, 1]^2 (worst case
0.15 - 0.125 = 0.025).  Observations are the solution values at the 50
points 0.01 + 0.02 (p - 1); level l uses a FEM mesh of width 2^-(l+3).
Unlike the linear toy model, the solution depends on x through the matrix,
so every density evaluation costs a banded solve.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError
from ..levels import LevelSchedule
from ..rng import RngStream
from ..targets import DiscretizedTarget
from . import fem

P_OBS = 50
PHI_BAR = 0.15
COEFF_1 = 1.0 / 10.0
COEFF_2 = 1.0 / 40.0

OBS_POINTS = 0.01 + 0.02 * np.arange(P_OBS)

_MEMO_MAX = 16


def permeability(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return (
        PHI_BAR
        + COEFF_1 * x[0] * np.sin(math.pi * t)
        + COEFF_2 * x[1] * np.cos(2.0 * math.pi * t)
    )


def forcing(t: np.ndarray) -> np.ndarray:
    return 100.0 * t


class EllipticModel(DiscretizedTarget):
    """Posterior over the two permeability coefficients, uniform prior."""

    dim = 2
    schedule = LevelSchedule(base=1.0, l0=3)
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
        self._mesh_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._dphi_cache: dict[int, list[np.ndarray]] = {}
        self._g_memo: dict[tuple[int, bytes], np.ndarray] = {}
        self._jac_memo: dict[tuple[int, bytes], np.ndarray] = {}
        self._pilot_cache: dict[int, tuple] = {}

    def with_theta(self, theta: float) -> "EllipticModel":
        other = EllipticModel(self.y, theta)
        other._mesh_cache = self._mesh_cache
        other._dphi_cache = self._dphi_cache
        other._g_memo = self._g_memo
        other._jac_memo = self._jac_memo
        return other

    def _mesh(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        cached = self._mesh_cache.get(level)
        if cached is None:
            delta = self.schedule.delta(level)
            n_elem = round(1.0 / delta)
            midpoints = delta * (np.arange(n_elem) + 0.5)
            load = fem.trapezoid_load(forcing(delta * np.arange(1, n_elem)), delta)
            cached = (midpoints, load)
            self._mesh_cache[level] = cached
        return cached

    def _dphi_mids(self, level: int) -> list[np.ndarray]:
        """Permeability derivatives along x1 and x2 at the midpoints."""
        cached = self._dphi_cache.get(level)
        if cached is None:
            midpoints, _ = self._mesh(level)
            cached = [
                COEFF_1 * np.sin(math.pi * midpoints),
                COEFF_2 * np.cos(2.0 * math.pi * midpoints),
            ]
            self._dphi_cache[level] = cached
        return cached

    def forward(self, level: int, x: np.ndarray) -> np.ndarray:
        """Level-l solution values at the observation points (memoized
        for repeated evaluations at the same state)."""
        key = (level, x.tobytes())
        g = self._g_memo.get(key)
        if g is None:
            midpoints, load = self._mesh(level)
            delta = self.schedule.delta(level)
            nodal = fem.solve_dirichlet(permeability(x, midpoints), delta, load)
            g = fem.interpolate(nodal, delta, OBS_POINTS)
            if len(self._g_memo) >= _MEMO_MAX:
                self._g_memo.pop(next(iter(self._g_memo)))
            self._g_memo[key] = g
        return g

    def _jacobian(self, level: int, x: np.ndarray) -> np.ndarray:
        """d(forward)/dx at the observation points, shape (P, 2) (memoized).

        One Cholesky factorization yields the solution and both sensitivity
        solves; the forward memo is populated as a side effect.
        """
        key = (level, x.tobytes())
        jac = self._jac_memo.get(key)
        if jac is None:
            midpoints, load = self._mesh(level)
            delta = self.schedule.delta(level)
            nodal, sens = fem.solve_dirichlet_with_sensitivities(
                permeability(x, midpoints), delta, load, self._dphi_mids(level)
            )
            jac = np.column_stack(
                [fem.interpolate(s, delta, OBS_POINTS) for s in sens]
            )
            if len(self._jac_memo) >= _MEMO_MAX:
                self._jac_memo.pop(next(iter(self._jac_memo)))
            self._jac_memo[key] = jac
            if key not in self._g_memo:
                if len(self._g_memo) >= _MEMO_MAX:
                    self._g_memo.pop(next(iter(self._g_memo)))
                self._g_memo[key] = fem.interpolate(nodal, delta, OBS_POINTS)
        return jac

    # - target interface ----------------------------------------------------

    def in_support(self, x: np.ndarray) -> bool:
        return bool(np.all(np.abs(x) <= 1.0))

    def log_gamma(self, level: int, x: np.ndarray) -> float:
        if not self.in_support(x):
            return -math.inf
        r = self.y - self.forward(level, x)
        return -0.5 * self.theta * float(r @ r)

    def grad_log_gamma(self, level: int, x: np.ndarray) -> np.ndarray:
        """Gradient of the smooth misfit term, theta J^T (y - G_l(x)).

        Defined wherever the permeability stays positive — a margin of
        roughly half the box width beyond the prior box.  The box constraint
        itself enters Metropolis-Hastings acceptance through ``log_gamma``
        alone, as usual for Hamiltonian proposals under a truncated prior;
        trajectories that run the permeability non-positive raise
        IntegratorError and are treated as rejections by the kernel.
        """
        r = self.y - self.forward(level, x)
        return self.theta * (self._jacobian(level, x).T @ r)

    def score(self, level: int, x: np.ndarray) -> np.ndarray:
        r = self.y - self.forward(level, x)
        return np.atleast_1d(0.5 * P_OBS / self.theta - 0.5 * float(r @ r))

    def sample_initial(self, level: int, stream: RngStream) -> np.ndarray:
        return stream.uniform(-1.0, 1.0, self.dim)

    # - pilot fit -------------------------------------------------------------

    def laplace_pilot(
        self, level: int = 6
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Posterior mode, marginal scales, and curvature at one level.

        Direct search for the mode followed by a finite-difference Hessian
        of -log gamma (returned as the third element); deterministic, and
        cheap next to any sampling run.  Used to center, scale, and tune
        proposals when the posterior is concentrated away from the origin.
        """
        cached = self._pilot_cache.get(level)
        if cached is not None:
            return cached
        from scipy.optimize import minimize

        def neg(x: np.ndarray) -> float:
            lg = self.log_gamma(level, x)
            return -lg if math.isfinite(lg) else 1e300

        res = minimize(
            neg,
            np.zeros(self.dim),
            method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000},
        )
        mode = np.asarray(res.x, dtype=float)
        h = 1e-4
        eye = np.eye(self.dim)
        hess = np.empty((self.dim, self.dim))
        for i in range(self.dim):
            for j in range(self.dim):
                hess[i, j] = (
                    neg(mode + h * (eye[i] + eye[j]))
                    - neg(mode + h * (eye[i] - eye[j]))
                    - neg(mode - h * (eye[i] - eye[j]))
                    + neg(mode - h * (eye[i] + eye[j]))
                ) / (4.0 * h * h)
        sd = np.sqrt(np.diag(np.linalg.inv(hess)))
        self._pilot_cache[level] = (mode, sd, hess)
        return self._pilot_cache[level]

    def warm_initializer(self, inflate: float = 3.0, pilot_level: int = 6):
        """Chain initializer drawn around the pilot fit, kept inside the box.

        Returns an ``(level, stream) -> x`` callable sampling
        N(mode, (inflate * sd)^2 I) restricted to the prior box by
        rejection.  Debiased estimates do not depend on the initial
        distribution, but a start this overdispersed-yet-warm keeps
        meeting times short where the posterior occupies a sliver of
        the box and tail states would stall a posterior-scale kernel.
        """
        mode, sd, _ = self.laplace_pilot(pilot_level)
        scale = inflate * sd

        def sample(level: int, stream: RngStream) -> np.ndarray:
            for _ in range(1_000_000):
                x = mode + scale * stream.standard_normal(mode.size)
                if float(np.max(np.abs(x))) < 1.0:
                    return x
            raise ConfigError("warm initializer: box rejection cap exceeded")

        return sample


def make_elliptic_data(
    stream: RngStream,
    x_true: tuple[float, float] = (0.6, -0.4),
    theta: float = 1.0,
    level: int = 10,
) -> np.ndarray:
    """Observations from a fine-level solve at x_true plus Gaussian noise."""
    model = EllipticModel(np.zeros(P_OBS), theta)
    mean = model.forward(level, np.asarray(x_true, dtype=float))
    return mean + stream.standard_normal(P_OBS) / math.sqrt(theta)
