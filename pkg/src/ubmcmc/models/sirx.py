"""Compartmental epidemic model with quarantine (SIR-X) and a gamma
under-reporting likelihood.

State fractions (S, I, R, Xi) evolve as

    S' = -a S I - x1 S
    I' =  a S I - (b + x1 + x2) I
    R' =  b I + x1 S
    Xi' = (x1 + x2) I

so S + I + R + Xi is conserved exactly.  The system is augmented with the
cumulative-infection coordinate h, h' = a S I, integrated by classic
fourth-order Runge-Kutta from t = -x3 (one shortened first step lands the
trajectory on the level-l grid of width 0.1 * 2^-l).  The modeled daily
count for day index i is the one-day increment G_i = h(29 + i) - h(28 + i),
i = 1..40.

Observed counts are y_i = G_i(x) * exp(-Gamma_i) with Gamma_i gamma(shape
theta1, scale theta2), so log(G_i(x)/y_i) must be positive at every
observation: outside that set the posterior density is zero.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.special import digamma, gammaln

from ..errors import ConfigError, IntegratorError
from ..levels import LevelSchedule
from ..rng import RngStream
from ..targets import DiscretizedTarget, rejection_initial

A_RATE = 0.775
B_RATE = 0.125
N_POP = 66_650_000
P_OBS = 40
DAY_OFFSET = 29  # first observed day ends at t = 30

PRIOR_LOW = np.array([0.001, 0.2, 5.0])
PRIOR_HIGH = np.array([0.003, 0.4, 25.0])

_STATE_TOL = 1e-9
_MEMO_MAX = 16


def _rk4(
    x1: float,
    x2: float,
    x3: float,
    dt: float,
    level_steps_per_day: int,
    collect_trajectory: bool,
) -> tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """Integrate from t = -x3 to the last observed day.

    Returns (h at integer days DAY_OFFSET..DAY_OFFSET+P_OBS, and optionally
    the full time/state arrays for diagnostics).
    """
    bxx = B_RATE + x1 + x2
    xx = x1 + x2

    def rhs(s, i, r, xi, h):
        inc = A_RATE * s * i
        return (-inc - x1 * s, inc - bxx * i, B_RATE * i + x1 * s, xx * i, inc)

    def step(state, h_step):
        s, i, r, xi, h = state
        k1 = rhs(s, i, r, xi, h)
        half = 0.5 * h_step
        k2 = rhs(s + half * k1[0], i + half * k1[1], r + half * k1[2],
                 xi + half * k1[3], h + half * k1[4])
        k3 = rhs(s + half * k2[0], i + half * k2[1], r + half * k2[2],
                 xi + half * k2[3], h + half * k2[4])
        k4 = rhs(s + h_step * k3[0], i + h_step * k3[1], r + h_step * k3[2],
                 xi + h_step * k3[3], h + h_step * k3[4])
        sixth = h_step / 6.0
        return tuple(
            state[j] + sixth * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            for j in range(5)
        )

    state = (1.0 - 1.0 / N_POP, 1.0 / N_POP, 0.0, 0.0, 0.0)
    # shortened first step from -x3 onto the grid of multiples of dt
    n = math.ceil(-x3 / dt)
    first = n * dt + x3
    if first > 1e-13:
        state = step(state, first)
    final_n = (DAY_OFFSET + P_OBS) * level_steps_per_day

    day_marks = np.empty(P_OBS + 1)
    times = [n * dt] if collect_trajectory else None
    states = [state] if collect_trajectory else None
    while True:
        if n % level_steps_per_day == 0:
            day = n // level_steps_per_day
            if DAY_OFFSET <= day <= DAY_OFFSET + P_OBS:
                day_marks[day - DAY_OFFSET] = state[4]
        if n >= final_n:
            break
        state = step(state, dt)
        n += 1
        total = state[0] + state[1] + state[2] + state[3]
        if abs(total - 1.0) > _STATE_TOL or not all(
            -_STATE_TOL <= v <= 1.0 + _STATE_TOL for v in state[:4]
        ):
            raise IntegratorError(
                f"state left the simplex at t={n * dt:.3f} "
                f"(sum drift {total - 1.0:.2e})"
            )
        if collect_trajectory:
            times.append(n * dt)
            states.append(state)

    if collect_trajectory:
        return day_marks, np.array(times), np.array(states)
    return day_marks, None, None


class SirxModel(DiscretizedTarget):
    """Posterior over (containment rate, quarantine rate, reporting lag)."""

    dim = 3
    schedule = LevelSchedule(base=0.1, l0=0)
    cost_exponent = 1.0
    has_score = True

    def __init__(self, y: np.ndarray, theta=(1.0, 1.0)):
        y = np.asarray(y, dtype=float)
        if y.shape != (P_OBS,):
            raise ConfigError(f"y must have shape ({P_OBS},), got {y.shape}")
        if np.any(y <= 0.0):
            raise ConfigError("observed daily counts must be positive")
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (2,) or np.any(theta <= 0.0):
            raise ConfigError(f"theta must be two positive values, got {theta}")
        self.y = y
        self.log_y = np.log(y)
        self.theta = theta
        self._g_memo: dict[tuple[int, bytes], np.ndarray] = {}

    def with_theta(self, theta) -> "SirxModel":
        other = SirxModel(self.y, theta)
        other._g_memo = self._g_memo
        return other

    def integrate(self, level: int, x: np.ndarray, collect_trajectory: bool = False):
        """Daily modeled counts G(x) at this level; optionally the full
        RK4 trajectory (times, states) for diagnostics."""
        steps_per_day = 10 * 2**level
        dt = self.schedule.delta(level)
        marks, times, states = _rk4(
            float(x[0]), float(x[1]), float(x[2]), dt, steps_per_day,
            collect_trajectory,
        )
        g = np.diff(marks)
        if collect_trajectory:
            return g, times, states
        return g

    def forward(self, level: int, x: np.ndarray) -> np.ndarray:
        key = (level, x.tobytes())
        g = self._g_memo.get(key)
        if g is None:
            g = self.integrate(level, x)
            if len(self._g_memo) >= _MEMO_MAX:
                self._g_memo.pop(next(iter(self._g_memo)))
            self._g_memo[key] = g
        return g

    # - target interface ----------------------------------------------------

    def in_support(self, x: np.ndarray) -> bool:
        """Prior-box membership only; the data constraint G_i(x) > y_i is
        level-dependent and enforced inside log_gamma."""
        return bool(np.all(x >= PRIOR_LOW) and np.all(x <= PRIOR_HIGH))

    def _log_ratios(self, level: int, x: np.ndarray) -> Optional[np.ndarray]:
        if not self.in_support(x):
            return None
        g = self.forward(level, x)
        log_l = np.log(g) - self.log_y
        if np.any(~np.isfinite(log_l)) or np.any(log_l <= 0.0):
            return None
        return log_l

    def log_gamma(self, level: int, x: np.ndarray) -> float:
        log_l = self._log_ratios(level, x)
        if log_l is None:
            return -math.inf
        t1, t2 = self.theta
        return float(
            P_OBS * (-gammaln(t1) - t1 * math.log(t2))
            + (t1 - 1.0) * np.sum(np.log(log_l))
            - np.sum(log_l) / t2
        )

    def score(self, level: int, x: np.ndarray) -> np.ndarray:
        log_l = self._log_ratios(level, x)
        if log_l is None:
            raise ValueError("score requested outside the support set")
        t1, t2 = self.theta
        d1 = float(np.sum(np.log(log_l))) - P_OBS * (digamma(t1) + math.log(t2))
        d2 = float(np.sum(log_l)) / t2**2 - P_OBS * t1 / t2
        return np.array([d1, d2])

    def sample_initial(self, level: int, stream: RngStream) -> np.ndarray:
        """Prior draw restricted to the data-compatible set."""
        return rejection_initial(
            self, level, stream,
            lambda s: s.uniform(PRIOR_LOW, PRIOR_HIGH),
        )


def make_sirx_data(
    stream: RngStream,
    x_true: tuple[float, float, float] = (0.002, 0.3, 15.0),
    theta: tuple[float, float] = (1.0, 1.0),
    level: int = 5,
) -> np.ndarray:
    """Observed counts: fine-level modeled counts damped by gamma noise."""
    model = SirxModel(np.ones(P_OBS), theta)
    g = model.integrate(level, np.asarray(x_true, dtype=float))
    noise = stream.gamma(shape=theta[0], scale=theta[1], size=P_OBS)
    return g * np.exp(-noise)
