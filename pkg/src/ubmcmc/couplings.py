"""Couplings of Gaussian proposal kernels for pairs and 4-chain systems.

A *pair* coupling draws (X', W') with X' ~ Q(x,.), W' ~ Q(w,.) marginally.
A *quad* coupling drives the 4-chain system used by increment estimators:
two chains at a fine level (proposal ``p_fine``) and two at the next coarser
level (proposal ``p_coarse``), i.e. marginals

    X'_f ~ Q_f(x_f,.),  W'_f ~ Q_f(w_f,.),  X'_c ~ Q_c(x_c,.),  W'_c ~ Q_c(w_c,.).

Meetings are declared *only* through bitwise equality, and every branch that
produces a meeting assigns the identical array object to both slots — this
is what makes the couplings faithful (equal inputs produce equal outputs),
which downstream estimators rely on.

Couplings provided:

* ``maximal_pair``           -- rejection-based maximal coupling of two
                                kernels; meets with the maximal probability
                                ``int min(q(x,u), q(w,u)) du``.
* ``reflection_maximal_pair``-- shared-noise coupling that is maximal within
                                the pair and reflects the noise otherwise.
* ``synchronous_pair``       -- shared noise, never meets on its own;
                                contracts autoregressive proposals.
* ``maximal_quad``           -- all four marginals coupled through one
                                candidate and three residual rejection
                                samplers; any subset can take a common value.
* ``reflection_maximal_quad``-- one shared standard normal driving all four
                                proposals; within each level the pair either
                                takes the common value (maximal part) or the
                                reflected noise.
* ``synchronous_pcn_quad``   -- one shared standard normal, plain
                                synchronous push; contracts within levels at
                                the autoregressive rate and keeps the two
                                levels close.
* ``mixture_quad``/``mixture_pair`` -- Bernoulli(kappa) mixture of a primary
                                (contracting) and a meet-enabling coupling.
* ``independent_max_quad``   -- per-level maximal couplings with independent
                                randomness across levels.  Diagnostic
                                baseline only: increments do not decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CouplingStallError
from .proposals import GaussianProposal
from .rng import RngStream

#: Iteration cap for every rejection loop below.
REJECTION_CAP = 1_000_000


@dataclass(slots=True)
class PairProposalDraw:
    """One coupled proposal draw for a pair of chains."""

    x_prop: np.ndarray
    w_prop: np.ndarray
    met: bool  # True iff x_prop and w_prop are the identical value


@dataclass(slots=True)
class QuadProposalDraw:
    """One coupled proposal draw for the 4-chain system."""

    x_fine: np.ndarray
    w_fine: np.ndarray
    x_coarse: np.ndarray
    w_coarse: np.ndarray
    met_fine: bool
    met_coarse: bool

    @property
    def all_met(self) -> bool:
        """All four proposals bitwise equal (possible when one candidate
        was accepted as the common value for both levels)."""
        return (
            self.met_fine
            and self.met_coarse
            and np.array_equal(self.x_fine, self.x_coarse)
        )


def _states_equal(x: np.ndarray, w: np.ndarray) -> bool:
    # bitwise comparison; tobytes on the handful-of-floats states here is
    # considerably cheaper than np.array_equal
    return x is w or x.tobytes() == w.tobytes()


def _log_u(stream: RngStream) -> float:
    u = stream.random()
    # random() can return exactly 0.0; log(0) = -inf is a valid comparison
    # value (it accepts everything under `<` tests with finite thresholds).
    return math.log(u) if u > 0.0 else -math.inf


# ---------------------------------------------------------------------------
# pair couplings
# ---------------------------------------------------------------------------


def maximal_pair(
    p: GaussianProposal, x: np.ndarray, w: np.ndarray, stream: RngStream
) -> PairProposalDraw:
    """Rejection-based maximal coupling of Q(x,.) and Q(w,.).

    Draws a candidate from Q(x,.), accepts it as the common value with
    probability min(1, q(w,cand)/q(x,cand)); otherwise samples the W-chain
    marginal from the residual by rejection.
    """
    if _states_equal(x, w):
        xp = p.propose(x, stream)
        return PairProposalDraw(xp, xp, True)

    xp = p.propose(x, stream)
    if _log_u(stream) < p.log_density(w, xp) - p.log_density(x, xp):
        return PairProposalDraw(xp, xp, True)

    for _ in range(REJECTION_CAP):
        cand = p.propose(w, stream)
        # keep cand only if it is *not* swallowed by the overlap
        if _log_u(stream) >= p.log_density(x, cand) - p.log_density(w, cand):
            return PairProposalDraw(xp, cand, False)
    raise CouplingStallError(
        f"maximal_pair residual sampler exceeded {REJECTION_CAP} iterations"
    )


def reflection_maximal_pair(
    p: GaussianProposal, x: np.ndarray, w: np.ndarray, stream: RngStream
) -> PairProposalDraw:
    """Reflection-maximal coupling: one shared noise vector, maximal within
    the pair, with the rejected mass reflected about the mean separation."""
    v = stream.standard_normal(p.dim)
    mean_x = p.mean(x)
    xp = mean_x + p.scale_noise(v)
    if _states_equal(x, w):
        return PairProposalDraw(xp, xp, True)

    mean_w = p.mean(w)
    u = p.whiten(mean_x - mean_w)
    uu = float(u @ u)
    if uu == 0.0:  # distinct states, identical means (rho == 0)
        return PairProposalDraw(xp, xp, True)
    vu = float(v @ u)
    if _log_u(stream) < -vu - 0.5 * uu:
        # residual accepted: W' equals X' exactly (assign the same object)
        return PairProposalDraw(xp, xp, True)
    v_refl = v - (2.0 * vu / uu) * u
    return PairProposalDraw(xp, mean_w + p.scale_noise(v_refl), False)


def synchronous_pair(
    p: GaussianProposal, x: np.ndarray, w: np.ndarray, stream: RngStream
) -> PairProposalDraw:
    """Shared-noise (common random numbers) coupling."""
    v = stream.standard_normal(p.dim)
    xp = p.mean(x) + p.scale_noise(v)
    if _states_equal(x, w):
        return PairProposalDraw(xp, xp, True)
    return PairProposalDraw(xp, p.mean(w) + p.scale_noise(v), False)


def mixture_pair(
    kappa: float,
    primary,
    meet,
    p: GaussianProposal,
    x: np.ndarray,
    w: np.ndarray,
    stream: RngStream,
) -> PairProposalDraw:
    """With probability kappa use ``primary``, otherwise ``meet``."""
    if stream.random() < kappa:
        return primary(p, x, w, stream)
    return meet(p, x, w, stream)


# ---------------------------------------------------------------------------
# quad couplings
# ---------------------------------------------------------------------------


def maximal_quad(
    p_fine: GaussianProposal,
    p_coarse: GaussianProposal,
    x_fine: np.ndarray,
    w_fine: np.ndarray,
    x_coarse: np.ndarray,
    w_coarse: np.ndarray,
    stream: RngStream,
) -> QuadProposalDraw:
    """Maximal coupling of all four proposal marginals.

    One candidate from Q_f(x_f,.) is accepted as the common value of all
    four chains with probability min over the three density ratios against
    the candidate's own density; otherwise the remaining three marginals are
    drawn from their residuals by rejection, short-circuiting within-level
    copies whenever a pair of current states is already equal.
    """
    fine_eq = _states_equal(x_fine, w_fine)
    coarse_eq = _states_equal(x_coarse, w_coarse)

    cand = p_fine.propose(x_fine, stream)
    lq_anchor = p_fine.log_density(x_fine, cand)
    lq_min = min(
        p_fine.log_density(w_fine, cand),
        p_coarse.log_density(x_coarse, cand),
        p_coarse.log_density(w_coarse, cand),
    )
    if _log_u(stream) < lq_min - lq_anchor:
        return QuadProposalDraw(cand, cand, cand, cand, True, True)

    x_fine_prop = cand

    # W-chain at the fine level
    if fine_eq:
        w_fine_prop = x_fine_prop
        met_fine = True
    else:
        w_fine_prop = _quad_residual(
            stream,
            anchor=(p_fine, w_fine),
            others=((p_fine, x_fine), (p_coarse, x_coarse), (p_coarse, w_coarse)),
        )
        met_fine = False

    # X-chain at the coarse level
    x_coarse_prop = _quad_residual(
        stream,
        anchor=(p_coarse, x_coarse),
        others=((p_fine, x_fine), (p_fine, w_fine), (p_coarse, w_coarse)),
    )

    # W-chain at the coarse level
    if coarse_eq:
        w_coarse_prop = x_coarse_prop
        met_coarse = True
    else:
        w_coarse_prop = _quad_residual(
            stream,
            anchor=(p_coarse, w_coarse),
            others=((p_fine, x_fine), (p_fine, w_fine), (p_coarse, x_coarse)),
        )
        met_coarse = False

    return QuadProposalDraw(
        x_fine_prop, w_fine_prop, x_coarse_prop, w_coarse_prop, met_fine, met_coarse
    )


def _quad_residual(stream: RngStream, anchor, others) -> np.ndarray:
    """Sample Q_anchor's residual against the pointwise-min overlap of all
    four kernels: keep a candidate from the anchor kernel unless it falls in
    the overlap (probability min(1, min_others q / q_anchor))."""
    p_a, center = anchor
    for _ in range(REJECTION_CAP):
        cand = p_a.propose(center, stream)
        lq_a = p_a.log_density(center, cand)
        lq_min = min(p.log_density(c, cand) for p, c in others)
        if _log_u(stream) >= lq_min - lq_a:
            return cand
    raise CouplingStallError(
        f"maximal_quad residual sampler exceeded {REJECTION_CAP} iterations"
    )


def reflection_maximal_quad(
    p_fine: GaussianProposal,
    p_coarse: GaussianProposal,
    x_fine: np.ndarray,
    w_fine: np.ndarray,
    x_coarse: np.ndarray,
    w_coarse: np.ndarray,
    stream: RngStream,
) -> QuadProposalDraw:
    """One shared standard normal drives all four proposals; within each
    level the pair couples maximally (common value or reflected noise)."""
    v = stream.standard_normal(p_fine.dim)
    x_fine_prop, w_fine_prop, met_fine = _reflect_level(
        p_fine, x_fine, w_fine, v, stream
    )
    x_coarse_prop, w_coarse_prop, met_coarse = _reflect_level(
        p_coarse, x_coarse, w_coarse, v, stream
    )
    return QuadProposalDraw(
        x_fine_prop, w_fine_prop, x_coarse_prop, w_coarse_prop, met_fine, met_coarse
    )


def _reflect_level(
    p: GaussianProposal,
    x: np.ndarray,
    w: np.ndarray,
    v: np.ndarray,
    stream: RngStream,
):
    xp = p.mean(x) + p.scale_noise(v)
    if _states_equal(x, w):
        return xp, xp, True
    mean_w = p.mean(w)
    u = p.whiten(p.mean(x) - mean_w)
    uu = float(u @ u)
    if uu == 0.0:
        return xp, xp, True
    vu = float(v @ u)
    if _log_u(stream) < -vu - 0.5 * uu:
        return xp, xp, True
    v_refl = v - (2.0 * vu / uu) * u
    return xp, mean_w + p.scale_noise(v_refl), False


def synchronous_pcn_quad(
    p_fine: GaussianProposal,
    p_coarse: GaussianProposal,
    x_fine: np.ndarray,
    w_fine: np.ndarray,
    x_coarse: np.ndarray,
    w_coarse: np.ndarray,
    stream: RngStream,
) -> QuadProposalDraw:
    """One shared standard normal pushed through all four proposal maps.

    For autoregressive proposals this contracts within-level separations by
    exactly rho per accepted step and keeps the two levels' chains close; it
    never produces new meetings on its own (mix it with a maximal coupling).
    """
    v = stream.standard_normal(p_fine.dim)
    noise_f = p_fine.scale_noise(v)
    x_fine_prop = p_fine.mean(x_fine) + noise_f
    if _states_equal(x_fine, w_fine):
        w_fine_prop, met_fine = x_fine_prop, True
    else:
        w_fine_prop, met_fine = p_fine.mean(w_fine) + noise_f, False
    noise_c = p_coarse.scale_noise(v)
    x_coarse_prop = p_coarse.mean(x_coarse) + noise_c
    if _states_equal(x_coarse, w_coarse):
        w_coarse_prop, met_coarse = x_coarse_prop, True
    else:
        w_coarse_prop, met_coarse = p_coarse.mean(w_coarse) + noise_c, False
    return QuadProposalDraw(
        x_fine_prop, w_fine_prop, x_coarse_prop, w_coarse_prop, met_fine, met_coarse
    )


def mixture_quad(
    kappa: float,
    primary,
    meet,
    p_fine: GaussianProposal,
    p_coarse: GaussianProposal,
    x_fine: np.ndarray,
    w_fine: np.ndarray,
    x_coarse: np.ndarray,
    w_coarse: np.ndarray,
    stream: RngStream,
) -> QuadProposalDraw:
    """With probability kappa use ``primary``, otherwise ``meet``."""
    chosen = primary if stream.random() < kappa else meet
    return chosen(p_fine, p_coarse, x_fine, w_fine, x_coarse, w_coarse, stream)


def independent_max_quad(
    p_fine: GaussianProposal,
    p_coarse: GaussianProposal,
    x_fine: np.ndarray,
    w_fine: np.ndarray,
    x_coarse: np.ndarray,
    w_coarse: np.ndarray,
    stream: RngStream,
) -> QuadProposalDraw:
    """Per-level maximal couplings with no coupling across levels.

    Diagnostic baseline: within-level meetings still occur, but increment
    estimators built on it have non-vanishing variance, so it is excluded
    from production estimation paths.
    """
    fine = maximal_pair(p_fine, x_fine, w_fine, stream)
    coarse = maximal_pair(p_coarse, x_coarse, w_coarse, stream)
    return QuadProposalDraw(
        fine.x_prop, fine.w_prop, coarse.x_prop, coarse.w_prop, fine.met, coarse.met
    )
