"""Coupled Markov transition kernels and their initial couplings.

The estimators in this package run either a *pair* of chains at one level or
a *quad* (two pairs at adjacent levels).  All four (or two) chains advance
with shared randomness:

* one coupled proposal draw per step (see :mod:`ubmcmc.couplings`);
* one shared uniform applied to every per-chain Metropolis-Hastings
  acceptance test, so chains whose proposals coincide and whose densities
  agree move together;
* for the Hamiltonian mixture kernel, one shared initial velocity and one
  shared acceptance uniform per step, falling back with probability
  (1 - kappa) to a coupled random-walk step with a tiny proposal scale that
  lets nearby chains meet exactly.

Within a pair, the X-chain is initialized one kernel step ahead of the
W-chain (the debiasing estimators require the lag-one stationarity
telescopes), so both chains carry the same time index and the meeting time
is the first step at which the pair is bitwise equal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np

from . import couplings as cp
from .errors import InitializationError, IntegratorError, InvalidCurrentStateError
from .proposals import GaussianProposal
from .rng import ReplicateStreams, RngStream
from .targets import (
    CostLedger,
    DiscretizedTarget,
    eval_grad_log_gamma,
    eval_log_gamma,
)

KERNEL_KINDS = ("rwmh", "pcn", "hmc-mix")
COUPLING_KINDS = ("quad-max", "reflection-max", "sync-pcn-mix", "independent-max")

_PERTURB_CAP = 1_000_000


def _log_u(stream: RngStream) -> float:
    u = stream.random()
    return math.log(u) if u > 0.0 else -math.inf


@dataclass(slots=True)
class PairState:
    """Two coupled chains at one level, with cached log-densities."""

    x: np.ndarray
    w: np.ndarray
    log_gx: float
    log_gw: float
    met_at: Optional[int] = None

    @property
    def met(self) -> bool:
        return self.met_at is not None


@dataclass(slots=True)
class QuadState:
    """The 4-chain system: one pair at the fine level, one at the coarse."""

    fine: PairState
    coarse: PairState
    n: int = 0


# ---------------------------------------------------------------------------
# Metropolis-Hastings acceptance
# ---------------------------------------------------------------------------


def mh_accept(
    target: DiscretizedTarget,
    level: int,
    x: np.ndarray,
    xp: np.ndarray,
    q_fwd_log: float,
    q_bwd_log: float,
    u: float,
    ledger: Optional[CostLedger] = None,
) -> np.ndarray:
    """One Metropolis-Hastings decision; returns the next state.

    Accepts ``xp`` iff ``log u < min(0, [log_gamma(xp) + q_bwd_log] -
    [log_gamma(x) + q_fwd_log])``.  A zero-density *current* state is an
    error (the chain should never have been there).
    """
    log_gx = eval_log_gamma(target, level, x, ledger)
    if log_gx == -math.inf:
        raise InvalidCurrentStateError(
            f"current state has zero density at level {level}"
        )
    log_gxp = eval_log_gamma(target, level, xp, ledger)
    log_u = math.log(u) if u > 0.0 else -math.inf
    if log_u < min(0.0, (log_gxp + q_bwd_log) - (log_gx + q_fwd_log)):
        return xp
    return x


def _mh_update_pair(
    target: DiscretizedTarget,
    level: int,
    pair: PairState,
    proposal: GaussianProposal,
    x_prop: np.ndarray,
    w_prop: np.ndarray,
    log_u: float,
    ledger: Optional[CostLedger],
    step_index: int,
) -> None:
    """Apply one shared-uniform MH update to both chains of a pair.

    Identical proposal objects are evaluated once, so a met pair costs a
    single target evaluation per step.
    """
    lg_xp = eval_log_gamma(target, level, x_prop, ledger)
    same_prop = w_prop is x_prop
    lg_wp = lg_xp if same_prop else eval_log_gamma(target, level, w_prop, ledger)

    lr_x = proposal.log_ratio_reverse(pair.x, x_prop)
    accept_x = log_u < min(0.0, lg_xp - pair.log_gx + lr_x)
    if same_prop and pair.x is pair.w:
        accept_w = accept_x
    else:
        lr_w = proposal.log_ratio_reverse(pair.w, w_prop)
        accept_w = log_u < min(0.0, lg_wp - pair.log_gw + lr_w)

    if accept_x:
        pair.x = x_prop
        pair.log_gx = lg_xp
    if accept_w:
        pair.w = w_prop
        pair.log_gw = lg_wp
    if pair.met_at is None and (
        pair.x is pair.w or pair.x.tobytes() == pair.w.tobytes()
    ):
        pair.met_at = step_index


def coupled_mh_step_pair(
    target: DiscretizedTarget,
    level: int,
    pair: PairState,
    proposal: GaussianProposal,
    pair_coupling,
    chain_stream: RngStream,
    coupling_stream: RngStream,
    ledger: Optional[CostLedger],
    step_index: int,
) -> None:
    """One coupled MH transition of a pair (in place)."""
    draw = pair_coupling(proposal, pair.x, pair.w, coupling_stream)
    log_u = _log_u(chain_stream)
    _mh_update_pair(
        target, level, pair, proposal, draw.x_prop, draw.w_prop, log_u, ledger,
        step_index,
    )


def coupled_mh_step_quad(
    target: DiscretizedTarget,
    level: int,
    quad: QuadState,
    p_fine: GaussianProposal,
    p_coarse: GaussianProposal,
    quad_coupling,
    chain_stream: RngStream,
    coupling_stream: RngStream,
    ledger: Optional[CostLedger],
) -> None:
    """One coupled MH transition of the 4-chain system (in place).

    A single uniform drives all four acceptance tests.
    """
    fine, coarse = quad.fine, quad.coarse
    draw = quad_coupling(
        p_fine, p_coarse, fine.x, fine.w, coarse.x, coarse.w, coupling_stream
    )
    log_u = _log_u(chain_stream)
    n = quad.n + 1
    _mh_update_pair(
        target, level, fine, p_fine, draw.x_fine, draw.w_fine, log_u, ledger, n
    )
    _mh_update_pair(
        target, level - 1, coarse, p_coarse, draw.x_coarse, draw.w_coarse, log_u,
        ledger, n,
    )
    quad.n = n


# ---------------------------------------------------------------------------
# Hamiltonian mixture kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HmcSettings:
    """Leapfrog step size/count, mixture weight, and fallback scale."""

    epsilon: float = 0.1
    n_steps: int = 10
    kappa: float = 0.9
    fallback_sigma: float = 1e-4

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0.0 < self.kappa < 1.0:
            raise ValueError(f"kappa must be in (0, 1), got {self.kappa}")
        if not self.fallback_sigma > 0:
            raise ValueError(
                f"fallback_sigma must be positive, got {self.fallback_sigma}"
            )


def leapfrog(
    target: DiscretizedTarget,
    level: int,
    x0: np.ndarray,
    v0: np.ndarray,
    epsilon: float,
    n_steps: int,
    ledger: Optional[CostLedger] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate Hamiltonian dynamics for ``-log gamma(level, .)``.

    Standard velocity-split leapfrog (half kick, full drift, half kick),
    with the interior half-kick pairs fused into full kicks.  Each call
    makes n_steps + 1 gradient evaluations, charged to the ledger in one
    batch.
    """
    if ledger is not None:
        ledger.charge((n_steps + 1) * target.cost_units(level))
    grad_fn = target.grad_log_gamma
    half = 0.5 * epsilon
    v = v0 + half * grad_fn(level, x0)
    x = x0 + epsilon * v
    for _ in range(n_steps - 1):
        v += epsilon * grad_fn(level, x)
        x = x + epsilon * v
    v += half * grad_fn(level, x)
    return x, v


def _hmc_proposal(
    target: DiscretizedTarget,
    level: int,
    x: np.ndarray,
    v: np.ndarray,
    settings: HmcSettings,
    ledger: Optional[CostLedger],
) -> tuple[Optional[np.ndarray], float, float]:
    """Leapfrog endpoint with its density and final kinetic energy.

    A trajectory that leaves the domain where the model is integrable
    (IntegratorError) counts as a rejected proposal, returned as None.
    """
    try:
        xp, vp = leapfrog(target, level, x, v, settings.epsilon, settings.n_steps, ledger)
        lg_xp = eval_log_gamma(target, level, xp, ledger)
    except IntegratorError:
        return None, -math.inf, math.inf
    return xp, lg_xp, 0.5 * float(vp @ vp)


def _hmc_update_pair(
    target: DiscretizedTarget,
    level: int,
    pair: PairState,
    v: np.ndarray,
    log_u: float,
    settings: HmcSettings,
    ledger: Optional[CostLedger],
    step_index: int,
) -> None:
    """Shared-velocity, shared-uniform Hamiltonian update of one pair."""
    kinetic0 = 0.5 * float(v @ v)
    xp, lg_xp, kin_x = _hmc_proposal(target, level, pair.x, v, settings, ledger)
    accept_x = xp is not None and log_u <= min(
        0.0, (lg_xp - kin_x) - (pair.log_gx - kinetic0)
    )
    if pair.x is pair.w:
        wp, lg_wp, accept_w = xp, lg_xp, accept_x
    else:
        wp, lg_wp, kin_w = _hmc_proposal(target, level, pair.w, v, settings, ledger)
        accept_w = wp is not None and log_u <= min(
            0.0, (lg_wp - kin_w) - (pair.log_gw - kinetic0)
        )
    if accept_x:
        pair.x = xp
        pair.log_gx = lg_xp
    if accept_w:
        pair.w = wp
        pair.log_gw = lg_wp
    if pair.met_at is None and (
        pair.x is pair.w or pair.x.tobytes() == pair.w.tobytes()
    ):
        pair.met_at = step_index


# ---------------------------------------------------------------------------
# kernel factory
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KernelSettings:
    """Configuration of the coupled transition kernel.

    ``kind``:     rwmh | pcn | hmc-mix.
    ``sigma``:    proposal scale (scalar, diagonal vector, or lower-
                  triangular factor); ignored by hmc-mix (which proposes
                  via leapfrog and uses ``hmc.fallback_sigma`` otherwise).
    ``rho``:      autoregressive coefficient for pcn.
    ``center``:   autoregressive anchor point for pcn (defaults to the origin).
    ``coupling``: quad-max | reflection-max | sync-pcn-mix | independent-max.
    ``kappa``:    weight of the synchronous component in sync-pcn-mix.
    ``per_level``: optional {level: {"sigma": ..., "rho": ...}} overrides.
    """

    kind: str = "pcn"
    sigma: Any = 1.0
    rho: float = 0.95
    center: Any = None
    coupling: str = "reflection-max"
    kappa: float = 0.5
    hmc: HmcSettings = field(default_factory=HmcSettings)
    per_level: Mapping[int, Mapping[str, Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected {KERNEL_KINDS}")
        if self.coupling not in COUPLING_KINDS:
            raise ValueError(
                f"unknown coupling {self.coupling!r}; expected {COUPLING_KINDS}"
            )
        if self.coupling == "sync-pcn-mix":
            if self.kind != "pcn":
                raise ValueError("sync-pcn-mix coupling requires the pcn kernel")
            if not 0.0 < self.kappa < 1.0:
                raise ValueError(f"kappa must be in (0, 1), got {self.kappa}")


InitVarianceRule = Callable[[int], float]


def default_init_variance(level: int) -> float:
    """Variance of the cross-level initial offset: 2^-(2*level + 1)."""
    return 2.0 ** -(2 * level + 1)


Initializer = Callable[[int, RngStream], np.ndarray]


class CoupledKernel:
    """Per-level proposals plus the coupled step/initialization procedures
    for one target.

    ``initializer`` overrides the distribution the chains start from
    (default: the model's own ``sample_initial``).  The debiasing
    estimators stay unbiased under any initial coupling; a warm,
    pilot-informed start only shortens meeting times.
    """

    def __init__(
        self,
        target: DiscretizedTarget,
        settings: KernelSettings,
        init_variance: InitVarianceRule = default_init_variance,
        initializer: Optional[Initializer] = None,
    ):
        self.target = target
        self.settings = settings
        self.init_variance = init_variance
        self.initializer = initializer if initializer is not None else target.sample_initial
        self._proposals: dict[int, GaussianProposal] = {}
        kappa = settings.kappa
        if settings.coupling == "quad-max":
            self._pair_coupling = cp.maximal_pair
            self._quad_coupling = cp.maximal_quad
        elif settings.coupling == "reflection-max":
            self._pair_coupling = cp.reflection_maximal_pair
            self._quad_coupling = cp.reflection_maximal_quad
        elif settings.coupling == "independent-max":
            self._pair_coupling = cp.maximal_pair
            self._quad_coupling = cp.independent_max_quad
        else:  # sync-pcn-mix

            def pair_mix(p, x, w, stream):
                return cp.mixture_pair(
                    kappa, cp.synchronous_pair, cp.reflection_maximal_pair,
                    p, x, w, stream,
                )

            def quad_mix(p_f, p_c, x_f, w_f, x_c, w_c, stream):
                return cp.mixture_quad(
                    kappa, cp.synchronous_pcn_quad, cp.reflection_maximal_quad,
                    p_f, p_c, x_f, w_f, x_c, w_c, stream,
                )

            self._pair_coupling = pair_mix
            self._quad_coupling = quad_mix

    # - proposals ------------------------------------------------------------

    def proposal(self, level: int) -> GaussianProposal:
        """The Gaussian proposal applied at ``level`` (the random-walk
        fallback when the kernel is the Hamiltonian mixture)."""
        prop = self._proposals.get(level)
        if prop is None:
            s = self.settings
            if s.kind == "hmc-mix":
                prop = GaussianProposal("rwmh", self.target.dim, s.hmc.fallback_sigma)
            else:
                over = s.per_level.get(level, {})
                sigma = over.get("sigma", s.sigma)
                rho = over.get("rho", s.rho) if s.kind == "pcn" else None
                center = s.center if s.kind == "pcn" else None
                prop = GaussianProposal(s.kind, self.target.dim, sigma, rho, center)
            self._proposals[level] = prop
        return prop

    # - transitions ----------------------------------------------------------

    def pair_step(
        self,
        level: int,
        pair: PairState,
        streams: ReplicateStreams,
        ledger: Optional[CostLedger],
        step_index: int,
    ) -> None:
        """Advance a single-level pair by one coupled transition."""
        s = self.settings
        if s.kind == "hmc-mix" and streams.chain.random() < s.hmc.kappa:
            v = streams.chain.standard_normal(self.target.dim)
            log_u = _log_u(streams.chain)
            _hmc_update_pair(
                self.target, level, pair, v, log_u, s.hmc, ledger, step_index
            )
            return
        coupled_mh_step_pair(
            self.target, level, pair, self.proposal(level), self._pair_coupling,
            streams.chain, streams.coupling, ledger, step_index,
        )

    def quad_step(
        self,
        level: int,
        quad: QuadState,
        streams: ReplicateStreams,
        ledger: Optional[CostLedger],
    ) -> None:
        """Advance the 4-chain system by one coupled transition."""
        s = self.settings
        if s.kind == "hmc-mix" and streams.chain.random() < s.hmc.kappa:
            v = streams.chain.standard_normal(self.target.dim)
            log_u = _log_u(streams.chain)
            n = quad.n + 1
            _hmc_update_pair(self.target, level, quad.fine, v, log_u, s.hmc, ledger, n)
            _hmc_update_pair(
                self.target, level - 1, quad.coarse, v, log_u, s.hmc, ledger, n
            )
            quad.n = n
            return
        coupled_mh_step_quad(
            self.target, level, quad, self.proposal(level), self.proposal(level - 1),
            self._quad_coupling, streams.chain, streams.coupling, ledger,
        )

    def marginal_step(
        self,
        level: int,
        x: np.ndarray,
        log_gx: float,
        streams: ReplicateStreams,
        ledger: Optional[CostLedger],
    ) -> tuple[np.ndarray, float]:
        """One application of the *marginal* kernel at ``level``."""
        s = self.settings
        if s.kind == "hmc-mix" and streams.chain.random() < s.hmc.kappa:
            v = streams.chain.standard_normal(self.target.dim)
            log_u = _log_u(streams.chain)
            xp, lg_xp, kin = _hmc_proposal(self.target, level, x, v, s.hmc, ledger)
            d_energy = (lg_xp - kin) - (log_gx - 0.5 * float(v @ v))
            if xp is not None and log_u <= min(0.0, d_energy):
                return xp, lg_xp
            return x, log_gx
        prop = self.proposal(level)
        xp = prop.propose(x, streams.coupling)
        lg_xp = eval_log_gamma(self.target, level, xp, ledger)
        log_u = _log_u(streams.chain)
        if log_u < min(0.0, lg_xp - log_gx + prop.log_ratio_reverse(x, xp)):
            return xp, lg_xp
        return x, log_gx

    # - initial couplings ------------------------------------------------------

    def initial_pair(
        self,
        level: int,
        streams: ReplicateStreams,
        ledger: Optional[CostLedger],
    ) -> PairState:
        """Lag-one initial coupling of a single-level pair.

        Both chains start from independent initializer draws; the X-chain is
        then advanced one marginal kernel step so that at time 0 it is one
        transition ahead.
        """
        x0 = self.initializer(level, streams.init)
        w0 = self.initializer(level, streams.init)
        lg_x0 = eval_log_gamma(self.target, level, x0, ledger)
        lg_w0 = eval_log_gamma(self.target, level, w0, ledger)
        x1, lg_x1 = self.marginal_step(level, x0, lg_x0, streams, ledger)
        return PairState(x1, w0, lg_x1, lg_w0)

    def initial_quad(
        self,
        level: int,
        streams: ReplicateStreams,
        ledger: Optional[CostLedger],
    ) -> QuadState:
        """Initial coupling of the 4-chain system at (level, level-1).

        Construction (identical in law for the X-pair and the W-pair):

        1. draw the coarse coordinate from the level-(l-1) initializer;
        2. offset it by N(0, init_variance(l) * I) noise, redrawn until the
           fine level gives it positive density;
        3. advance the X-pair one step of the coupled cross-level kernel
           (realized as a quad step of two degenerate pairs), producing the
           lag-one structure in both levels at once.
        """
        if level < 1:
            raise ValueError(f"quad runs need level >= 1, got {level}")
        target = self.target
        sd = math.sqrt(self.init_variance(level))

        x_coarse = self.initializer(level - 1, streams.init)
        w_coarse = self.initializer(level - 1, streams.init)
        lg_xc = eval_log_gamma(target, level - 1, x_coarse, ledger)
        lg_wc = eval_log_gamma(target, level - 1, w_coarse, ledger)
        x_fine, lg_xf = self._perturbed(level, x_coarse, sd, streams, ledger)
        w_fine, lg_wf = self._perturbed(level, w_coarse, sd, streams, ledger)

        # Degenerate (already-equal) pairs let one quad step realize the
        # cross-level marginal kernel exactly, advancing only the X-side.
        advanced = QuadState(
            fine=PairState(x_fine, x_fine, lg_xf, lg_xf),
            coarse=PairState(x_coarse, x_coarse, lg_xc, lg_xc),
        )
        self.quad_step(level, advanced, streams, ledger)
        return QuadState(
            fine=PairState(advanced.fine.x, w_fine, advanced.fine.log_gx, lg_wf),
            coarse=PairState(
                advanced.coarse.x, w_coarse, advanced.coarse.log_gx, lg_wc
            ),
        )

    def _perturbed(
        self,
        level: int,
        base: np.ndarray,
        sd: float,
        streams: ReplicateStreams,
        ledger: Optional[CostLedger],
    ) -> tuple[np.ndarray, float]:
        for _ in range(_PERTURB_CAP):
            cand = base + sd * streams.init.standard_normal(self.target.dim)
            lg = eval_log_gamma(self.target, level, cand, ledger)
            if lg > -math.inf:
                return cand, lg
        raise InitializationError(
            f"could not perturb into the level-{level} support in {_PERTURB_CAP} draws"
        )
