"""Debiased estimators built from coupled-chain runs.

The basic building block is the time-averaged estimator of one level's
expectation from a coupled pair (X_n, W_n) with meeting time tau:

    H = (1/(m-k+1)) * sum_{n=k..m} phi(X_n)
        + sum_{n=k+1..tau-1} min{1, (n-k)/(m-k+1)} * [phi(X_n) - phi(W_n)]

which is unbiased for the level's posterior expectation of phi.  Runs are
streamed into running sums; trajectories are only stored on request (for
debugging and for the trajectory-based re-computation route, which tests
cross-check against the streamed values).

Increments xi_l at level l >= 1 come from a 4-chain run: the level-l pair's
H minus the level-(l-1) pair's H, both over the same window and stopped at
n >= max(m, tau_l, tau_{l-1}).  Two debiasing schemes remove the level-
truncation bias:

* single-term:     xi_L / P_L(L)           with L ~ P_L;
* independent-sum: xi_0 + sum_{l=1..L} xi_l / survival_L(l).

Both have expectation equal to the exact-limit posterior expectation; the
level distribution's decay eta trades variance against expected cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NonMeetingError
from .kernels import CoupledKernel, KernelSettings, PairState
from .levels import LevelDistribution
from .rng import ReplicateStreams
from .targets import CostLedger, DiscretizedTarget

DEFAULT_N_MAX = 100_000

#: phi(level, x) -> scalar or 1-d array; one entry per test function.
PhiFn = Callable[[int, np.ndarray], "np.ndarray | float"]


def _phi_vec(phi: PhiFn, level: int, x: np.ndarray) -> np.ndarray:
    return np.atleast_1d(np.asarray(phi(level, x), dtype=float))


def lift_state_fn(f: Callable[[np.ndarray], "np.ndarray | float"]) -> PhiFn:
    """Adapt a level-independent function of the state to the PhiFn signature."""

    def phi(level: int, x: np.ndarray):
        return f(x)

    return phi


@dataclass(slots=True, frozen=True)
class RunRecord:
    """Outcome of one coupled run (pair or quad).

    ``estimate`` is the streamed time-averaged estimator value: for a pair
    run the level estimate, for a quad run the increment xi_l.  ``tau_lm1``
    is None for pair runs.  ``trajectories`` (only when storing was
    requested) maps chain names to (stop_time+1, dim) arrays indexed by
    time n = 0..stop_time.
    """

    kind: str  # "pair" | "quad"
    level: int
    estimate: np.ndarray
    tau: int
    tau_lm1: Optional[int]
    stop_time: int
    cost_units: float
    trajectories: Optional[dict[str, np.ndarray]] = None

    @property
    def tau_check(self) -> int:
        """max(tau_l, tau_{l-1}) — the quantity the stopping rule uses."""
        return self.tau if self.tau_lm1 is None else max(self.tau, self.tau_lm1)


class _PairAccumulator:
    """Streams one pair's time-averaged estimator over a run."""

    __slots__ = ("level", "phi", "k", "m", "inv_span", "_avg", "_corr")

    def __init__(self, level: int, phi: PhiFn, k: int, m: int):
        self.level = level
        self.phi = phi
        self.k = k
        self.m = m
        self.inv_span = 1.0 / (m - k + 1)
        self._avg: Optional[np.ndarray] = None
        self._corr: Optional[np.ndarray] = None

    def observe(self, n: int, pair: PairState) -> None:
        """Fold in the state at time n (call once per n, in order)."""
        fx: Optional[np.ndarray] = None
        if self.k <= n <= self.m:
            fx = _phi_vec(self.phi, self.level, pair.x)
            if self._avg is None:
                self._avg = fx.copy()
            else:
                self._avg += fx
        if n > self.k and pair.met_at is None:
            if fx is None:
                fx = _phi_vec(self.phi, self.level, pair.x)
            fw = _phi_vec(self.phi, self.level, pair.w)
            weight = min(1.0, (n - self.k) * self.inv_span)
            d = weight * (fx - fw)
            if self._corr is None:
                self._corr = d
            else:
                self._corr += d

    def value(self) -> np.ndarray:
        assert self._avg is not None, "window [k, m] was never observed"
        out = self._avg * self.inv_span
        if self._corr is not None:
            out = out + self._corr
        return out


def _check_window(k: int, m: int, n_max: int) -> None:
    if not 0 <= k <= m:
        raise ValueError(f"need 0 <= k <= m, got k={k}, m={m}")
    if m >= n_max:
        raise ValueError(f"m={m} must be below the step cap n_max={n_max}")


def run_coupled_pair(
    target: DiscretizedTarget,
    kernel: CoupledKernel,
    level: int,
    phi: PhiFn,
    k: int,
    m: int,
    streams: ReplicateStreams,
    *,
    ledger: Optional[CostLedger] = None,
    n_max: int = DEFAULT_N_MAX,
    store: bool = False,
) -> RunRecord:
    """Run one coupled pair at ``level`` until it has met and n >= m."""
    _check_window(k, m, n_max)
    ledger = ledger if ledger is not None else CostLedger()
    base_units = ledger.units

    pair = kernel.initial_pair(level, streams, ledger)
    acc = _PairAccumulator(level, phi, k, m)
    acc.observe(0, pair)
    xs, ws = ([pair.x], [pair.w]) if store else (None, None)

    n = 0
    while pair.met_at is None or n < m:
        if pair.met_at is None and n >= n_max:
            raise NonMeetingError(
                f"level-{level} pair did not meet within {n_max} steps"
            )
        n += 1
        kernel.pair_step(level, pair, streams, ledger, n)
        acc.observe(n, pair)
        if store:
            xs.append(pair.x)
            ws.append(pair.w)

    traj = {"x": np.stack(xs), "w": np.stack(ws)} if store else None
    return RunRecord(
        kind="pair",
        level=level,
        estimate=acc.value(),
        tau=pair.met_at,
        tau_lm1=None,
        stop_time=n,
        cost_units=ledger.units - base_units,
        trajectories=traj,
    )


def run_coupled_quad(
    target: DiscretizedTarget,
    kernel: CoupledKernel,
    level: int,
    phi: PhiFn,
    k: int,
    m: int,
    streams: ReplicateStreams,
    *,
    ledger: Optional[CostLedger] = None,
    n_max: int = DEFAULT_N_MAX,
    store: bool = False,
) -> RunRecord:
    """Run the 4-chain system at (level, level-1); estimate the increment.

    Stops at the first n with both pairs met and n >= m.  The returned
    estimate is the level-l time-averaged estimator minus the level-(l-1)
    one, each truncated by its own meeting time.
    """
    _check_window(k, m, n_max)
    ledger = ledger if ledger is not None else CostLedger()
    base_units = ledger.units

    quad = kernel.initial_quad(level, streams, ledger)
    acc_f = _PairAccumulator(level, phi, k, m)
    acc_c = _PairAccumulator(level - 1, phi, k, m)
    acc_f.observe(0, quad.fine)
    acc_c.observe(0, quad.coarse)
    traj = (
        {"x_fine": [quad.fine.x], "w_fine": [quad.fine.w],
         "x_coarse": [quad.coarse.x], "w_coarse": [quad.coarse.w]}
        if store
        else None
    )

    while quad.fine.met_at is None or quad.coarse.met_at is None or quad.n < m:
        if quad.n >= n_max and (
            quad.fine.met_at is None or quad.coarse.met_at is None
        ):
            raise NonMeetingError(
                f"4-chain system at levels ({level},{level - 1}) did not meet "
                f"within {n_max} steps"
            )
        kernel.quad_step(level, quad, streams, ledger)
        acc_f.observe(quad.n, quad.fine)
        acc_c.observe(quad.n, quad.coarse)
        if store:
            traj["x_fine"].append(quad.fine.x)
            traj["w_fine"].append(quad.fine.w)
            traj["x_coarse"].append(quad.coarse.x)
            traj["w_coarse"].append(quad.coarse.w)

    return RunRecord(
        kind="quad",
        level=level,
        estimate=acc_f.value() - acc_c.value(),
        tau=quad.fine.met_at,
        tau_lm1=quad.coarse.met_at,
        stop_time=quad.n,
        cost_units=ledger.units - base_units,
        trajectories=(
            {name: np.stack(states) for name, states in traj.items()}
            if store
            else None
        ),
    )


# ---------------------------------------------------------------------------
# trajectory-based recomputation (debug / cross-check route)
# ---------------------------------------------------------------------------


def _h_from_arrays(
    phi: PhiFn, level: int, xs: np.ndarray, ws: np.ndarray, tau: int, k: int, m: int
) -> np.ndarray:
    span = m - k + 1
    avg = sum(_phi_vec(phi, level, xs[n]) for n in range(k, m + 1)) / span
    for n in range(k + 1, tau):
        avg = avg + min(1.0, (n - k) / span) * (
            _phi_vec(phi, level, xs[n]) - _phi_vec(phi, level, ws[n])
        )
    return avg


def estimate_fixed_level(phi: PhiFn, rec: RunRecord, k: int, m: int) -> np.ndarray:
    """Recompute a pair run's estimator from stored trajectories.

    Unlike the streamed value, this can use any window 0 <= k <= m <=
    stop_time, which makes it the reference implementation the streaming
    path is tested against.
    """
    if rec.kind != "pair":
        raise ValueError(f"expected a pair record, got kind={rec.kind!r}")
    if rec.trajectories is None:
        raise ValueError("record has no stored trajectories (run with store=True)")
    if not 0 <= k <= m <= rec.stop_time:
        raise ValueError(
            f"need 0 <= k <= m <= stop_time, got k={k}, m={m}, stop={rec.stop_time}"
        )
    return _h_from_arrays(
        phi, rec.level, rec.trajectories["x"], rec.trajectories["w"], rec.tau, k, m
    )


def estimate_increment(phi: PhiFn, rec: RunRecord, k: int, m: int) -> np.ndarray:
    """Recompute a quad run's increment from stored trajectories."""
    if rec.kind != "quad":
        raise ValueError(f"expected a quad record, got kind={rec.kind!r}")
    if rec.trajectories is None:
        raise ValueError("record has no stored trajectories (run with store=True)")
    if not 0 <= k <= m <= rec.stop_time:
        raise ValueError(
            f"need 0 <= k <= m <= stop_time, got k={k}, m={m}, stop={rec.stop_time}"
        )
    t = rec.trajectories
    h_fine = _h_from_arrays(phi, rec.level, t["x_fine"], t["w_fine"], rec.tau, k, m)
    h_coarse = _h_from_arrays(
        phi, rec.level - 1, t["x_coarse"], t["w_coarse"], rec.tau_lm1, k, m
    )
    return h_fine - h_coarse


# ---------------------------------------------------------------------------
# debiasing over random levels
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EstimatorConfig:
    """Everything one replicate of a debiased estimator needs.

    ``quad_kernel`` lets runs at levels >= 1 use a different (typically
    contracting) kernel than the level-0 pair; omitted means reuse
    ``kernel``.  Every per-level expectation is exact under any valid
    kernel, so mixing kernels across terms does not bias the estimator.

    ``initializer`` / ``init_variance`` override the chain-start
    distribution and the cross-level offset variance rule (see
    :class:`~ubmcmc.kernels.CoupledKernel`); neither affects unbiasedness.
    """

    k: int
    m: int
    eta: float
    level_cap: int = 30
    n_max: int = DEFAULT_N_MAX
    kernel: KernelSettings = KernelSettings()
    quad_kernel: Optional[KernelSettings] = None
    initializer: Optional[Callable] = None
    init_variance: Optional[Callable[[int], float]] = None

    def __post_init__(self) -> None:
        _check_window(self.k, self.m, self.n_max)

    def level_distribution(self) -> LevelDistribution:
        return LevelDistribution(eta=self.eta, cap=self.level_cap)


@dataclass(slots=True, frozen=True)
class UnbiasedEstimate:
    """One replicate of a debiased estimator.

    ``weight`` is 1/P_L(L) for the single-term scheme and the vector of
    1/survival(l), l = 1..L, for the independent-sum scheme (empty when
    L = 0).  ``meeting_times`` holds (level, tau, tau_lm1) per constituent
    run.
    """

    kind: str  # "single-term" | "independent-sum"
    value: np.ndarray
    level: int
    weight: np.ndarray
    cost_units: float
    meeting_times: tuple[tuple[int, int, Optional[int]], ...]


def _kernels_for(
    target: DiscretizedTarget, config: EstimatorConfig
) -> tuple[CoupledKernel, CoupledKernel]:
    kwargs: dict = {}
    if config.init_variance is not None:
        kwargs["init_variance"] = config.init_variance
    if config.initializer is not None:
        kwargs["initializer"] = config.initializer
    pair_kernel = CoupledKernel(target, config.kernel, **kwargs)
    quad_kernel = (
        pair_kernel
        if config.quad_kernel is None
        else CoupledKernel(target, config.quad_kernel, **kwargs)
    )
    return pair_kernel, quad_kernel


def single_term(
    phi: PhiFn,
    target: DiscretizedTarget,
    config: EstimatorConfig,
    streams: ReplicateStreams,
    *,
    ledger: Optional[CostLedger] = None,
) -> UnbiasedEstimate:
    """Draw L ~ P_L and return the level-L term reweighted by 1/P_L(L)."""
    dist = config.level_distribution()
    pair_kernel, quad_kernel = _kernels_for(target, config)
    local = CostLedger()
    level = dist.sample(streams.level_sampler)
    if level == 0:
        rec = run_coupled_pair(
            target, pair_kernel, 0, phi, config.k, config.m, streams,
            ledger=local, n_max=config.n_max,
        )
    else:
        rec = run_coupled_quad(
            target, quad_kernel, level, phi, config.k, config.m, streams,
            ledger=local, n_max=config.n_max,
        )
    if ledger is not None:
        ledger.charge(local.units)
    weight = 1.0 / dist.mass(level)
    return UnbiasedEstimate(
        kind="single-term",
        value=rec.estimate * weight,
        level=level,
        weight=np.atleast_1d(weight),
        cost_units=local.units,
        meeting_times=((level, rec.tau, rec.tau_lm1),),
    )


def independent_sum(
    phi: PhiFn,
    target: DiscretizedTarget,
    config: EstimatorConfig,
    streams: ReplicateStreams,
    *,
    ledger: Optional[CostLedger] = None,
) -> UnbiasedEstimate:
    """Draw L ~ P_L and sum survival-weighted increments up to level L.

    Always includes the level-0 pair term; the increments for l = 1..L are
    run independently (fresh chains each) and weighted by 1/survival(l).
    """
    dist = config.level_distribution()
    pair_kernel, quad_kernel = _kernels_for(target, config)
    local = CostLedger()
    level = dist.sample(streams.level_sampler)

    rec0 = run_coupled_pair(
        target, pair_kernel, 0, phi, config.k, config.m, streams,
        ledger=local, n_max=config.n_max,
    )
    value = rec0.estimate.copy()
    meetings: list[tuple[int, int, Optional[int]]] = [(0, rec0.tau, None)]
    weights = np.empty(level, dtype=float)
    for l in range(1, level + 1):
        rec = run_coupled_quad(
            target, quad_kernel, l, phi, config.k, config.m, streams,
            ledger=local, n_max=config.n_max,
        )
        w = 1.0 / dist.survival(l)
        weights[l - 1] = w
        value += w * rec.estimate
        meetings.append((l, rec.tau, rec.tau_lm1))

    if ledger is not None:
        ledger.charge(local.units)
    return UnbiasedEstimate(
        kind="independent-sum",
        value=value,
        level=level,
        weight=weights,
        cost_units=local.units,
        meeting_times=tuple(meetings),
    )


def average_replicates(
    estimates: list[UnbiasedEstimate],
) -> tuple[np.ndarray, Optional[np.ndarray], float]:
    """Mean, standard error, and summed cost over replicates.

    The standard error (sample std with ddof=1, divided by sqrt(N)) is None
    when there is a single replicate.
    """
    if not estimates:
        raise ValueError("cannot average zero replicates")
    values = np.stack([e.value for e in estimates])
    total_cost = float(sum(e.cost_units for e in estimates))
    mean = values.mean(axis=0)
    if len(estimates) == 1:
        return mean, None, total_cost
    se = values.std(axis=0, ddof=1) / math.sqrt(len(estimates))
    return mean, se, total_cost
