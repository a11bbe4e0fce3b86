import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from helpers import GaussTarget, ScriptStream
from ubmcmc.errors import IntegratorError, InvalidCurrentStateError
from ubmcmc.kernels import (
    CoupledKernel,
    HmcSettings,
    KernelSettings,
    PairState,
    QuadState,
    default_init_variance,
    leapfrog,
    mh_accept,
)
from ubmcmc.rng import replicate_streams
from ubmcmc.targets import CostLedger


class TestMhAccept:
    """Standard normal target, x=0 -> xp=1, symmetric proposal: the log
    acceptance ratio is exactly -1/2, so accept iff u < e^(-1/2) = 0.6065."""

    target = GaussTarget(dim=1)
    x = np.array([0.0])
    xp = np.array([1.0])

    def test_accepts_below_threshold(self):
        out = mh_accept(self.target, 0, self.x, self.xp, 0.0, 0.0, u=0.60)
        assert out is self.xp

    def test_rejects_above_threshold(self):
        out = mh_accept(self.target, 0, self.x, self.xp, 0.0, 0.0, u=0.61)
        assert out is self.x

    def test_uphill_move_always_accepted(self):
        out = mh_accept(self.target, 0, self.xp, self.x, 0.0, 0.0, u=0.999999)
        assert out is self.x

    def test_proposal_correction_enters_ratio(self):
        # A backward/forward log-ratio of +1 turns the -1/2 threshold into
        # +1/2 >= 0, so even u close to 1 accepts.
        out = mh_accept(self.target, 0, self.x, self.xp, -1.0, 0.0, u=0.99)
        assert out is self.xp

    def test_charges_two_evaluations(self):
        ledger = CostLedger()
        mh_accept(self.target, 3, self.x, self.xp, 0.0, 0.0, 0.5, ledger)
        assert ledger.units == 16.0

    def test_zero_density_current_state_is_an_error(self):
        class HalfLine(GaussTarget):
            def log_gamma(self, level, x):
                return -np.inf if x[0] <= 0 else -0.5 * float(x @ x)

        with pytest.raises(InvalidCurrentStateError):
            mh_accept(HalfLine(dim=1), 0, np.array([-1.0]), self.xp, 0.0, 0.0, 0.5)


class TestLeapfrog:
    def test_single_step_hand_case(self):
        # Harmonic oscillator from (x, v) = (1, 0), one step of size 0.1:
        # v_half = -0.05, x1 = 0.995, v1 = -0.05 - 0.05*0.995 = -0.09975.
        target = GaussTarget(dim=1)
        x1, v1 = leapfrog(target, 0, np.array([1.0]), np.array([0.0]), 0.1, 1)
        assert_allclose(x1, [0.995], rtol=1e-15)
        assert_allclose(v1, [-0.09975], rtol=1e-12)

    def test_time_reversibility(self):
        target = GaussTarget(dim=3)
        rng = np.random.default_rng(8)
        x0 = rng.standard_normal(3)
        v0 = rng.standard_normal(3)
        x1, v1 = leapfrog(target, 0, x0, v0, 0.05, 7)
        xback, vback = leapfrog(target, 0, x1, -v1, 0.05, 7)
        assert_allclose(xback, x0, atol=1e-12)
        assert_allclose(vback, -v0, atol=1e-12)

    def test_energy_error_scales_as_epsilon_squared(self):
        target = GaussTarget(dim=2)
        rng = np.random.default_rng(3)
        starts = [(rng.standard_normal(2), rng.standard_normal(2)) for _ in range(30)]
        eps_grid = [0.1, 0.05, 0.025, 0.0125]
        errors = []
        for eps in eps_grid:
            n_steps = round(1.0 / eps)
            total = 0.0
            for x0, v0 in starts:
                h0 = 0.5 * float(x0 @ x0) + 0.5 * float(v0 @ v0)
                x1, v1 = leapfrog(target, 0, x0, v0, eps, n_steps)
                h1 = 0.5 * float(x1 @ x1) + 0.5 * float(v1 @ v1)
                total += abs(h1 - h0)
            errors.append(total / len(starts))
        slope = np.polyfit(np.log2(eps_grid), np.log2(errors), 1)[0]
        assert 1.8 <= slope <= 2.2

    def test_charges_gradient_evaluations(self):
        target = GaussTarget(dim=1)
        ledger = CostLedger()
        leapfrog(target, 2, np.ones(1), np.zeros(1), 0.1, 5, ledger)
        # (n_steps + 1) gradient calls at 2^2 units each
        assert ledger.units == 24.0

    def test_integrator_failure_propagates(self):
        target = GaussTarget(dim=1, grad_raises=True)
        with pytest.raises(IntegratorError):
            leapfrog(target, 0, np.ones(1), np.zeros(1), 0.1, 3)


class TestSettingsValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(epsilon=0.0),
            dict(epsilon=-0.1),
            dict(n_steps=0),
            dict(kappa=0.0),
            dict(kappa=1.0),
            dict(fallback_sigma=0.0),
        ],
    )
    def test_bad_hmc_settings(self, kwargs):
        with pytest.raises(ValueError):
            HmcSettings(**kwargs)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(kind="gibbs"),
            dict(coupling="bogus"),
            dict(kind="rwmh", coupling="sync-pcn-mix"),
            dict(kind="pcn", coupling="sync-pcn-mix", kappa=1.0),
        ],
    )
    def test_bad_kernel_settings(self, kwargs):
        with pytest.raises(ValueError):
            KernelSettings(**kwargs)


def test_default_init_variance_rule():
    assert default_init_variance(0) == 0.5
    assert default_init_variance(1) == 0.125
    assert default_init_variance(3) == 2.0**-7


class TestProposalSelection:
    def test_proposals_are_cached_per_level(self):
        kernel = CoupledKernel(GaussTarget(dim=2), KernelSettings(kind="pcn"))
        assert kernel.proposal(1) is kernel.proposal(1)
        assert kernel.proposal(1) is not kernel.proposal(2)

    def test_per_level_overrides(self):
        settings = KernelSettings(
            kind="pcn", sigma=2.0, rho=0.95, per_level={2: {"sigma": 9.0, "rho": 0.5}}
        )
        kernel = CoupledKernel(GaussTarget(dim=1), settings)
        base = kernel.proposal(1)
        over = kernel.proposal(2)
        assert base.scale_noise(np.ones(1))[0] == pytest.approx(
            2.0 * math.sqrt(1 - 0.95**2)
        )
        assert over.rho == 0.5
        assert over.scale_noise(np.ones(1))[0] == pytest.approx(
            9.0 * math.sqrt(1 - 0.5**2)
        )

    def test_hmc_mix_uses_fallback_random_walk(self):
        settings = KernelSettings(
            kind="hmc-mix", coupling="reflection-max", hmc=HmcSettings(fallback_sigma=1e-3)
        )
        kernel = CoupledKernel(GaussTarget(dim=2), settings)
        prop = kernel.proposal(4)
        assert prop.kind == "rwmh"
        assert prop.scale_noise(np.ones(2))[0] == pytest.approx(1e-3)


def _start_pair(kernel, level, streams, ledger=None):
    return kernel.initial_pair(level, streams, ledger)


class TestPairDynamics:
    def test_marginal_chain_has_target_moments(self):
        target = GaussTarget(dim=1)
        kernel = CoupledKernel(target, KernelSettings(kind="rwmh", sigma=2.38))
        streams = replicate_streams(17, 0)
        x = np.zeros(1)
        lg = target.log_gamma(0, x)
        samples = np.empty(6000)
        for i in range(6000):
            x, lg = kernel.marginal_step(0, x, lg, streams, None)
            samples[i] = x[0]
        assert abs(samples.mean()) < 0.15
        assert abs(samples.var() - 1.0) < 0.15

    def test_pair_meets_and_stays_met(self):
        target = GaussTarget(dim=2)
        kernel = CoupledKernel(
            target, KernelSettings(kind="rwmh", sigma=1.2, coupling="reflection-max")
        )
        streams = replicate_streams(5, 0)
        pair = _start_pair(kernel, 0, streams)
        assert pair.met_at is None
        step = 0
        while not pair.met and step < 500:
            step += 1
            kernel.pair_step(0, pair, streams, None, step)
        assert pair.met, "reflection-coupled random walk failed to meet in 500 steps"
        assert 1 <= pair.met_at <= step
        for extra in range(step + 1, step + 51):
            kernel.pair_step(0, pair, streams, None, extra)
            assert pair.x.tobytes() == pair.w.tobytes()
            assert pair.met_at <= step

    def test_hmc_mixture_pair_meets(self):
        target = GaussTarget(dim=2)
        settings = KernelSettings(
            kind="hmc-mix",
            coupling="reflection-max",
            hmc=HmcSettings(epsilon=0.3, n_steps=3, kappa=0.9, fallback_sigma=1e-3),
        )
        kernel = CoupledKernel(target, settings)
        streams = replicate_streams(23, 0)
        pair = _start_pair(kernel, 0, streams)
        step = 0
        while not pair.met and step < 600:
            step += 1
            kernel.pair_step(0, pair, streams, None, step)
        assert pair.met, "hmc mixture kernel failed to meet in 600 steps"

    def test_hmc_rejects_on_integrator_failure(self):
        target = GaussTarget(dim=1, grad_raises=True)
        settings = KernelSettings(
            kind="hmc-mix", coupling="reflection-max",
            hmc=HmcSettings(kappa=0.999999),
        )
        kernel = CoupledKernel(target, settings)
        streams = replicate_streams(0, 0)
        x = np.array([0.7])
        lg = target.log_gamma(0, x)
        out, lg_out = kernel.marginal_step(0, x, lg, streams, None)
        assert out is x
        assert lg_out == lg


class TestInitialCouplings:
    def test_initial_pair_structure(self):
        target = GaussTarget(dim=2)
        kernel = CoupledKernel(target, KernelSettings(kind="rwmh", sigma=1.0))
        ledger = CostLedger()
        pair = kernel.initial_pair(0, replicate_streams(1, 0), ledger)
        assert pair.met_at is None
        assert pair.log_gx == pytest.approx(target.log_gamma(0, pair.x))
        assert pair.log_gw == pytest.approx(target.log_gamma(0, pair.w))
        assert ledger.units > 0

    def test_initial_quad_structure(self):
        target = GaussTarget(dim=2)
        kernel = CoupledKernel(
            target, KernelSettings(kind="rwmh", sigma=0.8, coupling="reflection-max")
        )
        level = 5
        quad = kernel.initial_quad(level, replicate_streams(2, 0), None)
        assert quad.n == 0
        for pair, lev in ((quad.fine, level), (quad.coarse, level - 1)):
            assert pair.met_at is None
            assert pair.log_gx == pytest.approx(target.log_gamma(lev, pair.x))
            assert pair.log_gw == pytest.approx(target.log_gamma(lev, pair.w))
        # the W-side fine state is the coarse state plus a small offset
        sd = math.sqrt(default_init_variance(level))
        gap = np.linalg.norm(quad.fine.w - quad.coarse.w)
        assert gap < 8 * sd * math.sqrt(2)

    def test_initial_quad_requires_level_one(self):
        kernel = CoupledKernel(GaussTarget(dim=1), KernelSettings(kind="rwmh", sigma=1.0))
        with pytest.raises(ValueError):
            kernel.initial_quad(0, replicate_streams(3, 0), None)

    def test_custom_initializer_is_used(self):
        target = GaussTarget(dim=2)
        marker = np.array([4.0, -4.0])
        kernel = CoupledKernel(
            target,
            KernelSettings(kind="rwmh", sigma=1e-8),
            initializer=lambda level, stream: marker.copy(),
        )
        pair = kernel.initial_pair(0, replicate_streams(4, 0), None)
        # W never moves at initialization; it must be the marker itself.
        assert_allclose(pair.w, marker)
        assert_allclose(pair.x, marker, atol=1e-6)


class TestQuadDynamics:
    def test_quad_meets_both_levels_and_stays_met(self):
        target = GaussTarget(dim=2)
        kernel = CoupledKernel(
            target, KernelSettings(kind="rwmh", sigma=1.2, coupling="reflection-max")
        )
        streams = replicate_streams(9, 0)
        quad = kernel.initial_quad(3, streams, None)
        while not (quad.fine.met and quad.coarse.met) and quad.n < 1000:
            kernel.quad_step(3, quad, streams, None)
        assert quad.fine.met and quad.coarse.met
        met_n = quad.n
        for _ in range(30):
            kernel.quad_step(3, quad, streams, None)
            assert quad.fine.x.tobytes() == quad.fine.w.tobytes()
            assert quad.coarse.x.tobytes() == quad.coarse.w.tobytes()
        assert quad.n == met_n + 30
