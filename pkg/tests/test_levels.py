import math

import numpy as np
import pytest

from helpers import ScriptStream
from ubmcmc.errors import LevelCapExceededError, LevelTooLargeError
from ubmcmc.levels import LevelDistribution, LevelSchedule


class TestLevelSchedule:
    def test_delta_halves_exactly(self):
        sched = LevelSchedule(base=2 * math.pi, l0=5)
        assert sched.delta(0) == 2 * math.pi / 32
        for level in range(12):
            assert sched.delta(level + 1) == sched.delta(level) / 2

    def test_cost_units_is_inverse_width_power(self):
        sched = LevelSchedule(base=1.0)
        assert sched.cost_units(3, 1.0) == 8.0
        assert sched.cost_units(2, 3.0) == 64.0

    def test_delta_underflow_raises(self):
        sched = LevelSchedule(base=1.0)
        assert sched.delta(1074) > 0.0
        with pytest.raises(LevelTooLargeError):
            sched.delta(1075)

    def test_negative_level_rejected(self):
        with pytest.raises(ValueError):
            LevelSchedule(base=1.0).delta(-1)

    @pytest.mark.parametrize("base,l0", [(0.0, 0), (-1.0, 0), (math.inf, 0), (1.0, -1)])
    def test_bad_schedule_rejected(self, base, l0):
        with pytest.raises(ValueError):
            LevelSchedule(base=base, l0=l0)


class TestLevelDistribution:
    def test_mass_formula(self):
        dist = LevelDistribution(eta=2.0)
        r = 0.25
        for level in range(6):
            assert dist.mass(level) == pytest.approx((1 - r) * r**level, rel=1e-15)

    def test_survival_is_mass_tail(self):
        dist = LevelDistribution(eta=2.5)
        for level in range(8):
            tail = sum(dist.mass(k) for k in range(level, 200))
            assert dist.survival(level) == pytest.approx(tail, rel=1e-12)

    def test_sample_inverts_cdf(self):
        # u = 0.6 under eta = 1/4: log(0.6)/log(2^-0.25) = 2.948 -> level 2.
        dist = LevelDistribution(eta=0.25)
        assert dist.sample(ScriptStream(uniforms=[0.6])) == 2

    def test_sample_zero_is_modal(self):
        dist = LevelDistribution(eta=2.0)
        assert dist.sample(ScriptStream(uniforms=[0.9])) == 0

    def test_sample_matches_mass_empirically(self):
        dist = LevelDistribution(eta=2.0)
        stream = np.random.default_rng(3)
        draws = np.array([dist.sample(stream) for _ in range(20_000)])
        for level in range(3):
            freq = np.mean(draws == level)
            assert freq == pytest.approx(dist.mass(level), abs=0.01)

    def test_cap_exceeded_raises(self):
        dist = LevelDistribution(eta=0.25, cap=2)
        with pytest.raises(LevelCapExceededError):
            dist.sample(ScriptStream(uniforms=[0.1]))

    @pytest.mark.parametrize("eta,cap", [(0.0, 30), (-1.0, 30), (math.nan, 30), (1.0, -1)])
    def test_bad_distribution_rejected(self, eta, cap):
        with pytest.raises(ValueError):
            LevelDistribution(eta=eta, cap=cap)
