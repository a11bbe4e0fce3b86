import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import solve_ivp

import ubmcmc.models.sirx as sirx
from ubmcmc.errors import ConfigError, IntegratorError
from ubmcmc.kernels import mh_accept
from ubmcmc.models.sirx import (
    A_RATE,
    B_RATE,
    DAY_OFFSET,
    N_POP,
    P_OBS,
    PRIOR_HIGH,
    PRIOR_LOW,
    SirxModel,
    make_sirx_data,
)

X_REF = np.array([0.002, 0.3, 15.0])


@pytest.fixture(scope="module")
def reference_model():
    return SirxModel(np.ones(P_OBS))


class TestIntegration:
    def test_conservation_along_trajectory(self, reference_model):
        _, times, states = reference_model.integrate(
            0, X_REF, collect_trajectory=True
        )
        totals = states[:, :4].sum(axis=1)
        assert np.abs(totals - 1.0).max() < 1e-12
        assert states[:, :4].min() > -1e-9
        assert states[:, :4].max() < 1.0 + 1e-9

    def test_monotone_compartments(self, reference_model):
        _, times, states = reference_model.integrate(
            0, X_REF, collect_trajectory=True
        )
        # quarantined fraction never decreases; susceptibles never increase
        assert np.all(np.diff(states[:, 3]) >= -1e-15)
        assert np.all(np.diff(states[:, 0]) <= 1e-15)
        # cumulative infections h is non-decreasing as well
        assert np.all(np.diff(states[:, 4]) >= -1e-15)

    @pytest.mark.parametrize("level,tol", [(0, 1e-8), (2, 1e-10)])
    def test_day_marks_match_adaptive_reference(self, reference_model, level, tol):
        """High-accuracy adaptive integration as an independent oracle."""
        x1, x2, x3 = X_REF

        def rhs(t, u):
            s, i, r, xi, h = u
            inc = A_RATE * s * i
            return [
                -inc - x1 * s,
                inc - (B_RATE + x1 + x2) * i,
                B_RATE * i + x1 * s,
                (x1 + x2) * i,
                inc,
            ]

        days = np.arange(DAY_OFFSET, DAY_OFFSET + P_OBS + 1, dtype=float)
        sol = solve_ivp(
            rhs,
            (-x3, days[-1]),
            [1.0 - 1.0 / N_POP, 1.0 / N_POP, 0.0, 0.0, 0.0],
            method="DOP853",
            rtol=1e-13,
            atol=1e-16,
            t_eval=days,
        )
        assert sol.success
        g_ref = np.diff(sol.y[4])
        g = reference_model.integrate(level, X_REF)
        assert np.abs(g - g_ref).max() < tol

    def test_counts_converge_at_fourth_order(self, reference_model):
        forwards = [reference_model.integrate(level, X_REF) for level in range(5)]
        sq_diffs = [
            float(np.square(b - a).sum()) for a, b in zip(forwards, forwards[1:])
        ]
        slope = np.polyfit(np.arange(1, 5), np.log2(sq_diffs), 1)[0]
        assert -9.5 <= slope <= -6.5

    def test_zero_contact_rate_gives_exponential_decay(self, monkeypatch):
        # With a = 0 and x1 = x2 = 0 the infected fraction decays as
        # exp(-b t) and susceptibles are exactly constant.
        monkeypatch.setattr(sirx, "A_RATE", 0.0)
        model = SirxModel(np.ones(P_OBS))
        _, times, states = model.integrate(
            0, np.array([0.0, 0.0, 15.0]), collect_trajectory=True
        )
        i0 = 1.0 / N_POP
        expected = i0 * np.exp(-B_RATE * (times + 15.0))
        assert_allclose(states[:, 1], expected, rtol=1e-8)
        assert np.all(states[:, 0] == states[0, 0])

    def test_simplex_guard_trips_when_tightened(self, reference_model, monkeypatch):
        monkeypatch.setattr(sirx, "_STATE_TOL", 1e-18)
        with pytest.raises(IntegratorError):
            reference_model.integrate(0, X_REF)

    def test_forward_memo_returns_cached_array(self, reference_model):
        g1 = reference_model.forward(1, X_REF)
        g2 = reference_model.forward(1, X_REF)
        assert g2 is g1
        rng = np.random.default_rng(17)
        for _ in range(20):
            x = rng.uniform(PRIOR_LOW, PRIOR_HIGH)
            reference_model.forward(0, x)
        assert len(reference_model._g_memo) <= 16


class TestDensity:
    @pytest.fixture(scope="class")
    def model(self, sirx_data):
        return SirxModel(sirx_data, (1.0, 1.0))

    def test_support_requires_counts_above_observations(self, model):
        g = model.forward(0, X_REF)
        assert model.log_gamma(0, X_REF) > -math.inf
        # inflate one observation above its modeled count: zero density
        y_bad = model.y.copy()
        y_bad[7] = g[7] * 1.01
        bad = SirxModel(y_bad, (1.0, 1.0))
        assert bad.log_gamma(0, X_REF) == -math.inf

    def test_outside_prior_box_is_zero_density(self, model):
        outside = np.array([0.004, 0.3, 15.0])
        assert not model.in_support(outside)
        assert model.log_gamma(0, outside) == -math.inf

    def test_zero_density_proposal_never_accepted(self, model):
        y_bad = model.y.copy()
        y_bad[0] = model.forward(0, X_REF)[0] * 1.5
        bad = SirxModel(y_bad, (1.0, 1.0))
        good_state = bad.sample_initial(0, np.random.default_rng(18))
        for u in (1e-300, 0.5, 1.0 - 1e-12):
            out = mh_accept(bad, 0, good_state, X_REF, 0.0, 0.0, u)
            assert out is good_state

    def test_log_gamma_matches_direct_formula(self, model):
        from scipy.special import gammaln

        t1, t2 = 1.3, 0.8
        other = model.with_theta((t1, t2))
        log_l = np.log(other.forward(0, X_REF)) - np.log(other.y)
        direct = float(
            np.sum(
                -gammaln(t1)
                - t1 * math.log(t2)
                + (t1 - 1.0) * np.log(log_l)
                - log_l / t2
            )
        )
        assert other.log_gamma(0, X_REF) == pytest.approx(direct, rel=1e-12)

    def test_score_matches_central_differences(self, model):
        stream = np.random.default_rng(19)
        theta = np.array([1.0, 1.0])
        for _ in range(100):
            x = model.sample_initial(0, stream)
            score = model.score(0, x)
            for j in range(2):
                h = 1e-6 * theta[j]
                up = theta.copy()
                up[j] += h
                down = theta.copy()
                down[j] -= h
                fd = (
                    model.with_theta(up).log_gamma(0, x)
                    - model.with_theta(down).log_gamma(0, x)
                ) / (2.0 * h)
                assert score[j] == pytest.approx(fd, rel=1e-5)

    def test_score_outside_support_raises(self, model):
        with pytest.raises(ValueError):
            model.score(0, np.array([0.004, 0.3, 15.0]))

    def test_sample_initial_lands_in_support(self, model):
        stream = np.random.default_rng(20)
        for _ in range(50):
            x = model.sample_initial(0, stream)
            assert model.in_support(x)
            assert model.log_gamma(0, x) > -math.inf


def test_make_sirx_data_damps_modeled_counts():
    y1 = make_sirx_data(np.random.default_rng(404))
    y2 = make_sirx_data(np.random.default_rng(404))
    assert_allclose(y1, y2)
    assert y1.shape == (P_OBS,)
    g = SirxModel(np.ones(P_OBS)).integrate(5, X_REF)
    assert np.all(y1 < g)
    assert np.all(y1 > 0)


def test_model_validation():
    with pytest.raises(ConfigError):
        SirxModel(np.ones(3))
    with pytest.raises(ConfigError):
        SirxModel(np.zeros(P_OBS))
    with pytest.raises(ConfigError):
        SirxModel(np.ones(P_OBS), (1.0, -1.0))
    with pytest.raises(ConfigError):
        SirxModel(np.ones(P_OBS), (1.0, 1.0, 1.0))
