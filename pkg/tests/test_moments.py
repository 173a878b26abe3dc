import math
from dataclasses import astuple

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import expm_moments
from gridfreq.errors import DegenerateEigenvalues, EmptySeries, NonPositiveInput, StepTooLarge
from gridfreq.moments import (
    SIGMA_FLOOR,
    MomentState,
    SystemParams,
    analytic_state,
    eigenvalues,
    gaussian_nll,
    inertia_constant,
    marginal,
    mean_omega,
    moment_ode_rhs,
    nll,
    omega_basis,
    per_unit_gains,
    rescale_physical,
    solve_numeric,
    var_omega,
)

ZERO = MomentState()
REF = SystemParams(100.0, 300.0, 0.007)

analytic_params = st.builds(
    lambda tau, ratio, D, q, r: SystemParams(tau, tau * ratio, D, q, r),
    st.floats(20.0, 300.0),
    st.floats(2.05, 50.0),
    st.floats(1e-3, 0.02),
    st.floats(-5e-3, 5e-3),
    st.floats(-1e-5, 1e-5),
)
initial_states = st.builds(
    lambda mt, mw, st_, sw, rho: MomentState(mt, mw, st_**2, sw**2, rho * st_ * sw),
    st.floats(-5.0, 5.0),
    st.floats(-0.1, 0.1),
    st.floats(1e-3, 3.0),
    st.floats(1e-3, 0.1),
    st.floats(-0.99, 0.99),
)


class TestEigenvalues:
    def test_reference_values(self):
        ev = eigenvalues(REF)
        assert ev.lambda_d1 == pytest.approx(-0.0087268, abs=5e-8)
        assert ev.lambda_d2 == pytest.approx(-0.0012732, abs=5e-8)
        assert ev.lambda_s1 == pytest.approx(-0.01, rel=1e-14)
        assert ev.lambda_s2 == pytest.approx(-0.0174536, abs=5e-8)
        assert ev.lambda_s3 == pytest.approx(-0.0025464, abs=5e-8)

    def test_degenerate_boundary(self):
        with pytest.raises(DegenerateEigenvalues):
            eigenvalues(SystemParams(0.5, 1.0, 0.007))

    def test_oscillatory_rejected(self):
        with pytest.raises(DegenerateEigenvalues):
            mean_omega(SystemParams(120.0, 183.0, 0.007), ZERO, 10.0)

    @given(analytic_params)
    def test_sum_and_product(self, p):
        ev = eigenvalues(p)
        assert ev.lambda_d1 + ev.lambda_d2 == pytest.approx(-1.0 / p.tau, rel=1e-12)
        assert ev.lambda_d1 * ev.lambda_d2 == pytest.approx(p.kappa**-2, rel=1e-12)
        assert max(astuple(ev)) < 0

    def test_nonpositive_params(self):
        with pytest.raises(NonPositiveInput):
            SystemParams(-1.0, 300.0, 0.007)


class TestMeanAndVariance:
    def test_unforced_equilibrium(self):
        t = np.linspace(0, 900, 91)
        assert np.all(mean_omega(REF, ZERO, t) == 0.0)

    def test_step_response_at_10s(self):
        p = SystemParams(100.0, 300.0, 0.007, q=0.0042)
        # frozen from an expm oracle of the augmented moment system
        assert mean_omega(p, ZERO, 10.0) == pytest.approx(0.0399608845351272, rel=1e-12)
        assert mean_omega(p, ZERO, 10.0) == pytest.approx(0.0042 * 100 * (1 - math.exp(-0.1)), rel=0.01)

    def test_integral_control_restores(self):
        p = SystemParams(100.0, 300.0, 0.007, q=0.0042)
        assert abs(mean_omega(p, ZERO, 1e5)) < 1e-6

    def test_no_noise_no_spread(self):
        p = SystemParams(100.0, 300.0, 0.0)
        assert np.all(var_omega(p, ZERO, np.linspace(0, 900, 50)) == 0.0)

    def test_ou_limit(self):
        p = SystemParams(100.0, 1e5, 0.007)
        assert var_omega(p, ZERO, 1e4) == pytest.approx(0.007**2 * 100 / 2, rel=0.01)

    def test_variance_golden_900(self):
        # frozen RK4 (dt=1e-3) / expm oracle value
        assert var_omega(REF, ZERO, 900.0) == pytest.approx(0.0023934832269502, rel=1e-10)

    def test_marginal_golden_450(self):
        p = SystemParams(100.0, 300.0, 0.007, 0.0042, 9e-6)
        init = MomentState(2.0, 0.03, 4.0, 1e-3, 0.01)
        m = marginal(p, init, 450.0)
        assert m.mu == pytest.approx(0.580788515741250, rel=1e-10)
        assert m.sigma == pytest.approx(0.0479681866663300, rel=1e-10)

    def test_marginal_floor(self):
        m = marginal(SystemParams(100.0, 300.0, 0.0), ZERO, 5.0)
        assert m.mu == 0.0 and m.sigma == SIGMA_FLOOR

    def test_stationary_variance_independent_of_kappa(self):
        for kappa in (250.0, 500.0, 5000.0):
            p = SystemParams(100.0, kappa, 0.007)
            t_long = 40.0 / abs(eigenvalues(p).lambda_s3)
            assert var_omega(p, ZERO, t_long) == pytest.approx(0.007**2 * 50, rel=1e-9)

    @given(analytic_params, initial_states, st.floats(0.0, 900.0))
    def test_matches_expm_oracle(self, p, init, t):
        ref = expm_moments(p.tau, p.kappa, p.D, p.q, p.r, init.as_array(), t)
        scale_m = max(abs(ref[1]), 1e-3)
        assert mean_omega(p, init, t) == pytest.approx(ref[1], abs=1e-9 * scale_m)
        assert var_omega(p, init, t) == pytest.approx(ref[3], rel=1e-8, abs=1e-14)
        full = analytic_state(p, init, t)[0]
        np.testing.assert_allclose(full, ref, rtol=1e-7, atol=1e-9 * np.max(np.abs(ref)))

    @given(analytic_params, initial_states)
    def test_covariance_bounds_along_path(self, p, init):
        y = analytic_state(p, init, np.linspace(0, 900, 61))
        assert np.all(y[:, 2] >= -1e-12) and np.all(y[:, 3] >= -1e-15)
        assert np.all(y[:, 4] ** 2 <= y[:, 2] * y[:, 3] * (1 + 1e-9) + 1e-18)


class TestPrintedFormsAgree:
    """The s-form basis equals the textbook kappa-form, with one coefficient corrected."""

    @staticmethod
    def kappa_form_var(tau, kappa, var_t0, cov0, var_w0, D, t):
        ev = eigenvalues(SystemParams(tau, kappa, D))
        l1, l2, l3 = ev.lambda_s1, ev.lambda_s2, ev.lambda_s3
        e1, e2, e3 = (math.exp(l * t) for l in (l1, l2, l3))
        k2 = kappa**2
        hom = (
            var_t0 * (e2 + e3 - 2 * e1) * tau**2 / k2
            + cov0 * (
                -2 * tau * e1
                + 8 * tau**2 / k2 * (l2 * k2 / (4 * tau) + 1) / (l2 - l3) * e2
                + 8 * tau**2 / k2 * (l3 * k2 / (4 * tau) + 1) / (l3 - l2) * e3
            )
            # leading coefficient -2 tau**2 (printed as -2 tau; fails the t=0 check)
            + var_w0 * (
                -2 * tau**2 * e1
                + (2 * l2 * tau**2 - l2 * k2 - 2 * tau) / (l3 - l2) * e2
                + (2 * l3 * tau**2 - l3 * k2 - 2 * tau) / (l2 - l3) * e3
            )
        ) / (k2 - 4 * tau**2)
        inh = D**2 / (k2 - 4 * tau**2) * (
            2 * tau**2 / l1 * (1 - e1)
            + (2 * tau / l2 - 2 * tau**2 + k2) / (l3 - l2) * (1 - e2)
            + (2 * tau / l3 - 2 * tau**2 + k2) / (l2 - l3) * (1 - e3)
        )
        return hom + inh

    @pytest.mark.parametrize("tau,kappa", [(100.0, 300.0), (50.0, 1000.0), (120.0, 250.0)])
    def test_variance(self, tau, kappa):
        for t in (0.0, 1.0, 60.0, 450.0, 900.0):
            ref = expm_moments(tau, kappa, 0.007, 0, 0, [0, 0, 2.0, 1e-3, 0.02], t)[3]
            got = self.kappa_form_var(tau, kappa, 2.0, 0.02, 1e-3, 0.007, t)
            assert got == pytest.approx(ref, rel=1e-9)
            b = omega_basis(tau, kappa, t)
            assert b.v_theta * 2.0 + b.v_cov * 0.02 + b.v_omega * 1e-3 + b.v_noise * 0.007**2 == pytest.approx(ref, rel=1e-9)

    def test_initial_conditions_reproduced(self):
        b = omega_basis(100.0, 300.0, 0.0)
        assert b.m_omega == pytest.approx(1.0) and b.v_omega == pytest.approx(1.0)
        for v in (b.m_theta, b.m_q, b.m_r, b.v_theta, b.v_cov, b.v_noise):
            assert v == pytest.approx(0.0, abs=1e-15)


class TestOde:
    def test_fixed_point(self):
        d = moment_ode_rhs(ZERO, SystemParams(100.0, 300.0, 0.0), 0.0)
        assert d.as_array().tolist() == [0.0] * 5

    def test_noise_injection(self):
        d = moment_ode_rhs(ZERO, REF, 0.0)
        np.testing.assert_array_equal(d.as_array(), [0, 0, 0, 0.007**2, 0])

    def test_secondary_control_term(self):
        p = SystemParams(100.0, 300.0, 0.007, q=0.0042)
        d = moment_ode_rhs(MomentState(mu_theta=1.0), p, 0.0)
        assert d.mu_omega == pytest.approx(0.0042 - 1 / 300.0**2, rel=1e-14)

    @given(analytic_params, initial_states)
    def test_residual(self, p, init):
        # central differences of the closed form satisfy the ODE
        h = 1e-3
        for t in np.linspace(5.0, 895.0, 7):
            y_p, y_m, y0 = analytic_state(p, init, [t + h, t - h, t])
            deriv = (y_p - y_m) / (2 * h)
            rhs = moment_ode_rhs(MomentState.from_array(y0), p, t).as_array()
            mt, mw, vt, vw, c = y0
            ik2 = p.kappa**-2
            # magnitude of the individual right-hand-side terms
            scale = np.array([
                abs(mw),
                abs(p.q) + abs(p.r * t) + abs(mw) / p.tau + abs(mt) * ik2,
                2 * abs(c),
                2 * vw / p.tau + 2 * abs(c) * ik2 + p.D**2,
                vw + abs(c) / p.tau + vt * ik2,
            ]) + np.abs(y0) / p.tau + 1e-300
            assert np.all(np.abs(deriv - rhs) / scale < 1e-6)

    def test_rk4_matches_closed_form(self):
        p = SystemParams(100.0, 300.0, 0.007, 0.0042, 9e-6)
        init = MomentState(2.0, 0.03, 4.0, 1e-3, 0.01)
        grid = np.linspace(0, 900, 91)
        num = solve_numeric(p, init, grid, max_step=1e-1)
        ana = analytic_state(p, init, grid)
        np.testing.assert_allclose(num[:, 1], ana[:, 1], rtol=0, atol=1e-10 * np.abs(ana[:, 1]).max())
        np.testing.assert_allclose(num[:, 3], ana[:, 3], rtol=1e-9)

    def test_oscillatory_reference_is_bounded(self):
        p = SystemParams(120.0, 183.0, 0.007, 0.0042, -2 * 0.0042 / 900)
        y = solve_numeric(p, ZERO, np.linspace(0, 900, 901))
        assert np.all(np.isfinite(y)) and np.abs(y[:, 1]).max() < 1.0

    def test_empty_grid_returns_init(self):
        init = MomentState(1, 2, 3, 4, 0.5)
        np.testing.assert_array_equal(solve_numeric(REF, init, []), [init.as_array()])

    def test_step_guard(self):
        with pytest.raises(StepTooLarge):
            solve_numeric(REF, ZERO, [0.0, 20.0])


class TestNll:
    def test_standard_normal(self):
        assert gaussian_nll(0.0, 0.0, 1.0) == pytest.approx(0.918939, abs=1e-6)
        assert 2 * gaussian_nll(0.0, 0.0, 1.0) == pytest.approx(1.837877, abs=1e-6)
        assert gaussian_nll(10.0, 0.0, 1.0) == pytest.approx(50.92, abs=5e-3)

    def test_series_single_sample(self):
        init = MomentState(var_omega=1.0)
        assert nll(SystemParams(100.0, 300.0, 0.0), init, [0.0]) == pytest.approx(0.5 * math.log(2 * math.pi))

    def test_empty(self):
        with pytest.raises(EmptySeries):
            nll(REF, ZERO, [])

    def test_argmin_at_mean(self):
        p = SystemParams(100.0, 300.0, 0.007, 0.0042)
        t = np.arange(100.0)
        mu = mean_omega(p, ZERO, t)
        best = nll(p, ZERO, mu)
        for c in (-1e-3, -1e-4, 1e-4, 1e-3):
            assert nll(p, ZERO, mu + c) > best


class TestRescaling:
    def test_direct_inversion(self):
        tau, kappa, D = rescale_physical(1 / (2 * math.pi), 1 / 120, 1.0, 1.0)
        assert tau == pytest.approx(120.0)
        assert kappa == pytest.approx(1.0)

    def test_mass_scaling(self):
        a = rescale_physical(1.0, 2.0, 3.0, 4.0)
        b = rescale_physical(2.0, 2.0, 3.0, 4.0)
        assert 1 / b[0] == pytest.approx(0.5 / a[0])
        assert b[2] == pytest.approx(0.5 * a[2])

    def test_per_unit(self):
        P0, f_ref = 2e11, 50.0
        K1, K2 = per_unit_gains(12.5, 0.05, P0, f_ref)
        M = inertia_constant(5.0, 4e11, f_ref)
        tau, kappa, _ = rescale_physical(M, K1, K2, 1.0)
        assert tau > 0 and kappa > 0
        assert K1 == pytest.approx(12.5 * P0 / f_ref)

    def test_rejects_nonpositive(self):
        with pytest.raises(NonPositiveInput):
            rescale_physical(0.0, 1.0, 1.0, 1.0)
