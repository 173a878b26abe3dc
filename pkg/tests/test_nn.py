import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fd_weight_gradient, max_relative_error, tiny_gradient_problem
from gridfreq.errors import ConfigError, DimensionMismatch, NonFiniteLoss
from gridfreq.moments import MomentState, SystemParams, nll
from gridfreq.nn import (
    PARAM_NAMES,
    AdamState,
    Batch,
    ConstraintSpec,
    MlpConfig,
    ParameterModel,
    Weights,
    adam_step,
    constrain,
    constrain_array,
    forward,
    glorot_init,
    interval_nll,
    nll_gradient,
    nll_theta_gradient,
)
from gridfreq.nn import _forward

SPEC = ConstraintSpec()


class TestInit:
    def test_glorot_bound(self):
        w = glorot_init(MlpConfig(64, n_hidden_layers=2, units=64), seed=1)
        assert np.abs(w.W[1]).max() <= math.sqrt(6 / 128)
        # a uniform sample this large gets close to its bound
        assert np.abs(w.W[1]).max() > 0.95 * math.sqrt(6 / 128)

    def test_deterministic_and_zero_bias(self):
        a = glorot_init(MlpConfig(5), seed=7)
        b = glorot_init(MlpConfig(5), seed=7)
        assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
        assert all(np.all(bb == 0) for bb in a.b)

    def test_layer_shapes(self):
        w = glorot_init(MlpConfig(77, n_hidden_layers=3, units=64), seed=0)
        assert [W.shape for W in w.W] == [(77, 64), (64, 64), (64, 64), (64, 8)]

    @pytest.mark.parametrize(
        "kwargs",
        [dict(n_hidden_layers=0), dict(units=0), dict(activation="relu"), dict(dropout=1.0), dict(dropout=-0.1)],
    )
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            MlpConfig(4, **kwargs)


class TestForward:
    def test_zero_weights(self):
        w = glorot_init(MlpConfig(3), 0)
        for a in w.arrays():
            a[...] = 0
        assert np.all(forward(w, np.ones(3)) == 0)

    def test_small_input_linearisation(self):
        w = glorot_init(MlpConfig(4, n_hidden_layers=1, units=6), 3)
        x = np.full(4, 1e-3)
        lin = (x @ w.W[0]) @ w.W[1]
        np.testing.assert_allclose(forward(w, x), lin, rtol=1e-2)

    def test_dropout_zero_train_equals_eval(self):
        w = glorot_init(MlpConfig(4, dropout=0.0), 0)
        x = np.random.default_rng(0).normal(size=(5, 4))
        assert np.array_equal(forward(w, x, training=True, rng=np.random.default_rng(1)), forward(w, x))

    def test_inverted_dropout_preserves_mean(self):
        w = glorot_init(MlpConfig(4, n_hidden_layers=1, units=16, dropout=0.1), 0)
        x = np.random.default_rng(0).normal(size=4)
        _, cache = _forward(w, np.tile(x, (10_000, 1)), True, np.random.default_rng(5))
        h_train = cache.acts[0] * cache.masks[0]
        h_eval = np.tanh(x @ w.W[0])
        assert abs(h_train.mean() - h_eval.mean()) < 0.02 * np.abs(h_eval).mean()
        np.testing.assert_allclose(h_train.mean(axis=0), h_eval, rtol=0.02, atol=0.02 * np.abs(h_eval).max())

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            forward(glorot_init(MlpConfig(3), 0), np.ones(4))

    def test_batch_shape(self):
        w = glorot_init(MlpConfig(3), 0)
        assert forward(w, np.ones(3)).shape == (8,)
        assert forward(w, np.ones((6, 3))).shape == (6, 8)


class TestConstrain:
    def test_q_scaling(self):
        u = np.zeros(8)
        u[6] = 4.2
        assert constrain(u, SPEC).q == pytest.approx(0.0042, rel=1e-12)

    def test_D_at_zero(self):
        assert constrain(np.zeros(8), SPEC).D == pytest.approx(math.log(2) * 0.01 + 1e-4, rel=1e-12)
        assert constrain(np.zeros(8), SPEC).D == pytest.approx(0.0070315, abs=1e-7)

    def test_tau_example(self):
        # pick u5 so that kappa = 200 exactly
        u5 = math.log(math.expm1((200 - 30) / 100))
        th = constrain(np.array([0, 0, 0, 0, u5, 0, 0, 0.0]), SPEC)
        assert th.kappa == pytest.approx(200.0)
        assert th.tau == pytest.approx((2 * 10 / 200 + 0.999 * 0.5 * (1 - 2 * 10 / 200)) * 100)
        assert th.tau == pytest.approx(54.955, abs=1e-3)

    def test_covariance_uses_second_output(self):
        u = np.zeros(8)
        th0 = constrain(u, SPEC)
        u[1] = 0.7
        th = constrain(u, SPEC)
        assert th.cov0 == pytest.approx(0.999 * math.tanh(0.7) * th0.sigma_theta0 * th0.sigma_omega0)
        assert th0.cov0 == 0.0

    def test_jacobian_matches_differences(self):
        rng = np.random.default_rng(0)
        U = rng.normal(0, 2, size=(4, 8))
        _, J = constrain_array(U, SPEC, jacobian=True)
        h = 1e-6
        for j in range(8):
            up, dn = U.copy(), U.copy()
            up[:, j] += h
            dn[:, j] -= h
            fd = (constrain_array(up, SPEC) - constrain_array(dn, SPEC)) / (2 * h)
            np.testing.assert_allclose(J[:, :, j], fd, rtol=1e-6, atol=1e-12)
        assert np.all(J[:, 6, 6] == SPEC.s7)

    def test_random_outputs_feasible(self):
        U = np.random.default_rng(1).uniform(-50, 50, size=(20_000, 8))
        th = constrain_array(U, SPEC)
        s1, c, s3, tau, kappa, D = th[:, :6].T
        # softplus underflows to exactly zero far below, leaving the minimum itself
        assert np.all(s1 >= SPEC.v1) and np.all(s3 >= SPEC.v3) and np.all(D >= SPEC.v6)
        assert np.all(np.abs(c) < s1 * s3)
        assert np.all(tau >= SPEC.v4) and np.all(tau < kappa / 2) and np.all(kappa >= SPEC.v5)
        assert np.all(s1 > 0) and np.all(s3 > 0) and np.all(tau > 0) and np.all(D > 0)

    @given(st.integers(0, 7).filter(lambda j: j in (0, 2, 4, 5, 6, 7)), st.floats(-20, 20), st.floats(0.01, 5))
    def test_monotone_coordinates(self, j, a, step):
        u = np.zeros(8)
        u[j] = a
        lo = constrain(u, SPEC)[j]
        u[j] = a + step
        assert constrain(u, SPEC)[j] > lo

    def test_bad_spec(self):
        with pytest.raises(ConfigError):
            ConstraintSpec(delta=1.0)
        with pytest.raises(ConfigError):
            ConstraintSpec(v4=20.0, v5=30.0)

    def test_names(self):
        assert PARAM_NAMES == constrain(np.zeros(8), SPEC)._fields


class TestLossAndGradient:
    def test_interval_nll_matches_moments(self):
        th = np.array([[0.02, 1e-4, 0.01, 100.0, 300.0, 0.007, 0.002, -2 * 0.002 / 900]])
        omega = np.random.default_rng(0).normal(0, 0.02, size=(1, 50))
        got = interval_nll(th, np.array([0.3]), np.array([0.01]), omega, np.arange(50.0))
        p = SystemParams(100.0, 300.0, 0.007, 0.002, -2 * 0.002 / 900)
        init = MomentState(0.3, 0.01, 0.02**2, 0.01**2, 1e-4)
        assert got[0] == pytest.approx(nll(p, init, omega[0], 1.0), rel=1e-12)

    def test_theta_gradient_against_differences(self):
        rng = np.random.default_rng(2)
        th = np.array([[0.02, 1e-4, 0.01, 90.0, 310.0, 0.006, 0.002, -3e-6]])
        b = Batch(np.zeros((1, 1)), rng.normal(0, 0.02, (1, 30)), np.array([0.2]), np.array([0.01]), np.arange(30.0))
        _, g = nll_theta_gradient(th, b)
        for j in range(8):
            h = 1e-3 * abs(th[0, j])
            f = []
            for k in (-2, -1, 1, 2):
                shifted = th.copy()
                shifted[0, j] += k * h
                f.append(interval_nll(shifted, b.mu_theta0, b.mu_omega0, b.omega, b.t)[0])
            fd = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
            assert g[0, j] == pytest.approx(fd, rel=1e-6, abs=1e-8)

    @pytest.mark.parametrize("seed", range(3))
    def test_end_to_end_gradient(self, seed):
        w, spec, batch = tiny_gradient_problem(seed)
        _, grads = nll_gradient(w, spec, batch)
        assert max_relative_error(grads, fd_weight_gradient(w, spec, batch)) < 1e-4

    def test_gradient_with_dropout_mask_is_consistent(self):
        w, spec, batch = tiny_gradient_problem(0)
        w = Weights(MlpConfig(4, 1, 3, dropout=0.5), w.W, w.b)
        l1, g1 = nll_gradient(w, spec, batch, training=True, rng=np.random.default_rng(9))
        l2, g2 = nll_gradient(w, spec, batch, training=True, rng=np.random.default_rng(9))
        assert l1 == l2 and all(np.array_equal(a, b) for a, b in zip(g1, g2))

    def test_non_finite(self):
        w, spec, batch = tiny_gradient_problem(0)
        bad = batch._replace(omega=np.full_like(batch.omega, np.nan))
        with pytest.raises(NonFiniteLoss):
            nll_gradient(w, spec, bad)


class TestAdam:
    def _one(self, g):
        w = Weights(MlpConfig(1, 1, 1), [np.zeros((1, 1)), np.zeros((1, 8))], [np.zeros(1), np.zeros(8)])
        grads = [np.full((1, 1), g), np.zeros((1, 8)), np.zeros(1), np.zeros(8)]
        adam_step(w, grads, AdamState.zeros_like(w), 1e-3)
        return w

    def test_first_step(self):
        assert self._one(1.0).W[0][0, 0] == pytest.approx(-9.99999e-4, rel=1e-6)

    def test_zero_gradient(self):
        w = self._one(0.0)
        assert all(np.all(a == 0) for a in w.arrays())

    @given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-6))
    def test_sign(self, g):
        assert np.sign(self._one(g).W[0][0, 0]) == -np.sign(g)

    def test_shape_mismatch(self):
        w = glorot_init(MlpConfig(2), 0)
        with pytest.raises(DimensionMismatch):
            adam_step(w, [np.zeros(1)], AdamState.zeros_like(w), 1e-3)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        w = glorot_init(MlpConfig(6, 2, 5, activation="sigmoid", dropout=0.1), 4)
        model = ParameterModel(w, ConstraintSpec(s5=1000.0))
        model.save(tmp_path / "m.json")
        back = ParameterModel.load(tmp_path / "m.json")
        assert back.spec == model.spec and back.weights.config == w.config
        assert all(np.array_equal(a, b) for a, b in zip(back.weights.arrays(), w.arrays()))
        X = np.random.default_rng(0).normal(size=(3, 6))
        assert np.array_equal(back.predict_theta(X), model.predict_theta(X))

    def test_wrong_format(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other", "version": 1}')
        with pytest.raises(ConfigError):
            ParameterModel.load(tmp_path / "x.json")
