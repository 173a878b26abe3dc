import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.linalg import expm

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def expm_moments(tau, kappa, D, q, r, y0, t):
    """Independent oracle: matrix exponential of the augmented linear moment system.

    State (mu_theta, mu_omega, var_theta, var_omega, cov, 1, t).
    """
    ik2 = kappa**-2
    A = np.zeros((7, 7))
    A[0, 1] = 1.0
    A[1, 0], A[1, 1], A[1, 5], A[1, 6] = -ik2, -1.0 / tau, q, r
    A[2, 4] = 2.0
    A[3, 3], A[3, 4], A[3, 5] = -2.0 / tau, -2.0 * ik2, D * D
    A[4, 2], A[4, 3], A[4, 4] = -ik2, 1.0, -1.0 / tau
    A[6, 5] = 1.0
    y = np.concatenate([np.asarray(y0, float), [1.0, 0.0]])
    return (expm(A * t) @ y)[:5]


@pytest.fixture(scope="session")
def small_synth():
    from gridfreq.features import synth_dataset

    return synth_dataset(seed=3, n_days=4)


@pytest.fixture(scope="session")
def small_splits(small_synth):
    from gridfreq.train import build_dataset, split_chronological

    ds = build_dataset(small_synth.features, small_synth.frequency, t_max=900)
    return ds, split_chronological(ds)


def tiny_gradient_problem(seed=0, n_features=4, units=3, n_samples=10):
    """A 4-feature, 1-hidden-layer net with one interval of synthetic omega."""
    from gridfreq.nn import Batch, ConstraintSpec, MlpConfig, glorot_init

    rng = np.random.default_rng(seed)
    w = glorot_init(MlpConfig(n_features, n_hidden_layers=1, units=units), seed)
    for b in w.b:
        b[:] = rng.normal(0, 0.3, b.shape)
    t = np.arange(n_samples, dtype=float)
    batch = Batch(
        X=rng.normal(size=(1, n_features)),
        omega=rng.normal(0.0, 0.02, size=(1, n_samples)),
        mu_theta0=np.array([0.1]),
        mu_omega0=np.array([0.01]),
        t=t,
    )
    return w, ConstraintSpec(), batch


def fd_weight_gradient(w, spec, batch):
    """Five-point central differences of the summed NLL over every weight entry."""
    from gridfreq.nn import constrain_array, forward, interval_nll

    def loss():
        theta = constrain_array(forward(w, batch.X), spec)
        return float(interval_nll(theta, batch.mu_theta0, batch.mu_omega0, batch.omega, batch.t).sum())

    out = []
    for a in w.arrays():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            x0 = a[idx]
            h = 1e-3 * max(1.0, abs(x0))
            vals = []
            for k in (-2, -1, 1, 2):
                a[idx] = x0 + k * h
                vals.append(loss())
            a[idx] = x0
            g[idx] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
        out.append(g)
    return out


def max_relative_error(got, ref):
    """Largest entrywise relative error; entries near zero are compared on the gradient's scale."""
    got = np.concatenate([np.ravel(g) for g in got])
    ref = np.concatenate([np.ravel(g) for g in ref])
    denom = np.maximum(np.abs(ref), 1e-8 * np.max(np.abs(ref)))
    return float(np.max(np.abs(got - ref) / denom))


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 11


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "not evaluated"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
