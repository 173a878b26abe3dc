"""Gaussian moments of the controlled stochastic oscillator.

Within one interval the frequency deviation follows

    d theta = omega dt
    d omega = (q + r t - omega / tau - theta / kappa**2) dt + D dW

so (theta, omega) stays jointly Gaussian. Its five moments obey a closed
linear ODE system (``moment_ode_rhs``) that has an exact solution whenever
the two deterministic eigenvalues are real and distinct (``kappa > 2 tau``).

Closed forms are written in terms of the normalised eigenvalue gap

    s = sqrt(1 - 4 tau**2 / kappa**2),   0 < s < 1,

which is the same algebra as the textbook kappa-form with
``kappa**2 = 4 tau**2 / (1 - s**2)`` substituted. This keeps the
``kappa -> inf`` limit free of large cancelling terms.

State vectors are ordered ``(mu_theta, mu_omega, var_theta, var_omega,
cov_theta_omega)`` everywhere in this module.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import (
    ConfigError,
    DegenerateEigenvalues,
    EmptySeries,
    NegativeVariance,
    NonPositiveInput,
    StepTooLarge,
)

SIGMA_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class SystemParams:
    """Effective parameters of one interval (all rescaled by inertia)."""

    tau: float
    kappa: float
    D: float
    q: float = 0.0
    r: float = 0.0

    def __post_init__(self):
        if not (self.tau > 0 and self.kappa > 0 and self.D >= 0):
            raise NonPositiveInput(
                f"need tau > 0, kappa > 0, D >= 0; got {self.tau}, {self.kappa}, {self.D}"
            )

    @property
    def analytic(self) -> bool:
        return self.kappa > 2.0 * self.tau * (1.0 + _EPS)


@dataclass(frozen=True)
class MomentState:
    mu_theta: float = 0.0
    mu_omega: float = 0.0
    var_theta: float = 0.0
    var_omega: float = 0.0
    cov_theta_omega: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, a) -> "MomentState":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class GaussianMarginal:
    mu: float
    sigma: float


@dataclass(frozen=True)
class EigenSet:
    lambda_d1: float
    lambda_d2: float
    lambda_s1: float
    lambda_s2: float
    lambda_s3: float


def eigen_gap(tau, kappa):
    """``s = sqrt(1 - 4 tau^2/kappa^2)``; raises on the non-analytic path."""
    tau = np.asarray(tau, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa <= 2.0 * tau * (1.0 + _EPS)):
        raise DegenerateEigenvalues(
            "closed form needs kappa > 2 tau (real, distinct eigenvalues)"
        )
    return np.sqrt((kappa - 2.0 * tau) * (kappa + 2.0 * tau)) / kappa


def eigenvalues(p: SystemParams) -> EigenSet:
    s = float(eigen_gap(p.tau, p.kappa))
    tau, kappa = p.tau, p.kappa
    # the "slow" roots written without the 1 - s cancellation
    slow_d = -2.0 * tau / (kappa**2 * (1.0 + s))
    return EigenSet(
        lambda_d1=-(1.0 + s) / (2.0 * tau),
        lambda_d2=slow_d,
        lambda_s1=-1.0 / tau,
        lambda_s2=-(1.0 + s) / tau,
        lambda_s3=2.0 * slow_d,
    )


class OmegaBasis(NamedTuple):
    """Coefficient functions of the omega marginal.

    ``mean = m_theta*mu_theta0 + m_omega*mu_omega0 + m_q*q + m_r*r`` and
    ``var = v_theta*var_theta0 + v_cov*cov0 + v_omega*var_omega0 + v_noise*D**2``.
    """

    m_theta: np.ndarray
    m_omega: np.ndarray
    m_q: np.ndarray
    m_r: np.ndarray
    v_theta: np.ndarray
    v_cov: np.ndarray
    v_omega: np.ndarray
    v_noise: np.ndarray


def omega_basis(tau, kappa, t) -> OmegaBasis:
    """Evaluate the eight basis functions; broadcasts ``tau``/``kappa`` against ``t``."""
    tau = np.asarray(tau, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    t = np.asarray(t, dtype=float)
    s = eigen_gap(tau, kappa)
    one_m_s2 = 4.0 * tau**2 / kappa**2
    slow = -2.0 * tau / (kappa**2 * (1.0 + s))  # lambda_d2
    fast = -(1.0 + s) / (2.0 * tau)  # lambda_d1

    # deterministic part, eigenvalues fast/slow, gap fast - slow = -s/tau
    e1 = np.exp(fast * t)
    e2 = np.exp(slow * t)
    e1_m_e2 = e2 * np.expm1(-s * t / tau)
    m_theta = one_m_s2 * e1_m_e2 / (4.0 * tau * s)
    m_omega = ((1.0 + s) * e1 - (1.0 - s) * e2) / (2.0 * s)
    m_q = -tau * e1_m_e2 / s
    m_r = -(tau / s) * (np.expm1(fast * t) / fast - np.expm1(slow * t) / slow)

    # (co)variance part, eigenvalues -1/tau, 2*fast, 2*slow
    E1 = np.exp(-t / tau)
    E2 = e1 * e1
    E3 = e2 * e2
    w = 1.0 / (4.0 * s * s)
    v_theta = one_m_s2**2 * w / (4.0 * tau**2) * (E2 + E3 - 2.0 * E1)
    v_cov = one_m_s2 * w / tau * (-2.0 * E1 + (1.0 + s) * E2 + (1.0 - s) * E3)
    v_omega = w * (-2.0 * one_m_s2 * E1 + (1.0 + s) ** 2 * E2 + (1.0 - s) ** 2 * E3)
    v_noise = tau * w * (
        2.0 * one_m_s2 * np.expm1(-t / tau)
        - (1.0 + s) * np.expm1(2.0 * fast * t)
        - (1.0 - s) * np.expm1(2.0 * slow * t)
    )
    return OmegaBasis(m_theta, m_omega, m_q, m_r, v_theta, v_cov, v_omega, v_noise)


def omega_moments(tau, kappa, D, q, r, mu_theta0, mu_omega0, var_theta0, cov0, var_omega0, t):
    """Vectorised ``(mean, variance)`` of omega; all arguments broadcast."""
    b = omega_basis(tau, kappa, t)
    mean = b.m_theta * mu_theta0 + b.m_omega * mu_omega0 + b.m_q * q + b.m_r * r
    var = b.v_theta * var_theta0 + b.v_cov * cov0 + b.v_omega * var_omega0 + b.v_noise * D**2
    return mean, var


def _omega(p: SystemParams, init: MomentState, t):
    return omega_moments(
        p.tau, p.kappa, p.D, p.q, p.r,
        init.mu_theta, init.mu_omega, init.var_theta, init.cov_theta_omega, init.var_omega,
        t,
    )


def mean_omega(p: SystemParams, init: MomentState, t):
    mean, _ = _omega(p, init, t)
    return mean if np.ndim(mean) else float(mean)


def var_omega(p: SystemParams, init: MomentState, t):
    _, var = _omega(p, init, t)
    # rounding can leave -1e-20 at t=0 with zero initial spread
    scale = np.maximum(np.abs(var), p.D**2 * np.asarray(t, dtype=float) + init.var_omega)
    if np.any(var < -1e-9 * np.maximum(scale, 1e-300)):
        raise NegativeVariance(f"omega variance went negative: {np.min(var)!r}")
    var = np.maximum(var, 0.0)
    return var if np.ndim(var) else float(var)


def marginal(p: SystemParams, init: MomentState, t) -> GaussianMarginal:
    mu = mean_omega(p, init, t)
    sigma = np.maximum(np.sqrt(var_omega(p, init, t)), SIGMA_FLOOR)
    if np.ndim(sigma) == 0:
        return GaussianMarginal(float(mu), float(sigma))
    return GaussianMarginal(mu, sigma)


def _projectors(A: np.ndarray, lams: np.ndarray) -> list[np.ndarray]:
    eye = np.eye(A.shape[0])
    out = []
    for k, lk in enumerate(lams):
        P = eye.copy()
        for j, lj in enumerate(lams):
            if j != k:
                P = P @ (A - lj * eye) / (lk - lj)
        out.append(P)
    return out


def analytic_state(p: SystemParams, init: MomentState, t) -> np.ndarray:
    """All five moments from the spectral decomposition; shape ``(len(t), 5)``.

    Independent of :func:`omega_basis` (no shared algebra) and used to check
    the theta components against the ODE.
    """
    ev = eigenvalues(p)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    ik2 = p.kappa**-2
    Ad = np.array([[0.0, 1.0], [-ik2, -1.0 / p.tau]])
    As = np.array([[0.0, 2.0, 0.0], [-ik2, -1.0 / p.tau, 1.0], [0.0, -2.0 * ik2, -2.0 / p.tau]])
    ld = np.array([ev.lambda_d1, ev.lambda_d2])
    ls = np.array([ev.lambda_s1, ev.lambda_s2, ev.lambda_s3])
    y0 = init.as_array()
    yd0 = y0[:2]
    ys0 = np.array([y0[2], y0[4], y0[3]])  # (var_theta, cov, var_omega)
    bs = np.array([0.0, 0.0, p.D**2])

    yd = np.zeros((t.size, 2))
    for lam, P in zip(ld, _projectors(Ad, ld)):
        x = lam * t
        g1 = np.expm1(x) / lam
        g2 = (np.expm1(x) - x) / lam**2
        yd += np.outer(np.exp(x), P @ yd0) + np.outer(p.q * g1 + p.r * g2, P[:, 1])
    ys = np.zeros((t.size, 3))
    for lam, P in zip(ls, _projectors(As, ls)):
        x = lam * t
        ys += np.outer(np.exp(x), P @ ys0) + np.outer(np.expm1(x) / lam, P @ bs)
    return np.column_stack([yd[:, 0], yd[:, 1], ys[:, 0], ys[:, 2], ys[:, 1]])


@njit(cache=True)
def _rhs(y, tau, kappa, D, q, r, t, out):
    ik2 = 1.0 / (kappa * kappa)
    out[0] = y[1]
    out[1] = q + r * t - y[1] / tau - y[0] * ik2
    out[2] = 2.0 * y[4]
    out[3] = -2.0 * y[3] / tau - 2.0 * y[4] * ik2 + D * D
    out[4] = y[3] - y[4] / tau - y[2] * ik2


def moment_ode_rhs(state: MomentState, p: SystemParams, t: float) -> MomentState:
    out = np.empty(5)
    _rhs(state.as_array(), p.tau, p.kappa, p.D, p.q, p.r, float(t), out)
    return MomentState.from_array(out)


@njit(cache=True)
def _rk4(y0, grid, nsub, tau, kappa, D, q, r):
    n = grid.shape[0]
    out = np.empty((n, 5))
    y = y0.copy()
    out[0] = y
    k1 = np.empty(5)
    k2 = np.empty(5)
    k3 = np.empty(5)
    k4 = np.empty(5)
    tmp = np.empty(5)
    for i in range(1, n):
        h = (grid[i] - grid[i - 1]) / nsub[i - 1]
        t = grid[i - 1]
        for _ in range(nsub[i - 1]):
            _rhs(y, tau, kappa, D, q, r, t, k1)
            for j in range(5):
                tmp[j] = y[j] + 0.5 * h * k1[j]
            _rhs(tmp, tau, kappa, D, q, r, t + 0.5 * h, k2)
            for j in range(5):
                tmp[j] = y[j] + 0.5 * h * k2[j]
            _rhs(tmp, tau, kappa, D, q, r, t + 0.5 * h, k3)
            for j in range(5):
                tmp[j] = y[j] + h * k3[j]
            _rhs(tmp, tau, kappa, D, q, r, t + h, k4)
            for j in range(5):
                y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            t += h
        out[i] = y
    return out


def solve_numeric(p: SystemParams, init: MomentState, grid, max_step: float | None = None) -> np.ndarray:
    """Fixed-step RK4 on the moment ODEs, reported on ``grid``.

    Works for any positive ``tau``/``kappa`` including the oscillatory regime.
    Each grid gap is split into equal substeps no longer than ``max_step``.
    Returns an array of shape ``(len(grid), 5)``.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        return init.as_array()[None, :]
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ConfigError("grid must start at 0 and be strictly increasing")
    gaps = np.diff(grid)
    if max_step is None:
        nsub = np.ones(gaps.size, dtype=np.int64)
    else:
        nsub = np.maximum(np.ceil(gaps / max_step - 1e-9), 1).astype(np.int64)
    if gaps.size and np.max(gaps / nsub) > p.tau / 10.0:
        raise StepTooLarge(f"RK4 step {np.max(gaps / nsub)} exceeds tau/10 = {p.tau / 10}")
    return _rk4(init.as_array(), grid, nsub, p.tau, p.kappa, p.D, p.q, p.r)


def gaussian_nll(x, mu, var):
    """Pointwise Gaussian negative log density with the sigma floor applied."""
    var = np.maximum(var, SIGMA_FLOOR**2)
    return 0.5 * (LOG_2PI + np.log(var) + (x - mu) ** 2 / var)


def nll(p: SystemParams, init: MomentState, omega_series, dt: float = 1.0) -> float:
    """Summed negative log-likelihood of a series sampled at ``0, dt, 2dt, ...``."""
    omega = np.asarray(omega_series, dtype=float)
    if omega.size == 0:
        raise EmptySeries("nll needs at least one sample")
    if dt <= 0:
        raise ConfigError("dt must be positive")
    t = np.arange(omega.size) * dt
    mu, var = _omega(p, init, t)
    return float(np.sum(gaussian_nll(omega, mu, var)))


def rescale_physical(M: float, K1: float, K2: float, D_bar: float) -> tuple[float, float, float]:
    """Physical gains to effective ``(tau, kappa, D)``.

    ``1/tau = K1/(2 pi M)``, ``1/kappa^2 = K2/(2 pi M)``, ``D = D_bar/M``.
    Only ratios to the inertia ``M`` are identifiable from frequency data.
    """
    if min(M, K1, K2, D_bar) <= 0:
        raise NonPositiveInput("M, K1, K2 and D_bar must be positive")
    two_pi_m = 2.0 * math.pi * M
    return two_pi_m / K1, math.sqrt(two_pi_m / K2), D_bar / M


def per_unit_gains(K1_pu: float, K2_pu: float, P0: float, f_ref: float = 50.0) -> tuple[float, float]:
    """Per-unit droop/secondary gains to ``K1`` [W/Hz] and ``K2`` [W]."""
    if min(K1_pu, K2_pu, P0, f_ref) <= 0:
        raise NonPositiveInput("per-unit gains, P0 and f_ref must be positive")
    return K1_pu * P0 / f_ref, K2_pu * P0 / f_ref


def inertia_constant(H: float, S_B: float, f_ref: float = 50.0) -> float:
    """Aggregated inertia ``M`` such that ``2 H S_B / f_ref = 2 pi M``."""
    if min(H, S_B, f_ref) <= 0:
        raise NonPositiveInput("H, S_B and f_ref must be positive")
    return H * S_B / (math.pi * f_ref)
