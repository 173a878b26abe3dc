"""Euler-Maruyama sample paths, chained scenarios and time-series statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from numba import njit

from .errors import ConfigError, SeriesTooShort, StepTooLarge, TOutOfRange
from .moments import SystemParams

INTERVAL_SECONDS = 900.0


@dataclass(frozen=True)
class SdeConfig:
    dt: float = 0.01
    seed: int = 0
    n_paths: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1")


@dataclass
class Trajectory:
    """Sampled path. ``end_state`` is the (theta, omega) state one step past the last sample."""

    t: np.ndarray
    theta: np.ndarray
    omega: np.ndarray
    end_state: tuple[float, float] | None = None

    def __post_init__(self):
        if not (len(self.t) == np.shape(self.theta)[-1] == np.shape(self.omega)[-1]):
            raise ConfigError("t, theta and omega must have equal lengths")

    def __len__(self):
        return len(self.t)

    def to_csv(self, path) -> None:
        if np.ndim(self.omega) != 1:
            raise ConfigError("only single-path trajectories can be written to CSV")
        data = np.column_stack([self.t, self.theta, self.omega])
        np.savetxt(path, data, fmt="%.17g", delimiter=",", header="t_seconds,theta,omega", comments="")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2])


def path_rngs(seed: int, n_paths: int) -> list[np.random.Generator]:
    """Independent counter-based substreams, one per path."""
    children = np.random.SeedSequence(seed).spawn(n_paths)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


@njit(cache=True)
def _em_kernel(theta0, omega0, tau, kappa, D, q, r, dt, z, every, out_theta, out_omega):
    ik2 = 1.0 / (kappa * kappa)
    sq = D * math.sqrt(dt)
    th = theta0
    w = omega0
    j = 0
    for k in range(z.shape[0]):
        if k % every == 0:
            out_theta[j] = th
            out_omega[j] = w
            j += 1
        drift = q + r * (k * dt) - w / tau - th * ik2
        th_next = th + w * dt
        w = w + drift * dt + sq * z[k]
        th = th_next
    return th, w


def _check_step(p: SystemParams, dt: float):
    if dt > p.tau / 10.0:
        raise StepTooLarge(f"dt={dt} exceeds tau/10={p.tau / 10}")


def _n_steps(t_max: float, dt: float) -> int:
    n = int(round(t_max / dt))
    if n < 1 or abs(n * dt - t_max) > 1e-9 * max(t_max, 1.0):
        raise TOutOfRange(f"t_max={t_max} is not a positive multiple of dt={dt}")
    return n


def _run(p, theta0, omega0, z, dt, every):
    m = (z.shape[0] + every - 1) // every
    th = np.empty(m)
    om = np.empty(m)
    end = _em_kernel(float(theta0), float(omega0), p.tau, p.kappa, p.D, p.q, p.r, dt, z, every, th, om)
    return th, om, end


def euler_maruyama(
    p: SystemParams,
    theta0: float,
    omega0: float,
    t_max: float,
    cfg: SdeConfig,
    record_every: int = 1,
) -> Trajectory:
    """Integrate one interval. Includes the sample at ``t_max``.

    With ``cfg.n_paths > 1`` theta/omega have shape ``(n_paths, n_samples)``;
    path ``k`` always uses substream ``k`` so results do not depend on the
    number of paths requested.
    """
    _check_step(p, cfg.dt)
    n = _n_steps(t_max, cfg.dt)
    rngs = path_rngs(cfg.seed, cfg.n_paths)
    thetas, omegas = [], []
    for rng in rngs:
        z = rng.standard_normal(n)
        th, om, end = _run(p, theta0, omega0, z, cfg.dt, record_every)
        if n % record_every == 0:
            th, om = np.append(th, end[0]), np.append(om, end[1])
        thetas.append(th)
        omegas.append(om)
    t = np.arange(len(thetas[0])) * cfg.dt * record_every
    if cfg.n_paths == 1:
        return Trajectory(t, thetas[0], omegas[0], end_state=None)
    return Trajectory(t, np.array(thetas), np.array(omegas))


def ensemble_at(p: SystemParams, theta0: float, omega0: float, times: Sequence[float], cfg: SdeConfig) -> np.ndarray:
    """States of ``cfg.n_paths`` paths at ``times``; shape ``(n_paths, len(times), 2)``."""
    _check_step(p, cfg.dt)
    idx = np.array([_n_steps(t, cfg.dt) if t > 0 else 0 for t in times])
    n = int(idx.max())
    stride = int(np.gcd.reduce(idx[idx > 0])) if np.any(idx > 0) else 1
    out = np.empty((cfg.n_paths, len(idx), 2))
    for k, rng in enumerate(path_rngs(cfg.seed, cfg.n_paths)):
        z = rng.standard_normal(n)
        th, om, end = _run(p, theta0, omega0, z, cfg.dt, stride)
        th, om = np.append(th, end[0]), np.append(om, end[1])
        out[k, :, 0] = th[idx // stride]
        out[k, :, 1] = om[idx // stride]
    return out


def synthesize(
    param_series: Sequence[SystemParams],
    theta0: float,
    omega0: float,
    cfg: SdeConfig,
    interval_seconds: float = INTERVAL_SECONDS,
    record_every: int = 1,
) -> Trajectory:
    """Chain intervals: each one starts from the previous interval's final state.

    The ramp clock in ``q + r t`` restarts at every interval. All noise is
    drawn sequentially from a single generator seeded by ``cfg.seed``.
    """
    if len(param_series) == 0:
        raise ConfigError("need at least one interval")
    n = _n_steps(interval_seconds, cfg.dt)
    if n % record_every:
        raise ConfigError("record_every must divide the steps per interval")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    per = n // record_every
    theta = np.empty(per * len(param_series))
    omega = np.empty_like(theta)
    th, om = float(theta0), float(omega0)
    for i, p in enumerate(param_series):
        _check_step(p, cfg.dt)
        z = rng.standard_normal(n)
        seg_th, seg_om, (th, om) = _run(p, th, om, z, cfg.dt, record_every)
        theta[i * per:(i + 1) * per] = seg_th
        omega[i * per:(i + 1) * per] = seg_om
    t = np.arange(theta.size) * cfg.dt * record_every
    return Trajectory(t, theta, omega, end_state=(th, om))


def acf(series, max_lag: int) -> np.ndarray:
    """Biased sample autocorrelation for lags ``0..max_lag`` (FFT based)."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if n <= max_lag:
        raise SeriesTooShort(f"series of length {n} too short for max_lag={max_lag}")
    x = x - x.mean()
    nfft = 1 << int(math.ceil(math.log2(2 * n - 1)))
    f = np.fft.rfft(x, nfft)
    c = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1] / n
    if c[0] <= 0:
        out = np.zeros(max_lag + 1)
        out[0] = 1.0
        return out
    return c / c[0]


def increments(series, T: float, dt: float) -> np.ndarray:
    """``x(t + T) - x(t)`` for every admissible ``t``."""
    x = np.asarray(series, dtype=float)
    k = int(round(T / dt))
    if T < 0 or abs(k * dt - T) > 1e-9 * max(T, dt) or k >= x.size:
        raise TOutOfRange(f"T={T} is not a usable multiple of dt={dt}")
    return x[k:] - x[: x.size - k]


def excess_kurtosis(series) -> float:
    x = np.asarray(series, dtype=float)
    if x.size < 4:
        raise SeriesTooShort("excess kurtosis needs at least 4 samples")
    d = x - x.mean()
    m2 = np.mean(d**2)
    if m2 == 0:
        return 0.0
    return float(np.mean(d**4) / m2**2 - 3.0)


def histogram(series, bins=100):
    """Normalised density estimate; returns ``(density, bin_edges)``."""
    x = np.asarray(series, dtype=float)
    if x.size < 4:
        raise SeriesTooShort("histogram needs at least 4 samples")
    return np.histogram(x, bins=bins, density=True)


def seconds_of_day(timestamps) -> np.ndarray:
    ts = pd.DatetimeIndex(timestamps)
    ns = ts.asi8 - ts.normalize().asi8
    return (ns // 1_000_000_000).astype(np.int64)


def empirical_daily_profile(series, timestamps) -> pd.DataFrame:
    """Mean and population std per second of day, over all days present."""
    x = np.asarray(series, dtype=float)
    sod = seconds_of_day(timestamps)
    ok = np.isfinite(x)
    x, sod = x[ok], sod[ok]
    count = np.bincount(sod, minlength=86400).astype(float)
    mean = np.bincount(sod, weights=x, minlength=86400)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = mean / count
        var = np.bincount(sod, weights=(x - mean[sod]) ** 2, minlength=86400) / count
    return pd.DataFrame(
        {"mean": mean, "std": np.sqrt(var), "count": count.astype(np.int64)},
        index=pd.RangeIndex(86400, name="second_of_day"),
    )


SCENARIOS = ("constant", "varying", "hourly")


def scenario_params(kind: str, n_days: int, seed: int = 0) -> list[SystemParams]:
    """Per-interval parameters for built-in scenarios (96 intervals per day).

    ``constant``: tau=100 s, kappa=300 s, D=0.007, no imbalance.
    ``varying``: tau and D log-normally scattered per interval, no imbalance,
    so each interval is Gaussian while the mixture is not.
    ``hourly``: ``varying`` plus an imbalance step at every interval whose
    size follows a daily cycle and is largest at the full hour;
    ``r = -2 q / 900`` keeps the mean imbalance per interval at zero.
    """
    if kind not in SCENARIOS:
        raise ConfigError(f"unknown scenario {kind!r}; choose from {SCENARIOS}")
    if n_days < 1:
        raise ConfigError("n_days must be >= 1")
    n = 96 * n_days
    if kind == "constant":
        return [SystemParams(100.0, 300.0, 0.007)] * n
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    tau = 100.0 * np.exp(0.15 * rng.standard_normal(n))
    D = 0.007 * np.exp(0.35 * rng.standard_normal(n))
    kappa = np.maximum(300.0, 2.5 * tau)
    q = np.zeros(n)
    if kind == "hourly":
        i = np.arange(n)
        hour = (i % 96) / 4.0
        quarter_weight = np.array([1.0, 0.4, 0.2, 0.4])[i % 4]
        q = 2.5e-3 * np.sin(2 * np.pi * (hour - 3.0) / 12.0) * quarter_weight
        q = q * (1.0 + 0.2 * rng.standard_normal(n))
    return [SystemParams(tau[k], kappa[k], D[k], q[k], -2.0 * q[k] / INTERVAL_SECONDS) for k in range(n)]
