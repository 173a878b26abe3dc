"""Benchmark predictors: the empirical daily profile and a constant Gaussian."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DataError, InsufficientData, ZeroBenchmark
from .moments import SIGMA_FLOOR, gaussian_nll
from .simulate import seconds_of_day


@dataclass
class DailyProfile:
    """Per-second-of-day Gaussian: ``mean`` and ``std`` have length 86400."""

    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray

    def at(self, timestamps):
        sod = seconds_of_day(timestamps)
        return self.mean[sod], self.std[sod]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"mean": self.mean, "std": self.std},
            index=pd.RangeIndex(86400, name="second_of_day"),
        )

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, float_format="%.17g", lineterminator="\n")


def fit_daily_profile(omega, timestamps, sigma_floor: float = SIGMA_FLOOR, min_days: int = 1) -> DailyProfile:
    """Mean and population std of omega at each second of day.

    Seconds never observed fall back to the overall mean and std.
    """
    x = np.asarray(omega, dtype=float)
    ts = pd.DatetimeIndex(timestamps)
    if x.size != len(ts):
        raise DataError("omega and timestamps differ in length")
    ok = np.isfinite(x)
    if ok.sum() == 0:
        raise InsufficientData("no finite frequency samples")
    days = pd.DatetimeIndex(ts[ok]).normalize().unique()
    if len(days) < min_days:
        raise InsufficientData(f"need {min_days} day(s) of data, got {len(days)}")
    sod = seconds_of_day(ts)[ok]
    x = x[ok]
    count = np.bincount(sod, minlength=86400).astype(float)
    seen = count > 0
    mean = np.full(86400, x.mean())
    std = np.full(86400, x.std())
    s1 = np.bincount(sod, weights=x, minlength=86400)
    mean[seen] = s1[seen] / count[seen]
    s2 = np.bincount(sod, weights=(x - mean[sod]) ** 2, minlength=86400)
    std[seen] = np.sqrt(s2[seen] / count[seen])
    return DailyProfile(mean, np.maximum(std, sigma_floor), count.astype(np.int64))


def profile_nll(profile: DailyProfile, omega, timestamps) -> np.ndarray:
    """Pointwise NLL of omega under the profile."""
    mu, sd = profile.at(timestamps)
    return gaussian_nll(np.asarray(omega, dtype=float), mu, sd**2)


@dataclass(frozen=True)
class ConstantModel:
    mean: float
    std: float


def fit_constant(omega, sigma_floor: float = SIGMA_FLOOR) -> ConstantModel:
    x = np.asarray(omega, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        raise InsufficientData("no finite frequency samples")
    return ConstantModel(float(x.mean()), max(float(x.std()), sigma_floor))


def constant_nll(model: ConstantModel, omega) -> np.ndarray:
    x = np.asarray(omega, dtype=float)
    return gaussian_nll(x, np.full_like(x, model.mean), np.full_like(x, model.std**2))


def relative_loss_increase(model_loss, benchmark_loss):
    """``(L_model - L_bench) / |L_bench|``; negative means the model is better."""
    lm = np.asarray(model_loss, dtype=float)
    lb = np.asarray(benchmark_loss, dtype=float)
    if np.any(lb == 0):
        raise ZeroBenchmark("benchmark loss is zero")
    out = (lm - lb) / np.abs(lb)
    return float(out) if out.ndim == 0 else out
