"""KernelSHAP attributions, a brute-force Shapley oracle and aggregations.

The value of a coalition ``S`` is the interventional expectation
``v(S) = mean_b f(x_S, b_{not S})`` over a background set ``b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, SingularRegression, TooManyFeatures

EXACT_MAX_FEATURES = 12
MAX_BACKGROUND = 200


@dataclass
class ShapResult:
    phi: np.ndarray  # (N,) or (N, P)
    base: np.ndarray | float  # v(empty set)
    fx: np.ndarray | float  # f(x)
    n_coalitions: int
    enumerated: bool


def _as_2d(y):
    y = np.asarray(y, dtype=float)
    return y[:, None] if y.ndim == 1 else y


def _coalition_values(f, x, background, masks, chunk_rows: int = 200_000) -> np.ndarray:
    """``v(S)`` for every boolean mask row; returns ``(n_masks, P)``."""
    nb, n = background.shape
    per = max(1, chunk_rows // nb)
    out = []
    for s in range(0, len(masks), per):
        m = masks[s:s + per]
        X = np.where(m[:, None, :], x[None, None, :], background[None, :, :]).reshape(-1, n)
        y = _as_2d(f(X))
        out.append(y.reshape(len(m), nb, -1).mean(axis=1))
    return np.concatenate(out, axis=0)


def _check(x, background):
    x = np.asarray(x, dtype=float).ravel()
    bg = np.atleast_2d(np.asarray(background, dtype=float))
    if bg.shape[0] == 0:
        raise DataError("background set is empty")
    if bg.shape[1] != x.size:
        raise DataError(f"background has {bg.shape[1]} features, x has {x.size}")
    return x, bg


def _all_masks(n: int) -> np.ndarray:
    codes = np.arange(2**n, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def exact_shapley(f: Callable, x, background) -> ShapResult:
    """Shapley values by enumerating all ``2^N`` coalitions (``N <= 12``)."""
    x, bg = _check(x, background)
    n = x.size
    if n > EXACT_MAX_FEATURES:
        raise TooManyFeatures(f"exact Shapley limited to {EXACT_MAX_FEATURES} features, got {n}")
    masks = _all_masks(n)
    v = _coalition_values(f, x, bg, masks)
    sizes = masks.sum(axis=1)
    fact = [math.factorial(k) for k in range(n + 1)]
    phi = np.zeros((n, v.shape[1]))
    codes = np.arange(2**n)
    for k in range(n):
        without = codes[~masks[:, k]]
        s = sizes[without]
        w = np.array([fact[m] * fact[n - m - 1] for m in s], dtype=float) / fact[n]
        phi[k] = (w[:, None] * (v[without | (1 << k)] - v[without])).sum(axis=0)
    return _result(phi, v[0], v[-1], len(masks), True)


def _result(phi, base, fx, n_coal, enumerated):
    if phi.shape[1] == 1:
        return ShapResult(phi[:, 0], float(base[0]), float(fx[0]), n_coal, enumerated)
    return ShapResult(phi, base, fx, n_coal, enumerated)


def shapley_kernel_weight(n: int, s: int) -> float:
    return (n - 1) / (math.comb(n, s) * s * (n - s))


def _sample_masks(n: int, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Paired sampling: each drawn coalition is followed by its complement."""
    sizes = np.arange(1, n)
    p = (n - 1) / (sizes * (n - sizes))
    p = p / p.sum()
    n_pairs = budget // 2
    drawn = rng.choice(sizes, size=n_pairs, p=p)
    masks = np.zeros((2 * n_pairs, n), dtype=bool)
    for i, s in enumerate(drawn):
        idx = rng.choice(n, size=s, replace=False)
        masks[2 * i, idx] = True
        masks[2 * i + 1] = ~masks[2 * i]
    return masks


def kernel_shap(
    f: Callable,
    x,
    background,
    n_coalitions: int | None = None,
    seed: int = 0,
) -> ShapResult:
    """KernelSHAP with the efficiency constraint ``sum(phi) = f(x) - base``.

    When ``n_coalitions`` is ``None`` or covers all ``2^N - 2`` proper
    coalitions they are enumerated with Shapley-kernel weights; otherwise
    coalitions are sampled in complementary pairs with probability
    proportional to the kernel and weighted uniformly.
    """
    x, bg = _check(x, background)
    n = x.size
    full = 2**n - 2
    if n == 1:
        v = _coalition_values(f, x, bg, np.array([[False], [True]]))
        return _result((v[1] - v[0])[None, :], v[0], v[1], 2, True)
    if n_coalitions is not None and n_coalitions < n + 2:
        raise ConfigError(f"n_coalitions must be >= N + 2 = {n + 2}")
    enumerate_all = n_coalitions is None or n_coalitions >= full
    if enumerate_all:
        if n > 20:
            raise ConfigError("full enumeration requested for more than 20 features; pass n_coalitions")
        masks = _all_masks(n)[1:-1]
        sizes = masks.sum(axis=1)
        weights = np.array([shapley_kernel_weight(n, s) for s in sizes])
    else:
        masks = _sample_masks(n, n_coalitions, np.random.Generator(np.random.Philox(np.random.SeedSequence(seed))))
        weights = np.ones(len(masks))
    ends = _coalition_values(f, x, bg, np.array([np.zeros(n, bool), np.ones(n, bool)]))
    base, fx = ends[0], ends[1]
    v = _coalition_values(f, x, bg, masks)
    phi = _constrained_wls(masks.astype(float), v - base, weights, fx - base)
    return _result(phi, base, fx, len(masks) + 2, enumerate_all)


def _constrained_wls(Z, y, w, total):
    """Minimise ``sum_S w_S (y_S - Z_S phi)^2`` subject to ``sum(phi) = total``.

    The last coordinate is eliminated, which turns the problem into an
    ordinary weighted least squares in ``N - 1`` unknowns.
    """
    A = Z[:, :-1] - Z[:, -1:]
    b = y - Z[:, -1:] * total[None, :]
    sw = np.sqrt(w)[:, None]
    Aw, bw = A * sw, b * sw
    sol, _, rank, _ = np.linalg.lstsq(Aw, bw, rcond=None)
    if rank < A.shape[1]:
        raise SingularRegression(f"coalition design has rank {rank} < {A.shape[1]}; increase n_coalitions")
    last = total - sol.sum(axis=0)
    return np.vstack([sol, last[None, :]])


def background_sample(X, size: int = MAX_BACKGROUND, seed: int = 0) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if len(X) <= size:
        return X.copy()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return X[np.sort(rng.choice(len(X), size=size, replace=False))]


def explain_rows(
    f: Callable,
    X,
    background,
    feature_names,
    output_names,
    interval_ids=None,
    n_coalitions: int | None = None,
    seed: int = 0,
) -> pd.DataFrame:
    """Long table ``interval,parameter,feature,feature_value,shap_value,base_value``.

    ``f`` maps a ``(M, N)`` feature matrix to ``(M, P)`` outputs named by
    ``output_names``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ids = list(range(len(X))) if interval_ids is None else list(interval_ids)
    frames = []
    for row, iid in zip(X, ids):
        res = kernel_shap(f, row, background, n_coalitions, seed)
        phi = res.phi if res.phi.ndim == 2 else res.phi[:, None]
        base = np.atleast_1d(res.base)
        for j, pname in enumerate(output_names):
            frames.append(pd.DataFrame({
                "interval": iid,
                "parameter": pname,
                "feature": list(feature_names),
                "feature_value": row,
                "shap_value": phi[:, j],
                "base_value": base[j],
            }))
    if not frames:
        raise DataError("nothing to explain")
    return pd.concat(frames, ignore_index=True)


def importance(explanations: pd.DataFrame) -> pd.DataFrame:
    """Mean ``|phi|`` per parameter and feature, most important first."""
    if explanations.empty:
        raise DataError("empty explanation set")
    imp = (
        explanations.assign(abs_shap=explanations["shap_value"].abs())
        .groupby(["parameter", "feature"], sort=True)["abs_shap"].mean()
        .rename("mean_abs_shap").reset_index()
    )
    return imp.sort_values(["parameter", "mean_abs_shap", "feature"], ascending=[True, False, True],
                           kind="stable").reset_index(drop=True)


def dependency_export(explanations: pd.DataFrame, feature: str, parameter: str | None = None) -> pd.DataFrame:
    sel = explanations["feature"] == feature
    if parameter is not None:
        sel &= explanations["parameter"] == parameter
    out = explanations.loc[sel, ["interval", "parameter", "feature_value", "shap_value"]]
    if out.empty:
        raise DataError(f"no explanations for feature {feature!r}")
    return out.reset_index(drop=True)


def write_shap_csv(explanations: pd.DataFrame, path) -> None:
    cols = ["interval", "parameter", "feature", "feature_value", "shap_value", "base_value"]
    explanations[cols].to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
