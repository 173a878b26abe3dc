"""Interval datasets, normalisation, training, search, evaluation and inference."""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .baselines import (
    ConstantModel,
    DailyProfile,
    constant_nll,
    fit_constant,
    fit_daily_profile,
    profile_nll,
    relative_loss_increase,
)
from .errors import ConfigError, DataError, DimensionMismatch, InsufficientData, ZeroVarianceFeature
from .features import FeatureTable, FrequencyRecord, trailing_integral
from .nn import (
    PARAM_NAMES,
    AdamState,
    Batch,
    ConstraintSpec,
    MlpConfig,
    ParameterModel,
    adam_step,
    glorot_init,
    interval_nll,
    nll_gradient,
)

HISTORY_SECONDS = 60
T_MAX_GRID = (90, 360, 900)
BUNDLE_FORMAT = "gridfreq-bundle"
BUNDLE_VERSION = 1
CSV_PARAM_ORDER = ("tau", "kappa", "D", "q", "r", "sigma_theta0", "sigma_omega0", "cov0")

HYPER_GRID = {
    "lr": (1e-4, 1e-3, 1e-2),
    "dropout": (0.0, 0.1, 0.2, 0.3),
    "units": (64, 128),
    "n_hidden": (3, 5, 7),
    "activation": ("sigmoid", "tanh"),
}


@dataclass(frozen=True)
class ReferenceParams:
    tau: float = 120.0
    kappa: float = 183.0
    D: float = 0.007
    q: float = 0.0042
    r: float = 9e-6

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


# ------------------------------------------------------------------ data


@dataclass
class IntervalSample:
    index: int
    start: pd.Timestamp
    features: np.ndarray
    omega: np.ndarray
    timestamps: pd.DatetimeIndex
    mu_omega0: float
    mu_theta0: float
    has_history: bool


@dataclass
class IntervalDataset:
    """Column-stacked interval samples; ``omega`` has shape ``(n, t_max + 1)``."""

    starts: pd.DatetimeIndex
    X: np.ndarray
    omega: np.ndarray
    mu_omega0: np.ndarray
    mu_theta0: np.ndarray
    has_history: np.ndarray
    feature_names: list[str]

    def __post_init__(self):
        n = len(self.starts)
        if not (self.X.shape[0] == self.omega.shape[0] == self.mu_omega0.size == self.mu_theta0.size == n):
            raise DimensionMismatch("interval arrays disagree on the number of intervals")
        if self.X.shape[1] != len(self.feature_names):
            raise DimensionMismatch("feature matrix width differs from feature names")

    def __len__(self):
        return len(self.starts)

    @property
    def t_max(self) -> int:
        return self.omega.shape[1] - 1

    def subset(self, idx) -> "IntervalDataset":
        idx = np.asarray(idx)
        return IntervalDataset(
            self.starts[idx], self.X[idx], self.omega[idx], self.mu_omega0[idx],
            self.mu_theta0[idx], self.has_history[idx], list(self.feature_names),
        )

    def select_features(self, names) -> "IntervalDataset":
        names = list(names)
        pos = {n: k for k, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise DataError(f"features not in dataset: {missing}")
        cols = [pos[n] for n in names]
        return IntervalDataset(
            self.starts, self.X[:, cols], self.omega, self.mu_omega0, self.mu_theta0, self.has_history, names
        )

    def sample(self, i: int) -> IntervalSample:
        ts = pd.date_range(self.starts[i], periods=self.omega.shape[1], freq="s")
        return IntervalSample(
            i, self.starts[i], self.X[i], self.omega[i], ts,
            float(self.mu_omega0[i]), float(self.mu_theta0[i]), bool(self.has_history[i]),
        )

    def sample_timestamps(self, t_max: int) -> np.ndarray:
        """Flattened timestamps of every sample in every interval (row-major)."""
        offs = np.arange(t_max + 1, dtype=np.int64) * 1_000_000_000
        return (self.starts.asi8[:, None] + offs[None, :]).ravel()


def estimate_initial_means(record: FrequencyRecord, t_i, history: int = HISTORY_SECONDS):
    """``(mu_omega0, mu_theta0, has_history)`` at interval start ``t_i``.

    mu_theta0 is the trapezoidal integral of omega over the preceding
    ``history`` seconds; it falls back to 0 when that window is missing.
    """
    i = record.index_of(t_i)
    if not 0 <= i < record.omega.size:
        raise DataError(f"{t_i} outside the frequency record")
    mu_omega0 = float(record.omega[i])
    if i - history < 0:
        return mu_omega0, 0.0, False
    val = trailing_integral(record.omega, i, history, record.dt)
    if not np.isfinite(val):
        return mu_omega0, 0.0, False
    return mu_omega0, val, True


def build_dataset(
    table: FeatureTable,
    record: FrequencyRecord,
    t_max: int = 900,
    history: int = HISTORY_SECONDS,
    columns=None,
) -> IntervalDataset:
    """One sample per feature row whose ``t_max + 1`` frequency samples are all finite."""
    if record.dt != 1.0:
        raise ConfigError("frequency record must be sampled at 1 Hz")
    if not 1 <= t_max <= 900:
        raise ConfigError(f"t_max={t_max} outside [1, 900]")
    names = list(columns) if columns is not None else table.columns
    X_all = table.frame[names].to_numpy(dtype=float)
    starts, rows, windows, mo, mt, hist = [], [], [], [], [], []
    for k, ts in enumerate(table.frame.index):
        i = record.index_of(ts)
        if i < 0 or i + t_max >= record.omega.size:
            continue
        w = record.omega[i:i + t_max + 1]
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(X_all[k])):
            continue
        m_om, m_th, ok = estimate_initial_means(record, ts, history)
        starts.append(ts)
        rows.append(k)
        windows.append(w)
        mo.append(m_om)
        mt.append(m_th)
        hist.append(ok)
    if not rows:
        raise InsufficientData("no interval has complete features and frequency data")
    return IntervalDataset(
        pd.DatetimeIndex(starts), X_all[rows], np.array(windows), np.array(mo), np.array(mt),
        np.array(hist), names,
    )


def split_chronological(ds: IntervalDataset, fractions=(0.6, 0.2, 0.2)):
    """Disjoint train/validation/test blocks in time order."""
    f = np.asarray(fractions, dtype=float)
    if f.size != 3 or np.any(f < 0) or not np.isclose(f.sum(), 1.0):
        raise ConfigError("fractions must be three non-negative numbers summing to 1")
    order = np.argsort(ds.starts.asi8, kind="stable")
    n = len(order)
    a = int(round(f[0] * n))
    b = a + int(round(f[1] * n))
    parts = (order[:a], order[a:b], order[b:])
    if any(len(p) == 0 for p in parts):
        raise InsufficientData(f"{n} intervals are too few to split {tuple(f)}")
    return tuple(ds.subset(p) for p in parts)


@dataclass
class Normalizer:
    names: list[str]
    mean: np.ndarray
    std: np.ndarray
    dropped: list[str] = field(default_factory=list)

    def apply(self, X, names=None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if names is not None:
            pos = {n: k for k, n in enumerate(names)}
            try:
                X = X[:, [pos[n] for n in self.names]]
            except KeyError as e:
                raise DimensionMismatch(f"feature {e} required by the normalizer is missing") from None
        elif X.shape[-1] != len(self.names):
            raise DimensionMismatch(f"expected {len(self.names)} features, got {X.shape[-1]}")
        return (X - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"names": self.names, "mean": self.mean.tolist(), "std": self.std.tolist(), "dropped": self.dropped}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(list(d["names"]), np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float), list(d["dropped"]))


def fit_normalizer(X, names) -> Normalizer:
    X = np.asarray(X, dtype=float)
    if X.shape[0] < 2:
        raise InsufficientData("normalizer needs at least 2 samples")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    keep = std > 0
    dropped = [n for n, k in zip(names, keep) if not k]
    if dropped:
        warnings.warn(f"dropping zero-variance features: {dropped}", ZeroVarianceFeature, stacklevel=2)
    return Normalizer([n for n, k in zip(names, keep) if k], mean[keep], std[keep], dropped)


# -------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    dropout: float = 0.0
    units: int = 64
    n_hidden: int = 3
    activation: str = "tanh"
    epochs: int = 100
    patience: int = 10
    batch_size: int = 256
    seed: int = 0
    t_max: int = 900

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("epochs, patience and batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 1 <= self.t_max <= 900:
            raise ConfigError("t_max must lie in [1, 900]")

    def mlp(self, input_dim: int) -> MlpConfig:
        return MlpConfig(input_dim, self.n_hidden, self.units, self.activation, self.dropout)


@dataclass
class TrainedModel:
    """Network, constraint layer and normalizer; maps raw features to parameters."""

    network: ParameterModel
    normalizer: Normalizer
    config: TrainConfig

    @property
    def feature_names(self) -> list[str]:
        return list(self.normalizer.names)

    def predict_theta(self, X, names=None) -> np.ndarray:
        return self.network.predict_theta(self.normalizer.apply(X, names))

    def predict_dataset(self, ds: IntervalDataset) -> np.ndarray:
        return self.predict_theta(ds.X, ds.feature_names)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.network.save(d / "checkpoint.json")
        _write_json(d / "normalizer.json", self.normalizer.to_dict())
        _write_json(d / "config.json", asdict(self.config))
        _write_json(d / "features.json", {"features": self.feature_names, "dropped": self.normalizer.dropped})
        _write_json(d / "bundle.json", {"format": BUNDLE_FORMAT, "version": BUNDLE_VERSION})

    @classmethod
    def load(cls, directory) -> "TrainedModel":
        d = Path(directory)
        try:
            meta = json.loads((d / "bundle.json").read_text())
        except FileNotFoundError:
            raise ConfigError(f"{d} is not a model bundle") from None
        if meta.get("format") != BUNDLE_FORMAT or meta.get("version") != BUNDLE_VERSION:
            raise ConfigError(f"{d}: unsupported bundle {meta}")
        net = ParameterModel.load(d / "checkpoint.json")
        norm = Normalizer.from_dict(json.loads((d / "normalizer.json").read_text()))
        cfg = TrainConfig(**json.loads((d / "config.json").read_text()))
        return cls(net, norm, cfg)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _batch(ds: IntervalDataset, Xn: np.ndarray, idx, t_max: int) -> Batch:
    t = np.arange(t_max + 1, dtype=float)
    return Batch(Xn[idx], ds.omega[idx, : t_max + 1], ds.mu_theta0[idx], ds.mu_omega0[idx], t)


def _mean_nll(network: ParameterModel, ds: IntervalDataset, Xn: np.ndarray, t_max: int, chunk: int = 512) -> float:
    total = 0.0
    for s in range(0, len(ds), chunk):
        idx = np.arange(s, min(s + chunk, len(ds)))
        b = _batch(ds, Xn, idx, t_max)
        theta = network.predict_theta(b.X)
        total += float(interval_nll(theta, b.mu_theta0, b.mu_omega0, b.omega, b.t).sum())
    return total / len(ds)


@dataclass
class TrainResult:
    model: TrainedModel
    history: pd.DataFrame
    best_epoch: int
    best_val_loss: float


def train_model(
    train: IntervalDataset,
    val: IntervalDataset,
    cfg: TrainConfig = TrainConfig(),
    spec: ConstraintSpec | None = None,
) -> TrainResult:
    """ADAM on the mean per-interval NLL with early stopping on validation loss.

    History row 0 holds the losses of the initial weights. The returned model
    carries the weights of the best validation epoch.
    """
    if len(train) == 0 or len(val) == 0:
        raise InsufficientData("train and validation splits must be non-empty")
    if cfg.t_max > train.t_max or cfg.t_max > val.t_max:
        raise ConfigError(f"cfg.t_max={cfg.t_max} exceeds the dataset windows")
    spec = spec or ConstraintSpec()
    norm = fit_normalizer(train.X, train.feature_names)
    Xtr = norm.apply(train.X, train.feature_names)
    Xva = norm.apply(val.X, val.feature_names)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    w = glorot_init(cfg.mlp(len(norm.names)), int(rng.integers(2**32)))
    net = ParameterModel(w, spec)
    state = AdamState.zeros_like(w)

    rows = [(0, _mean_nll(net, train, Xtr, cfg.t_max), _mean_nll(net, val, Xva, cfg.t_max))]
    best_val, best_epoch, best_w = rows[0][2], 0, w.copy()
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        tot = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = nll_gradient(w, spec, _batch(train, Xtr, idx, cfg.t_max), training=True, rng=rng)
            scale = 1.0 / len(idx)
            adam_step(w, [g * scale for g in grads], state, cfg.lr)
            tot += loss
        val_loss = _mean_nll(net, val, Xva, cfg.t_max)
        rows.append((epoch, tot / len(train), val_loss))
        if val_loss < best_val:
            best_val, best_epoch, best_w = val_loss, epoch, w.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    history = pd.DataFrame(rows, columns=["epoch", "train_loss", "val_loss"])
    model = TrainedModel(ParameterModel(best_w, spec), norm, cfg)
    return TrainResult(model, history, best_epoch, float(best_val))


def grid_configs(grid=HYPER_GRID) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def random_search(
    train: IntervalDataset,
    val: IntervalDataset,
    n_trials: int = 20,
    seed: int = 0,
    base: TrainConfig = TrainConfig(),
    grid=HYPER_GRID,
    spec: ConstraintSpec | None = None,
):
    """Sample grid points without replacement; return the best result and a leaderboard."""
    configs = grid_configs(grid)
    if not 1 <= n_trials <= len(configs):
        raise ConfigError(f"n_trials must lie in [1, {len(configs)}]")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    picks = rng.choice(len(configs), size=n_trials, replace=False)
    results, rows = [], []
    for trial, k in enumerate(picks):
        cfg = replace(base, **configs[k], seed=int(base.seed) + trial)
        res = train_model(train, val, cfg, spec)
        results.append(res)
        rows.append({"trial": trial, **configs[k], "seed": cfg.seed, "best_epoch": res.best_epoch,
                     "val_loss": res.best_val_loss})
    board = pd.DataFrame(rows).sort_values(["val_loss", "trial"], kind="stable").reset_index(drop=True)
    best = results[int(board.loc[0, "trial"])]
    return best, board


# ------------------------------------------------------------ evaluation


def summarize(losses) -> dict[str, float]:
    x = np.asarray(losses, dtype=float)
    return {
        "median_nll": float(np.median(x)),
        "q25_nll": float(np.quantile(x, 0.25)),
        "q75_nll": float(np.quantile(x, 0.75)),
    }


def evaluate(model: TrainedModel, ds: IntervalDataset, t_max: int = 900):
    """Per-interval NLL on the first ``t_max`` seconds and its summary."""
    if not 1 <= t_max <= ds.t_max:
        raise ConfigError(f"t_max={t_max} outside [1, {ds.t_max}]")
    theta = model.predict_dataset(ds)
    t = np.arange(t_max + 1, dtype=float)
    losses = interval_nll(theta, ds.mu_theta0, ds.mu_omega0, ds.omega[:, : t_max + 1], t)
    return losses, summarize(losses)


def profile_interval_nll(profile: DailyProfile, ds: IntervalDataset, t_max: int = 900) -> np.ndarray:
    ts = pd.DatetimeIndex(ds.sample_timestamps(t_max), tz="UTC")
    pts = profile_nll(profile, ds.omega[:, : t_max + 1].ravel(), ts)
    return pts.reshape(len(ds), t_max + 1).sum(axis=1)


def constant_interval_nll(model: ConstantModel, ds: IntervalDataset, t_max: int = 900) -> np.ndarray:
    return constant_nll(model, ds.omega[:, : t_max + 1]).sum(axis=1)


# -------------------------------------------------------------- inference


def infer_params(model: TrainedModel, ds: IntervalDataset) -> pd.DataFrame:
    theta = model.predict_dataset(ds)
    df = pd.DataFrame(theta, columns=list(PARAM_NAMES), index=ds.starts)
    df.index.name = "timestamp"
    return df[list(CSV_PARAM_ORDER)]


def daily_aggregate(params: pd.DataFrame) -> pd.DataFrame:
    """Mean and 25%/75% quantiles of each parameter per time of day."""
    tod = params.index.strftime("%H:%M")
    g = params.groupby(tod)
    out = pd.concat({"mean": g.mean(), "q25": g.quantile(0.25), "q75": g.quantile(0.75)}, axis=1)
    out = out.swaplevel(axis=1).sort_index(axis=1, level=0, sort_remaining=False)
    out.index.name = "time_of_day"
    return out


def reference_ratios(params: pd.DataFrame, reference) -> dict[str, float]:
    """Time-averaged ``|theta_j|`` divided by the reference value."""
    ref = reference.as_dict() if hasattr(reference, "as_dict") else dict(reference)
    return {k: float(params[k].abs().mean() / abs(v)) for k, v in ref.items()}


def write_params_csv(params: pd.DataFrame, path) -> None:
    out = params[list(CSV_PARAM_ORDER)].copy()
    out.index = pd.DatetimeIndex(out.index).strftime("%Y-%m-%dT%H:%M:%SZ")
    out.index.name = "timestamp"
    out.to_csv(path, float_format="%.17g", lineterminator="\n")


def scaling_variants() -> dict[str, ConstraintSpec]:
    """The "standard" and "none" layers plus every combination of the varied scalings."""
    base = ConstraintSpec()
    out = {"standard": base, "none": ConstraintSpec.unscaled()}
    for s1, s3, s5, s6, s7, s8 in itertools.product((1.0,), (0.1,), (1000.0, 100.0), (0.01, 0.1), (1e-3, 1e-2), (1e-5, 1e-6)):
        name = f"s1={s1:g},s3={s3:g},s5={s5:g},s6={s6:g},s7={s7:g},s8={s8:g}"
        out[name] = replace(base, s1=s1, s3=s3, s5=s5, s6=s6, s7=s7, s8=s8)
    return out


def scaling_sweep(
    train: IntervalDataset,
    val: IntervalDataset,
    target: IntervalDataset,
    variants: dict[str, ConstraintSpec],
    seeds=range(10),
    base: TrainConfig = TrainConfig(),
    reference=ReferenceParams(),
) -> pd.DataFrame:
    """Train each variant once per seed and report reference ratios across seeds."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    rows = []
    for name, spec in variants.items():
        ratios = []
        for seed in seeds:
            res = train_model(train, val, replace(base, seed=int(seed)), spec)
            ratios.append(reference_ratios(infer_params(res.model, target), reference))
        for param in ratios[0]:
            vals = np.array([r[param] for r in ratios])
            rows.append({"variant": name, "parameter": param, "mean_ratio": float(vals.mean()),
                         "min_ratio": float(vals.min()), "max_ratio": float(vals.max()), "n_seeds": len(seeds)})
    return pd.DataFrame(rows)


def fit_baselines(train: IntervalDataset):
    """Daily profile and constant model from the training intervals' samples.

    The last sample of each window is skipped: it is the first sample of the
    next interval.
    """
    t = max(train.t_max - 1, 0)
    om = train.omega[:, : t + 1].ravel()
    ts = pd.DatetimeIndex(train.sample_timestamps(t), tz="UTC")
    return fit_daily_profile(om, ts), fit_constant(om)


def benchmark_table(model: TrainedModel, train: IntervalDataset, test: IntervalDataset, t_max_grid=T_MAX_GRID):
    """Summary rows per (t_max, predictor) and the per-interval losses behind them."""
    profile, const = fit_baselines(train)
    rows, per_interval = [], {}
    for t_max in t_max_grid:
        losses = {
            "model": evaluate(model, test, t_max)[0],
            "daily_profile": profile_interval_nll(profile, test, t_max),
            "constant": constant_interval_nll(const, test, t_max),
        }
        rel = relative_loss_increase(losses["model"], losses["daily_profile"])
        for name, x in losses.items():
            row = {"t_max": int(t_max), "split": "test", "predictor": name, **summarize(x)}
            if name == "model":
                row["median_relative_loss_increase"] = float(np.median(rel))
            rows.append(row)
        per_interval[int(t_max)] = losses
    return pd.DataFrame(rows), per_interval
