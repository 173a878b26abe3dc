"""Feature ingestion, 15-minute resampling, engineering and synthetic data.

CSV layout (features): header row, first column ``timestamp`` formatted
``YYYY-MM-DDThh:mm:ssZ`` (UTC), remaining columns numeric, empty cell =
missing. Frequency CSV: ``timestamp,frequency_hz`` sampled at 1 Hz.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, IrregularTimestamps, MisalignedIntervals, MissingCounterpart
from .moments import SystemParams
from .simulate import _check_step, _run

KINDS = ("load", "renewable", "price", "flow", "generation", "other", "time")
AVAILABILITY = ("day_ahead", "actual")
INTERVAL = pd.Timedelta(minutes=15)
TS_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
F_REF = 50.0
FFILL_LIMIT = 4


@dataclass
class RawSeries:
    name: str
    timestamps: pd.DatetimeIndex
    values: np.ndarray
    resolution_min: int
    kind: str = "other"
    availability: str = "actual"
    country: str = "XX"

    def __post_init__(self):
        self.timestamps = _utc_index(self.timestamps)
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in KINDS:
            raise ConfigError(f"unknown feature kind {self.kind!r}")
        if self.availability not in AVAILABILITY:
            raise ConfigError(f"unknown availability {self.availability!r}")
        if len(self.timestamps) != len(self.values):
            raise DataError(f"{self.name}: timestamps and values differ in length")


@dataclass
class FeatureTable:
    """One row per 15-minute interval start; column metadata alongside."""

    frame: pd.DataFrame
    kinds: dict[str, str] = field(default_factory=dict)
    availability: dict[str, str] = field(default_factory=dict)
    flags: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.frame.index = _utc_index(self.frame.index)
        for col in self.frame.columns:
            self.kinds.setdefault(col, "other")
            self.availability.setdefault(col, "actual")

    @property
    def columns(self) -> list[str]:
        return list(self.frame.columns)

    def day_ahead_columns(self) -> list[str]:
        return [c for c in self.frame.columns if self.availability[c] == "day_ahead"]

    def select(self, columns) -> "FeatureTable":
        columns = list(columns)
        return FeatureTable(
            self.frame[columns].copy(),
            {c: self.kinds[c] for c in columns},
            {c: self.availability[c] for c in columns},
            dict(self.flags),
        )

    def manifest(self, country: str = "CE") -> list[dict]:
        return [
            {"name": c, "kind": self.kinds[c], "availability": self.availability[c], "country": country}
            for c in self.frame.columns
        ]


def _utc_index(ts) -> pd.DatetimeIndex:
    idx = pd.DatetimeIndex(ts)
    if idx.tz is None:
        idx = idx.tz_localize("UTC")
    else:
        idx = idx.tz_convert("UTC")
    return idx


def _check_regular(ts: pd.DatetimeIndex, step: pd.Timedelta, name: str):
    if len(ts) < 2:
        return
    d = np.diff(ts.asi8)
    if np.any(d != step.value):
        raise IrregularTimestamps(f"{name}: timestamps not strictly regular at {step}")


def upsample(series: RawSeries) -> pd.Series:
    """Bring a 15- or 60-minute series onto the 15-minute grid.

    Loads and renewables are linearly interpolated between hourly knots,
    every other kind is forward padded.
    """
    if series.resolution_min not in (15, 60):
        raise ConfigError(f"{series.name}: native resolution {series.resolution_min} min not supported")
    step = pd.Timedelta(minutes=series.resolution_min)
    _check_regular(series.timestamps, step, series.name)
    s = pd.Series(series.values, index=series.timestamps, name=series.name)
    if series.resolution_min == 15:
        return s.copy()
    grid = pd.date_range(s.index[0], s.index[-1], freq=INTERVAL)
    if series.kind in ("load", "renewable"):
        x = grid.asi8.astype(float)
        xp = s.index.asi8.astype(float)
        ok = np.isfinite(s.values)
        out = np.interp(x, xp[ok], s.values[ok])
        # keep hourly gaps as gaps rather than bridging them
        nan_hours = s.reindex(grid, method="ffill").isna().to_numpy()
        out[nan_hours] = np.nan
        return pd.Series(out, index=grid, name=series.name)
    return s.reindex(grid, method="ffill")


def table_from_series(series: list[RawSeries]) -> FeatureTable:
    cols = {s.name: upsample(s) for s in series}
    frame = pd.DataFrame(cols)
    return FeatureTable(
        frame,
        kinds={s.name: s.kind for s in series},
        availability={s.name: s.availability for s in series},
    )


def _pairs(columns, left: str, right: str):
    for c in columns:
        if c.endswith(left):
            base = c[: -len(left)]
            other = base + right
            if other in columns:
                yield base, c, other
            else:
                warnings.warn(f"{c} has no {other} counterpart; skipped", MissingCounterpart, stacklevel=3)


def engineer(table: FeatureTable, ramp_kinds=("load", "renewable", "generation")) -> FeatureTable:
    """Add forecast errors, ramps and unscheduled flows; existing columns untouched.

    Naming conventions: ``<x>_day_ahead``/``<x>_actual`` pairs give
    ``<x>_forecast_error``; ``<x>_scheduled``/``<x>_physical`` pairs give
    ``<x>_unscheduled``; every column of a ramp kind ``c`` gives ``c_ramp``
    (change per 15-minute interval, 0 on the first row).
    """
    frame = table.frame.copy()
    kinds = dict(table.kinds)
    avail = dict(table.availability)
    flags = dict(table.flags)
    cols = list(frame.columns)
    new = {}
    for base, da, act in _pairs(cols, "_day_ahead", "_actual"):
        name = base + "_forecast_error"
        new[name] = frame[da] - frame[act]
        kinds[name], avail[name] = kinds[da], "actual"
    for base, sch, phys in _pairs(cols, "_scheduled", "_physical"):
        name = base + "_unscheduled"
        new[name] = frame[sch] - frame[phys]
        kinds[name], avail[name] = "flow", "actual"
    for c in cols:
        if kinds[c] in ramp_kinds:
            name = c + "_ramp"
            ramp = frame[c].diff()
            ramp.iloc[0] = 0.0
            new[name] = ramp
            kinds[name], avail[name] = kinds[c], avail[c]
            flags[name + ":first_row_filled"] = np.arange(len(frame)) == 0
    if new:
        frame = pd.concat([frame, pd.DataFrame(new, index=frame.index)], axis=1)
    return FeatureTable(frame, kinds, avail, flags)


def aggregate_area(tables: Mapping[str, FeatureTable]) -> FeatureTable:
    """Sum quantities and average prices across countries, column by column."""
    if not tables:
        raise DataError("no tables to aggregate")
    items = list(tables.values())
    index = items[0].frame.index
    for t in items[1:]:
        if not t.frame.index.equals(index):
            raise MisalignedIntervals("country tables do not share the same interval index")
    if len(items) == 1:
        t = items[0]
        return FeatureTable(t.frame.copy(), dict(t.kinds), dict(t.availability), dict(t.flags))
    columns: list[str] = []
    for t in items:
        columns += [c for c in t.frame.columns if c not in columns]
    kinds, avail, out = {}, {}, {}
    for c in columns:
        parts = [t.frame[c] for t in items if c in t.frame.columns]
        owner = next(t for t in items if c in t.frame.columns)
        kinds[c], avail[c] = owner.kinds[c], owner.availability[c]
        stacked = pd.concat(parts, axis=1)
        if kinds[c] == "price":
            out[c] = stacked.mean(axis=1, skipna=True)
        else:
            out[c] = stacked.sum(axis=1, min_count=1)
    return FeatureTable(pd.DataFrame(out, index=index), kinds, avail)


def add_time_encodings(table: FeatureTable) -> FeatureTable:
    idx = table.frame.index
    frame = table.frame.copy()
    minute = idx.minute.to_numpy() + idx.second.to_numpy() / 60.0
    hour = idx.hour.to_numpy() + minute / 60.0
    dow = idx.dayofweek.to_numpy() + hour / 24.0
    kinds = dict(table.kinds)
    avail = dict(table.availability)
    for name, x, period in (("minute", minute, 60.0), ("hour", hour, 24.0), ("weekday", dow, 7.0)):
        phase = 2.0 * np.pi * x / period
        for fn, f in (("sin", np.sin), ("cos", np.cos)):
            col = f"{fn}_{name}"
            frame[col] = f(phase)
            kinds[col], avail[col] = "time", "day_ahead"
    return FeatureTable(frame, kinds, avail, dict(table.flags))


def impute(table: FeatureTable, limit: int = FFILL_LIMIT) -> FeatureTable:
    """Forward fill short gaps, then fill the rest with the column median."""
    frame = table.frame.copy()
    flags = dict(table.flags)
    missing = frame.isna()
    medians = frame.median()
    frame = frame.ffill(limit=limit)
    still = frame.isna()
    for c in frame.columns:
        if missing[c].any():
            flags[c + ":forward_filled"] = (missing[c] & ~still[c]).to_numpy()
        if still[c].any():
            med = medians[c]
            frame[c] = frame[c].fillna(0.0 if math.isnan(med) else med)
            flags[c + ":median_imputed"] = still[c].to_numpy()
    return FeatureTable(frame, dict(table.kinds), dict(table.availability), flags)


# ---------------------------------------------------------------- CSV I/O


def write_feature_csv(frame: pd.DataFrame, path) -> None:
    out = frame.copy()
    out.index = _utc_index(out.index).strftime(TS_FORMAT)
    out.index.name = "timestamp"
    out.to_csv(path, float_format="%.17g", na_rep="", lineterminator="\n")


def read_feature_csv(path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"timestamp": str}, float_precision="round_trip")
    if frame.columns[0] != "timestamp":
        raise DataError(f"{path}: first column must be 'timestamp'")
    idx = pd.to_datetime(frame.pop("timestamp"), format=TS_FORMAT, utc=True)
    frame.index = pd.DatetimeIndex(idx)
    frame.index.name = None
    return frame.astype(float)


def write_manifest(table: FeatureTable, path, country: str = "CE") -> None:
    Path(path).write_text(json.dumps({"features": table.manifest(country)}, indent=1) + "\n")


def read_manifest(path) -> list[dict]:
    doc = json.loads(Path(path).read_text())
    entries = doc["features"] if isinstance(doc, dict) else doc
    for e in entries:
        for key in ("name", "kind", "availability"):
            if key not in e:
                raise ConfigError(f"{path}: manifest entry missing {key!r}")
    return entries


def load_table(csv_path, manifest_path=None) -> FeatureTable:
    frame = read_feature_csv(csv_path)
    kinds, avail = {}, {}
    if manifest_path is not None:
        for e in read_manifest(manifest_path):
            kinds[e["name"]] = e["kind"]
            avail[e["name"]] = e["availability"]
    return FeatureTable(frame, kinds, avail)


@dataclass
class FrequencyRecord:
    """Angular frequency deviation ``omega = 2 pi (f - 50 Hz)`` on a 1 Hz grid."""

    start: pd.Timestamp
    omega: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        self.start = pd.Timestamp(self.start)
        if self.start.tzinfo is None:
            self.start = self.start.tz_localize("UTC")
        self.omega = np.asarray(self.omega, dtype=float)

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=self.omega.size, freq=pd.Timedelta(seconds=self.dt))

    def index_of(self, ts) -> int:
        return int(round((pd.Timestamp(ts) - self.start).total_seconds() / self.dt))

    def window(self, t0, t1) -> "FrequencyRecord":
        i0 = max(self.index_of(t0), 0)
        i1 = min(self.index_of(t1), self.omega.size)
        return FrequencyRecord(self.start + pd.Timedelta(seconds=i0 * self.dt), self.omega[i0:i1], self.dt)

    def to_csv(self, path) -> None:
        f = F_REF + self.omega / (2.0 * np.pi)
        ts = self.timestamps.strftime(TS_FORMAT)
        with open(path, "w") as fh:
            fh.write("timestamp,frequency_hz\n")
            for stamp, v in zip(ts, f):
                fh.write(f"{stamp},{'' if math.isnan(v) else repr(float(v))}\n")

    @classmethod
    def from_csv(cls, path) -> "FrequencyRecord":
        df = pd.read_csv(path, dtype={"timestamp": str}, float_precision="round_trip")
        if list(df.columns[:2]) != ["timestamp", "frequency_hz"]:
            raise DataError(f"{path}: expected columns timestamp,frequency_hz")
        ts = pd.DatetimeIndex(pd.to_datetime(df["timestamp"], format=TS_FORMAT, utc=True))
        if len(ts) == 0:
            raise DataError(f"{path}: empty frequency record")
        secs = (ts.asi8 - ts.asi8[0]) // 1_000_000_000
        if np.any(np.diff(secs) <= 0):
            raise IrregularTimestamps(f"{path}: timestamps must be strictly increasing")
        omega = np.full(int(secs[-1]) + 1, np.nan)
        omega[secs] = 2.0 * np.pi * (df["frequency_hz"].to_numpy(dtype=float) - F_REF)
        return cls(ts[0], omega)


# ------------------------------------------------------- synthetic dataset

# (type, has a day-ahead schedule); together with the fixed columns this
# gives a 77-column engineered table
GEN_TYPES = (
    ("nuclear", True), ("lignite", True), ("hard_coal", True), ("gas", True),
    ("hydro_run_of_river", True), ("pumped_storage", True),
    ("biomass", False), ("oil", False), ("hydro_reservoir", False), ("geothermal", False),
    ("waste", False), ("other_renewable", False), ("other", False), ("coal_gas", False),
)
SYNTH_START = pd.Timestamp("2019-01-07T00:00:00Z")
TRUTH_COLUMNS = ("tau", "kappa", "D", "q", "r")


@dataclass
class SyntheticDataset:
    features: FeatureTable
    frequency: FrequencyRecord
    truth: pd.DataFrame


class DefaultMapping:
    """Documented feature -> parameter rule used as ground truth.

    * ``tau``  = 100 s * (1 + 0.15 sin(2 pi h / 24)), a smooth daily cycle
    * ``kappa``= 300 s, constant
    * ``D``    = 0.007 * (1 + 0.3 tanh(wind anomaly))
    * ``q``    = 2.5e-3 * sin(2 pi (h - 3) / 12) * (0.65 + 0.35 cos(minute phase))
                 + 1e-3 * tanh(generation ramp anomaly); the full hour dominates
    * ``r``    = -2 q / 900, so the imbalance averages to zero over an interval

    ``h`` is the hour of day at the interval start.
    """

    def __call__(self, frame: pd.DataFrame) -> pd.DataFrame:
        idx = frame.index
        h = idx.hour.to_numpy() + idx.minute.to_numpy() / 60.0
        minute_phase = 2 * np.pi * idx.minute.to_numpy() / 60.0
        wind = frame["wind_day_ahead"].to_numpy()
        wind_anom = (wind - wind.mean()) / (wind.std() + 1e-12)
        ramp = frame["generation_day_ahead_ramp"].to_numpy()
        ramp_anom = (ramp - ramp.mean()) / (ramp.std() + 1e-12)
        tau = 100.0 * (1.0 + 0.15 * np.sin(2 * np.pi * h / 24.0))
        kappa = np.full(len(frame), 300.0)
        D = 0.007 * (1.0 + 0.3 * np.tanh(wind_anom))
        q = 2.5e-3 * np.sin(2 * np.pi * (h - 3.0) / 12.0) * (0.65 + 0.35 * np.cos(minute_phase))
        q = q + 1e-3 * np.tanh(ramp_anom)
        r = -2.0 * q / 900.0
        return pd.DataFrame({"tau": tau, "kappa": kappa, "D": D, "q": q, "r": r}, index=idx)


def _ar1(rng, n, phi, sigma):
    x = np.empty(n)
    x[0] = rng.normal(0, sigma / math.sqrt(1 - phi * phi))
    eps = rng.normal(0, sigma, n)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + eps[i]
    return x


def synth_features(rng: np.random.Generator, n_days: int, start=SYNTH_START) -> FeatureTable:
    """Correlated, daily-periodic raw features on the 15-minute grid, engineered and time-encoded."""
    n = 96 * n_days
    idx = pd.date_range(start, periods=n, freq=INTERVAL)
    h = idx.hour.to_numpy() + idx.minute.to_numpy() / 60.0
    hourly = np.floor(h)
    load_shape = 1.0 + 0.2 * np.sin(2 * np.pi * (h - 9.0) / 24.0) + 0.08 * np.sin(4 * np.pi * h / 24.0)
    load_actual = 300.0 * load_shape * (1.0 + 0.02 * _ar1(rng, n, 0.98, 0.2))
    load_da = 300.0 * (1.0 + 0.2 * np.sin(2 * np.pi * (hourly + 0.5 - 9.0) / 24.0)
                       + 0.08 * np.sin(4 * np.pi * (hourly + 0.5) / 24.0))
    wind = 40.0 * np.exp(0.4 * _ar1(rng, n, 0.995, 0.1))
    wind_actual = wind * (1.0 + 0.05 * rng.normal(size=n))
    cloud = np.clip(0.7 + 0.2 * _ar1(rng, n, 0.99, 0.1), 0.0, 1.0)
    solar_shape = np.clip(np.sin(np.pi * (h - 6.0) / 12.0), 0.0, None)
    solar_da = 60.0 * np.clip(np.sin(np.pi * (hourly + 0.5 - 6.0) / 12.0), 0.0, None)
    solar_actual = 60.0 * solar_shape * cloud
    gen_da = load_da - solar_da - 0.8 * wind
    gen_actual = load_actual - solar_actual - wind_actual
    price = 45.0 + 30.0 * (load_shape - 1.0) - 0.2 * (wind - 40.0) + rng.normal(0, 2.0, n)
    sched = 5.0 * np.sin(2 * np.pi * hourly / 24.0)
    phys = sched + _ar1(rng, n, 0.9, 0.5)
    cols = {
        "load_day_ahead": (load_da, "load", "day_ahead"),
        "load_actual": (load_actual, "load", "actual"),
        "wind_day_ahead": (wind, "renewable", "day_ahead"),
        "wind_actual": (wind_actual, "renewable", "actual"),
        "solar_day_ahead": (solar_da, "renewable", "day_ahead"),
        "solar_actual": (solar_actual, "renewable", "actual"),
        "generation_day_ahead": (gen_da, "generation", "day_ahead"),
        "generation_actual": (gen_actual, "generation", "actual"),
        "day_ahead_price": (price, "price", "day_ahead"),
        "intraday_price": (price + rng.normal(0, 3.0, n), "price", "actual"),
        "flow_scheduled": (sched, "flow", "day_ahead"),
        "flow_physical": (phys, "flow", "actual"),
    }
    # dispatchable mix: fixed shares of the residual load plus slow fluctuations
    shares = rng.dirichlet(np.ones(len(GEN_TYPES)))
    for (gtype, has_da), share in zip(GEN_TYPES, shares):
        base = share * gen_da
        actual = share * gen_actual * (1.0 + 0.03 * _ar1(rng, n, 0.97, 0.25))
        cols[f"{gtype}_actual"] = (actual, "generation", "actual")
        if has_da:
            cols[f"{gtype}_day_ahead"] = (base, "generation", "day_ahead")
    frame = pd.DataFrame({k: v[0] for k, v in cols.items()}, index=idx)
    table = FeatureTable(frame, {k: v[1] for k, v in cols.items()}, {k: v[2] for k, v in cols.items()})
    return add_time_encodings(engineer(table))


def trailing_integral(omega: np.ndarray, i: int, history: int, dt: float = 1.0) -> float:
    """Trapezoidal integral of ``omega`` over the ``history`` samples before index ``i``."""
    seg = omega[i - history:i + 1]
    return float(dt * (seg.sum() - 0.5 * (seg[0] + seg[-1])))


def simulate_record(
    truth: pd.DataFrame,
    rng: np.random.Generator,
    dt: float = 0.1,
    history: int = 60,
    theta_mode: str = "window",
    burn_in: int = 4,
) -> np.ndarray:
    """1 Hz omega record driven by per-interval parameters.

    omega is always carried over between intervals. ``theta_mode="window"``
    restarts the integral-control state at each interval from the trailing
    ``history``-second integral of omega, the same quantity the model uses as
    its initial theta mean. ``"chain"`` carries theta over as well.
    """
    if theta_mode not in ("window", "chain"):
        raise ConfigError("theta_mode must be 'window' or 'chain'")
    steps = int(round(900.0 / dt))
    every = int(round(1.0 / dt))
    if abs(steps * dt - 900.0) > 1e-9 or abs(every * dt - 1.0) > 1e-9:
        raise ConfigError("dt must divide one second")
    params = [SystemParams(*row) for row in truth[list(TRUTH_COLUMNS)].itertuples(index=False)]
    warm = [params[0]] * burn_in
    n = len(params)
    omega = np.empty((burn_in + n) * 900 + 1)
    th, om = 0.0, 0.0
    for k, p in enumerate(warm + params):
        _check_step(p, dt)
        i0 = k * 900
        if theta_mode == "window" and i0 >= history:
            omega[i0] = om
            th = trailing_integral(omega, i0, history)
        z = rng.standard_normal(steps)
        _, seg_om, (th, om) = _run(p, th, om, z, dt, every)
        omega[i0:i0 + 900] = seg_om
    omega[-1] = om
    return omega[burn_in * 900:]


def synth_dataset(
    seed: int,
    n_days: int,
    mapping: Callable[[pd.DataFrame], pd.DataFrame] | None = None,
    dt: float = 0.1,
    theta_mode: str = "window",
) -> SyntheticDataset:
    """Features, a 1 Hz frequency record and the ground-truth parameters."""
    if n_days < 1:
        raise ConfigError("n_days must be >= 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    table = synth_features(rng, n_days)
    truth = (mapping or DefaultMapping())(table.frame)
    truth = truth[list(TRUTH_COLUMNS)].astype(float)
    omega = simulate_record(truth, rng, dt=dt, theta_mode=theta_mode)
    return SyntheticDataset(table, FrequencyRecord(table.frame.index[0], omega), truth)
