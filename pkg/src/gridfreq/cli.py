"""Command-line entry point: ``gridfreq <command> [options]``.

Options come from ``--config`` (a JSON object whose keys are the long option
names with dashes or underscores) and are overridden by explicit flags.
Every run writes ``run_manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import ConfigError, DataError, GridFreqError
from .explain import background_sample, explain_rows, importance, write_shap_csv
from .features import (
    FrequencyRecord,
    RawSeries,
    add_time_encodings,
    aggregate_area,
    engineer,
    impute,
    load_table,
    synth_dataset,
    table_from_series,
    write_feature_csv,
    write_manifest,
)
from .nn import PARAM_NAMES
from .simulate import (
    SCENARIOS,
    SdeConfig,
    acf,
    empirical_daily_profile,
    excess_kurtosis,
    histogram,
    increments,
    scenario_params,
    synthesize,
)
from .train import (
    ReferenceParams,
    TrainConfig,
    TrainedModel,
    benchmark_table,
    build_dataset,
    daily_aggregate,
    evaluate,
    infer_params,
    random_search,
    reference_ratios,
    scaling_sweep,
    scaling_variants,
    split_chronological,
    train_model,
    write_params_csv,
)

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "t_max": None,
    "day_ahead_only": False,
    "features": None,
    "manifest": None,
    "frequency": None,
    "model": None,
    "raw": None,
    "splits": "0.6,0.2,0.2",
    "lr": 1e-3,
    "dropout": 0.0,
    "units": 64,
    "n_hidden": 3,
    "activation": "tanh",
    "epochs": 100,
    "patience": 10,
    "batch_size": 256,
    "trials": 20,
    "days": 1,
    "dt": 0.01,
    "scenario": "hourly",
    "theta_mode": "window",
    "parameters": "q,r,tau",
    "n_explain": 20,
    "n_coalitions": 2048,
    "background": 100,
    "n_seeds": 10,
    "variants": "standard,none",
    "reference": None,
    "max_lag": 7200,
}
# paths are recorded in the manifest by name and digest, not location
PATH_KEYS = ("features", "manifest", "frequency", "model", "raw", "reference")
TRAIN_KEYS = ("lr", "dropout", "units", "n_hidden", "activation", "epochs", "patience", "batch_size")


# ----------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.rglob("*") if f.is_file())
        return {"name": p.name, "files": {str(f.relative_to(p)): _sha256(f) for f in files}}
    return {"name": p.name, "sha256": _sha256(p)}


def _versions() -> dict:
    import numba

    return {
        "gridfreq": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "numba": numba.__version__,
    }


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, val in doc.items():
            k = key.replace("-", "_")
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[k] = val
    for k in DEFAULTS:
        val = getattr(args, k, None)
        if val is not None:
            cfg[k] = val
    if cfg["t_max"] is not None and not isinstance(cfg["t_max"], list):
        cfg["t_max"] = [cfg["t_max"]]
    return cfg


def _need(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"--{k.replace('_', '-')} is required")
        if k in PATH_KEYS and not Path(cfg[k]).exists():
            raise DataError(f"{cfg[k]} does not exist")


def _splits(cfg) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in str(cfg["splits"]).split(","))
    except ValueError:
        raise ConfigError(f"bad --splits {cfg['splits']!r}") from None
    if len(parts) != 3:
        raise ConfigError("--splits needs three comma-separated fractions")
    return parts


def _train_config(cfg, t_max: int) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS}, seed=int(cfg["seed"]), t_max=int(t_max))


def _single_t_max(cfg) -> int:
    tm = cfg["t_max"] or [900]
    if len(tm) != 1:
        raise ConfigError("this command takes a single --t-max value")
    return int(tm[0])


def _load_data(cfg, columns=None):
    _need(cfg, "features", "frequency")
    table = load_table(cfg["features"], cfg["manifest"])
    if cfg["day_ahead_only"]:
        if cfg["manifest"] is None:
            raise ConfigError("--day-ahead-only needs --manifest to know column availability")
        keep = table.day_ahead_columns()
        if not keep:
            raise DataError("no day-ahead columns in the feature table")
        table = table.select(keep)
    table = impute(table)
    record = FrequencyRecord.from_csv(cfg["frequency"])
    ds = build_dataset(table, record, t_max=900, columns=columns)
    return ds, split_chronological(ds, _splits(cfg))


def _load_model(cfg) -> TrainedModel:
    _need(cfg, "model")
    model = TrainedModel.load(cfg["model"])
    return model


class Run:
    """Collects outputs of one command and writes the manifest last."""

    def __init__(self, command: str, cfg: dict, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.outputs: list[Path] = []
        self.extra: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def finish(self) -> None:
        shown = {k: v for k, v in self.cfg.items() if k not in PATH_KEYS}
        canon = json.dumps(shown, sort_keys=True, separators=(",", ":"))
        inputs = {k: _digest(self.cfg[k]) for k in PATH_KEYS if self.cfg.get(k) is not None}
        manifest = {
            "command": self.command,
            "config": shown,
            "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
            "seed": self.cfg["seed"],
            "inputs": inputs,
            "outputs": {str(p.relative_to(self.out)): _digest(p) for p in sorted(set(self.outputs))},
            "versions": _versions(),
            **self.extra,
        }
        _json(self.out / "run_manifest.json", manifest)


# ---------------------------------------------------------------- commands


def cmd_ingest(cfg, run: Run):
    """Raw per-country CSVs described by a JSON source list -> one feature table."""
    _need(cfg, "raw")
    spec_path = Path(cfg["raw"])
    doc = json.loads(spec_path.read_text())
    by_country: dict[str, list[RawSeries]] = {}
    for src in doc.get("sources", []):
        frame = pd.read_csv(spec_path.parent / src["file"], dtype={"timestamp": str}, float_precision="round_trip")
        ts = pd.to_datetime(frame["timestamp"], format="%Y-%m-%dT%H:%M:%SZ", utc=True)
        for col in src["columns"]:
            if col["name"] not in frame.columns:
                raise DataError(f"{src['file']}: column {col['name']!r} missing")
            by_country.setdefault(src["country"], []).append(RawSeries(
                col["name"], ts, frame[col["name"]].to_numpy(dtype=float), int(src["resolution_min"]),
                col.get("kind", "other"), col.get("availability", "actual"), src["country"],
            ))
    if not by_country:
        raise DataError(f"{spec_path}: no sources listed")
    tables = {c: engineer(table_from_series(s)) for c, s in sorted(by_country.items())}
    table = impute(add_time_encodings(aggregate_area(tables)))
    write_feature_csv(table.frame, run.path("features.csv"))
    write_manifest(table, run.path("feature_manifest.json"), country="+".join(sorted(by_country)))
    flags = pd.DataFrame({k: v.astype(np.int8) for k, v in sorted(table.flags.items())}, index=table.frame.index)
    write_feature_csv(flags, run.path("provenance_flags.csv"))


def cmd_synth_data(cfg, run: Run):
    """Synthetic features, frequency record and ground truth."""
    ds = synth_dataset(int(cfg["seed"]), int(cfg["days"]), dt=0.1, theta_mode=cfg["theta_mode"])
    write_feature_csv(ds.features.frame, run.path("features.csv"))
    write_manifest(ds.features, run.path("feature_manifest.json"), country="SYNTH")
    ds.frequency.to_csv(run.path("frequency.csv"))
    write_feature_csv(ds.truth, run.path("truth.csv"))


def _write_train_outputs(run: Run, res, test):
    res.model.save(run.out / "model")
    run.outputs += sorted((run.out / "model").iterdir())
    res.history.to_csv(run.path("history.csv"), index=False, float_format="%.17g", lineterminator="\n")
    _, summ = evaluate(res.model, test, res.model.config.t_max)
    metrics = [{**summ, "t_max": res.model.config.t_max, "split": "test"}]
    _json(run.path("metrics.json"), {"best_epoch": res.best_epoch, "best_val_loss": res.best_val_loss,
                                     "metrics": metrics})


def cmd_train(cfg, run: Run):
    t_max = _single_t_max(cfg)
    _, (train, val, test) = _load_data(cfg)
    res = train_model(train, val, _train_config(cfg, t_max))
    run.extra["feature_columns"] = res.model.feature_names
    _write_train_outputs(run, res, test)


def cmd_tune(cfg, run: Run):
    t_max = _single_t_max(cfg)
    _, (train, val, test) = _load_data(cfg)
    best, board = random_search(train, val, int(cfg["trials"]), int(cfg["seed"]), _train_config(cfg, t_max))
    board.to_csv(run.path("leaderboard.csv"), index=False, float_format="%.17g", lineterminator="\n")
    run.extra["feature_columns"] = best.model.feature_names
    run.extra["best_config"] = asdict(best.model.config)
    _write_train_outputs(run, best, test)


def _model_and_data(cfg):
    """Load a bundle or train one on the fly; returns model and splits."""
    if cfg["model"] is not None:
        model = _load_model(cfg)
        ds, splits = _load_data(cfg)
        if cfg["day_ahead_only"]:
            extra = set(model.feature_names) - set(ds.feature_names)
            if extra:
                raise ConfigError(f"model uses features not available day-ahead: {sorted(extra)[:5]}")
        return model, splits
    ds, (train, val, test) = _load_data(cfg)
    model = train_model(train, val, _train_config(cfg, 900)).model
    return model, (train, val, test)


def cmd_predict(cfg, run: Run):
    model, (train, val, test) = _model_and_data(cfg)
    grid = [int(t) for t in (cfg["t_max"] or [90, 360, 900])]
    results, rows = [], []
    for t_max in grid:
        losses, summ = evaluate(model, test, t_max)
        results.append({**summ, "t_max": t_max, "split": "test"})
        rows.append(pd.DataFrame({"timestamp": test.starts.strftime("%Y-%m-%dT%H:%M:%SZ"), "t_max": t_max, "nll": losses}))
    run.extra["feature_columns"] = model.feature_names
    run.extra["n_feature_columns"] = len(model.feature_names)
    _json(run.path("metrics.json"), {"metrics": results, "n_feature_columns": len(model.feature_names)})
    pd.concat(rows).to_csv(run.path("interval_nll.csv"), index=False, float_format="%.17g", lineterminator="\n")


def cmd_benchmark(cfg, run: Run):
    model, (train, val, test) = _model_and_data(cfg)
    grid = [int(t) for t in (cfg["t_max"] or [90, 360, 900])]
    table, _ = benchmark_table(model, train, test, grid)
    table.to_csv(run.path("benchmark.csv"), index=False, float_format="%.17g", lineterminator="\n")
    recs = table.replace({np.nan: None}).to_dict(orient="records")
    _json(run.path("metrics.json"), {"metrics": recs})
    run.extra["feature_columns"] = model.feature_names


def cmd_identify(cfg, run: Run):
    model = _load_model(cfg)
    ds, _ = _load_data(cfg)
    params = infer_params(model, ds)
    write_params_csv(params, run.path("params.csv"))
    daily = daily_aggregate(params)
    daily.columns = [f"{p}_{s}" for p, s in daily.columns]
    daily.to_csv(run.path("daily_profile.csv"), float_format="%.17g", lineterminator="\n")
    _json(run.path("reference_ratios.json"), reference_ratios(params, _reference(cfg)))


def _reference(cfg):
    if cfg["reference"] is None:
        return ReferenceParams()
    truth = pd.read_csv(cfg["reference"])
    return ReferenceParams(**{k: float(truth[k].abs().mean()) for k in ("tau", "kappa", "D", "q", "r")})


def cmd_explain(cfg, run: Run):
    model = _load_model(cfg)
    _, (train, val, test) = _load_data(cfg)
    names = [p.strip() for p in str(cfg["parameters"]).split(",") if p.strip()]
    bad = [p for p in names if p not in PARAM_NAMES]
    if bad:
        raise ConfigError(f"unknown parameters {bad}; choose from {PARAM_NAMES}")
    cols = [PARAM_NAMES.index(p) for p in names]
    feats = model.feature_names
    train_X = train.select_features(feats).X
    test_X = test.select_features(feats).X
    n = min(int(cfg["n_explain"]), len(test_X))
    rows = np.unique(np.linspace(0, len(test_X) - 1, n).round().astype(int))
    bg = background_sample(train_X, int(cfg["background"]), int(cfg["seed"]))

    def f(X):
        return model.predict_theta(X)[:, cols]

    ids = test.starts[rows].strftime("%Y-%m-%dT%H:%M:%SZ")
    expl = explain_rows(f, test_X[rows], bg, feats, names, ids, int(cfg["n_coalitions"]), int(cfg["seed"]))
    write_shap_csv(expl, run.path("shap.csv"))
    importance(expl).to_csv(run.path("importance.csv"), index=False, float_format="%.17g", lineterminator="\n")


def cmd_synthesize(cfg, run: Run):
    """Chained Euler-Maruyama scenario with its summary statistics."""
    if cfg["scenario"] not in SCENARIOS:
        raise ConfigError(f"--scenario must be one of {SCENARIOS}")
    days = int(cfg["days"])
    params = scenario_params(cfg["scenario"], days, int(cfg["seed"]))
    dt = float(cfg["dt"])
    every = int(round(1.0 / dt))
    if abs(every * dt - 1.0) > 1e-12:
        raise ConfigError("--dt must divide one second")
    traj = synthesize(params, 0.0, 0.0, SdeConfig(dt=dt, seed=int(cfg["seed"])), record_every=every)
    traj.to_csv(run.path("trajectory.csv"))
    pd.DataFrame([p.__dict__ for p in params]).to_csv(
        run.path("scenario_params.csv"), index_label="interval", float_format="%.17g", lineterminator="\n")
    om = traj.omega
    max_lag = min(int(cfg["max_lag"]), om.size - 1)
    pd.DataFrame({"lag_seconds": np.arange(max_lag + 1), "acf": acf(om, max_lag)}).to_csv(
        run.path("acf.csv"), index=False, float_format="%.17g", lineterminator="\n")
    dens, edges = histogram(om, bins=100)
    pd.DataFrame({"left": edges[:-1], "right": edges[1:], "density": dens}).to_csv(
        run.path("histogram.csv"), index=False, float_format="%.17g", lineterminator="\n")
    ts = pd.date_range("2019-01-07", periods=om.size, freq="s", tz="UTC")
    empirical_daily_profile(om, ts)[["mean", "std"]].to_csv(
        run.path("daily_profile.csv"), float_format="%.17g", lineterminator="\n")
    stats = {"excess_kurtosis": excess_kurtosis(om), "variance": float(om.var()), "n_samples": int(om.size)}
    for T in (1, 60, 900):
        if T < om.size:
            stats[f"increment_kurtosis_{T}s"] = excess_kurtosis(increments(om, T, 1.0))
    _json(run.path("stats.json"), stats)


def cmd_sweep_scaling(cfg, run: Run):
    _, (train, val, test) = _load_data(cfg)
    all_variants = scaling_variants()
    wanted = [v.strip() for v in str(cfg["variants"]).split(";" if "=" in str(cfg["variants"]) else ",")]
    if wanted == ["all"]:
        wanted = list(all_variants)
    missing = [v for v in wanted if v not in all_variants]
    if missing:
        raise ConfigError(f"unknown variants {missing}")
    base = _train_config(cfg, _single_t_max(cfg))
    table = scaling_sweep(train, val, test, {v: all_variants[v] for v in wanted},
                          seeds=range(int(cfg["seed"]), int(cfg["seed"]) + int(cfg["n_seeds"])),
                          base=base, reference=_reference(cfg))
    table.to_csv(run.path("scaling_sweep.csv"), index=False, float_format="%.17g", lineterminator="\n")


COMMANDS = {
    "ingest": cmd_ingest,
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "tune": cmd_tune,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
    "identify": cmd_identify,
    "explain": cmd_explain,
    "synthesize": cmd_synthesize,
    "sweep-scaling": cmd_sweep_scaling,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="JSON file with option values; flags override it")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help="cap on numba worker threads")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--t-max", dest="t_max", type=int, nargs="+", help="interval length(s) in seconds")
    g.add_argument("--day-ahead-only", dest="day_ahead_only", action="store_true", default=None)

    data = argparse.ArgumentParser(add_help=False)
    d = data.add_argument_group("data")
    d.add_argument("--features", help="feature CSV")
    d.add_argument("--manifest", help="feature manifest JSON")
    d.add_argument("--frequency", help="frequency CSV (timestamp,frequency_hz)")
    d.add_argument("--splits", help="train,validation,test fractions")

    trn = argparse.ArgumentParser(add_help=False)
    t = trn.add_argument_group("training")
    t.add_argument("--lr", type=float)
    t.add_argument("--dropout", type=float)
    t.add_argument("--units", type=int)
    t.add_argument("--n-hidden", dest="n_hidden", type=int)
    t.add_argument("--activation", choices=("tanh", "sigmoid"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", help="model bundle directory")

    parser = argparse.ArgumentParser(prog="gridfreq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gridfreq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="build a feature table from raw CSVs")
    p.add_argument("--raw", help="JSON list of raw sources")
    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic dataset with ground truth")
    p.add_argument("--days", type=int)
    p.add_argument("--theta-mode", dest="theta_mode", choices=("window", "chain"))
    sub.add_parser("train", parents=[common, data, trn], help="train a parameter network")
    p = sub.add_parser("tune", parents=[common, data, trn], help="random hyperparameter search")
    p.add_argument("--trials", type=int)
    sub.add_parser("predict", parents=[common, data, trn, model], help="evaluate NLL on the test split")
    sub.add_parser("benchmark", parents=[common, data, trn, model], help="compare against baseline predictors")
    p = sub.add_parser("identify", parents=[common, data, model], help="infer parameter time series")
    p.add_argument("--reference", help="CSV with tau,kappa,D,q,r columns used as reference")
    p = sub.add_parser("explain", parents=[common, data, model], help="KernelSHAP attributions")
    p.add_argument("--parameters", help="comma-separated parameter names")
    p.add_argument("--n-explain", dest="n_explain", type=int, help="test intervals to explain")
    p.add_argument("--n-coalitions", dest="n_coalitions", type=int)
    p.add_argument("--background", type=int, help="background rows (<= 200)")
    p = sub.add_parser("synthesize", parents=[common], help="simulate a scenario trajectory")
    p.add_argument("--days", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--max-lag", dest="max_lag", type=int)
    p = sub.add_parser("sweep-scaling", parents=[common, data, trn], help="constraint-layer scaling sweep")
    p.add_argument("--n-seeds", dest="n_seeds", type=int)
    p.add_argument("--variants", help="'all' or names separated by ';' (',' when names hold no '=')")
    p.add_argument("--reference", help="CSV with tau,kappa,D,q,r columns used as reference")
    return parser


def _set_threads(n: int) -> None:
    import warnings

    import numba

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        if int(cfg["background"]) > 200:
            raise ConfigError("--background must be <= 200")
        _set_threads(int(cfg["threads"]))
        run = Run(args.command, cfg, Path(args.out))
        COMMANDS[args.command](cfg, run)
        run.finish()
    except GridFreqError as e:
        print(f"gridfreq {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        print(f"gridfreq {args.command}: input error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
