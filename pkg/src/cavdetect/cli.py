"""Command-line front end: ``cavdetect simulate | inject | detect | evaluate | replay``.

Each command reads an optional flat TOML config, applies flag overrides, writes
a JSON run manifest next to its outputs (before producing them), and is
deterministic given its resolved config.  Exit codes: 0 ok, 1 runtime error,
2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import scipy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .anomaly import ANOMALY_TYPES, CHANNELS, AnomalyConfig, describe_events, inject
from .delay import DelayConfig
from .detector import GateConfig, run_detection
from .evaluation import ExperimentGrid, cell_name, innovation_stats, run_grid, shared_noise, write_outputs
from .filter import FilterConfig, NoiseConfig
from .scenario import ScenarioConfig, TrajectoryFormatError, export_csv, ingest_csv, measurement_seed, simulate, to_measurements

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    """Bad config file contents or flag values."""


def load_config(path) -> dict:
    """Parse a flat TOML file; nested tables are rejected."""
    if path is None:
        return {}
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat key = value pairs; found table(s) {', '.join(nested)}")
    return data


def _merge(config: dict, overrides: dict) -> dict:
    merged = dict(config)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _take(mapping: dict, keys) -> dict:
    return {k: mapping.pop(k) for k in list(mapping) if k in keys}


def _reject_unknown(mapping: dict, what: str) -> None:
    if mapping:
        raise ConfigError(f"unknown {what} field(s): {', '.join(sorted(mapping))}")


SCENARIO_KEYS = {f.name for f in fields(ScenarioConfig)} - {"idm"} | {
    "max_accel",
    "comfortable_decel",
    "accel_exponent",
    "desired_speed",
    "jam_distance",
    "time_headway",
    "vehicle_length",
}
ANOMALY_KEYS = {"anomaly_rate", "magnitude", "max_duration", "anomaly_types", "channels", "scale_mode", "magnitude_unit", "anomaly_seed"}
FILTER_KEYS = {"model", "tau", "gate", "kappa_std", "jitter_seed", "q_pos", "q_vel", "q_bias", "r_pos", "r_vel", "substeps", "covariance_lag"}
GRID_KEYS = {"models", "magnitudes", "delays", "replicates", "master_seed", "kappa_std", "q_pos", "q_vel", "q_bias", "recovery_gate", "scatter_gate", "roc_points", "workers"}


def _scenario_config(mapping: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.from_mapping(mapping)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"scenario config: {exc}") from exc


def _anomaly_config(mapping: dict) -> AnomalyConfig:
    kwargs = {}
    rename = {"anomaly_rate": "rate", "anomaly_types": "enabled_types", "channels": "target_channels", "anomaly_seed": "seed"}
    for key, value in mapping.items():
        name = rename.get(key, key)
        if name in ("enabled_types", "target_channels"):
            value = tuple(value)
        kwargs[name] = value
    try:
        return AnomalyConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"anomaly config: {exc}") from exc


class Manifest:
    """Run record written before results and completed after them."""

    def __init__(self, path: Path, command: str, argv: list[str], config: dict, outputs: list[Path]):
        self.path = path
        self.data = {
            "command": command,
            "argv": argv,
            "config": config,
            "master_seed": config.get("seed", config.get("master_seed")),
            "versions": {
                "cavdetect": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "outputs": [str(p) for p in outputs],
            "status": "running",
        }
        self._t0 = time.perf_counter()
        self.write()

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")

    def finish(self, outputs: list[Path], diagnostics: dict) -> None:
        self.data["outputs"] = [str(p) for p in outputs]
        self.data["diagnostics"] = diagnostics
        self.data["timing_s"] = round(time.perf_counter() - self._t0, 3)
        self.data["status"] = "ok"
        self.write()


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _manifest_path(args, out: Path) -> Path:
    if args.manifest:
        return Path(args.manifest)
    return out.with_name(out.name + ".manifest.json") if out.suffix else out / "manifest.json"


def cmd_simulate(args, argv) -> int:
    cfg_map = _merge(load_config(args.config), {"seed": args.seed, "delay": args.tau, "duration": args.duration})
    scen = _scenario_config(cfg_map)
    out = Path(args.out)
    manifest = Manifest(_manifest_path(args, out), "simulate", argv, cfg_map, [out])
    pair = simulate(scen)
    _, noisy = to_measurements(pair, (scen.pos_noise_std, scen.vel_noise_std), measurement_seed(scen.seed))
    out.parent.mkdir(parents=True, exist_ok=True)
    export_csv(pair, out, noisy)
    manifest.finish([out], {"rows": len(pair)})
    return EXIT_OK


def _measurements(pair) -> np.ndarray:
    if pair.measurements is not None:
        return pair.measurements
    return pair.follower.values.copy()


def cmd_inject(args, argv) -> int:
    overrides = {
        "anomaly_rate": args.anomaly_rate,
        "magnitude": args.magnitude,
        "max_duration": args.max_duration,
        "anomaly_seed": args.seed,
    }
    cfg_map = _merge(load_config(args.config), overrides)
    rest = dict(cfg_map)
    anomaly = _anomaly_config(_take(rest, ANOMALY_KEYS))
    _reject_unknown(rest, "inject")
    pair = ingest_csv(args.input)
    out = Path(args.out)
    manifest = Manifest(_manifest_path(args, out), "inject", argv, cfg_map, [out])
    series = inject(_measurements(pair), anomaly, np.random.default_rng(anomaly.seed), times=pair.times)
    out.parent.mkdir(parents=True, exist_ok=True)
    series.to_csv(out)
    summary = describe_events(series)
    manifest.finish([out], {"events": summary["events"], "counts": summary["counts"], "affected_fraction": summary["affected_fraction"]})
    print(json.dumps({k: summary[k] for k in ("events", "counts", "affected_samples", "affected_fraction")}, sort_keys=True))
    return EXIT_OK


def _filter_from(mapping: dict, dt: float) -> tuple[FilterConfig, GateConfig, DelayConfig, int]:
    model = mapping.get("model", "aekf")
    tau = float(mapping.get("tau", 0.0))
    noise = shared_noise(model, mapping.get("q_pos", 1e-3), mapping.get("q_vel", 0.01), mapping.get("q_bias", 0.01))
    if "r_pos" in mapping or "r_vel" in mapping:
        R = np.diag([mapping.get("r_pos", 0.25), mapping.get("r_vel", 0.1)])
        noise = NoiseConfig(noise.process_cov, R, noise.initial_cov)
    try:
        fcfg = FilterConfig(
            model=model,
            delay=tau,
            dt=dt,
            substeps=int(mapping.get("substeps", 5)),
            covariance_lag=mapping.get("covariance_lag", "current"),
            noise=noise,
            clamp_gap=True,
        )
        gate = GateConfig(float(mapping.get("gate", 0.8)))
        kappa = float(mapping.get("kappa_std", 0.0))
        jitter = DelayConfig(tau, kappa > 0, kappa)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"filter config: {exc}") from exc
    return fcfg, gate, jitter, int(mapping.get("jitter_seed", 0))


def cmd_detect(args, argv) -> int:
    overrides = {
        "model": args.model,
        "tau": args.tau,
        "gate": args.gate,
        "kappa_std": args.kappa_std,
        "anomaly_rate": args.anomaly_rate,
        "magnitude": args.magnitude,
        "anomaly_seed": args.seed,
    }
    cfg_map = _merge(load_config(args.config), overrides)
    rest = dict(cfg_map)
    anomaly_map = _take(rest, ANOMALY_KEYS)
    filter_map = _take(rest, FILTER_KEYS)
    _reject_unknown(rest, "detect")
    pair = ingest_csv(args.input)
    fcfg, gate, jitter, jitter_seed = _filter_from(filter_map, pair.dt)
    if len(pair) <= math.ceil(fcfg.delay / pair.dt) + 1:
        raise ConfigError("trajectory is too short for the configured delay")
    z = _measurements(pair)
    labels = np.zeros(len(z), dtype=bool)
    injected = anomaly_map.get("anomaly_rate", 0.0) > 0
    if injected:
        anomaly = _anomaly_config(anomaly_map)
        series = inject(z, anomaly, np.random.default_rng(anomaly.seed))
        z, labels = series.corrupted, series.labels
    out = Path(args.out)
    manifest = Manifest(_manifest_path(args, out), "detect", argv, cfg_map, [out])
    run = run_detection(pair.leader, z, fcfg, gate, jitter, np.random.default_rng(jitter_seed))
    idx = run.sample_index
    state_cols = ["x", "v"] + (["delay_bias"] if fcfg.model == "aekf" else [])
    header = ["t", "z_pos", "z_vel", "nu_pos", "nu_vel", "s_pos", "s_cross", "s_vel", "chi2", "verdict", "applied_state", "scored", *state_cols, "label"]
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, k in enumerate(idx):
            flagged = bool(run.anomalous[i])
            S = run.innovation_covs[i]
            w.writerow(
                [repr(float(run.times[i])), repr(float(z[k, 0])), repr(float(z[k, 1]))]
                + [repr(float(v)) for v in (run.innovations[i, 0], run.innovations[i, 1], S[0, 0], S[0, 1], S[1, 1], run.chi2[i])]
                + ["anomalous" if flagged else "nominal", "prediction-used" if flagged else "estimate-used", int(run.scored[i])]
                + [repr(float(v)) for v in run.means[i]]
                + [int(labels[k])]
            )
    mask = run.scored
    stats = innovation_stats(run.innovations[mask])
    summary = {
        "model": fcfg.model,
        "steps": int(len(idx)),
        "scored_steps": int(mask.sum()),
        "flagged": int(run.anomalous[mask].sum()),
        "flagged_fraction": float(run.anomalous[mask].mean()) if mask.any() else 0.0,
        "nominal_tail_probability": math.exp(-gate.threshold / 2.0),
        "mean_innovation": [stats.mean_pos, stats.mean_vel],
        "mse": stats.mse_combined,
        "longest_rejection_run": run.longest_rejection_run,
        "clamped_delays": run.clamped_delays,
        "warmup_samples": run.warmup,
    }
    if injected:
        summary["labelled_samples"] = int(labels[idx][mask].sum())
    manifest.finish([out], summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _grid_from(mapping: dict) -> tuple[ExperimentGrid, int]:
    rest = dict(mapping)
    grid_map = _take(rest, GRID_KEYS)
    anomaly_map = _take(rest, ANOMALY_KEYS)
    scen_map = _take(rest, SCENARIO_KEYS - {"seed", "delay"})
    _reject_unknown(rest, "evaluate")
    workers = int(grid_map.pop("workers", 1))
    for key in ("models", "magnitudes", "delays"):
        if key in grid_map:
            grid_map[key] = tuple(grid_map[key])
    if "magnitude" in anomaly_map:
        raise ConfigError("evaluate takes 'magnitudes' (a list), not 'magnitude'")
    base = ExperimentGrid()
    try:
        scenario = replace(base.scenario, **{k: v for k, v in scen_map.items() if k in {f.name for f in fields(ScenarioConfig)}})
        idm_map = {k: v for k, v in scen_map.items() if k not in {f.name for f in fields(ScenarioConfig)}}
        if idm_map:
            scenario = replace(scenario, idm=replace(scenario.idm, **idm_map))
        anomaly = replace(base.anomaly, **asdict(_anomaly_config(anomaly_map))) if anomaly_map else base.anomaly
        grid = replace(base, scenario=scenario, anomaly=anomaly, **grid_map)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"evaluate config: {exc}") from exc
    return grid, workers


def format_table1(rows: list[dict]) -> str:
    lines = [f"{'model':<6}{'c':>6}{'tau':>6}{'AUC':>9}{'std':>8}{'p':>10}"]
    for r in rows:
        lines.append(f"{r['model']:<6}{r['c']:>6g}{r['tau']:>6g}{r['auc_mean']:>9.3f}{r['auc_std']:>8.3f}{r['p_value']:>10.2g}")
    return "\n".join(lines)


def cmd_evaluate(args, argv) -> int:
    overrides = {"replicates": args.replicates, "master_seed": args.seed, "workers": args.workers}
    cfg_map = _merge(load_config(args.config), overrides)
    grid, workers = _grid_from(cfg_map)
    out = Path(args.out)
    names = ["table1.csv", "table2.csv"]
    for model in grid.models:
        for c in grid.magnitudes:
            for tau in grid.delays:
                names += [f"roc_{cell_name(model, c, tau)}.csv", f"scatter_{cell_name(model, c, tau)}.csv"]
    manifest = Manifest(_manifest_path(args, out), "evaluate", argv, cfg_map, [out / n for n in names])
    result = run_grid(grid, workers=workers)
    paths = write_outputs(result, out)
    rows = result.table1()
    manifest.finish(paths, {"cells": grid.cell_count, "replicates": grid.replicates, "workers": workers})
    print(format_table1(rows))
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    """Re-run the command recorded in a manifest with its original arguments."""
    try:
        with open(args.manifest_file) as fh:
            recorded = json.load(fh)
        old_argv = list(recorded["argv"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read manifest {args.manifest_file}: {exc}") from exc
    return main(old_argv)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cavdetect", description="Delay-aware EKF anomaly detection for car following.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--manifest", help="manifest path (default: next to the output)")

    p = sub.add_parser("simulate", help="generate a leader/follower trajectory CSV")
    common(p, "trajectory CSV to write")
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=float, help="follower response delay (s)")
    p.add_argument("--duration", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("inject", help="inject labelled anomalies into a trajectory's measurements")
    common(p, "labelled series CSV to write")
    p.add_argument("--input", required=True, help="trajectory CSV")
    p.add_argument("--anomaly-rate", type=float)
    p.add_argument("--magnitude", type=float)
    p.add_argument("--max-duration", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("detect", help="filter a trajectory and gate every measurement")
    common(p, "per-step detections CSV to write")
    p.add_argument("--input", required=True, help="trajectory CSV")
    p.add_argument("--model", choices=("ekf", "aekf"))
    p.add_argument("--tau", type=float, help="delay assumed by the filter (s)")
    p.add_argument("--gate", type=float, help="chi-square gate level")
    p.add_argument("--kappa-std", type=float, help="std of the leader-data delay jitter (s)")
    p.add_argument("--anomaly-rate", type=float, help="inject anomalies at this per-sample rate first")
    p.add_argument("--magnitude", type=float)
    p.add_argument("--seed", type=int, help="anomaly seed")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="run the model x magnitude x delay experiment grid")
    common(p, "output directory")
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest_file")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except (ConfigError, FileNotFoundError, IsADirectoryError, TrajectoryFormatError) as exc:
        print(f"cavdetect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"cavdetect: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
