"""ROC/AUC, innovation statistics, paired t-tests and the EKF-vs-AEKF experiment grid."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .anomaly import AnomalyConfig, inject
from .delay import DelayConfig
from .detector import DetectionRun, GateConfig, run_detection
from .filter import FilterConfig, NoiseConfig
from .scenario import ScenarioConfig, simulate, to_measurements

MODELS = ("ekf", "aekf")


@dataclass(frozen=True)
class RocCurve:
    """ROC points ordered by decreasing threshold, endpoints (0, 0) and (1, 1) included."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def log_threshold_grid(n: int = 200, low: float = 1e-3, high: float = 1e3) -> np.ndarray:
    """``n`` log-spaced gate levels plus the two infinite endpoints, in decreasing order."""
    return np.concatenate([[np.inf], np.logspace(math.log10(high), math.log10(low), n), [-np.inf]])


def _check_labels(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one anomalous and one nominal sample")
    return n_pos, n_neg


def roc_auc(scores, labels, thresholds=None) -> RocCurve:
    """ROC of the rule ``score > threshold`` against boolean ``labels``.

    With ``thresholds=None`` every distinct score is used as a threshold, which
    makes the trapezoid AUC equal to the probability that a random anomalous
    sample outscores a random nominal one (ties count one half).  A finite grid
    (for example :func:`log_threshold_grid`) gives a coarser curve whose AUC
    approaches that value as the grid is refined.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d arrays of equal length")
    n_pos, n_neg = _check_labels(labels)
    if thresholds is None:
        thr = np.concatenate([[np.inf], np.unique(scores)[::-1], [-np.inf]])
    else:
        thr = np.unique(np.asarray(thresholds, dtype=float))[::-1]
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    # counts of scores strictly above each threshold
    tp = n_pos - np.searchsorted(pos, thr, side="right")
    fp = n_neg - np.searchsorted(neg, thr, side="right")
    tpr = np.concatenate([[0.0], tp / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp / n_neg, [1.0]])
    thr = np.concatenate([[np.inf], thr, [-np.inf]])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thr, fpr, tpr, auc)


def pairwise_auc(scores, labels) -> float:
    """Brute-force AUC over all anomalous/nominal pairs; quadratic, for checking."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    _check_labels(labels)
    pos = scores[labels][:, None]
    neg = scores[~labels][None, :]
    return float(((pos > neg) + 0.5 * (pos == neg)).mean())


@dataclass(frozen=True)
class InnovationStats:
    mean_pos: float
    mean_vel: float
    mse_combined: float
    n: int


def innovation_stats(innovations, labels=None) -> InnovationStats:
    """Per-channel mean innovation and ``sqrt(MSE_pos + MSE_vel)`` of an anomaly-free run."""
    nu = np.asarray(innovations, dtype=float).reshape(-1, 2)
    if len(nu) == 0:
        raise ValueError("no innovation records")
    if labels is not None and np.any(labels):
        raise ValueError("innovation statistics are defined for anomaly-free runs only")
    mean = nu.mean(axis=0)
    mse = (nu**2).mean(axis=0)
    return InnovationStats(float(mean[0]), float(mean[1]), float(math.sqrt(mse.sum())), len(nu))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p_value: float
    significant: bool
    degenerate: bool = False


def paired_t_test(a, b, level: float = 0.05) -> TTestResult:
    """Two-sided paired t-test of ``mean(a - b) = 0``.

    When all differences are equal the statistic is undefined; the result is
    then flagged ``degenerate`` with ``t = 0, p = 1`` for zero differences and
    ``t = +-inf, p = 0`` otherwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired samples need equal lengths of at least 2")
    d = a - b
    n = len(d)
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0 or sd <= 1e-15 * abs(mean):
        if mean == 0.0:
            return TTestResult(0.0, 1.0, False, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, True, True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    return TTestResult(float(t), p, p < level)


def shared_noise(model: str, position_q: float = 1e-3, speed_q: float = 0.01, bias_q: float = 0.01) -> NoiseConfig:
    """Noise set used by the grid: both models share Q and R on ``[x, v]``; the AEKF adds ``bias_q``."""
    q = [position_q, speed_q] + ([bias_q] if model == "aekf" else [])
    p0 = [1.0, 1.0] + ([0.1] if model == "aekf" else [])
    return NoiseConfig(np.diag(q), np.diag([0.25, 0.1]), np.diag(p0))


@dataclass(frozen=True)
class ExperimentGrid:
    """Models x magnitudes x delays x replicates, with seeds derived from ``master_seed``.

    Every cell at a given replicate reuses the same trajectory (per delay),
    measurement noise, anomaly pattern and delay jitter, so model and
    magnitude comparisons are paired.
    """

    models: tuple[str, ...] = MODELS
    magnitudes: tuple[float, ...] = (1.0, 0.5, 0.1)
    delays: tuple[float, ...] = (0.0, 0.5, 1.5)
    replicates: int = 20
    master_seed: int = 2024
    scenario: ScenarioConfig = field(default_factory=lambda: ScenarioConfig(duration=150.0, leader_speed=28.0, low_speed=20.0))
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)
    kappa_std: float = 0.1
    position_q: float = 1e-3
    speed_q: float = 0.01
    bias_q: float = 0.01
    # None scores the open filter; a level turns on prediction-substitution recovery
    recovery_gate: float | None = None
    scatter_gate: float = 0.8
    roc_points: int = 200

    def __post_init__(self):
        if not self.models or not self.magnitudes or not self.delays:
            raise ValueError("experiment grid is empty")
        if set(self.models) - set(MODELS):
            raise ValueError(f"models must be a subset of {MODELS}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")

    @property
    def cell_count(self) -> int:
        return len(self.models) * len(self.magnitudes) * len(self.delays)

    def noise(self, model: str) -> NoiseConfig:
        return shared_noise(model, self.position_q, self.speed_q, self.bias_q)


class GridCellError(RuntimeError):
    def __init__(self, where: str, cause: Exception):
        self.where = where
        self.cause = cause
        super().__init__(f"grid cell {where} failed: {type(cause).__name__}: {cause}")


def cell_name(model: str, c: float | None, tau: float) -> str:
    mag = "nominal" if c is None else f"c{c:g}"
    return f"{model}_{mag}_tau{tau:g}"


def _replicate_seeds(master_seed: int, replicate: int) -> dict[str, int]:
    child = np.random.SeedSequence(master_seed).spawn(replicate + 1)[replicate]
    words = child.generate_state(4)
    return dict(zip(("scenario", "measurement", "anomaly", "delay"), (int(w) for w in words)))


@dataclass
class ReplicateResult:
    tau: float
    replicate: int
    auc: dict  # (model, c) -> float
    nominal: dict  # model -> InnovationStats
    scores: dict  # (model, c) -> (chi2, labels) over scored samples
    scatter: dict  # (model, c) -> array rows t, nu_pos/sqrt(S11), nu_vel/sqrt(S22), chi2, label


def _detect(grid: ExperimentGrid, model: str, tau: float, pair, z, seeds) -> DetectionRun:
    cfg = FilterConfig(model=model, delay=tau, dt=grid.scenario.dt, covariance_lag="current", noise=grid.noise(model), idm=grid.scenario.idm, clamp_gap=True)
    gate = None if grid.recovery_gate is None else GateConfig(grid.recovery_gate)
    jitter = DelayConfig(tau, grid.kappa_std > 0, grid.kappa_std)
    return run_detection(pair.leader, z, cfg, gate, jitter, np.random.default_rng(seeds["delay"]))


def run_replicate(grid: ExperimentGrid, tau: float, replicate: int, keep_scores: bool = False) -> ReplicateResult:
    """Simulate one trajectory at delay ``tau`` and score every model and magnitude on it."""
    seeds = _replicate_seeds(grid.master_seed, replicate)
    where = f"tau={tau:g} replicate={replicate}"
    try:
        scen = replace(grid.scenario, delay=tau, seed=seeds["scenario"])
        pair = simulate(scen)
        _, z = to_measurements(pair, (scen.pos_noise_std, scen.vel_noise_std), seeds["measurement"])
    except Exception as exc:
        raise GridCellError(where, exc) from exc
    result = ReplicateResult(tau, replicate, {}, {}, {}, {})
    for model in grid.models:
        where = f"model={model} c=nominal {where}"
        try:
            run = _detect(grid, model, tau, pair, z, seeds)
        except Exception as exc:
            raise GridCellError(where, exc) from exc
        result.nominal[model] = innovation_stats(run.innovations[run.scored])
    for c in grid.magnitudes:
        series = inject(z, replace(grid.anomaly, magnitude=c), np.random.default_rng(seeds["anomaly"]))
        for model in grid.models:
            where = f"model={model} c={c:g} tau={tau:g} replicate={replicate}"
            try:
                run = _detect(grid, model, tau, pair, series.corrupted, seeds)
                mask = run.scored
                chi2 = run.chi2[mask]
                labels = series.labels[run.sample_index][mask]
                result.auc[(model, c)] = roc_auc(chi2, labels).auc
            except Exception as exc:
                raise GridCellError(where, exc) from exc
            if keep_scores:
                result.scores[(model, c)] = (chi2, labels)
            if replicate == 0:
                norm = run.normalized_innovations()[mask]
                result.scatter[(model, c)] = np.column_stack([run.times[mask], norm, chi2, labels])
    return result


def _job(args):
    grid, tau, replicate = args
    return run_replicate(grid, tau, replicate, keep_scores=True)


@dataclass
class GridResult:
    grid: ExperimentGrid
    aucs: dict  # (model, c, tau) -> per-replicate AUC array
    p_values: dict  # (c, tau) -> paired TTestResult of second model minus first
    nominal: dict  # (model, tau) -> InnovationStats pooled over replicates
    rocs: dict  # (model, c, tau) -> RocCurve pooled over replicates
    scatter: dict  # (model, c, tau) -> scatter rows of replicate 0

    def table1(self) -> list[dict]:
        rows = []
        for model in self.grid.models:
            for c in self.grid.magnitudes:
                for tau in self.grid.delays:
                    a = self.aucs[(model, c, tau)]
                    test = self.p_values.get((c, tau))
                    rows.append(
                        {
                            "model": model,
                            "c": c,
                            "tau": tau,
                            "auc_mean": float(a.mean()),
                            "auc_std": float(a.std(ddof=1)) if len(a) > 1 else 0.0,
                            "p_value": test.p_value if test is not None else math.nan,
                        }
                    )
        return rows

    def table2(self) -> list[dict]:
        return [
            {
                "model": model,
                "tau": tau,
                "mean_innov_pos": s.mean_pos,
                "mean_innov_vel": s.mean_vel,
                "mse": s.mse_combined,
            }
            for model in self.grid.models
            for tau in self.grid.delays
            for s in [self.nominal[(model, tau)]]
        ]


def run_grid(grid: ExperimentGrid, workers: int = 1) -> GridResult:
    """Run every (delay, replicate) job, optionally in a process pool, and aggregate in job order.

    Raises:
        GridCellError: naming the first failing cell.
    """
    jobs = [(grid, tau, r) for tau in grid.delays for r in range(grid.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]

    aucs, nominal_nu, pooled, scatter = {}, {}, {}, {}
    for res in results:
        for (model, c), auc in res.auc.items():
            aucs.setdefault((model, c, res.tau), []).append(auc)
            chi2, labels = res.scores[(model, c)]
            pooled.setdefault((model, c, res.tau), []).append((chi2, labels))
        for model, s in res.nominal.items():
            nominal_nu.setdefault((model, res.tau), []).append(s)
        for (model, c), rows in res.scatter.items():
            scatter[(model, c, res.tau)] = rows
    aucs = {k: np.array(v) for k, v in aucs.items()}

    p_values = {}
    if len(grid.models) == 2 and grid.replicates >= 2:
        first, second = grid.models
        for c in grid.magnitudes:
            for tau in grid.delays:
                p_values[(c, tau)] = paired_t_test(aucs[(second, c, tau)], aucs[(first, c, tau)])

    nominal = {}
    for key, parts in nominal_nu.items():
        # pool per-replicate moments weighted by sample count
        n = sum(s.n for s in parts)
        mean_pos = sum(s.mean_pos * s.n for s in parts) / n
        mean_vel = sum(s.mean_vel * s.n for s in parts) / n
        mse = sum(s.mse_combined**2 * s.n for s in parts) / n
        nominal[key] = InnovationStats(mean_pos, mean_vel, math.sqrt(mse), n)

    grid_thr = log_threshold_grid(grid.roc_points)
    rocs = {}
    for key, parts in pooled.items():
        chi2 = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        rocs[key] = roc_auc(chi2, labels, grid_thr)
    return GridResult(grid, aucs, p_values, nominal, rocs, scatter)


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_outputs(result: GridResult, out_dir) -> list[Path]:
    """Write table1/table2 plus per-cell ROC and scatter CSVs; returns the paths in write order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    t1 = result.table1()
    path = out / "table1.csv"
    _write_rows(path, list(t1[0]), [r.values() for r in t1])
    paths.append(path)
    t2 = result.table2()
    path = out / "table2.csv"
    _write_rows(path, list(t2[0]), [r.values() for r in t2])
    paths.append(path)
    g = result.grid
    for model in g.models:
        for c in g.magnitudes:
            for tau in g.delays:
                name = cell_name(model, c, tau)
                roc = result.rocs[(model, c, tau)]
                path = out / f"roc_{name}.csv"
                _write_rows(path, ["threshold", "fpr", "tpr"], zip(roc.thresholds, roc.fpr, roc.tpr))
                paths.append(path)
                rows = result.scatter[(model, c, tau)]
                path = out / f"scatter_{name}.csv"
                flagged = rows[:, 3] > g.scatter_gate
                _write_rows(
                    path,
                    ["t", "nu_pos_norm", "nu_vel_norm", "chi2", "label", "flagged"],
                    ((r[0], r[1], r[2], r[3], int(r[4]), int(f)) for r, f in zip(rows, flagged)),
                )
                paths.append(path)
    return paths


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
