"""Chi-square innovation gate with prediction-substitution recovery."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .delay import DelayConfig, DelaySampler, TimedTrace, warmup_steps
from .filter import DelayedEKF, FilterConfig, FilterState, InnovationRecord

NOMINAL, ANOMALOUS = "nominal", "anomalous"
ESTIMATE_USED, PREDICTION_USED = "estimate-used", "prediction-used"


@dataclass(frozen=True)
class GateConfig:
    threshold: float = 0.8

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("gate threshold must be positive")


@dataclass(frozen=True)
class DetectionOutcome:
    t: float
    chi2: float
    verdict: str
    applied_state: str
    record: InnovationRecord | None = None

    @property
    def anomalous(self) -> bool:
        return self.verdict == ANOMALOUS


def gate(record: InnovationRecord, config: GateConfig) -> DetectionOutcome:
    """Flag the record when its chi-square statistic leaves the closed gate ``chi2 <= threshold``."""
    flagged = record.chi2 > config.threshold
    return DetectionOutcome(
        record.t,
        record.chi2,
        ANOMALOUS if flagged else NOMINAL,
        PREDICTION_USED if flagged else ESTIMATE_USED,
        record,
    )


def step_with_recovery(filt: DelayedEKF, z, gate_config: GateConfig) -> tuple[FilterState, DetectionOutcome]:
    """Gate the measurement against the current prediction and apply it only if nominal.

    ``filt`` must already hold the prediction for the measurement time.  On an
    anomalous verdict the prediction (mean and covariance) becomes the estimate.
    """
    posterior, record = filt.innovate(z)
    outcome = gate(record, gate_config)
    if outcome.anomalous:
        filt.accept(filt.state)
    else:
        filt.accept(posterior)
    return filt.state, outcome


@dataclass
class DetectionRun:
    """Per-step results of filtering one measurement series; index ``i`` is sample ``start + 1 + i``."""

    start: int
    warmup: int
    times: np.ndarray
    innovations: np.ndarray
    innovation_covs: np.ndarray
    chi2: np.ndarray
    anomalous: np.ndarray
    means: np.ndarray
    clamped_delays: int = 0

    @property
    def sample_index(self) -> np.ndarray:
        return np.arange(self.start + 1, self.start + 1 + len(self.chi2))

    @property
    def scored(self) -> np.ndarray:
        """Mask of steps that count towards metrics (past the warm-up)."""
        return self.sample_index >= self.warmup

    @property
    def longest_rejection_run(self) -> int:
        best = run = 0
        for flag in self.anomalous:
            run = run + 1 if flag else 0
            best = max(best, run)
        return best

    def normalized_innovations(self) -> np.ndarray:
        """Innovations divided componentwise by the square root of diag(S)."""
        diag = np.sqrt(np.einsum("kii->ki", self.innovation_covs))
        return self.innovations / diag


def run_detection(
    leader: TimedTrace,
    measurements: np.ndarray,
    filter_config: FilterConfig,
    gate_config: GateConfig | None,
    input_delay: DelayConfig | None = None,
    rng: np.random.Generator | None = None,
) -> DetectionRun:
    """Filter a whole series, gating each measurement.

    ``gate_config=None`` disables recovery (every measurement is applied) while
    still recording chi-square statistics.  Leader data for each interval is
    read with a delay drawn from ``input_delay`` (defaults to the filter's
    nominal delay).  The filter starts at the first sample whose nominal delayed
    lookup is defined.
    """
    dt = filter_config.dt
    if input_delay is None:
        input_delay = DelayConfig(filter_config.delay)
    sampler = DelaySampler(input_delay, rng)
    start = math.ceil(filter_config.delay / dt - 1e-9)
    warmup = max(warmup_steps(input_delay, dt), start + 1)
    gate_cfg = gate_config if gate_config is not None else GateConfig(math.inf)

    filt = DelayedEKF(filter_config, leader, hold_first=True)
    filt.initialize(measurements[start], leader.t0 + start * dt)
    n_steps = len(measurements) - start - 1
    dim = filter_config.dim
    times = np.empty(n_steps)
    nus = np.empty((n_steps, 2))
    covs = np.empty((n_steps, 2, 2))
    chi2 = np.empty(n_steps)
    flags = np.zeros(n_steps, dtype=bool)
    means = np.empty((n_steps, dim))
    for i in range(n_steps):
        filt.predict(sampler.sample())
        state, outcome = step_with_recovery(filt, measurements[start + 1 + i], gate_cfg)
        rec = outcome.record
        times[i] = rec.t
        nus[i] = rec.innovation
        covs[i] = rec.innovation_cov
        chi2[i] = rec.chi2
        flags[i] = outcome.anomalous
        means[i] = state.mean
    return DetectionRun(start, warmup, times, nus, covs, chi2, flags, means, sampler.clamped)
