"""Time-indexed histories, delayed lookups and stochastic delay sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class LookupUnderflowError(LookupError):
    """A delayed lookup reached before the first stored sample."""

    def __init__(self, query: float, start: float):
        self.query = query
        self.start = start
        super().__init__(f"lookup at t={query:.6g} s precedes trace start {start:.6g} s")


class TimedTrace:
    """Uniformly sampled vector-valued signal with linear interpolation.

    Samples are appended by a single writer; the time of sample ``i`` is
    ``t0 + i * dt``.  Storage grows geometrically.
    """

    def __init__(self, t0: float, dt: float, dim: int, capacity: int = 64):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.t0 = float(t0)
        self.dt = float(dt)
        self.dim = dim
        self._values = np.empty((max(capacity, 2), dim))
        self._n = 0

    @classmethod
    def from_array(cls, t0: float, dt: float, values) -> TimedTrace:
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        trace = cls(t0, dt, values.shape[1], capacity=len(values))
        trace._values[: len(values)] = values
        trace._n = len(values)
        return trace

    def __len__(self) -> int:
        return self._n

    @property
    def values(self) -> np.ndarray:
        return self._values[: self._n]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self._n)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (self._n - 1)

    def append(self, value) -> None:
        if self._n == len(self._values):
            grown = np.empty((2 * len(self._values), self.dim))
            grown[: self._n] = self._values[: self._n]
            self._values = grown
        self._values[self._n] = value
        self._n += 1

    def set_last(self, value) -> None:
        self._values[self._n - 1] = value

    def at(self, t: float, hold_last: bool = False, hold_first: bool = False) -> np.ndarray:
        """Value at time ``t``, linearly interpolated between samples.

        Queries outside the stored span raise unless the matching ``hold_*``
        flag is set, in which case the boundary sample is returned.
        """
        pos = (t - self.t0) / self.dt
        if pos < -1e-9:
            if hold_first:
                return self._values[0].copy()
            raise LookupUnderflowError(t, self.t0)
        last = self._n - 1
        if pos >= last - 1e-9:
            if pos <= last + 1e-9 or hold_last:
                return self._values[last].copy()
            raise LookupError(f"lookup at t={t:.6g} s is past trace end {self.t_end:.6g} s")
        i = int(pos) if pos > 0 else 0
        frac = pos - i
        if frac < 1e-9:
            return self._values[i].copy()
        return self._values[i] + frac * (self._values[i + 1] - self._values[i])


def lookup_delayed(trace: TimedTrace, t: float, delay: float) -> np.ndarray:
    """Value of ``trace`` at ``t - delay``."""
    return trace.at(t - delay)


@dataclass(frozen=True)
class DelayConfig:
    """Communication delay ``mean_delay + kappa``, kappa ~ N(0, kappa_std^2) when stochastic."""

    mean_delay: float = 0.0
    stochastic: bool = False
    kappa_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mean_delay < 0 or self.kappa_std < 0:
            raise ValueError("delay and kappa_std must be non-negative")

    @property
    def max_delay(self) -> float:
        """Largest delay the sampler is expected to produce (mean + 3 std)."""
        return self.mean_delay + (3.0 * self.kappa_std if self.stochastic else 0.0)


def sample_delay(config: DelayConfig, rng: np.random.Generator) -> float:
    """Draw one delay ``max(0, tau + kappa)``; exactly ``tau`` when not stochastic."""
    if not config.stochastic or config.kappa_std == 0:
        return config.mean_delay
    return max(0.0, config.mean_delay + rng.normal(0.0, config.kappa_std))


class DelaySampler:
    """Seeded per-message delay source that counts how often a draw was clamped at zero."""

    def __init__(self, config: DelayConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.clamped = 0
        self.draws = 0

    def sample(self) -> float:
        cfg = self.config
        if not cfg.stochastic or cfg.kappa_std == 0:
            return cfg.mean_delay
        self.draws += 1
        tau_s = cfg.mean_delay + self.rng.normal(0.0, cfg.kappa_std)
        if tau_s < 0.0:
            self.clamped += 1
            return 0.0
        return tau_s


def truncated_delay_mean(mean_delay: float, kappa_std: float) -> float:
    """Expected value of ``max(0, tau + kappa)`` for Gaussian kappa."""
    if kappa_std == 0:
        return max(0.0, mean_delay)
    z = mean_delay / kappa_std
    pdf = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    cdf = 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    return mean_delay * cdf + kappa_std * pdf


@dataclass(frozen=True)
class DelayPerturbation:
    position_noise: float
    speed_noise: float


def perturbation_of_delay(trace_lead: TimedTrace, t: float, tau: float, tau_s: float) -> DelayPerturbation:
    """Input error caused by reading the leader at ``t - tau_s`` instead of ``t - tau``.

    ``trace_lead`` holds ``[x_lead, v_lead]``.  The returned offsets satisfy
    ``u(t - tau_s) = u(t - tau) + (position_noise, speed_noise)``.
    """
    nominal = trace_lead.at(t - tau)
    actual = trace_lead.at(t - tau_s)
    return DelayPerturbation(float(actual[0] - nominal[0]), float(actual[1] - nominal[1]))


def warmup_steps(config: DelayConfig, dt: float) -> int:
    """Samples excluded from metrics at the start of a run: ``ceil(tau/dt)`` plus ``ceil(3 kappa_std/dt)`` when stochastic."""
    n = math.ceil(config.mean_delay / dt - 1e-9)
    if config.stochastic:
        n += math.ceil(3.0 * config.kappa_std / dt - 1e-9)
    return n
