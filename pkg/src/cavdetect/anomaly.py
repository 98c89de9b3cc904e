"""Labeled sensor-anomaly injection: short spikes, noise bursts, bias and drift.

Magnitudes are dimensionless multiples ``c`` of a per-channel scale.  By default
that scale is ``magnitude_unit`` times the channel's sensor-noise level,
estimated from the series itself via second differences (the smooth motion
component drops out), so one ``c`` means the same thing for position (m) and
speed (m/s).
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

ANOMALY_TYPES = ("short", "noise", "bias", "drift")
CHANNELS = ("position", "speed")


@dataclass(frozen=True)
class AnomalyConfig:
    rate: float = 0.05
    magnitude: float | dict = 1.0
    max_duration: int = 20
    enabled_types: tuple[str, ...] = ANOMALY_TYPES
    target_channels: tuple[str, ...] = CHANNELS
    # "noise": magnitude_unit x estimated sensor-noise std; "std": std of the channel
    scale_mode: str = "noise"
    magnitude_unit: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must lie in [0, 1], got {self.rate}")
        if self.max_duration < 1:
            raise ValueError("max_duration must be >= 1")
        if not self.enabled_types or set(self.enabled_types) - set(ANOMALY_TYPES):
            raise ValueError(f"enabled_types must be a non-empty subset of {ANOMALY_TYPES}")
        if not self.target_channels or set(self.target_channels) - set(CHANNELS):
            raise ValueError(f"target_channels must be a non-empty subset of {CHANNELS}")
        if self.scale_mode not in ("noise", "std"):
            raise ValueError("scale_mode must be 'noise' or 'std'")
        for kind in self.enabled_types:
            if self.magnitude_for(kind) < 0:
                raise ValueError("magnitudes must be non-negative")

    def magnitude_for(self, kind: str) -> float:
        if isinstance(self.magnitude, dict):
            return float(self.magnitude.get(kind, 0.0))
        return float(self.magnitude)


@dataclass(frozen=True)
class AnomalyEvent:
    kind: str
    start: int
    duration: int
    channel: str
    magnitude: float

    @property
    def stop(self) -> int:
        return self.start + self.duration


@dataclass
class LabeledSeries:
    clean: np.ndarray
    corrupted: np.ndarray
    labels: np.ndarray
    events: list[AnomalyEvent] = field(default_factory=list)
    times: np.ndarray | None = None

    def event_ids(self) -> np.ndarray:
        ids = np.full(len(self.labels), -1, dtype=int)
        for i, ev in enumerate(self.events):
            ids[ev.start : ev.stop] = i
        return ids

    def to_csv(self, path) -> None:
        times = self.times if self.times is not None else np.arange(len(self.labels), dtype=float)
        ids = self.event_ids()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "z_pos_clean", "z_vel_clean", "z_pos", "z_vel", "label", "event_id"])
            for k in range(len(self.labels)):
                w.writerow(
                    [
                        repr(float(times[k])),
                        repr(float(self.clean[k, 0])),
                        repr(float(self.clean[k, 1])),
                        repr(float(self.corrupted[k, 0])),
                        repr(float(self.corrupted[k, 1])),
                        int(self.labels[k]),
                        int(ids[k]),
                    ]
                )


def channel_scales(clean: np.ndarray, mode: str = "noise", unit: float = 10.0) -> np.ndarray:
    """Per-channel magnitude unit for a ``(n, 2)`` measurement series."""
    clean = np.asarray(clean, dtype=float)
    if mode == "std":
        return clean.std(axis=0)
    # Var(second difference of white noise) = 6 sigma^2
    return unit * np.diff(clean, n=2, axis=0).std(axis=0) / math.sqrt(6.0)


def inject(clean, config: AnomalyConfig, rng: np.random.Generator | None = None, times=None) -> LabeledSeries:
    """Corrupt a ``(n, 2)`` series of ``[position, speed]`` readings.

    Each sample not covered by an active event starts a new event with
    probability ``rate``.  The event type and channel are uniform over the
    enabled ones; durations are uniform on ``1..max_duration`` (always 1 for
    ``short``) and are cut at the end of the series.

    Raises:
        ValueError: if the series is not longer than ``max_duration``.
    """
    clean = np.asarray(clean, dtype=float)
    n = len(clean)
    if clean.ndim != 2 or clean.shape[1] != 2:
        raise ValueError("expected an (n, 2) array of [position, speed] readings")
    if n <= config.max_duration:
        raise ValueError(f"series of {n} samples is too short for max_duration={config.max_duration}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    scales = channel_scales(clean, config.scale_mode, config.magnitude_unit)
    corrupted = clean.copy()
    labels = np.zeros(n, dtype=bool)
    events = []
    k = 0
    while k < n:
        if rng.random() >= config.rate:
            k += 1
            continue
        kind = config.enabled_types[rng.integers(len(config.enabled_types))]
        channel = config.target_channels[rng.integers(len(config.target_channels))]
        duration = 1 if kind == "short" else int(rng.integers(1, config.max_duration + 1))
        duration = min(duration, n - k)
        c = config.magnitude_for(kind)
        col = CHANNELS.index(channel)
        scale = scales[col]
        span = slice(k, k + duration)
        if kind == "short":
            draw = c * scale * rng.normal()
            corrupted[k, col] += draw
        elif kind == "noise":
            draw = c * scale
            corrupted[span, col] += draw * rng.normal(size=duration)
        elif kind == "bias":
            draw = c * scale
            corrupted[span, col] += draw
        else:
            draw = c * scale
            corrupted[span, col] += draw * np.arange(1, duration + 1) / duration
        labels[span] = True
        events.append(AnomalyEvent(kind, k, duration, channel, float(draw)))
        k += duration
    return LabeledSeries(clean, corrupted, labels, events, None if times is None else np.asarray(times))


def describe_events(series: LabeledSeries) -> dict:
    counts = Counter(ev.kind for ev in series.events)
    durations = {kind: [ev.duration for ev in series.events if ev.kind == kind] for kind in ANOMALY_TYPES}
    return {
        "events": len(series.events),
        "counts": {kind: counts.get(kind, 0) for kind in ANOMALY_TYPES},
        "durations": durations,
        "affected_samples": int(series.labels.sum()),
        "affected_fraction": float(series.labels.mean()) if len(series.labels) else 0.0,
    }
