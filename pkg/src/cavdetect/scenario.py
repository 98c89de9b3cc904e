"""Ground-truth leader/follower trajectories and their sensor measurements.

Trajectories are either simulated (leader speed profile plus acceleration
noise, follower driven by the IDM with a response delay) or read from a CSV
file with columns ``t, x_lead, v_lead, x_follow, v_follow``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ._ode import rk4_step
from .delay import TimedTrace
from .motion import GapError, IdmParams, idm_accel

PROFILES = ("constant", "piecewise-accel", "sinusoidal", "stop-and-go")
CSV_COLUMNS = ("t", "x_lead", "v_lead", "x_follow", "v_follow")
MEASUREMENT_COLUMNS = ("z_pos", "z_vel")


class CollisionError(RuntimeError):
    def __init__(self, time: float, gap: float):
        self.time = time
        self.gap = gap
        super().__init__(f"follower reached its leader at t={time:.2f} s (net gap {gap:.3f} m)")


class TrajectoryFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float = 200.0
    dt: float = 0.1
    substeps: int = 5
    profile: str = "stop-and-go"
    # constant / sinusoidal mean / stop-and-go cruise speed of the leader
    leader_speed: float = 20.0
    # stop-and-go
    low_speed: float = 8.0
    leader_accel: float = 1.0
    leader_decel: float = 1.0
    cruise_time: float = 20.0
    dwell_time: float = 5.0
    # sinusoidal
    speed_amplitude: float = 5.0
    period: float = 30.0
    # piecewise-accel, "duration:accel" pairs separated by commas, repeated
    accel_segments: str = "10:0.5,20:0,10:-0.5,20:0"
    speed_relaxation: float = 3.0
    leader_accel_noise: float = 0.1
    follower_accel_noise: float = 0.3
    initial_gap: float | None = None
    follower_speed: float | None = None
    pos_noise_std: float = 0.5
    vel_noise_std: float = math.sqrt(0.1)
    delay: float = 0.0
    seed: int = 0
    idm: IdmParams = field(default_factory=IdmParams)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if not self.dt > 0 or self.substeps < 1:
            raise ValueError("dt must be positive and substeps >= 1")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")
        if not self.duration > self.delay + self.dt:
            raise ValueError("duration must exceed the response delay")
        gap = self.start_gap
        if not gap > self.idm.vehicle_length + self.idm.jam_distance:
            raise ValueError(f"initial gap {gap} m is too small")

    @property
    def start_follower_speed(self) -> float:
        return self.leader_speed if self.follower_speed is None else self.follower_speed

    @property
    def start_gap(self) -> float:
        """Centre-to-centre spacing at t=0 (net gap plus vehicle length)."""
        if self.initial_gap is not None:
            return self.initial_gap
        return self.idm.equilibrium_gap(self.start_follower_speed) + self.idm.vehicle_length

    @classmethod
    def from_mapping(cls, mapping: dict) -> ScenarioConfig:
        """Build from a flat mapping; IDM constants may appear as top-level keys."""
        mapping = dict(mapping)
        idm_names = {f.name for f in fields(IdmParams)}
        idm_kwargs = {k: mapping.pop(k) for k in list(mapping) if k in idm_names}
        names = {f.name for f in fields(cls)} - {"idm"}
        unknown = sorted(set(mapping) - names)
        if unknown:
            raise KeyError(f"unknown scenario field(s): {', '.join(unknown)}")
        return cls(idm=IdmParams(**idm_kwargs), **mapping)


@dataclass
class TrajectoryPair:
    """Leader and follower traces on a common uniform time grid.

    ``leader`` and ``follower`` hold ``[x, v]`` per sample; accelerations are
    optional (absent for ingested data).
    """

    leader: TimedTrace
    follower: TimedTrace
    leader_accel: np.ndarray | None = None
    follower_accel: np.ndarray | None = None
    measurements: np.ndarray | None = None

    @property
    def dt(self) -> float:
        return self.leader.dt

    @property
    def times(self) -> np.ndarray:
        return self.leader.times

    def __len__(self) -> int:
        return len(self.leader)


class _SpeedProfile:
    """Leader target speed and its time derivative."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        if cfg.profile == "piecewise-accel":
            segs = []
            for chunk in cfg.accel_segments.split(","):
                dur, acc = chunk.split(":")
                segs.append((float(dur), float(acc)))
            if not segs or any(d <= 0 for d, _ in segs):
                raise ValueError("accel_segments needs positive durations")
            self.segments = segs
            self.cycle = sum(d for d, _ in segs)

    def __call__(self, t: float) -> tuple[float, float]:
        cfg = self.cfg
        if cfg.profile == "constant":
            return cfg.leader_speed, 0.0
        if cfg.profile == "sinusoidal":
            w = 2.0 * math.pi / cfg.period
            return (
                cfg.leader_speed + cfg.speed_amplitude * math.sin(w * t),
                cfg.speed_amplitude * w * math.cos(w * t),
            )
        if cfg.profile == "piecewise-accel":
            # target speed integrates the segment accelerations
            n_cycles, tc = divmod(max(t, 0.0), self.cycle)
            per_cycle = sum(d * a for d, a in self.segments)
            v = cfg.leader_speed + n_cycles * per_cycle
            for d, a in self.segments:
                if tc < d:
                    return max(v + a * tc, 0.0), a
                v += a * d
                tc -= d
            return max(v, 0.0), 0.0
        return self._stop_and_go(t)

    def _stop_and_go(self, t: float) -> tuple[float, float]:
        cfg = self.cfg
        span = cfg.leader_speed - cfg.low_speed
        t_down = span / cfg.leader_decel
        t_up = span / cfg.leader_accel
        cycle = cfg.cruise_time + t_down + cfg.dwell_time + t_up
        tc = max(t, 0.0) % cycle
        if tc < cfg.cruise_time:
            return cfg.leader_speed, 0.0
        tc -= cfg.cruise_time
        if tc < t_down:
            return cfg.leader_speed - cfg.leader_decel * tc, -cfg.leader_decel
        tc -= t_down
        if tc < cfg.dwell_time:
            return cfg.low_speed, 0.0
        tc -= cfg.dwell_time
        return cfg.low_speed + cfg.leader_accel * tc, cfg.leader_accel


def _simulate_leader(cfg: ScenarioConfig, n_fine: int, pad: int, h: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Leader ``[x, v]`` and acceleration on the fine grid, including ``pad`` samples before t=0."""
    profile = _SpeedProfile(cfg)
    states = np.empty((pad + n_fine, 2))
    accel = np.zeros(pad + n_fine)
    v = profile(0.0)[0]
    x = cfg.start_gap
    for i in range(pad + 1):
        states[pad - i] = (x - v * h * i, v)
    # acceleration noise is held over each measurement interval
    noise = rng.normal(0.0, cfg.leader_accel_noise, size=n_fine // cfg.substeps + 1)
    for i in range(n_fine - 1):
        t = i * h
        target, slope = profile(t)
        a = slope + (target - v) / cfg.speed_relaxation + noise[i // cfg.substeps]
        x_new = x + v * h + 0.5 * a * h * h
        v_new = v + a * h
        if v_new < 0.0:
            # stop within the substep instead of reversing
            stop = v / -a if a < 0 else 0.0
            x_new = x + 0.5 * v * stop
            v_new = 0.0
            a = -v / h
        accel[pad + i] = a
        x, v = x_new, v_new
        states[pad + i + 1] = (x, v)
    accel[-1] = accel[-2] if n_fine > 1 else 0.0
    return states, accel


def simulate(cfg: ScenarioConfig) -> TrajectoryPair:
    """Simulate the leader profile and an IDM follower reacting with delay.

    The follower's acceleration at ``t`` is the IDM evaluated on its own state and
    the leader state at ``t - delay``, plus acceleration noise held over each
    measurement interval.  Position integrates ``x' = v`` with RK4 on ``substeps``
    per interval; speed is clamped at zero after each substep.

    Raises:
        CollisionError: if the net gap closes.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    rng_leader, rng_follow = (np.random.default_rng(s) for s in seeds)
    n = int(round(cfg.duration / cfg.dt)) + 1
    h = cfg.dt / cfg.substeps
    n_fine = (n - 1) * cfg.substeps + 1
    pad = int(math.ceil((cfg.delay + cfg.dt) / h)) + 1
    t0 = -pad * h

    lead_states, lead_accel = _simulate_leader(cfg, n_fine, pad, h, rng_leader)
    leader = TimedTrace.from_array(t0, h, lead_states)

    idm = cfg.idm
    v_f = cfg.start_follower_speed
    follower = TimedTrace(t0, h, 2, capacity=pad + n_fine)
    for i in range(pad, 0, -1):
        follower.append((-v_f * h * i, v_f))
    follower.append((0.0, v_f))
    follow_accel = np.zeros(n_fine)

    noise = rng_follow.normal(0.0, cfg.follower_accel_noise, size=n)
    tau = cfg.delay
    y = np.array([0.0, v_f])

    for k in range(n - 1):
        w = noise[k]

        def rhs(t, s):
            own = s if tau == 0.0 else follower.at(t - tau, hold_last=True)
            lead = leader.at(t - tau)
            a = idm_accel(own[0], own[1], lead[0], lead[1], idm)
            return np.array([s[1], a + w])

        for j in range(cfg.substeps):
            t = k * cfg.dt + j * h
            try:
                follow_accel[k * cfg.substeps + j] = rhs(t, y)[1]
                y = rk4_step(rhs, t, y, h)
            except GapError as exc:
                raise CollisionError(t, exc.gap) from None
            if y[1] < 0.0:
                y[1] = 0.0
            follower.append(y)
            gap = leader.at(t + h)[0] - y[0] - idm.vehicle_length
            if gap <= 0.0:
                raise CollisionError(t + h, gap)
    follow_accel[-1] = follow_accel[-2] if n_fine > 1 else 0.0

    take = slice(pad, pad + n_fine, cfg.substeps)
    return TrajectoryPair(
        leader=TimedTrace.from_array(0.0, cfg.dt, leader.values[take]),
        follower=TimedTrace.from_array(0.0, cfg.dt, follower.values[take]),
        leader_accel=lead_accel[take].copy(),
        follower_accel=follow_accel[:: cfg.substeps].copy(),
    )


def to_measurements(
    pair: TrajectoryPair, noise_std: tuple[float, float], seed: int | np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless and noisy ``[position, speed]`` readings of the follower."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    clean = pair.follower.values.copy()
    noisy = clean + rng.normal(size=clean.shape) * np.asarray(noise_std, dtype=float)
    return clean, noisy


def measurement_seed(seed: int) -> np.random.Generator:
    """Generator for sensor noise, independent of the ones used by :func:`simulate`."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])


def export_csv(pair: TrajectoryPair, path, measurements: np.ndarray | None = None) -> None:
    measurements = pair.measurements if measurements is None else measurements
    header = list(CSV_COLUMNS) + (list(MEASUREMENT_COLUMNS) if measurements is not None else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        lead, follow = pair.leader.values, pair.follower.values
        for i, t in enumerate(pair.times):
            row = [t, lead[i, 0], lead[i, 1], follow[i, 0], follow[i, 1]]
            if measurements is not None:
                row += [measurements[i, 0], measurements[i, 1]]
            writer.writerow([repr(float(v)) for v in row])


def ingest_csv(path, vehicle_length: float = IdmParams().vehicle_length, dt_tol: float = 1e-6) -> TrajectoryPair:
    """Read and validate a trajectory CSV.

    Requires the columns ``t, x_lead, v_lead, x_follow, v_follow`` (extra
    ``z_pos, z_vel`` columns are kept as measurements), uniform timestamps within
    ``dt_tol``, finite values, and a positive net gap on every row.  Problems are
    reported with line numbers, never repaired.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TrajectoryFormatError(f"{path}: empty file") from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise TrajectoryFormatError(f"{path}: missing column(s) {', '.join(missing)}")
        has_z = all(c in header for c in MEASUREMENT_COLUMNS)
        cols = list(CSV_COLUMNS) + (list(MEASUREMENT_COLUMNS) if has_z else [])
        index = [header.index(c) for c in cols]
        rows, problems = [], []
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            try:
                vals = [float(raw[i]) for i in index]
            except (ValueError, IndexError):
                problems.append(f"line {lineno}: unparseable row")
                continue
            if not all(math.isfinite(v) for v in vals):
                problems.append(f"line {lineno}: non-finite value")
                continue
            gap = vals[1] - vals[3] - vehicle_length
            if gap <= 0:
                problems.append(f"line {lineno}: net gap {gap:.3f} m is not positive")
            rows.append((lineno, vals))
    if problems:
        raise TrajectoryFormatError(f"{path}: " + "; ".join(problems))
    if len(rows) < 2:
        raise TrajectoryFormatError(f"{path}: need at least 2 rows")
    data = np.array([v for _, v in rows])
    t = data[:, 0]
    dt = t[1] - t[0]
    if not dt > 0:
        raise TrajectoryFormatError(f"{path}: timestamps must increase")
    expected = t[0] + dt * np.arange(len(t))
    bad = np.flatnonzero(np.abs(t - expected) > dt_tol)
    if bad.size:
        raise TrajectoryFormatError(f"{path}: non-uniform timestamp at line {rows[bad[0]][0]}")
    return TrajectoryPair(
        leader=TimedTrace.from_array(t[0], dt, data[:, 1:3]),
        follower=TimedTrace.from_array(t[0], dt, data[:, 3:5]),
        measurements=data[:, 5:7].copy() if has_z else None,
    )
