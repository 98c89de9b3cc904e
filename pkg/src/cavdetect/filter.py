"""Continuous-discrete extended Kalman filters over the delayed IDM model.

Two variants share one implementation:

* ``aekf`` -- state ``[x, v, delay_bias]``, position rate ``v(t-tau) + delay_bias``,
  measurement ``[x + delay_bias, v]``.
* ``ekf`` -- state ``[x, v]``, position rate ``v(t-tau)``, measurement ``[x, v]``.

Prediction integrates the mean and the covariance ODE

    dP/dt = F P_lag + P_lag F^T + Q

with fixed-step RK4, where ``F`` is the Jacobian at the delayed mean and
``P_lag`` is the current covariance (default) or the one at ``t - tau``
(``covariance_lag="delayed"``).  The delayed form can leave ``P`` indefinite
once ``tau`` spans several samples, so it is opt-in.  Means and covariances are buffered at the RK4 substep
resolution so delayed lookups are interpolated from the filter's own history.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._ode import rk4_step
from .delay import TimedTrace
from .motion import H_AUGMENTED, H_PLAIN, MIN_GAP, IdmParams, idm_accel, idm_gradient

MODELS = ("ekf", "aekf")
MAX_CONDITION = 1e12


class FilterDivergence(ArithmeticError):
    """Non-finite values or an ill-conditioned innovation covariance."""


def _check_psd(mat: np.ndarray, name: str) -> None:
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(mat).min() < -1e-12:
        raise ValueError(f"{name} must be positive semi-definite")


@dataclass(frozen=True)
class NoiseConfig:
    process_cov: np.ndarray
    measurement_cov: np.ndarray
    initial_cov: np.ndarray

    def __post_init__(self):
        for name in ("process_cov", "measurement_cov", "initial_cov"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
            _check_psd(getattr(self, name), name)
        if np.linalg.eigvalsh(self.measurement_cov).min() <= 0:
            raise ValueError("measurement_cov must be positive definite")
        n = self.process_cov.shape[0]
        if self.initial_cov.shape != (n, n) or self.measurement_cov.shape != (2, 2):
            raise ValueError("covariance shapes do not match the state dimension")

    @classmethod
    def default(cls, model: str) -> NoiseConfig:
        if model == "aekf":
            return cls(np.diag([1e-3, 0.01, 0.01]), np.diag([0.25, 0.1]), np.diag([1.0, 1.0, 0.1]))
        return cls(np.diag([1e-3, 0.01]), np.diag([0.25, 0.1]), np.diag([1.0, 1.0]))


@dataclass(frozen=True)
class FilterConfig:
    model: str = "aekf"
    delay: float = 0.0
    dt: float = 0.1
    substeps: int = 5
    covariance_lag: str = "current"
    noise: NoiseConfig | None = None
    # evaluate the model at MIN_GAP instead of raising when the estimated gap collapses
    clamp_gap: bool = False
    idm: IdmParams = field(default_factory=IdmParams)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.covariance_lag not in ("delayed", "current"):
            raise ValueError("covariance_lag must be 'delayed' or 'current'")
        if self.delay < 0 or not self.dt > 0 or self.substeps < 1:
            raise ValueError("need delay >= 0, dt > 0, substeps >= 1")
        if self.noise is None:
            object.__setattr__(self, "noise", NoiseConfig.default(self.model))
        if self.noise.process_cov.shape[0] != self.dim:
            raise ValueError(f"{self.model} needs {self.dim}x{self.dim} covariances")

    @property
    def dim(self) -> int:
        return 3 if self.model == "aekf" else 2

    @property
    def H(self) -> np.ndarray:
        return H_AUGMENTED if self.model == "aekf" else H_PLAIN


@dataclass(frozen=True)
class FilterState:
    mean: np.ndarray
    cov: np.ndarray
    t: float


@dataclass(frozen=True)
class InnovationRecord:
    t: float
    innovation: np.ndarray
    innovation_cov: np.ndarray
    gain: np.ndarray
    chi2: float
    predicted_measurement: np.ndarray


def update(state: FilterState, z, H: np.ndarray, R: np.ndarray) -> tuple[FilterState, InnovationRecord]:
    """Kalman measurement update in Joseph form; pure function of its arguments.

    Raises:
        FilterDivergence: if ``S = H P H^T + R`` has condition number above 1e12.
    """
    P = state.cov
    z_hat = H @ state.mean
    nu = np.asarray(z, dtype=float) - z_hat
    PHt = P @ H.T
    S = H @ PHt + R
    S = 0.5 * (S + S.T)
    # closed-form eigenvalues of the symmetric 2x2 S
    half_tr = 0.5 * (S[0, 0] + S[1, 1])
    disc = np.hypot(0.5 * (S[0, 0] - S[1, 1]), S[0, 1])
    lo, hi = half_tr - disc, half_tr + disc
    if not (lo > 0 and hi / lo <= MAX_CONDITION):
        raise FilterDivergence(f"innovation covariance ill-conditioned at t={state.t:.3f}: eigenvalues {lo:.3g}, {hi:.3g}")
    S_inv = np.linalg.inv(S)
    K = PHt @ S_inv
    mean = state.mean + K @ nu
    A = np.eye(len(P)) - K @ H
    cov = A @ P @ A.T + K @ R @ K.T
    cov = 0.5 * (cov + cov.T)
    chi2 = float(nu @ S_inv @ nu)
    record = InnovationRecord(state.t, nu, S, K, chi2, z_hat)
    return FilterState(mean, cov, state.t), record


class DelayedEKF:
    """Sequential filter bound to one leader trace.

    Usage::

        filt = DelayedEKF(config, leader_trace)
        filt.initialize(z0, t0)
        for z in measurements:
            filt.predict()
            state, record = filt.update(z)
    """

    def __init__(self, config: FilterConfig, leader: TimedTrace, hold_first: bool = False):
        self.config = config
        self.leader = leader
        # hold the first leader sample for lookups that reach before the trace
        self.hold_first = hold_first
        self.state: FilterState | None = None
        self._h = config.dt / config.substeps
        self._history: TimedTrace | None = None
        self._input_delay = config.delay

    @property
    def dim(self) -> int:
        return self.config.dim

    def initialize(self, z, t: float) -> FilterState:
        """Start from measurement ``z`` with zero bias and the configured initial covariance.

        The history before ``t`` is back-filled at constant speed so delayed
        lookups are defined from the first prediction on.
        """
        n = self.dim
        mean = np.zeros(n)
        mean[:2] = z
        cov = self.config.noise.initial_cov.copy()
        self.state = FilterState(mean, cov, float(t))
        pad = int(np.ceil(self.config.delay / self._h)) + 2
        self._history = TimedTrace(t - pad * self._h, self._h, n + n * n, capacity=pad + 1024)
        for i in range(pad, -1, -1):
            past = mean.copy()
            past[0] -= mean[1] * i * self._h
            self._history.append(np.concatenate([past, cov.ravel()]))
        return self.state

    def _delayed(self, t: float, mean: np.ndarray, cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tau = self.config.delay
        if tau == 0.0:
            return mean, cov
        row = self._history.at(t - tau, hold_last=True)
        n = self.dim
        return row[:n], row[n:].reshape(n, n)

    def _rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        cfg = self.config
        n = self.dim
        mean, cov = y[:n], y[n:].reshape(n, n)
        lag_mean, lag_cov = self._delayed(t, mean, cov)
        x_l, v_l = self.leader.at(t - self._input_delay, hold_first=self.hold_first)
        x_d, v_d = lag_mean[0], lag_mean[1]
        if cfg.clamp_gap:
            # keep x_l - x - length at or above MIN_GAP (float slack included)
            x_d = min(x_d, x_l - cfg.idm.vehicle_length - MIN_GAP * (1 + 1e-9))
        accel = idm_accel(x_d, v_d, x_l, v_l, cfg.idm)
        d_x, d_v, _, _ = idm_gradient(x_d, v_d, x_l, v_l, cfg.idm)
        F = np.zeros((n, n))
        F[0, 1] = 1.0
        F[1, 0] = d_x
        F[1, 1] = d_v
        dmean = np.zeros(n)
        dmean[1] = accel
        if n == 3:
            F[0, 2] = 1.0
            dmean[0] = v_d + lag_mean[2]
        else:
            dmean[0] = v_d
        P = lag_cov if cfg.covariance_lag == "delayed" else cov
        FP = F @ P
        dcov = FP + FP.T + cfg.noise.process_cov
        return np.concatenate([dmean, dcov.ravel()])

    def predict(self, input_delay: float | None = None) -> FilterState:
        """Propagate mean and covariance over one sampling interval.

        ``input_delay`` is the age of the leader data actually received for this
        interval (the model still assumes ``config.delay``); it defaults to the
        nominal delay.
        """
        n = self.dim
        self._input_delay = self.config.delay if input_delay is None else input_delay
        state = self.state
        y = np.concatenate([state.mean, state.cov.ravel()])
        t = state.t
        for _ in range(self.config.substeps):
            y = rk4_step(self._rhs, t, y, self._h)
            t += self._h
            if not np.all(np.isfinite(y)):
                raise FilterDivergence(f"non-finite prediction at t={t:.3f}")
            cov = y[n:].reshape(n, n)
            y[n:] = (0.5 * (cov + cov.T)).ravel()
            self._history.append(y)
        self.state = FilterState(y[:n].copy(), y[n:].reshape(n, n).copy(), t)
        return self.state

    def innovate(self, z) -> tuple[FilterState, InnovationRecord]:
        """Posterior and innovation record for ``z`` without committing either."""
        cfg = self.config
        return update(self.state, z, cfg.H, cfg.noise.measurement_cov)

    def accept(self, state: FilterState) -> None:
        """Make ``state`` the current estimate and record it in the history."""
        n = self.dim
        self.state = state
        self._history.set_last(np.concatenate([state.mean, state.cov.ravel()]))

    def update(self, z) -> tuple[FilterState, InnovationRecord]:
        posterior, record = self.innovate(z)
        self.accept(posterior)
        return posterior, record
