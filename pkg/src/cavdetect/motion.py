"""IDM car-following dynamics with delayed arguments and an augmented bias state.

The follower state is ``[x, v]`` (position, speed).  The augmented state used by
the AEKF adds ``delay_bias``: the integral of the follower's acceleration over
the delay window, which enters the position rate and the position measurement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: Smallest net gap (m) at which the interaction term is still evaluated.
MIN_GAP = 0.1

#: Measurement matrix of the augmented model: position reads ``x + delay_bias``.
H_AUGMENTED = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
#: Measurement matrix of the plain two-state model.
H_PLAIN = np.eye(2)


class GapError(ValueError):
    """Raised when the follower is not safely behind its leader."""

    def __init__(self, gap: float, time: float | None = None):
        self.gap = gap
        self.time = time
        where = "" if time is None else f" at t={time:.3f} s"
        super().__init__(f"net gap {gap:.6g} m is not above {MIN_GAP} m{where}")


@dataclass(frozen=True)
class IdmParams:
    """Intelligent Driver Model constants plus the follower's length.

    ``accel_exponent`` is the IDM free-road exponent (usually written delta).
    """

    max_accel: float = 1.0
    comfortable_decel: float = 1.5
    accel_exponent: float = 4.0
    desired_speed: float = 33.75
    jam_distance: float = 2.0
    time_headway: float = 1.0
    vehicle_length: float = 5.0

    def __post_init__(self):
        checks = {
            "max_accel": self.max_accel > 0,
            "comfortable_decel": self.comfortable_decel > 0,
            "accel_exponent": self.accel_exponent > 0,
            "desired_speed": self.desired_speed > 0,
            "jam_distance": self.jam_distance >= 0,
            "time_headway": self.time_headway >= 0,
            "vehicle_length": self.vehicle_length > 0,
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid IDM parameters: {', '.join(bad)}")

    def desired_gap(self, v: float, dv: float) -> float:
        """Dynamic desired gap s*(v, dv), with dv = v - v_lead."""
        return (
            self.jam_distance
            + v * self.time_headway
            + v * dv / (2.0 * math.sqrt(self.max_accel * self.comfortable_decel))
        )

    def equilibrium_gap(self, v: float) -> float:
        """Net gap at which a follower cruising at ``v`` behind an equal-speed leader has zero acceleration."""
        free = 1.0 - (abs(v) / self.desired_speed) ** self.accel_exponent
        if free <= 0:
            return math.inf
        return self.desired_gap(v, 0.0) / math.sqrt(free)


@dataclass(frozen=True)
class VehicleState:
    x: float
    v: float


@dataclass(frozen=True)
class AugmentedState:
    x: float
    v: float
    delay_bias: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.v, self.delay_bias])


@dataclass(frozen=True)
class LeaderInput:
    x_lead: float
    v_lead: float


def _net_gap(x: float, x_lead: float, params: IdmParams) -> float:
    gap = x_lead - x - params.vehicle_length
    if not gap > MIN_GAP:
        raise GapError(gap)
    return gap


def idm_accel(x: float, v: float, x_lead: float, v_lead: float, params: IdmParams) -> float:
    """IDM acceleration of a follower at ``(x, v)`` behind a leader at ``(x_lead, v_lead)``.

    Raises:
        GapError: if the net gap ``x_lead - x - vehicle_length`` is at or below ``MIN_GAP``.
    """
    gap = _net_gap(x, x_lead, params)
    s_star = params.desired_gap(v, v - v_lead)
    free = (abs(v) / params.desired_speed) ** params.accel_exponent
    return params.max_accel * (1.0 - free - (s_star / gap) ** 2)


def idm_accel_state(state: VehicleState, leader: LeaderInput, params: IdmParams) -> float:
    return idm_accel(state.x, state.v, leader.x_lead, leader.v_lead, params)


def idm_gradient(
    x: float, v: float, x_lead: float, v_lead: float, params: IdmParams
) -> tuple[float, float, float, float]:
    """Partial derivatives of :func:`idm_accel` w.r.t. ``(x, v, x_lead, v_lead)``."""
    a = params.max_accel
    sqrt_ab = math.sqrt(params.max_accel * params.comfortable_decel)
    gap = _net_gap(x, x_lead, params)
    s_star = params.desired_gap(v, v - v_lead)
    e = params.accel_exponent
    v0 = params.desired_speed
    # d/dv |v|^e = e * sign(v) * |v|^(e-1)
    d_free = e * math.copysign(abs(v) ** (e - 1.0), v) / v0**e if v != 0.0 else 0.0
    ds_dv = params.time_headway + (2.0 * v - v_lead) / (2.0 * sqrt_ab)
    ratio = s_star / gap
    d_x = -2.0 * a * ratio * ratio / gap
    d_v = -a * (d_free + 2.0 * ratio * ds_dv / gap)
    d_x_lead = -d_x
    d_v_lead = a * ratio * v / (gap * sqrt_ab)
    return d_x, d_v, d_x_lead, d_v_lead


def dynamics_g(
    state: np.ndarray,
    delayed_state: np.ndarray,
    delayed_input: np.ndarray,
    params: IdmParams,
) -> np.ndarray:
    """Time derivative of the augmented state ``[x, v, delay_bias]``.

    The position rate is the delayed speed plus the delayed bias; the speed rate is
    the IDM evaluated on delayed quantities; the bias is held constant.  ``state``
    is accepted for signature symmetry and does not enter the derivative.
    """
    x_d, v_d, b_d = delayed_state
    accel = idm_accel(x_d, v_d, delayed_input[0], delayed_input[1], params)
    return np.array([v_d + b_d, accel, 0.0])


def dynamics_plain(delayed_state: np.ndarray, delayed_input: np.ndarray, params: IdmParams) -> np.ndarray:
    """Two-state counterpart of :func:`dynamics_g` with the bias term dropped."""
    x_d, v_d = delayed_state[0], delayed_state[1]
    return np.array([v_d, idm_accel(x_d, v_d, delayed_input[0], delayed_input[1], params)])


def jacobian_F(state: np.ndarray, leader: np.ndarray, params: IdmParams) -> np.ndarray:
    """Analytic Jacobian of :func:`dynamics_g` w.r.t. the (delayed) augmented state."""
    d_x, d_v, _, _ = idm_gradient(state[0], state[1], leader[0], leader[1], params)
    return np.array(
        [
            [0.0, 1.0, 1.0],
            [d_x, d_v, 0.0],
            [0.0, 0.0, 0.0],
        ]
    )


def jacobian_plain(state: np.ndarray, leader: np.ndarray, params: IdmParams) -> np.ndarray:
    d_x, d_v, _, _ = idm_gradient(state[0], state[1], leader[0], leader[1], params)
    return np.array([[0.0, 1.0], [d_x, d_v]])


def measure_h(state: np.ndarray) -> np.ndarray:
    """Augmented measurement map: ``[x + delay_bias, v]``."""
    return H_AUGMENTED @ np.asarray(state, dtype=float)
