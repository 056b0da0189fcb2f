"""Kinematic bicycle with first-order speed lag and a limited steering actuator."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ._jit import kernel

STEER_GAIN = 2.0  # K4, steering-rate loop gain


class NonFinite(ArithmeticError):
    pass


class Saturation(ValueError):
    """Requested curvature needs more steering than the actuator allows."""


@dataclass(frozen=True)
class VehicleParams:
    L: float = 0.17
    delta_max: float = math.radians(20.0)
    delta_rate_max: float = math.radians(40.0)
    tau: float = 0.1
    K_gain: float = 1.0
    dt: float = 0.05

    def __post_init__(self):
        for name in ("L", "delta_max", "delta_rate_max", "tau", "K_gain", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.delta_max < math.pi / 2:
            raise ValueError("delta_max must be below pi/2")


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    v: float = 0.0
    delta: float = 0.0


@dataclass(frozen=True)
class ControlInput:
    u_delta: float
    u_v: float


@kernel
def wrap_angle(a):
    """Wrap to (-pi, pi]; angles already in range are returned unchanged."""
    if -math.pi < a <= math.pi:
        return a
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@kernel
def _clamp(x, lim):
    if x > lim:
        return lim
    if x < -lim:
        return -lim
    return x


@kernel
def step_kernel(x, y, psi, v, delta, u_delta, u_v, L, delta_max, delta_rate_max, tau, K_gain, dt, k4):
    # actuator: command clamp, rate clamp, state clamp
    cmd = _clamp(u_delta, delta_max)
    rate = _clamp(k4 * (cmd - delta), delta_rate_max)
    delta_n = _clamp(delta + dt * rate, delta_max)
    v_n = v + (dt / tau) * (K_gain * u_v - v)
    # pose uses the pre-step speed and steering angle
    x_n = x + dt * v * math.cos(psi)
    y_n = y + dt * v * math.sin(psi)
    psi_n = wrap_angle(psi + dt * (v / L) * math.tan(delta))
    return x_n, y_n, psi_n, v_n, delta_n


def step(state: VehicleState, u: ControlInput, params: VehicleParams, steer_gain: float = STEER_GAIN) -> VehicleState:
    """Advance ``state`` by one explicit Euler step of length ``params.dt``."""
    nxt = step_kernel(
        state.x, state.y, state.psi, state.v, state.delta,
        u.u_delta, u.u_v,
        params.L, params.delta_max, params.delta_rate_max, params.tau, params.K_gain,
        params.dt, steer_gain,
    )
    if not all(math.isfinite(f) for f in nxt):
        raise NonFinite(f"non-finite state after step: {nxt}")
    return VehicleState(*nxt)


def yaw_rate(state: VehicleState, params: VehicleParams) -> float:
    return state.v / params.L * math.tan(state.delta)


def steady_state_steering(kappa: float, params: VehicleParams) -> float:
    """Steering angle that holds curvature ``kappa`` in steady state."""
    delta = math.atan(kappa * params.L)
    if abs(delta) > params.delta_max:
        raise Saturation(f"curvature {kappa} needs |delta|={abs(delta):.4f} > {params.delta_max:.4f}")
    return delta
