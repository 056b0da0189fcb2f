"""Trajectory-tracking feedback in a moving reference frame, plus feedforward sources."""

from __future__ import annotations

import csv
import gzip
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._jit import kernel
from .trajgen import Trajectory, TrajectorySample
from .vehicle import VehicleParams, VehicleState, step_kernel, wrap_angle

DIVERGENCE_LIMIT = 10.0  # m

LOG_COLUMNS = ("t", "x", "y", "psi", "v", "delta", "eps_x", "eps_y", "u_delta", "u_v", "kappa_a")


class Diverged(RuntimeError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class EmptyLog(ValueError):
    pass


@dataclass(frozen=True)
class ControlGains:
    K1: float = 0.2
    K2: float = 0.4
    K3: float = 0.05
    K4: float = 2.0
    K5: float = 1.0

    def __post_init__(self):
        for name in ("K1", "K2", "K3", "K4", "K5"):
            if getattr(self, name) < 0:
                raise ValueError(f"gain {name} must be non-negative")


@dataclass(frozen=True)
class TrackingErrors:
    eps_x: float
    eps_y: float


def tracking_errors(desired: TrajectorySample, actual: VehicleState) -> TrackingErrors:
    c, s = math.cos(desired.psi_d), math.sin(desired.psi_d)
    dx, dy = desired.x_d - actual.x, desired.y_d - actual.y
    return TrackingErrors(c * dx + s * dy, -s * dx + c * dy)


def fb_steering(
    errors: TrackingErrors,
    desired: TrajectorySample,
    actual: VehicleState,
    actual_yaw_rate: float,
    gains: ControlGains,
) -> float:
    return (
        gains.K1 * errors.eps_y
        + gains.K2 * wrap_angle(desired.psi_d - actual.psi)
        + gains.K3 * (desired.psi_dot_d - actual_yaw_rate)
    )


def fb_velocity(errors: TrackingErrors, desired_v: float, gains: ControlGains) -> float:
    """Speed command: the reference speed plus the longitudinal correction."""
    return desired_v + gains.K5 * errors.eps_x


def analytic_ff(kappa_d, v_d, params: VehicleParams):
    """Inverse of the yaw kinematics; ``v_d`` is accepted but unused."""
    return np.arctan(np.asarray(kappa_d) * params.L)


# ---------------------------------------------------------------------------
# feedforward sources


class NoFeedforward:
    name = "fb"

    def __call__(self, kappa, v):
        return np.zeros(np.shape(kappa))


class AnalyticFeedforward:
    name = "fb_analytic"

    def __init__(self, params: VehicleParams):
        self.params = params

    def __call__(self, kappa, v):
        return analytic_ff(kappa, v, self.params)


class NeuralFeedforward:
    """Steering feedforward from a network evaluated at the reference (kappa_d, v_d)."""

    name = "fb_neural"

    def __init__(self, model):
        self.model = model

    def __call__(self, kappa, v):
        from .neuralff import forward

        return forward(self.model, kappa, v)


def feedforward_signal(ff, traj: Trajectory) -> np.ndarray:
    """Evaluate a feedforward source along the whole reference.

    The feedforward depends only on the reference, so it is computed once per
    lap.  ``ff`` may be ``None`` or any callable ``(kappa, v) -> array``.
    """
    if ff is None:
        return np.zeros(len(traj))
    out = np.asarray(ff(traj.kappa_d, traj.v_d), dtype=np.float64).reshape(len(traj))
    if not np.all(np.isfinite(out)):
        raise ValueError("feedforward source produced non-finite values")
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# closed-loop lap


@kernel
def simulate_lap(
    x_d, y_d, psi_d, psi_dot_d, v_d, ff,
    x0, y0, psi0, v0, delta0,
    L, delta_max, delta_rate_max, tau, K_gain, dt,
    K1, K2, K3, K4, K5, limit,
):
    """Run the closed loop over every reference sample.

    Returns ``(log, n_rows, status)`` where ``log`` has columns
    ``x, y, psi, v, delta, eps_x, eps_y, u_delta, u_v, kappa_a`` and status is
    0 (ok), 1 (diverged) or 2 (non-finite state).
    """
    n = x_d.shape[0]
    log = np.empty((n, 10))
    x, y, psi, v, delta = x0, y0, psi0, v0, delta0
    for k in range(n):
        c = math.cos(psi_d[k])
        s = math.sin(psi_d[k])
        dx = x_d[k] - x
        dy = y_d[k] - y
        ex = c * dx + s * dy
        ey = -s * dx + c * dy
        yaw_rate = v / L * math.tan(delta)
        u_fb = K1 * ey + K2 * wrap_angle(psi_d[k] - psi) + K3 * (psi_dot_d[k] - yaw_rate)
        u_delta = u_fb + ff[k]
        u_v = v_d[k] + K5 * ex
        log[k, 0] = x
        log[k, 1] = y
        log[k, 2] = psi
        log[k, 3] = v
        log[k, 4] = delta
        log[k, 5] = ex
        log[k, 6] = ey
        log[k, 7] = u_delta
        log[k, 8] = u_v
        log[k, 9] = math.tan(delta) / L
        if abs(ex) > limit or abs(ey) > limit:
            return log, k + 1, 1
        x, y, psi, v, delta = step_kernel(
            x, y, psi, v, delta, u_delta, u_v,
            L, delta_max, delta_rate_max, tau, K_gain, dt, K4,
        )
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(psi)
                and math.isfinite(v) and math.isfinite(delta)):
            return log, k + 1, 2
    return log, n, 0


@dataclass(frozen=True, eq=False)
class LapLog:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    v: np.ndarray
    delta: np.ndarray
    eps_x: np.ndarray
    eps_y: np.ndarray
    u_delta: np.ndarray
    u_v: np.ndarray
    kappa_a: np.ndarray
    path_id: str = ""

    def __len__(self):
        return len(self.t)

    @property
    def v_a(self):
        return self.v

    @property
    def delta_a(self):
        return self.delta

    def training_rows(self) -> np.ndarray:
        """``(n, 3)`` array of (kappa_a, v_a, delta_a)."""
        return np.column_stack([self.kappa_a, self.v, self.delta])

    def to_csv(self, path=None, compress: bool = False) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        cols = [getattr(self, c) for c in LOG_COLUMNS]
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            data = text.encode("utf-8")
            if compress:
                # mtime=0 keeps the archive bytes reproducible
                data = gzip.compress(data, mtime=0)
            Path(path).write_bytes(data)
        return text


def run_lap(traj: Trajectory, ff, gains: ControlGains, params: VehicleParams) -> LapLog:
    """One closed-loop lap of FB + ``ff`` on ``traj``, starting at zero error.

    Raises :class:`Diverged` (with the partial log attached) when the
    tracking error exceeds 10 m or the state stops being finite.
    """
    ffs = feedforward_signal(ff, traj)
    delta0 = math.atan(traj.kappa_d[0] * params.L)
    delta0 = max(-params.delta_max, min(params.delta_max, delta0))
    raw, n, status = simulate_lap(
        traj.x_d, traj.y_d, traj.psi_d, traj.psi_dot_d, traj.v_d, ffs,
        float(traj.x_d[0]), float(traj.y_d[0]), float(traj.psi_d[0]), float(traj.v_d[0]), delta0,
        params.L, params.delta_max, params.delta_rate_max, params.tau, params.K_gain, params.dt,
        gains.K1, gains.K2, gains.K3, gains.K4, gains.K5, DIVERGENCE_LIMIT,
    )
    raw = raw[:n]
    log = LapLog(traj.t[:n].copy(), *(raw[:, j].copy() for j in range(10)), path_id=traj.path_id)
    if status == 1:
        raise Diverged(f"lap on {traj.path_id or 'trajectory'} diverged at t={log.t[-1]:.2f}s", log)
    if status == 2:
        raise Diverged(f"lap on {traj.path_id or 'trajectory'} produced a non-finite state", log)
    return log


def mean_tracking_error(log: LapLog) -> float:
    if len(log) == 0:
        raise EmptyLog("cannot average an empty lap log")
    return float(np.mean(np.hypot(log.eps_x, log.eps_y)))
