"""Closed reference trajectories for the twelve client tracks.

Paths are smooth closed parametric curves ``p(t) = r0 * g(t) * b(t)`` where
``g(t) = 1 + sum_k a_k cos(k t + phi_k)`` is a radial modulation and ``b(t)``
is either the unit circle (egg/potato/ellipsoid shapes) or a Gerono-style
lemniscate (figure eights).  Curvature comes from the analytic parametric
derivatives; timing comes from :func:`speed_profile`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from ._jit import USE_NUMBA, kernel

ROMAN = ("I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI", "XII")
CLIENT_INDEX = {name: i + 1 for i, name in enumerate(ROMAN)}

DEFAULT_DT = 0.05
SMOOTHING_WINDOW = 0.5  # seconds
CSV_COLUMNS = ("t", "x_d", "y_d", "psi_d", "psi_dot_d", "kappa_d", "v_d")

_FINE_POINTS = 1 << 14
_CHECK_POINTS = 2048
_FLAT_CURVATURE = 1e-9  # relative spread treated as constant curvature


class NonSimpleCurve(ValueError):
    """Generated curve crosses itself more often than its kind allows."""


class DegenerateSpec(ValueError):
    """Path spec that cannot produce a usable trajectory."""


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class PathSpec:
    """Parametric description of one client track.

    ``fourier_coeffs`` holds ``(k, a_k, phi_k)`` triples.  ``kind`` selects
    the base curve ("fourier" or "lemniscate"); ``aspect`` scales the
    lemniscate's lateral extent and is ignored for circles.
    """

    id: str
    base_radius: float
    fourier_coeffs: tuple[tuple[int, float, float], ...] = ()
    orientation: str = "left-dominant"
    v_min: float = 0.5
    v_max: float = 1.0
    kind: str = "fourier"
    aspect: float = 1.0
    name: str = ""
    targets: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(
            self,
            "fourier_coeffs",
            tuple((int(k), float(a), float(p)) for k, a, p in self.fourier_coeffs),
        )
        if not self.base_radius > 0:
            raise DegenerateSpec(f"{self.id}: base_radius must be positive")
        if any(abs(a) >= 1.0 for _, a, _ in self.fourier_coeffs):
            raise DegenerateSpec(f"{self.id}: Fourier amplitudes must satisfy |a_k| < 1")
        if not 0 < self.v_min <= self.v_max:
            raise DegenerateSpec(f"{self.id}: need 0 < v_min <= v_max")
        if self.orientation not in ("left-dominant", "right-dominant"):
            raise DegenerateSpec(f"{self.id}: unknown orientation {self.orientation!r}")
        if self.kind not in ("fourier", "lemniscate"):
            raise DegenerateSpec(f"{self.id}: unknown kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "PathSpec":
        return cls(
            id=d["id"],
            base_radius=d["base_radius"],
            fourier_coeffs=tuple(tuple(c) for c in d.get("fourier_coeffs", ())),
            orientation=d.get("orientation", "left-dominant"),
            v_min=d["v_min"],
            v_max=d["v_max"],
            kind=d.get("kind", "fourier"),
            aspect=d.get("aspect", 1.0),
            name=d.get("name", ""),
            targets=dict(d.get("targets", {})),
        )

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "name": self.name,
            "kind": self.kind,
            "base_radius": self.base_radius,
            "aspect": self.aspect,
            "fourier_coeffs": [list(c) for c in self.fourier_coeffs],
            "orientation": self.orientation,
            "v_min": self.v_min,
            "v_max": self.v_max,
        }
        if self.targets:
            d["targets"] = dict(self.targets)
        return d


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    x_d: float
    y_d: float
    psi_d: float
    psi_dot_d: float
    kappa_d: float
    v_d: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-sampled reference, stored column-wise.

    The last sample closes the loop: it sits at the start position, one
    ``dt`` after the second-to-last sample.
    """

    t: np.ndarray
    x_d: np.ndarray
    y_d: np.ndarray
    psi_d: np.ndarray
    psi_dot_d: np.ndarray
    kappa_d: np.ndarray
    v_d: np.ndarray
    dt: float
    total_length: float
    path_id: str = ""

    def __post_init__(self):
        for name in CSV_COLUMNS:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> TrajectorySample:
        return TrajectorySample(*(float(getattr(self, c)[k]) for c in CSV_COLUMNS))

    @property
    def samples(self) -> list[TrajectorySample]:
        return [self[k] for k in range(len(self))]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        cols = [getattr(self, c) for c in CSV_COLUMNS]
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="")
        return text

    @classmethod
    def from_csv(cls, path, dt: float | None = None, path_id: str = "") -> "Trajectory":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != CSV_COLUMNS:
                raise ValueError(f"unexpected trajectory header {header}")
            data = np.array([[float(v) for v in row] for row in reader])
        t = data[:, 0]
        if dt is None:
            dt = float(t[1] - t[0])
        seg = np.hypot(np.diff(data[:, 1]), np.diff(data[:, 2]))
        return cls(*data.T, dt=dt, total_length=float(seg.sum()), path_id=path_id)


# ---------------------------------------------------------------------------
# geometry


def _modulation(spec: PathSpec, t: np.ndarray):
    g = np.ones_like(t)
    g1 = np.zeros_like(t)
    g2 = np.zeros_like(t)
    for k, a, phi in spec.fourier_coeffs:
        arg = k * t + phi
        c, s = np.cos(arg), np.sin(arg)
        g += a * c
        g1 -= k * a * s
        g2 -= k * k * a * c
    return g, g1, g2


def _base(spec: PathSpec, t: np.ndarray):
    c, s = np.cos(t), np.sin(t)
    if spec.kind == "fourier":
        return (c, s), (-s, c), (-c, -s)
    # Gerono lemniscate: (sin t, b sin t cos t) = (sin t, b/2 sin 2t)
    b = spec.aspect
    s2, c2 = np.sin(2 * t), np.cos(2 * t)
    return (s, 0.5 * b * s2), (c, b * c2), (-s, -2.0 * b * s2)


def curve_derivatives(spec: PathSpec, t: np.ndarray):
    """Return ``(p, p', p'')`` as ``(2, n)`` arrays at parameters ``t``.

    Right-dominant specs are mirrored (``y -> -y``).
    """
    t = np.asarray(t, dtype=np.float64)
    g, g1, g2 = _modulation(spec, t)
    (bx, by), (bx1, by1), (bx2, by2) = _base(spec, t)
    r0 = spec.base_radius
    p = r0 * np.array([g * bx, g * by])
    p1 = r0 * np.array([g1 * bx + g * bx1, g1 * by + g * by1])
    p2 = r0 * np.array(
        [g2 * bx + 2 * g1 * bx1 + g * bx2, g2 * by + 2 * g1 * by1 + g * by2]
    )
    if spec.orientation == "right-dominant":
        p[1] *= -1
        p1[1] *= -1
        p2[1] *= -1
    return p, p1, p2


def curvature_from_derivatives(p1, p2):
    num = p1[0] * p2[1] - p1[1] * p2[0]
    return num / np.hypot(p1[0], p1[1]) ** 3


def _count_crossings_vectorized(x, y):
    n = x.shape[0] - 1
    ax, ay, bx, by = x[:-1], y[:-1], x[1:], y[1:]
    total = 0
    for i in range(n - 2):
        j0 = i + 2
        j1 = n if i > 0 else n - 1
        if j1 <= j0:
            continue
        px, py, qx, qy = ax[i], ay[i], bx[i], by[i]
        rx, ry, sx, sy = ax[j0:j1], ay[j0:j1], bx[j0:j1], by[j0:j1]
        d1 = (qx - px) * (ry - py) - (qy - py) * (rx - px)
        d2 = (qx - px) * (sy - py) - (qy - py) * (sx - px)
        d3 = (sx - rx) * (py - ry) - (sy - ry) * (px - rx)
        d4 = (sx - rx) * (qy - ry) - (sy - ry) * (qx - rx)
        total += int(np.sum((d1 * d2 < 0.0) & (d3 * d4 < 0.0)))
    return total


@kernel
def _count_crossings_loop(x, y):
    n = x.shape[0] - 1
    total = 0
    for i in range(n - 2):
        px, py, qx, qy = x[i], y[i], x[i + 1], y[i + 1]
        lox, hix = min(px, qx), max(px, qx)
        loy, hiy = min(py, qy), max(py, qy)
        j1 = n if i > 0 else n - 1
        for j in range(i + 2, j1):
            rx, ry, sx, sy = x[j], y[j], x[j + 1], y[j + 1]
            if max(rx, sx) < lox or min(rx, sx) > hix or max(ry, sy) < loy or min(ry, sy) > hiy:
                continue
            d1 = (qx - px) * (ry - py) - (qy - py) * (rx - px)
            d2 = (qx - px) * (sy - py) - (qy - py) * (sx - px)
            d3 = (sx - rx) * (py - ry) - (sy - ry) * (px - rx)
            d4 = (sx - rx) * (qy - ry) - (sy - ry) * (qx - rx)
            if d1 * d2 < 0.0 and d3 * d4 < 0.0:
                total += 1
    return total


def count_crossings(x, y) -> int:
    """Count proper intersections between non-adjacent segments of a closed polyline.

    ``x``/``y`` list the vertices; the last vertex is assumed to repeat the first.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if USE_NUMBA:
        return int(_count_crossings_loop(x, y))
    return _count_crossings_vectorized(x, y)


# ---------------------------------------------------------------------------
# speed profile


def _circular_moving_average(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return values.copy()
    if window % 2 == 0:
        window += 1
    half = window // 2
    n = len(values)
    if window >= n:
        return np.full(n, values.mean())
    padded = np.concatenate([values[-half:], values, values[:half]])
    csum = np.concatenate([[0.0], np.cumsum(padded)])
    return (csum[window:] - csum[:-window]) / window


def speed_profile(
    curvature: Sequence[float],
    v_min: float,
    v_max: float,
    dt: float | None = None,
    smoothing: float = SMOOTHING_WINDOW,
) -> np.ndarray:
    """Map curvature to desired speed: fast on straights, slow in tight turns.

    The map is affine in ``|kappa|`` between the series extremes, followed by
    a centered (cyclic) moving average spanning ``smoothing`` seconds when the
    sampling period ``dt`` is given.  A constant-curvature series gives
    ``v_max`` throughout.
    """
    if v_min > v_max:
        raise ValueError("v_min must not exceed v_max")
    kabs = np.abs(np.asarray(curvature, dtype=np.float64))
    if kabs.size == 0:
        raise ValueError("curvature series is empty")
    lo, hi = kabs.min(), kabs.max()
    if hi - lo <= _FLAT_CURVATURE * max(hi, 1.0):
        return np.full(kabs.shape, float(v_max))
    v = v_max - (v_max - v_min) * (kabs - lo) / (hi - lo)
    if dt is not None and smoothing > 0:
        v = _circular_moving_average(v, int(round(smoothing / dt)))
    return v


# ---------------------------------------------------------------------------
# path generation


def _cumtrapz(y: np.ndarray, dx: float) -> np.ndarray:
    out = np.empty(len(y))
    out[0] = 0.0
    np.cumsum(0.5 * (y[1:] + y[:-1]) * dx, out=out[1:])
    return out


def generate_path(spec: PathSpec, dt: float = DEFAULT_DT) -> Trajectory:
    """Generate the closed, time-sampled reference for ``spec``.

    The duration is rounded up to a whole number of control periods by
    compressing the speed profile towards ``v_min`` (the shift is at most
    ``dt / T`` relative), so the final sample lands exactly on the start.
    """
    if not dt > 0:
        raise DegenerateSpec("dt must be positive")

    # fine parameter grid, closed (last point == first point)
    m = _FINE_POINTS
    tpar = np.linspace(0.0, 2.0 * np.pi, m + 1)
    dpar = tpar[1] - tpar[0]
    p, p1, p2 = curve_derivatives(spec, tpar)
    g, _, _ = _modulation(spec, tpar)
    if np.any(g <= 0):
        raise DegenerateSpec(f"{spec.id}: radial modulation reaches zero")
    speed = np.hypot(p1[0], p1[1])
    if np.any(speed <= 1e-12):
        raise DegenerateSpec(f"{spec.id}: curve has a cusp")
    s = _cumtrapz(speed, dpar)
    length = float(s[-1])
    if length < 10.0 * dt * spec.v_max:
        raise DegenerateSpec(f"{spec.id}: arc length {length:.3g} m too short for dt")
    kappa = curvature_from_derivatives(p1, p2)

    # raw (unsmoothed) timing, then smooth the speed on a uniform time grid
    v_raw = speed_profile(kappa, spec.v_min, spec.v_max)
    t_raw = np.concatenate([[0.0], np.cumsum(np.diff(s) * 0.5 * (1 / v_raw[1:] + 1 / v_raw[:-1]))])
    h = dt / 10.0
    n_fine_t = max(int(math.ceil(t_raw[-1] / h)), 16)
    tt = np.linspace(0.0, t_raw[-1], n_fine_t, endpoint=False)
    k_t = np.interp(tt, t_raw, kappa)
    v_t = speed_profile(k_t, spec.v_min, spec.v_max, dt=tt[1] - tt[0])
    v_s = np.interp(t_raw, np.append(tt, t_raw[-1]), np.append(v_t, v_t[0]))

    # round the lap time up to a whole number of control periods
    def lap_time(c):
        vv = spec.v_min + c * (v_s - spec.v_min) if spec.v_max > spec.v_min else c * v_s
        return float(np.sum(np.diff(s) * 0.5 * (1 / vv[1:] + 1 / vv[:-1])))

    t_nat = lap_time(1.0)
    n_steps = int(math.ceil(t_nat / dt - 1e-9))
    t_goal = n_steps * dt
    if abs(t_goal - t_nat) < 1e-12 * t_goal:
        c = 1.0
    else:
        c = brentq(lambda c: lap_time(c) - t_goal, 1e-6, 1.0, xtol=1e-15, rtol=1e-15)
    if spec.v_max > spec.v_min:
        v_fin = spec.v_min + c * (v_s - spec.v_min)
    else:
        v_fin = c * v_s
    t_of_s = np.concatenate([[0.0], np.cumsum(np.diff(s) * 0.5 * (1 / v_fin[1:] + 1 / v_fin[:-1]))])
    t_of_s *= t_goal / t_of_s[-1]  # remove the last few ulps of root-finding error

    tk = np.arange(n_steps + 1) * dt
    tk[-1] = t_goal
    par_k = np.interp(tk, t_of_s, tpar)
    par_k[0], par_k[-1] = 0.0, 2.0 * np.pi
    pk, pk1, pk2 = curve_derivatives(spec, par_k)
    pk[:, -1] = pk[:, 0]
    kap_k = curvature_from_derivatives(pk1, pk2)
    psi_k = np.arctan2(pk1[1], pk1[0])
    v_k = np.interp(par_k, tpar, v_fin)
    v_k = np.clip(v_k, min(spec.v_min, v_fin.min()), max(spec.v_max, v_fin.max()))

    # offset grid keeps vertices off the lemniscate's crossing point
    check_par = (np.arange(_CHECK_POINTS + 1) + 0.5) * (2.0 * np.pi / _CHECK_POINTS)
    cp, _, _ = curve_derivatives(spec, check_par)
    n_cross = count_crossings(np.ascontiguousarray(cp[0]), np.ascontiguousarray(cp[1]))
    allowed = 1 if spec.kind == "lemniscate" else 0
    if n_cross != allowed:
        raise NonSimpleCurve(f"{spec.id}: {n_cross} self-intersections (allowed {allowed})")

    return Trajectory(
        t=tk,
        x_d=pk[0],
        y_d=pk[1],
        psi_d=psi_k,
        psi_dot_d=kap_k * v_k,
        kappa_d=kap_k,
        v_d=v_k,
        dt=float(dt),
        total_length=length,
        path_id=spec.id,
    )


def characteristics(traj: Trajectory) -> dict:
    return {
        "length": traj.total_length,
        "max_abs_kappa": float(np.max(np.abs(traj.kappa_d))),
        "v_max": float(traj.v_d.max()),
        "v_min": float(traj.v_d.min()),
        "duration": traj.duration,
    }


# ---------------------------------------------------------------------------
# default client tracks and splits

# test clients (red) per experiment run
_TEST_SETS = {
    1: ("I", "IX", "X", "XI"),
    2: ("III", "IV", "VI", "IX"),
    3: ("II", "VIII", "IX", "XII"),
    4: ("II", "VI", "VII", "VIII"),
    5: ("V", "X", "XI", "XII"),
    6: ("I", "II", "IX", "XI"),
    7: ("IV", "VI", "VII", "IX"),
    8: ("VII", "IX", "X", "XII"),
    9: ("I", "II", "IX", "XI"),
    10: ("IV", "VII", "VIII", "IX"),
}

DEFAULT_TEST_SET = ("I", "VI", "VIII", "XI")


def split_schedule(run_index: int) -> tuple[frozenset, frozenset]:
    """Train/test client split for experiment run ``run_index`` (1..10)."""
    if run_index not in _TEST_SETS:
        raise OutOfRange(f"run index must be in 1..10, got {run_index}")
    test = frozenset(_TEST_SETS[run_index])
    return frozenset(ROMAN) - test, test


def default_split() -> tuple[frozenset, frozenset]:
    test = frozenset(DEFAULT_TEST_SET)
    return frozenset(ROMAN) - test, test


def roman_sorted(ids: Iterable[str]) -> list[str]:
    return sorted(ids, key=lambda c: CLIENT_INDEX.get(c, 10**6))


def load_path_specs(directory=None) -> dict[str, PathSpec]:
    """Read ``<id>.json`` path specs from ``directory`` (default: bundled set)."""
    specs = {}
    if directory is None:
        root = resources.files("fedff") / "paths"
        entries = [e for e in root.iterdir() if e.name.endswith(".json")]
    else:
        entries = sorted(Path(directory).glob("*.json"))
    for entry in entries:
        spec = PathSpec.from_dict(json.loads(entry.read_text(encoding="utf-8")))
        specs[spec.id] = spec
    return {k: specs[k] for k in roman_sorted(specs)}


def write_path_spec(spec: PathSpec, directory) -> Path:
    path = Path(directory) / f"{spec.id}.json"
    path.write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def generate_all(specs: dict[str, PathSpec] | None = None, dt: float = DEFAULT_DT) -> dict[str, Trajectory]:
    specs = load_path_specs() if specs is None else specs
    return {cid: generate_path(spec, dt) for cid, spec in specs.items()}
