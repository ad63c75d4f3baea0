"""Fixed-step RK4 flows, controlled and disturbed trajectories, delta-solutions."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .fields import VectorField, combine
from .manifold import displacement, norm, wrap

DEFAULT_DT = 1e-3

__all__ = [
    "Trajectory",
    "ControlLaw",
    "DisturbanceLaw",
    "rk4_step",
    "flow_map",
    "integrate",
    "integrate_controlled",
    "integrate_disturbed",
    "verify_delta_solution",
    "cluster_points",
    "omega_limit",
]


def rk4_step(rhs, t, x, h):
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = rhs(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _step_sizes(duration: float, dt: float) -> np.ndarray:
    """Full steps of ``dt`` with the last one shortened."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if duration <= 0:
        return np.zeros(0)
    n = max(1, int(np.ceil(duration / dt - 1e-9)))
    steps = np.full(n, dt)
    steps[-1] = duration - dt * (n - 1)
    return steps


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("integration produced a non-finite state")


def integrate(rhs, x0, duration: float, dt: float, t0: float = 0.0, record: bool = True):
    """Integrate ``x' = rhs(t, x)`` forward for ``duration``, wrapping each step.

    ``x0`` may be a single point ``(d,)`` or a batch ``(n, d)``. Returns
    ``(times, points)``; with ``record=False`` only the endpoint is kept.
    """
    x = wrap(x0)
    t = float(t0)
    times, pts = [t], [x]
    for h in _step_sizes(duration, dt):
        x = wrap(rk4_step(rhs, t, x, h))
        t += h
        if record:
            times.append(t)
            pts.append(x)
    _check_finite(x)
    if not record:
        return np.array([t]), x[None]
    return np.array(times), np.stack(pts)


def flow_map(V: VectorField, t: float, x0, dt: float = DEFAULT_DT):
    """``phi_V(t, x0)``; negative ``t`` integrates ``-V`` forward."""
    sign = 1.0 if t >= 0 else -1.0
    rhs = lambda _t, x: sign * V(x)
    _, pts = integrate(rhs, x0, abs(t), dt, record=False)
    return pts[0]


@dataclass
class Trajectory:
    """Time-stamped samples of a curve on the torus."""

    times: np.ndarray
    points: np.ndarray
    dt: float
    field_names: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        if len(self.times) < 1 or len(self.times) != len(self.points):
            raise ValueError("times and points must be non-empty and equally long")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def start(self):
        return self.points[0]

    @property
    def end(self):
        return self.points[-1]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def at(self, t: float):
        """Nearest sample at or before ``t``."""
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.points[max(i, 0)]

    def append(self, other: "Trajectory") -> "Trajectory":
        """Concatenate ``other`` shifted to start where this one ends."""
        shift = self.times[-1] - other.times[0]
        times = np.concatenate([self.times, other.times[1:] + shift])
        pts = np.concatenate([self.points, other.points[1:]])
        return Trajectory(times, pts, max(self.dt, other.dt), self.field_names, dict(self.meta))

    def to_csv(self, path):
        d = self.points.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i + 1}" for i in range(d)])
            for t, p in zip(self.times, self.points):
                w.writerow([f"{t:.17g}"] + [f"{c:.17g}" for c in p])

    @classmethod
    def from_csv(cls, path, dt: float = 0.0) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:], dt)


@dataclass
class ControlLaw:
    """Piecewise-constant controls on ``[breakpoints[k], breakpoints[k+1])``.

    ``drift_sign[k] = -1`` marks an interval that runs the drift backwards;
    such intervals are only produced when backward coasts are licensed by a
    nonwandering drift and are listed separately in every report.
    """

    breakpoints: np.ndarray
    coefficients: np.ndarray
    drift_sign: Optional[np.ndarray] = None
    bound: Optional[float] = None

    def __post_init__(self):
        self.breakpoints = np.asarray(self.breakpoints, dtype=float).reshape(-1)
        k = len(self.breakpoints) - 1
        self.coefficients = np.asarray(self.coefficients, dtype=float).reshape(k, -1) if k else np.zeros((0, 0))
        if self.drift_sign is None:
            self.drift_sign = np.ones(k)
        self.drift_sign = np.asarray(self.drift_sign, dtype=float).reshape(-1)
        if k < 1:
            raise ValueError("a control law needs at least one interval")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if len(self.drift_sign) != k or not np.all(np.isin(self.drift_sign, (-1.0, 1.0))):
            raise ValueError("drift_sign needs one entry of +-1 per interval")

    @property
    def m(self) -> int:
        return self.coefficients.shape[1]

    @property
    def duration(self) -> float:
        return float(self.breakpoints[-1] - self.breakpoints[0])

    @property
    def backward_time(self) -> float:
        widths = np.diff(self.breakpoints)
        return float(widths[self.drift_sign < 0].sum())

    def interval(self, t: float) -> int:
        b = self.breakpoints
        if t < b[0] or t > b[-1]:
            raise ValueError(f"control undefined at t={t}")
        return min(int(np.searchsorted(b, t, side="right")) - 1, len(b) - 2)

    def __call__(self, t: float):
        return self.coefficients[self.interval(t)]

    @classmethod
    def constant(cls, coeffs, T: float) -> "ControlLaw":
        return cls([0.0, T], [coeffs])

    @classmethod
    def zero(cls, m: int, T: float) -> "ControlLaw":
        return cls([0.0, T], np.zeros((1, m)))

    def to_text(self) -> str:
        return json.dumps(
            {
                "breakpoints": self.breakpoints.tolist(),
                "coefficients": self.coefficients.tolist(),
                "drift_sign": self.drift_sign.astype(int).tolist(),
                "bound": self.bound,
            },
            indent=1,
        )

    @classmethod
    def from_text(cls, text: str) -> "ControlLaw":
        data = json.loads(text)
        return cls(
            data["breakpoints"],
            np.asarray(data["coefficients"], dtype=float).reshape(len(data["breakpoints"]) - 1, -1),
            data.get("drift_sign"),
            data.get("bound"),
        )


@dataclass
class DisturbanceLaw:
    """Disturbance ``w(t, x)`` saturated to Euclidean norm ``bound``."""

    func: Callable
    bound: float

    def __call__(self, t, x):
        w = np.asarray(self.func(t, x), dtype=float)
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite disturbance")
        n = norm(w)
        scale = np.where(n > self.bound, self.bound / np.where(n > 0, n, 1.0), 1.0)
        return w * np.asarray(scale)[..., None]

    @classmethod
    def constant(cls, vec) -> "DisturbanceLaw":
        vec = np.asarray(vec, dtype=float)
        return cls(lambda t, x: np.broadcast_to(vec, np.shape(x)), float(np.linalg.norm(vec)))


def integrate_controlled(
    V: VectorField,
    X: Sequence[VectorField],
    u: ControlLaw,
    x0,
    T: Optional[float] = None,
    dt: float = DEFAULT_DT,
) -> Trajectory:
    """RK4 solution of ``x' = s V + sum_j u_j X_j`` with piecewise-constant ``u``.

    Steps are aligned with the control breakpoints. ``meta`` records the
    realized control-term bound and the time spent running the drift
    backwards.
    """
    T = u.breakpoints[-1] if T is None else float(T)
    if T <= 0:
        raise ValueError("horizon must be positive")
    b = u.breakpoints
    if b[0] > 0 or b[-1] < T - 1e-12:
        raise ValueError(f"control law covers [{b[0]}, {b[-1]}], not [0, {T}]")
    if u.m != len(X):
        raise ValueError(f"control law has {u.m} channels for {len(X)} fields")
    x = wrap(x0)
    times, pts = [0.0], [x]
    bound, back = 0.0, 0.0
    for k in range(len(b) - 1):
        lo, hi = max(b[k], 0.0), min(b[k + 1], T)
        if hi <= lo:
            continue
        coeffs = u.coefficients[k]
        s = u.drift_sign[k]
        active = [(c, f) for c, f in zip(coeffs, X) if c != 0.0]
        ctrl = combine([c for c, _ in active], [f for _, f in active]) if active else None
        rhs = (lambda _t, z, s=s, ctrl=ctrl: s * V(z) + ctrl(z)) if ctrl else (lambda _t, z, s=s: s * V(z))
        ts, ps = integrate(rhs, x, hi - lo, dt, t0=lo)
        if ctrl is not None:
            bound = max(bound, float(norm(ctrl(ps)).max()))
        if s < 0:
            back += hi - lo
        times.extend(ts[1:])
        pts.extend(ps[1:])
        x = ps[-1]
    return Trajectory(
        np.array(times),
        np.stack(pts),
        dt,
        (V.name, *(f.name for f in X)),
        {"control_bound": bound, "backward_time": back},
    )


def integrate_disturbed(V: VectorField, w: DisturbanceLaw, x0, T: float, dt: float = DEFAULT_DT) -> Trajectory:
    """RK4 solution of ``x' = V(x) + w(t, x)``."""
    if T <= 0:
        raise ValueError("horizon must be positive")
    times, pts = integrate(lambda t, x: V(x) + w(t, x), x0, T, dt)
    return Trajectory(times, pts, dt, (V.name, "w"), {"delta": w.bound})


def verify_delta_solution(traj: Trajectory, V: VectorField, delta: float, tol: Optional[float] = None, c: float = 0.1):
    """Check ``|x' - V(x)| <= delta`` at every interior sample.

    Velocities come from three-point differences on the torus (symmetric on
    even spacing). The check is inflated by ``tol`` (default
    ``c * max spacing``). Returns ``(ok, max_residual)``.
    """
    if len(traj) < 2:
        raise ValueError("need at least two samples")
    gaps = np.diff(traj.times)
    if np.any(gaps <= 0):
        raise ValueError("degenerate time spacing")
    if tol is None:
        tol = c * float(gaps.max())
    if len(traj) == 2:
        vel = displacement(traj.points[0], traj.points[1])[None] / gaps[0]
        mid = traj.points[:1]
    else:
        # three-point derivative, second order also on uneven spacing
        h1, h2 = gaps[:-1, None], gaps[1:, None]
        d1 = displacement(traj.points[:-2], traj.points[1:-1])
        d2 = displacement(traj.points[1:-1], traj.points[2:])
        vel = (h2 / (h1 * (h1 + h2))) * d1 + (h1 / (h2 * (h1 + h2))) * d2
        mid = traj.points[1:-1]
    resid = norm(vel - V(mid))
    worst = float(resid.max())
    return worst <= delta + tol, worst


def cluster_points(points, radius: float) -> np.ndarray:
    """Greedy leader clustering by torus distance; returns the leaders."""
    from .manifold import distance

    pts = np.asarray(points, dtype=float)
    leaders = []
    alive = np.ones(len(pts), dtype=bool)
    while alive.any():
        i = int(np.argmax(alive))
        leaders.append(pts[i])
        alive &= distance(pts, pts[i]) > radius
    return np.array(leaders).reshape(-1, pts.shape[-1])


def omega_limit(
    V: VectorField,
    x0,
    T_total: float,
    tail_fraction: float = 0.5,
    cluster_radius: float = 0.05,
    dt: float = 1e-2,
    max_samples: int = 4000,
) -> np.ndarray:
    """Cluster representatives of the final ``tail_fraction`` of the orbit."""
    if T_total <= 0 or not 0 < tail_fraction < 1:
        raise ValueError("need T_total > 0 and 0 < tail_fraction < 1")
    times, pts = integrate(lambda t, x: V(x), x0, T_total, dt)
    tail = pts[times >= times[-1] * (1 - tail_fraction)]
    stride = max(1, len(tail) // max_samples)
    return cluster_points(tail[::stride], cluster_radius)
