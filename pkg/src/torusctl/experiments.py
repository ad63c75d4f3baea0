"""The non-controllable torus example: certificates and demos.

The system ``x' = u1, y' = (1 - cos x) sin y + u2 eta(y)`` is bracket
generating and chain transitive, yet no control leaves the band
``3pi/4 <= y <= 5pi/4`` once started at ``(0, pi)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .fields import RankScan, bracket_rank, hormander_scan
from .flow import DisturbanceLaw, Trajectory, rk4_step, verify_delta_solution
from .manifold import TWO_PI, distance, wrap
from .recurrence import (
    ChainUnreachableError,
    GridDiscretization,
    approximate_minimal_set,
    build_chain_graph,
    estimate_passage_time,
    is_chain_transitive,
)
from .synthesis import SteerBudget, SteeringError, global_steer
from .systems import GatedTorus, gated_torus, eta

__all__ = [
    "eta",
    "GatedTorus",
    "gated_torus",
    "DEAD_BANDS",
    "in_dead_band",
    "stationary_set_certificate",
    "HormanderReport",
    "verify_hormander_gated",
    "chain_transitive_route",
    "BarrierReport",
    "barrier_test",
    "adversarial_descent",
    "DemoReport",
    "noncontrollability_demo",
]

#: closed y-intervals where eta vanishes
DEAD_BANDS = ((np.pi / 4, 3 * np.pi / 4), (5 * np.pi / 4, 7 * np.pi / 4))
BARRIER_LOW, BARRIER_HIGH = 3 * np.pi / 4, 5 * np.pi / 4


def in_dead_band(y, margin: float = 0.0):
    y = np.mod(np.asarray(y, dtype=float), TWO_PI)
    return np.any([(y >= lo - margin) & (y <= hi + margin) for lo, hi in DEAD_BANDS], axis=0)


def _band_gap(y) -> float:
    """Distance from ``y`` to the nearest dead band (0 inside)."""
    y = float(np.mod(y, TWO_PI))
    return min(max(lo - y, y - hi, 0.0) for lo, hi in DEAD_BANDS)


def stationary_set_certificate(system: Optional[GatedTorus] = None, n: int = 1000, seed: int = 0, off_margin: float = 1e-3) -> dict:
    """Sample the three stationary circles and points away from them.

    ``V`` must be at most 1e-12 on ``{x=0} u {y=0} u {y=pi}`` and nonzero off it.
    """
    system = system or gated_torus()
    rng = np.random.default_rng(seed)
    t = rng.random(n) * TWO_PI
    which = np.arange(n) % 3
    on = np.stack(
        [np.where(which == 0, 0.0, t), np.where(which == 0, t, np.where(which == 1, 0.0, np.pi))], axis=-1
    )
    on_norm = np.linalg.norm(system.V(on), axis=-1)
    off = rng.random((n, 2)) * TWO_PI
    circ = lambda a: np.abs((a + np.pi) % TWO_PI - np.pi)
    gap = np.minimum.reduce([circ(off[:, 0]), circ(off[:, 1]), circ(off[:, 1] - np.pi)])
    off = off[gap > off_margin]
    off_norm = np.linalg.norm(system.V(off), axis=-1)
    return {
        "on_max_norm": float(on_norm.max()),
        "off_min_norm": float(off_norm.min()),
        "on_ok": bool(on_norm.max() <= 1e-12),
        "off_ok": bool(off_norm.min() > 0),
        "n_on": int(n),
        "n_off": int(len(off)),
    }


@dataclass
class HormanderReport:
    full: RankScan
    drift_free: RankScan
    rank_at_origin_line: int
    drift_free_rank_in_band: int

    @property
    def min_rank(self) -> int:
        return self.full.min_rank

    @property
    def ok(self) -> bool:
        return self.full.min_rank == 2 and self.drift_free.min_rank < 2

    def dead_band_locus(self) -> list:
        """y-runs where the drift-free fields are deficient for every x."""
        return self.drift_free.deficient_runs(-1)

    def summary(self) -> dict:
        return {
            "min_rank": self.min_rank,
            "full_rank": self.full.min_rank == 2,
            "drift_free_min_rank": self.drift_free.min_rank,
            "dead_band_locus": self.dead_band_locus(),
            "rank_V_X1_depth0_at_0_halfpi": self.rank_at_origin_line,
            "drift_free_rank_at_1_halfpi": self.drift_free_rank_in_band,
        }


def verify_hormander_gated(resolution: int = 64, depth: int = 2, tol: float = 1e-8, system=None) -> HormanderReport:
    """Full-field and drift-free bracket scans of the example."""
    if depth < 2:
        raise ValueError("depth must be >= 2: rank 2 on the dead bands at x = 0 needs [[V, X1], X1]")
    system = system or gated_torus()
    full = hormander_scan(system.fields, resolution, depth, tol)
    free = hormander_scan(system.fields, resolution, depth, tol, drop_first=True)
    r0 = bracket_rank([system.V, system.X1], [0.0, np.pi / 2], 0, tol).rank
    r1 = bracket_rank(list(system.controls), [1.0, np.pi / 2], depth, tol).rank
    return HormanderReport(full, free, r0, r1)


# -- explicit chain route --------------------------------------------------


class _RouteBuilder:
    """Accumulates piecewise-constant disturbance segments and their RK4 samples."""

    def __init__(self, V, x0, eps, dt):
        self.V, self.eps, self.dt = V, eps, dt
        self.times, self.points = [0.0], [wrap(np.asarray(x0, dtype=float))]
        self.switch, self.values = [0.0], []

    @property
    def x(self):
        return self.points[-1]

    def _push(self, w, h):
        rhs = lambda t, z: self.V(z) + w
        self.points.append(wrap(rk4_step(rhs, 0.0, self.x, h)))
        self.times.append(self.times[-1] + h)

    def _close(self, w):
        if self.times[-1] > self.switch[-1]:
            self.switch.append(self.times[-1])
            self.values.append(np.array(w, dtype=float))

    def slide(self, direction, length):
        """Move along a stationary circle at speed ``eps``."""
        if length <= 0:
            return
        # V vanishes on the circle, so the motion is exactly linear; integrating
        # would let round-off grow off the repelling circle y = 0
        w = self.eps * np.asarray(direction, dtype=float)
        T = length / self.eps
        n = max(1, int(np.ceil(T / self.dt)))
        x0, t0 = self.x, self.times[-1]
        for k in range(1, n + 1):
            self.points.append(wrap(x0 + w * (T * k / n)))
            self.times.append(t0 + T * k / n)
        self._close(w)

    def drift_to(self, y_goal, sign, t_max=1e4):
        """Follow ``V`` pushed by ``eps`` in y until y reaches ``y_goal``.

        ``sign`` is the direction of travel; along the way ``V`` never
        opposes it, so the crossing happens in finite time.
        """
        w = np.array([0.0, sign * self.eps])
        rhs = lambda t, z: self.V(z) + w

        def rem(z):
            return float(((y_goal - z[1]) * sign) % TWO_PI)

        def crossed(z, before):
            r = rem(z)
            return r == 0.0 or r > before

        r0 = rem(self.x)
        if r0 < 1e-12 or r0 > TWO_PI - 1e-12:
            return
        t0 = self.times[-1]
        while self.times[-1] - t0 < t_max:
            before = rem(self.x)
            nxt = wrap(rk4_step(rhs, 0.0, self.x, self.dt))
            if crossed(nxt, before):
                lo, hi = 0.0, self.dt
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    if crossed(wrap(rk4_step(rhs, 0.0, self.x, mid)), before):
                        hi = mid
                    else:
                        lo = mid
                if hi > 1e-9:
                    self._push(w, hi)
                self.points[-1] = np.array([self.points[-1][0], np.mod(y_goal, TWO_PI)])
                self._close(w)
                return
            self.points.append(nxt)
            self.times.append(self.times[-1] + self.dt)
        raise RuntimeError("drift segment did not reach its goal")

    def result(self):
        times = np.array(self.times)
        pts = np.array(self.points)
        switch = np.array(self.switch)
        vals = np.array(self.values).reshape(-1, 2)

        def func(t, x, switch=switch, vals=vals):
            if len(vals) == 0:
                return np.zeros_like(np.asarray(x, dtype=float))
            k = int(np.clip(np.searchsorted(switch, t, side="right") - 1, 0, len(vals) - 1))
            return np.broadcast_to(vals[k], np.shape(x))

        return DisturbanceLaw(func, self.eps), times, pts


def _short_arc(a, b):
    """Signed shortest angular displacement from ``a`` to ``b``."""
    return float((b - a + np.pi) % TWO_PI - np.pi)


def chain_transitive_route(p, q, eps: float, dt: float = 1e-2, system: Optional[GatedTorus] = None):
    """Explicit eps-solution of the example from ``p`` to ``q``.

    Home onto the attracting circle ``y = pi`` along the drift (pushed by
    ``eps``), slide through the stationary set to ``(x_q, 0)`` and climb
    from the repelling circle ``y = 0`` onto ``q``'s drift line.

    Returns
    -------
    (DisturbanceLaw, Trajectory)
        ``meta["delta_residual"]`` holds the verified worst velocity defect.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    system = system or gated_torus()
    V = system.V
    p, q = wrap(np.asarray(p, dtype=float)), wrap(np.asarray(q, dtype=float))
    rb = _RouteBuilder(V, p, eps, dt)
    if distance(p, q) > 1e-12:
        # home to y = pi (a no-op when already there)
        if abs(_short_arc(p[1], np.pi)) > 1e-12:
            rb.drift_to(np.pi, 1.0 if p[1] < np.pi else -1.0)
        if abs(_short_arc(q[1], np.pi)) < 1e-12:
            dx = _short_arc(rb.x[0], q[0])
            rb.slide([np.sign(dx), 0.0], abs(dx))
        else:
            # along y = pi to x = 0, down x = 0 to y = 0, along y = 0 to x_q
            dx = _short_arc(rb.x[0], 0.0)
            rb.slide([np.sign(dx), 0.0], abs(dx))
            rb.slide([0.0, -1.0], np.pi)
            dx = _short_arc(0.0, q[0])
            rb.slide([np.sign(dx), 0.0], abs(dx))
            if abs(_short_arc(0.0, q[1])) > 1e-12:
                rb.drift_to(q[1], 1.0 if q[1] <= np.pi else -1.0)
    law, times, pts = rb.result()
    traj = Trajectory(times, pts, dt, (V.name,), {"delta": eps, "route": "home-slide-climb"})
    if len(traj) >= 2:
        ok, worst = verify_delta_solution(traj, V, eps)
        traj.meta.update({"delta_residual": worst, "verified": bool(ok)})
    else:
        traj.meta.update({"delta_residual": 0.0, "verified": True})
    return law, traj


# -- barrier ---------------------------------------------------------------


@dataclass
class BarrierReport:
    num_trials: int
    u_max: float
    horizon: float
    dt: float
    tolerance: float
    y_min: float
    y_max: float
    violations: int
    per_trial_min: np.ndarray = field(repr=False)
    per_trial_max: np.ndarray = field(repr=False)

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if not k.startswith("per_trial")}
        d["ok"] = self.ok
        d["band"] = [BARRIER_LOW, BARRIER_HIGH]
        return d

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("trial,y_min,y_max\n")
            for i, (a, b) in enumerate(zip(self.per_trial_min, self.per_trial_max)):
                fh.write(f"{i},{a:.17g},{b:.17g}\n")


def barrier_tolerance(u_max: float, dt: float, slack: float = 1e-3) -> float:
    """Overshoot budget at the band edge: ``slack + u_max * dt * sup eta``.

    The sup is over the strip the overshoot itself can reach, so the budget
    is the fixed point of ``tol = slack + u_max * dt * max eta(edge + [0, tol])``.
    """
    tol = slack
    for _ in range(50):
        strip = BARRIER_LOW + np.linspace(0.0, tol, 64)
        nxt = slack + u_max * dt * float(np.max(eta(strip)))
        if abs(nxt - tol) < 1e-15:
            break
        tol = nxt
    return tol


def _controls_for_trials(seed, num_trials, n_hold, u_max):
    children = np.random.SeedSequence(seed).spawn(num_trials)
    return np.stack(
        [np.random.default_rng(c).uniform(-u_max, u_max, size=(n_hold, 2)) for c in children], axis=1
    )  # (n_hold, trials, 2)


def _run_band(system, x0, u_of_step, steps, dt, n):
    V, X1, X2 = system.V, system.X1, system.X2
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n, 2)).copy()
    ymin = x[:, 1].copy()
    ymax = x[:, 1].copy()
    for k in range(steps):
        u = u_of_step(k)

        def rhs(_t, z, u=u):
            return V(z) + u[:, :1] * X1(z) + u[:, 1:] * X2(z)

        x = wrap(rk4_step(rhs, 0.0, x, dt))
        np.minimum(ymin, x[:, 1], out=ymin)
        np.maximum(ymax, x[:, 1], out=ymax)
    return x, ymin, ymax


def barrier_test(
    num_trials: int = 1000,
    u_max: float = 10.0,
    T: float = 50.0,
    dt: float = 1e-3,
    seed: int = 0,
    hold: float = 1.0,
    tol: Optional[float] = None,
    system: Optional[GatedTorus] = None,
) -> BarrierReport:
    """Random piecewise-constant controls from ``(0, pi)``; y must stay in the band.

    Each trial draws its controls from its own spawned stream, so results do
    not depend on batching.
    """
    if num_trials < 1 or T <= 0 or dt <= 0 or hold <= 0 or u_max < 0:
        raise ValueError("bad barrier parameters")
    system = system or gated_torus()
    tol = barrier_tolerance(u_max, dt) if tol is None else tol
    steps = int(round(T / dt))
    n_hold = int(np.ceil(steps * dt / hold)) + 1
    U = _controls_for_trials(seed, num_trials, n_hold, u_max)
    per_hold = hold / dt
    _, ymin, ymax = _run_band(
        system, [0.0, np.pi], lambda k: U[min(int(k / per_hold + 1e-9), n_hold - 1)], steps, dt, num_trials
    )
    bad = (ymin < BARRIER_LOW - tol) | (ymax > BARRIER_HIGH + tol)
    return BarrierReport(
        num_trials, u_max, T, dt, tol, float(ymin.min()), float(ymax.max()), int(bad.sum()), ymin, ymax
    )


def adversarial_descent(u_max: float = 10.0, T: float = 50.0, dt: float = 1e-3, system=None) -> dict:
    """Push down as hard as possible: ``u2 = -u_max``, ``u1 = 0``."""
    system = system or gated_torus()
    u = np.array([[0.0, -u_max]])
    x, ymin, _ = _run_band(system, [0.0, np.pi], lambda k: u, int(round(T / dt)), dt, 1)
    return {"y_final": float(x[0, 1]), "y_min": float(ymin[0]), "edge": BARRIER_LOW}


# -- steering demo ---------------------------------------------------------


@dataclass
class DemoReport:
    failures: dict
    successes: dict
    hypotheses: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(f["failed"] and f["kind"] == "local" for f in self.failures.values()) and all(
            s["converged"] for s in self.successes.values()
        )

    def summary(self) -> dict:
        return {"ok": self.ok, "failures": self.failures, "successes": self.successes}

    def to_text(self) -> str:
        return json.dumps(self.summary(), indent=1, default=float)


DEMO_BUDGET = SteerBudget(restarts=1, doublings=0)


def noncontrollability_demo(
    resolution: int = 64,
    eps: float = 0.1,
    sigma: float = 0.5,
    dt: float = 2e-2,
    passage_time: Optional[float] = None,
    budget: Optional[SteerBudget] = None,
    seed: int = 0,
    system: Optional[GatedTorus] = None,
) -> DemoReport:
    """Steer from ``(0, pi)`` to ``(0, 0)`` in both modes and diagnose the failure.

    Two reachable targets, ``(pi, pi)`` and ``(0, 5pi/4 - 0.1)``, are steered
    in scaled mode as controls.
    """
    system = system or gated_torus()
    budget = budget or DEMO_BUDGET
    V, X = system.V, list(system.controls)
    graph = build_chain_graph(V, GridDiscretization.of(resolution), tau_step=1.0, dt=dt)
    min_set = approximate_minimal_set(V, GridDiscretization.of(max(resolution // 2, 2)), T_long=50.0, dt=dt)
    if passage_time is None:
        passage_time = estimate_passage_time(V, min_set, 0.075, n_trials=32, T_max=100.0, seed=seed)
    start = np.array([0.0, np.pi])
    common = dict(graph=graph, min_set=min_set, eps=eps, sigma=sigma, passage_time=passage_time, dt=dt, seed=seed)

    failures = {}
    for mode in ("small", "scaled"):
        entry = {"mode": mode, "target": [0.0, 0.0], "failed": False, "kind": None}
        try:
            r = global_steer(V, X, start, [0.0, 0.0], mode, budget=budget, **common)
            entry["endpoint_error"] = r.endpoint_error
            entry["failed"] = not r.diagnostics["converged"]
            entry["kind"] = "inaccurate" if entry["failed"] else None
        except SteeringError as exc:
            y_leg = [float(exc.start[1]), float(exc.target[1])]
            entry.update(
                failed=True,
                kind="local",
                waypoint=exc.waypoint,
                leg_start=exc.start.tolist(),
                leg_target=exc.target.tolist(),
                residual=exc.residual,
                band_gap=min(_band_gap(y) for y in y_leg),
            )
        except ChainUnreachableError:
            entry.update(failed=True, kind="unreachable")
        failures[mode] = entry

    successes = {}
    for name, target in (("pi_pi", [np.pi, np.pi]), ("below_upper_band", [0.0, 5 * np.pi / 4 - 0.1])):
        entry = {"mode": "scaled", "target": target}
        try:
            r = global_steer(V, X, start, target, "scaled", **common)
            entry.update(converged=bool(r.diagnostics["converged"]), endpoint_error=r.endpoint_error,
                         control_bound=r.plan.control_bound)
        except (SteeringError, ChainUnreachableError) as exc:
            entry.update(converged=False, error=str(exc))
        successes[name] = entry
    return DemoReport(failures, successes, {"passage_time": float(passage_time)})
