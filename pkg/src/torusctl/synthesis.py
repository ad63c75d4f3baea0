"""Control synthesis: local bracket steering and drift-coast global steering.

Local steering composes flows of ``sigma V + Y_i`` over a cyclic word
``Y_i = moves[i mod len(moves)]`` and solves for the signed durations with a
damped Newton shooting method. A *move* is a pair ``(a, c)`` meaning
``Y = a V + sum_k c_k X_k``, so both the drift-free constraint fields and the
small-control family ``{+-V, +-V +- eps X_k}`` fit the same machinery.

A negative duration is interpreted by ``negative``:

``"reverse"``  flow ``-(sigma V + Y)`` (needs licensed backward drift)
``"flip"``     flow ``sigma V - Y`` forward
``"abs"``      flow ``sigma V + Y`` forward for ``|eps|``

Global steering follows the waypoint scheme: a delta-chain skeleton from the
chain graph, drift coasts between waypoints near the minimal set, and local
corrections inside small balls, finished by a coast onto the target.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .fields import VectorField, _numerical_rank, _word_matrix
from .flow import ControlLaw, Trajectory, flow_map, integrate, integrate_controlled, rk4_step
from .manifold import TWO_PI, displacement, distance, norm, wrap
from .recurrence import (
    ChainGraph,
    chain_path,
    estimate_passage_time,
    nonwandering_indicator,
    path_to_delta_solution,
)

__all__ = [
    "SteeringError",
    "UnresolvableGapError",
    "Coast",
    "Move",
    "SteerPlan",
    "SteerResult",
    "SteerBudget",
    "QuadGapEstimate",
    "constraint_moves",
    "small_control_moves",
    "local_chow_steer",
    "quadratic_commutation_gap",
    "euler_reverse_compose",
    "euler_decay",
    "check_hypotheses",
    "global_steer",
]


class SteeringError(RuntimeError):
    """Local steering did not converge.

    ``waypoint`` is set when raised from :func:`global_steer`; ``start`` and
    ``target`` give the failing leg and ``residual`` the best error reached.
    """

    def __init__(self, message, residual=np.inf, waypoint=None, start=None, target=None):
        super().__init__(message)
        self.residual = float(residual)
        self.waypoint = waypoint
        self.start = None if start is None else np.asarray(start)
        self.target = None if target is None else np.asarray(target)


class UnresolvableGapError(ValueError):
    pass


@dataclass
class Coast:
    duration: float
    label: str = "coast"

    @property
    def real_time(self) -> float:
        return abs(self.duration)


@dataclass
class Move:
    """One word letter realized as ``x' = s V + sum_k u_k X_k`` for ``real_time``."""

    index: int
    label: str
    epsilon: float
    sigma: float
    drift_sign: float
    controls: np.ndarray
    real_time: float


@dataclass
class SteerPlan:
    segments: list = field(default_factory=list)
    control_bound: float = 0.0

    @property
    def total_time(self) -> float:
        return float(sum(s.real_time for s in self.segments))

    @property
    def backward_time(self) -> float:
        t = 0.0
        for s in self.segments:
            if isinstance(s, Move) and s.drift_sign < 0:
                t += s.real_time
            elif isinstance(s, Coast) and s.duration < 0:
                t += s.real_time
        return t

    def extend(self, other: "SteerPlan"):
        self.segments.extend(other.segments)
        self.control_bound = max(self.control_bound, other.control_bound)

    def to_control_law(self, m: int) -> Optional[ControlLaw]:
        bps, coeffs, signs = [0.0], [], []
        for s in self.segments:
            end = bps[-1] + s.real_time
            if end <= bps[-1]:  # zero or below float resolution
                continue
            bps.append(end)
            if isinstance(s, Coast):
                coeffs.append(np.zeros(m))
                signs.append(1.0 if s.duration >= 0 else -1.0)
            else:
                coeffs.append(np.asarray(s.controls, dtype=float))
                signs.append(s.drift_sign)
        if not coeffs:
            return None
        return ControlLaw(bps, np.array(coeffs).reshape(len(coeffs), m), np.array(signs), self.control_bound)

    def to_dict(self) -> dict:
        segs = []
        for s in self.segments:
            if isinstance(s, Coast):
                segs.append({"kind": "coast", "duration": s.duration, "label": s.label})
            else:
                d = asdict(s)
                d["controls"] = np.asarray(s.controls).tolist()
                d["kind"] = "move"
                segs.append(d)
        return {
            "segments": segs,
            "control_bound": self.control_bound,
            "total_time": self.total_time,
            "backward_time": self.backward_time,
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


@dataclass
class SteerResult:
    plan: SteerPlan
    trajectory: Trajectory
    endpoint_error: float
    control_law: Optional[ControlLaw]
    target: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "plan.json"), "w", encoding="utf-8") as fh:
            fh.write(self.plan.to_text())
        self.trajectory.to_csv(os.path.join(out_dir, "trajectory.csv"))
        if self.control_law is not None:
            with open(os.path.join(out_dir, "control.json"), "w", encoding="utf-8") as fh:
                fh.write(self.control_law.to_text())


@dataclass
class SteerBudget:
    max_iter: int = 50
    restarts: int = 20
    fd_step: float = 1e-6
    tol: float = 1e-6
    doublings: int = 2
    init_scale: float = 1.0


#: leaner default for the many short legs of :func:`global_steer`
LEG_BUDGET = SteerBudget(restarts=4, doublings=1)


# -- move families ---------------------------------------------------------


def constraint_moves(m: int) -> list:
    """``Y = X_k`` for each constraint field."""
    return [(0.0, np.eye(m)[k]) for k in range(m)]


def small_control_moves(m: int, eps: float) -> list:
    """``V`` followed by ``V + eps X_k`` and ``V - eps X_k`` for each ``k``."""
    out = [(1.0, np.zeros(m))]
    for k in range(m):
        e = np.eye(m)[k] * eps
        out += [(1.0, e), (1.0, -e)]
    return out


def _slot_realizations(moves, sigma, negative):
    """Per move: ((alpha, c) for eps >= 0, (alpha, c) for eps < 0)."""
    out = []
    for a, c in moves:
        c = np.asarray(c, dtype=float)
        pos = (sigma + a, c)
        if negative == "reverse":
            neg = (-(sigma + a), -c)
        elif negative == "flip":
            neg = (sigma - a, -c)
        elif negative == "abs":
            neg = pos
        else:
            raise ValueError(f"unknown negative-duration policy {negative!r}")
        for alpha, _ in (pos, neg):
            if alpha == 0.0:
                raise ValueError("a move without drift component cannot be realized in real time")
        out.append((pos, neg))
    return out


def _move_label(a, c, names, sigma):
    parts = []
    if sigma + a:
        parts.append(f"{sigma + a:g}*V")
    parts += [f"{ck:+g}*{n}" for ck, n in zip(c, names) if ck]
    return " ".join(parts) or "0"


def _compose(V, X, x0, eps, slots, dt):
    """Endpoints of the composed flows for a batch of duration vectors ``eps (B, N)``."""
    B, N = eps.shape
    x = np.broadcast_to(wrap(x0), (B, len(x0))).copy()
    m = len(X)
    for i in range(N):
        (pa, pc), (na, nc) = slots[i]
        e = eps[:, i]
        pos = e >= 0
        alpha = np.where(pos, pa, na)
        ctrl = np.where(pos[:, None], pc[None], nc[None]) if m else np.zeros((B, 0))
        T = np.abs(e) * np.abs(alpha)
        tmax = float(T.max())
        if tmax <= 0:
            continue
        s = np.sign(alpha)[:, None]
        u = ctrl / np.abs(alpha)[:, None]
        used = [k for k in range(m) if np.any(u[:, k])]

        def rhs(_t, z, s=s, u=u, used=used):
            out = s * V(z)
            for k in used:
                out = out + u[:, k:k + 1] * X[k](z)
            return out

        n = max(1, int(np.ceil(tmax / dt - 1e-9)))
        h = (T / n)[:, None]
        for _ in range(n):
            x = wrap(rk4_step(rhs, 0.0, x, h))
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite state while composing flows")
    return x


def _newton(V, X, x_from, x_to, slots, N, eps_box, budget, dt, rng):
    h = budget.fd_step
    lambdas = 0.5 ** np.arange(8)
    best = (np.inf, None, None)
    for restart in range(budget.restarts + 1):
        if restart == 0:
            eps = np.zeros(N)
        else:
            eps = rng.uniform(-1, 1, N) * budget.init_scale * min(eps_box, 1.0)
        r = displacement(_compose(V, X, x_from, eps[None], slots, dt)[0], x_to)
        err = float(np.linalg.norm(r))
        J = None
        slow = 0
        for _ in range(budget.max_iter):
            if err < budget.tol:
                break
            batch = np.vstack([eps[None], eps[None] + h * np.eye(N)])
            ends = _compose(V, X, x_from, batch, slots, dt)
            J = (displacement(ends[0], ends[1:]) / h).T
            step = np.linalg.lstsq(J, r, rcond=None)[0]
            cands = np.clip(eps[None] + lambdas[:, None] * step[None], -eps_box, eps_box)
            res = displacement(_compose(V, X, x_from, cands, slots, dt), x_to)
            errs = np.linalg.norm(res, axis=1)
            k = int(np.argmin(errs))
            if errs[k] >= err * (1 - 1e-4):
                break
            # three sub-1% gains in a row: stalled against the box or a barrier
            slow = slow + 1 if errs[k] > 0.99 * err else 0
            eps, r, err = cands[k], res[k], float(errs[k])
            if slow >= 3:
                break
        if err < best[0]:
            best = (err, eps.copy(), J)
        if err < budget.tol:
            break
    return best


def _sensitivity_rank(V, X, x_from, eps, slots, dt, h=1e-6, tol=1e-6):
    N = len(eps)
    batch = np.vstack([eps[None], eps[None] + h * np.eye(N)])
    ends = _compose(V, X, x_from, batch, slots, dt)
    J = (displacement(ends[0], ends[1:]) / h).T
    s = np.linalg.svd(J, compute_uv=False)
    return int(np.sum(s > tol * max(s[0], 1e-300))) if s.size else 0


def local_chow_steer(
    V: VectorField,
    X: Sequence[VectorField],
    x_from,
    x_to,
    sigma: float = 1.0,
    N: Optional[int] = None,
    eps_box: float = 1.0,
    budget: Optional[SteerBudget] = None,
    moves: Optional[list] = None,
    negative: str = "flip",
    dt: float = 1e-2,
    seed: int = 0,
) -> SteerResult:
    """Steer ``x_from`` to ``x_to`` by composing flows of ``sigma V + Y_i``.

    Solves for ``(eps_1, ..., eps_N)`` in ``[-eps_box, eps_box]^N`` so that
    the composition lands on ``x_to``. ``N`` defaults to ``2 d m`` (``m`` the
    number of moves) and is doubled on failure ``budget.doublings`` times.

    Raises
    ------
    SteeringError
        When no restart reaches ``budget.tol``.
    """
    budget = budget or SteerBudget()
    x_from, x_to = wrap(x_from), wrap(x_to)
    d = len(x_from)
    moves = constraint_moves(len(X)) if moves is None else moves
    if not moves:
        raise ValueError("no moves to steer with")
    realized = _slot_realizations(moves, sigma, negative)
    names = [f.name for f in X]
    N0 = N or 2 * d * len(moves)
    rng = np.random.default_rng(seed)

    if distance(x_from, x_to) < budget.tol:
        eps = np.zeros(N0)
        slots = [realized[(i + 1) % len(moves)] for i in range(N0)]
        err, n_used = 0.0, N0
    else:
        err, eps, n_used = np.inf, None, N0
        for k in range(budget.doublings + 1):
            n_used = N0 * 2**k
            slots = [realized[(i + 1) % len(moves)] for i in range(n_used)]
            err, eps, _ = _newton(V, X, x_from, x_to, slots, n_used, eps_box, budget, dt, rng)
            if err < budget.tol:
                break
        if err >= budget.tol:
            raise SteeringError(
                f"local steering failed: residual {err:.3g} after {budget.restarts + 1} starts, N up to {n_used}",
                residual=err,
                start=x_from,
                target=x_to,
            )

    plan = SteerPlan()
    m = len(X)
    for i, e in enumerate(eps):
        if e == 0.0:
            continue
        j = (i + 1) % len(moves)
        alpha, c = realized[j][0] if e >= 0 else realized[j][1]
        a, c0 = moves[j]
        plan.segments.append(
            Move(
                index=i + 1,
                label=_move_label(a, c0, names, sigma),
                epsilon=float(e),
                sigma=float(sigma),
                drift_sign=float(np.sign(alpha)),
                controls=np.asarray(c, dtype=float) / abs(alpha) if m else np.zeros(0),
                real_time=float(abs(e) * abs(alpha)),
            )
        )
    result = _finish(V, X, x_from, x_to, plan, dt)
    result.diagnostics.update(
        {
            "epsilons": eps.tolist(),
            "N": n_used,
            "shooting_residual": float(err),
            "sensitivity_rank": _sensitivity_rank(V, X, x_from, eps, slots, dt),
        }
    )
    return result


def _control_bound(plan, X, traj_points=None):
    return plan.control_bound


def _finish(V, X, x_from, x_to, plan, dt, diagnostics=None):
    """Replay the plan through the controlled integrator and measure the error."""
    law = plan.to_control_law(len(X))
    if law is None:
        traj = Trajectory([0.0], x_from[None], dt, (V.name, *(f.name for f in X)), {"control_bound": 0.0})
    else:
        traj = integrate_controlled(V, X, law, x_from, dt=dt)
        law.bound = traj.meta["control_bound"]
        plan.control_bound = law.bound
    err = float(distance(traj.end, x_to))
    return SteerResult(plan, traj, err, law, x_to, dict(diagnostics or {}))


# -- commutation estimates -------------------------------------------------


@dataclass
class QuadGapEstimate:
    thetas: np.ndarray
    gaps: np.ndarray
    C: float
    order: float
    residual: float
    resolvable: bool = True


def _gap_points(V, Xj, eps, theta, x1, dt):
    plus = VectorField("V+eX", lambda z: V(z) + eps * Xj(z), V.dim)
    minus = VectorField("V-eX", lambda z: V(z) - eps * Xj(z), V.dim)
    x4 = flow_map(plus, theta, flow_map(V, -2 * theta, x1, dt), dt)
    x5 = flow_map(minus, -theta, x1, dt)
    return x4, x5


def quadratic_commutation_gap(V, Xj, eps, thetas, x1, dt: float = 1e-3, noise_floor: float = 1e-11) -> QuadGapEstimate:
    """Distance between the two-leg forward construction and the backward flow of ``V - eps X_j``.

    The gap is ``O(theta^2)``; the log-log slope is reported as ``order``
    and ``C`` from ``gap ~ (C / 2) theta^order``.
    """
    thetas = np.asarray(thetas, dtype=float)
    if np.any(thetas <= 0) or np.any(thetas > 0.5):
        raise ValueError("theta values must lie in (0, 0.5]")
    gaps = np.array([distance(*_gap_points(V, Xj, eps, th, wrap(x1), dt)) for th in thetas])
    small = gaps <= noise_floor
    if small.all():
        return QuadGapEstimate(thetas, gaps, 0.0, float("nan"), 0.0, resolvable=False)
    if small.any():
        raise UnresolvableGapError(
            f"gaps below the integrator noise floor at theta={thetas[small].tolist()}; use larger theta"
        )
    A = np.vstack([np.log(thetas), np.ones_like(thetas)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, np.log(gaps), rcond=None)
    fit = A @ np.array([slope, icpt])
    resid = float(np.sqrt(np.mean((fit - np.log(gaps)) ** 2)))
    return QuadGapEstimate(thetas, gaps, float(2 * np.exp(icpt)), float(slope), resid)


def euler_reverse_compose(V, Xj, eps, theta, N, x1, step_realizer=None, dt: float = 1e-3):
    """N-fold composition approximating ``phi_{V - eps X_j}(-theta, x1)``.

    The default micro-step is ``phi_{V + eps X_j}(theta/N, phi_V(-2 theta/N, .))``
    with the backward drift leg integrated directly. Returns
    ``(xi_N, report)`` where ``report`` holds the error to the exact
    backward flow.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    x1 = wrap(x1)
    plus = VectorField("V+eX", lambda z: V(z) + eps * Xj(z), V.dim)
    minus = VectorField("V-eX", lambda z: V(z) - eps * Xj(z), V.dim)
    if step_realizer is None:
        def step_realizer(z, h):
            return flow_map(plus, h, flow_map(V, -2 * h, z, dt), dt)
    xi = x1
    for _ in range(N):
        xi = wrap(step_realizer(xi, theta / N))
        if not np.all(np.isfinite(xi)):
            raise FloatingPointError("non-finite intermediate state")
    ref = flow_map(minus, -theta, x1, dt)
    return xi, {"error": float(distance(xi, ref)), "reference": ref, "N": N, "theta": theta}


def euler_decay(V, Xj, eps, theta, Ns, x1, dt: float = 1e-3):
    errs = np.array([euler_reverse_compose(V, Xj, eps, theta, n, x1, dt=dt)[1]["error"] for n in Ns])
    return errs, errs[:-1] / errs[1:]


# -- global steering -------------------------------------------------------


def check_hypotheses(
    V, X, min_set, mode, radius=0.1, depth=2, tol=1e-8, max_points=400, probes=4, probe_T=50.0, dt=1e-2, seed=0
) -> dict:
    """Rank test near the minimal set and (small mode) a nonwandering probe."""
    rng = np.random.default_rng(seed)
    pts = np.asarray(min_set, dtype=float).reshape(-1, V.dim)
    if len(pts) > max_points:
        pts = pts[rng.choice(len(pts), max_points, replace=False)]
    jitter = rng.normal(size=pts.shape)
    jitter *= (radius * rng.random(len(pts)) / np.maximum(np.linalg.norm(jitter, axis=1), 1e-12))[:, None]
    sample = wrap(np.vstack([pts, pts + jitter]))
    fields = [V, *X] if mode == "small" else list(X)
    svals = np.linalg.svd(_word_matrix(fields, sample, depth), compute_uv=False)
    min_rank = int(_numerical_rank(svals, tol).min()) if len(sample) else 0
    out = {"mode": mode, "hormander_near_min": bool(min_rank == V.dim), "min_rank_near_min": int(min_rank)}
    if mode == "small":
        ok = True
        for x in rng.random((probes, V.dim)) * TWO_PI:
            if not nonwandering_indicator(V, x, 0.2, probe_T, samples=32, dt=max(dt, 1e-2), seed=seed):
                ok = False
                break
        out["nonwandering"] = ok
    return out


def _pick_waypoints(psi, V, min_tree, ball, half_ball, T, final_mis, dt):
    """Greedy waypoint times along the skeleton ``psi`` (indices into its samples)."""
    times, pts = psi.times, psi.points
    n = len(times)
    tau = times[-1]
    idx = [0]
    off_min = []
    while True:
        j = idx[-1]
        if tau - times[j] <= 2 * T and final_mis[j] <= ball:
            break
        hi = int(np.searchsorted(times, times[j] + 2 * T, side="right"))
        window = np.arange(j + 1, min(hi, n))
        if len(window) == 0:
            window = np.array([min(j + 1, n - 1)])
        # drift-only prediction from psi(t_j) on the skeleton's time grid
        seg_t, seg_p = integrate(lambda t, z: V(z), pts[j], times[window[-1]] - times[j], dt, t0=times[j])
        pred = seg_p[np.clip(np.searchsorted(seg_t, times[window] - 1e-12), 0, len(seg_t) - 1)]
        mis = distance(pred, pts[window])
        ok = window[mis <= ball]
        if len(ok) == 0:
            ok = window[:1]
        fin = ok[final_mis[ok] <= ball]
        near = ok[min_tree.query(wrap(pts[ok]), k=1)[0] <= half_ball] if min_tree is not None else ok
        if len(fin):
            pick = fin[-1]
        elif len(near):
            pick = near[-1]
        else:
            pick = ok[-1]
            off_min.append(len(idx))
        if pick == j:
            pick = j + 1
        idx.append(int(pick))
        if pick >= n - 1:
            break
    return idx[1:], off_min


def global_steer(
    V: VectorField,
    X: Sequence[VectorField],
    p,
    q,
    mode: str = "small",
    *,
    graph: ChainGraph,
    min_set,
    eps: float = 0.1,
    sigma: float = 0.5,
    cluster_radius: float = 0.05,
    ball_radius: Optional[float] = None,
    passage_time: Optional[float] = None,
    allow_backward: Optional[bool] = None,
    hypotheses: Optional[dict] = None,
    N: Optional[int] = None,
    eps_box: Optional[float] = None,
    budget: Optional[SteerBudget] = None,
    dt: float = 2e-2,
    seed: int = 0,
    final_tol: float = 1e-2,
) -> SteerResult:
    """Point-to-point steering by drift coasts plus local corrections near the minimal set.

    ``mode="small"`` keeps controls bounded by ``eps`` using the move family
    ``V, V +- eps X_k``; backward drift legs are used only when the drift
    passes the nonwandering probe (or ``allow_backward`` says so).
    ``mode="scaled"`` uses forward shifts along ``sigma V +- X_k``.

    Raises
    ------
    ChainUnreachableError
        No delta-chain from ``p`` to ``q`` in ``graph``.
    SteeringError
        A local correction failed; ``waypoint`` names the leg.
    """
    if mode not in ("small", "scaled"):
        raise ValueError("mode must be 'small' or 'scaled'")
    budget = budget or LEG_BUDGET
    p, q = wrap(p), wrap(q)
    m = len(X)
    ball = 3 * cluster_radius if ball_radius is None else ball_radius
    diag = {"mode": mode, "ball_radius": ball}

    if distance(p, q) < budget.tol:
        res = _finish(V, X, p, q, SteerPlan(), dt, diag)
        res.diagnostics.update(waypoints=[], converged=True)
        return res

    min_set = np.asarray(min_set, dtype=float).reshape(-1, V.dim)
    if hypotheses is None:
        hypotheses = check_hypotheses(V, X, min_set, mode, radius=ball, seed=seed)
    diag["hypotheses"] = hypotheses

    if mode == "small":
        if allow_backward is None:
            allow_backward = bool(hypotheses.get("nonwandering", False))
        moves = small_control_moves(m, eps)
        local_kw = dict(sigma=0.0, moves=moves, negative="reverse" if allow_backward else "abs")
        box = eps_box if eps_box is not None else max(1.0, 2.0 * ball / eps)
        diag["backward_licensed"] = bool(allow_backward)
    else:
        local_kw = dict(sigma=sigma, moves=constraint_moves(m), negative="flip")
        box = eps_box if eps_box is not None else 4.0
        diag["backward_licensed"] = False

    path = chain_path(graph, p, q, weighted=True)
    _, psi = path_to_delta_solution(graph, V, path, p, q, dt=dt)
    diag["skeleton_delta"] = psi.meta["delta"]
    diag["skeleton_time"] = psi.duration

    if passage_time is None:
        passage_time = estimate_passage_time(V, min_set, ball / 2, delta=min(psi.meta["delta"], 0.1), seed=seed)
    T = max(float(passage_time), 2.0)
    diag["passage_time"] = T

    tau = psi.times[-1]
    back_t, back_p = integrate(lambda t, z: -V(z), q, tau, dt)
    s_needed = tau - psi.times
    back_at = back_p[np.clip(np.searchsorted(back_t, s_needed - 1e-12), 0, len(back_t) - 1)]
    final_mis = distance(back_at, psi.points)
    tree = cKDTree(wrap(min_set), boxsize=TWO_PI) if len(min_set) else None
    wp, off_min = _pick_waypoints(psi, V, tree, ball, ball / 2, T, final_mis, dt)
    diag["waypoints"] = [{"t": float(psi.times[i]), "point": psi.points[i].tolist()} for i in wp]
    diag["off_min_waypoints"] = off_min

    plan = SteerPlan()
    x, t_prev = p, 0.0
    legs = [(psi.times[i], psi.points[i]) for i in wp]
    for k, (t_j, target) in enumerate(legs, start=1):
        coast = float(t_j - t_prev)
        if coast > 0:
            plan.segments.append(Coast(coast))
            x = flow_map(V, coast, x, dt)
        x = _local_leg(V, X, x, target, plan, k, local_kw, N, box, budget, dt, seed)
        t_prev = t_j
    # final: steer onto the backward image of q, then coast onto q
    remaining = float(tau - t_prev)
    x_star = flow_map(V, -remaining, q, dt) if remaining > 0 else q
    x = _local_leg(V, X, x, x_star, plan, len(legs) + 1, local_kw, N, box, budget, dt, seed)
    if remaining > 0:
        plan.segments.append(Coast(remaining, "final coast"))
    res = _finish(V, X, p, q, plan, dt, diag)
    res.diagnostics["converged"] = res.endpoint_error < final_tol
    return res


def _local_leg(V, X, x, target, plan, k, local_kw, N, box, budget, dt, seed):
    try:
        r = local_chow_steer(V, X, x, target, N=N, eps_box=box, budget=budget, dt=dt, seed=seed + k, **local_kw)
    except SteeringError as exc:
        raise SteeringError(
            f"local failure at waypoint {k}: {exc}", exc.residual, waypoint=k, start=x, target=target
        ) from exc
    plan.extend(r.plan)
    return r.trajectory.end
