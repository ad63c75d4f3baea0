"""Set-oriented approximations of minimal, nonwandering and chain recurrent sets.

The chain graph discretizes the time-``tau`` map of the drift on a uniform
cell grid. Cell ``i`` has an edge to cell ``j`` when the image of one of
``i``'s test points lands within ``delta_chain + cell_radius`` of ``j``'s
center. Strongly connected components of that graph approximate the chain
recurrent classes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, dijkstra
from scipy.spatial import cKDTree

from .fields import VectorField
from .flow import DisturbanceLaw, Trajectory, flow_map, integrate
from .manifold import TWO_PI, displacement, distance, norm, wrap

__all__ = [
    "UnderResolvedGridError",
    "ChainUnreachableError",
    "GridDiscretization",
    "ChainGraph",
    "RecurrenceReport",
    "build_chain_graph",
    "chain_recurrent_cells",
    "is_chain_transitive",
    "chain_path",
    "path_to_delta_solution",
    "nonwandering_indicator",
    "approximate_minimal_set",
    "minimal_passage_check",
    "estimate_passage_time",
    "random_disturbed_trajectories",
    "recurrence_report",
]


class UnderResolvedGridError(ValueError):
    """delta_chain is below the cell radius, so true orbits may lose edges."""


class ChainUnreachableError(RuntimeError):
    """No delta-chain connects the requested cells."""


@dataclass(frozen=True)
class GridDiscretization:
    """Uniform cells on the torus, centered at ``k * 2pi / n`` per axis."""

    resolution: tuple

    @classmethod
    def of(cls, resolution, dim: int = 2) -> "GridDiscretization":
        res = (int(resolution),) * dim if np.isscalar(resolution) else tuple(int(n) for n in resolution)
        if any(n < 1 for n in res):
            raise ValueError("resolution must be positive")
        return cls(res)

    @property
    def dim(self) -> int:
        return len(self.resolution)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def spacing(self) -> np.ndarray:
        return TWO_PI / np.array(self.resolution, dtype=float)

    @property
    def cell_radius(self) -> float:
        return 0.5 * float(np.linalg.norm(self.spacing))

    @cached_property
    def centers(self) -> np.ndarray:
        axes = [np.arange(n) * h for n, h in zip(self.resolution, self.spacing)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def multi_index(self, points) -> np.ndarray:
        pts = wrap(points).reshape(-1, self.dim)
        idx = np.rint(pts / self.spacing).astype(np.int64)
        return np.mod(idx, np.array(self.resolution))

    def cell_of(self, points) -> np.ndarray:
        """Flat (C-order) index of the cell containing each point."""
        return np.ravel_multi_index(self.multi_index(points).T, self.resolution)

    def test_offsets(self, samples_per_axis: int) -> np.ndarray:
        k = int(samples_per_axis)
        if k < 1 or k % 2 == 0:
            raise ValueError("samples_per_axis must be a positive odd integer")
        frac = (np.arange(k) + 0.5) / k - 0.5
        mesh = np.meshgrid(*[frac * h for h in self.spacing], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class ChainGraph:
    grid: GridDiscretization
    adjacency: csr_matrix
    delta_chain: float
    tau_step: float
    dt: float
    samples_per_axis: int
    jumps: Optional[csr_matrix] = None

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.nnz)

    def successors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    @cached_property
    def scc(self) -> tuple[int, np.ndarray]:
        return connected_components(self.adjacency, directed=True, connection="strong")

    def out_degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def to_edge_list(self, path):
        coo = self.adjacency.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(
                f"# cells={self.grid.n_cells} resolution={'x'.join(map(str, self.grid.resolution))} "
                f"delta_chain={self.delta_chain:.17g} tau_step={self.tau_step:.17g}\n"
            )
            for i, j in zip(coo.row[order], coo.col[order]):
                fh.write(f"{i} {j}\n")

    def scc_to_csv(self, path, flagged: Optional[np.ndarray] = None):
        _, labels = self.scc
        cr = np.zeros(self.grid.n_cells, dtype=bool)
        cr[chain_recurrent_cells(self) if flagged is None else flagged] = True
        names = ["x", "y", "z"][: self.grid.dim] if self.grid.dim <= 3 else [f"x{i + 1}" for i in range(self.grid.dim)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["cell"] + names + ["scc", "chain_recurrent"])
            for i, (c, lab) in enumerate(zip(self.grid.centers, labels)):
                w.writerow([i] + [f"{v:.17g}" for v in c] + [int(lab), int(cr[i])])


def _stencil(grid: GridDiscretization, radius: float) -> np.ndarray:
    reach = [int(np.ceil(radius / h)) + 1 for h in grid.spacing]
    axes = [np.arange(-r, r + 1) for r in reach]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _cells_near(grid: GridDiscretization, points: np.ndarray, radius: float, chunk: int = 4096):
    """Pairs (row in points, cell) with ``distance(point, center) <= radius``."""
    stencil = _stencil(grid, radius)
    res = np.array(grid.resolution)
    rows, cols = [], []
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk]
        base = grid.multi_index(p)
        cand = np.mod(base[:, None, :] + stencil[None], res)  # (n, s, d)
        flat = np.ravel_multi_index(cand.reshape(-1, grid.dim).T, grid.resolution).reshape(len(p), -1)
        dist = distance(p[:, None, :], grid.centers[flat])
        r, s = np.nonzero(dist <= radius)
        rows.append(r + start)
        cols.append(flat[r, s])
    return np.concatenate(rows), np.concatenate(cols)


def build_chain_graph(
    V: VectorField,
    grid: GridDiscretization,
    delta_chain: Optional[float] = None,
    tau_step: float = 1.0,
    dt: float = 1e-2,
    samples_per_axis: int = 3,
) -> ChainGraph:
    """Directed delta-chain graph of the time-``tau_step`` map.

    ``samples_per_axis=1`` uses only the cell center; larger odd values add
    a regular lattice of test points so that strongly expanding regions do
    not leave cells without predecessors.
    """
    R = grid.cell_radius
    if delta_chain is None:
        delta_chain = 2.0 * R
    if delta_chain < R:
        raise UnderResolvedGridError(
            f"delta_chain={delta_chain:.4g} is below the cell radius {R:.4g}; refine the grid"
        )
    if tau_step <= 0:
        raise ValueError("tau_step must be positive")
    offsets = grid.test_offsets(samples_per_axis)
    k = len(offsets)
    seeds = (grid.centers[:, None, :] + offsets[None]).reshape(-1, grid.dim)
    images = flow_map(V, tau_step, seeds, dt)
    rows, cols = _cells_near(grid, images, delta_chain + R)
    src = rows // k
    n = grid.n_cells
    adj = coo_matrix((np.ones(len(src), dtype=np.int8), (src, cols)), shape=(n, n)).tocsr()
    adj.sum_duplicates()
    adj.data[:] = 1
    # jump length from the center's own image, used for weighted paths
    center_img = images.reshape(n, k, grid.dim)[:, k // 2]
    coo = adj.tocoo()
    jump = distance(center_img[coo.row], grid.centers[coo.col])
    jumps = coo_matrix((jump + 1e-9, (coo.row, coo.col)), shape=(n, n)).tocsr()
    return ChainGraph(grid, adj, float(delta_chain), float(tau_step), float(dt), int(samples_per_axis), jumps)


def chain_recurrent_cells(g: ChainGraph) -> np.ndarray:
    """Cells lying on a cycle: SCC of size > 1, or a self-loop."""
    _, labels = g.scc
    sizes = np.bincount(labels)
    self_loop = np.asarray(g.adjacency.diagonal() > 0)
    return np.flatnonzero((sizes[labels] > 1) | self_loop)


def is_chain_transitive(g: ChainGraph) -> bool:
    return g.scc[0] == 1


def chain_path(g: ChainGraph, p, q, weighted: bool = False, step_cost: float = 0.05) -> list[int]:
    """Shortest edge path from the cell of ``p`` to the cell of ``q``.

    With ``weighted=True`` the path minimizes total jump length plus
    ``step_cost`` per edge instead of the edge count, which keeps the
    disturbance of the realized delta-solution small.
    """
    a, b = int(g.grid.cell_of(p)[0]), int(g.grid.cell_of(q)[0])
    if a == b:
        return [a]
    if weighted:
        w = g.jumps.copy()
        w.data = w.data + step_cost
        _, pred = dijkstra(w, directed=True, indices=a, return_predecessors=True)
    else:
        _, pred = breadth_first_order(g.adjacency, a, directed=True, return_predecessors=True)
    if pred[b] < 0:
        raise ChainUnreachableError(f"cell {b} is not reachable from cell {a}")
    path = [b]
    while path[-1] != a:
        path.append(int(pred[path[-1]]))
    return path[::-1]


def _shoot_constant_disturbance(V, z0, z1, tau, dt, tol=1e-10, iters=30):
    """Constant ``w`` with ``phi_{V+w}(tau, z0) = z1``; Newton with FD sensitivities."""
    d = len(z0)

    def endpoint(ws):
        # ws: (k, d) candidate disturbances, integrated as a batch
        rhs = lambda t, x: V(x) + ws
        _, pts = integrate(rhs, np.broadcast_to(z0, ws.shape), tau, dt, record=False)
        return pts[0]

    w = displacement(flow_map(V, tau, z0, dt), z1) / tau
    h = 1e-7
    for _ in range(iters):
        batch = np.vstack([w, w + h * np.eye(d)])
        ends = endpoint(batch)
        r = displacement(ends[0], z1)
        if np.linalg.norm(r) < tol:
            break
        J = (displacement(ends[0], ends[1:]) / h).T
        w = w + np.linalg.lstsq(J, r, rcond=None)[0]
    return w


def path_to_delta_solution(g: ChainGraph, V: VectorField, path: Sequence[int], p, q, dt: Optional[float] = None):
    """Realize a cell path as a delta-solution from ``p`` to ``q``.

    Each ``tau_step`` segment carries the constant disturbance that lands
    exactly on the next node (interior nodes are cell centers). Returns
    ``(DisturbanceLaw, Trajectory)``; the law's bound is the realized delta.
    """
    dt = g.dt if dt is None else dt
    tau = g.tau_step
    p, q = wrap(p), wrap(q)
    nodes = [p] + [g.grid.centers[c] for c in path[1:-1]] + [q]
    if len(path) == 1:
        nodes = [p, q]
    if len(nodes) == 2 and distance(p, q) == 0.0:
        law = DisturbanceLaw(lambda t, x: np.zeros(np.shape(x)), 0.0)
        return law, Trajectory([0.0], p[None], dt, (V.name, "w"), {"delta": 0.0, "segments": []})
    ws = np.array([_shoot_constant_disturbance(V, a, b, tau, dt) for a, b in zip(nodes[:-1], nodes[1:])])
    bound = float(norm(ws).max())

    def func(t, x):
        k = min(max(int(np.floor(t / tau + 1e-12)), 0), len(ws) - 1)
        return np.broadcast_to(ws[k], np.shape(x))

    law = DisturbanceLaw(func, bound * (1 + 1e-12))
    times, pts = [0.0], [p]
    x = p
    for k, w in enumerate(ws):
        ts, ps = integrate(lambda t, z, w=w: V(z) + w, x, tau, dt, t0=k * tau)
        times.extend(ts[1:])
        pts.extend(ps[1:])
        x = ps[-1]
    pts[-1] = q
    traj = Trajectory(np.array(times), np.stack(pts), dt, (V.name, "w"), {"delta": bound, "nodes": np.array(nodes)})
    return law, traj


def _ball_samples(x, radius, samples, rng):
    d = len(x)
    dirs = rng.normal(size=(samples, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = radius * rng.random(samples) ** (1.0 / d)
    return wrap(np.vstack([x[None], x + dirs * r[:, None]]))


def nonwandering_indicator(
    V: VectorField,
    x,
    ball_radius: float,
    T_max: float,
    samples: int = 64,
    dt: float = 1e-2,
    T_min: float = 1.0,
    seed: int = 0,
) -> bool:
    """One-sided return test: does some sample of the ball re-enter it at a time >= T_min?

    ``True`` is reliable up to discretization; ``False`` only means no
    return was found before ``T_max``.
    """
    if ball_radius <= 0 or T_max < T_min:
        raise ValueError("need ball_radius > 0 and T_max >= T_min")
    x = wrap(x)
    pts = _ball_samples(x, ball_radius, samples, np.random.default_rng(seed))
    rhs = lambda t, z: V(z)
    from .flow import _step_sizes, rk4_step

    t = 0.0
    for h in _step_sizes(T_max, dt):
        pts = wrap(rk4_step(rhs, t, pts, h))
        t += h
        if t >= T_min - 1e-12 and np.any(distance(pts, x) < ball_radius):
            return True
    return False


def _bucket_dedupe(points: np.ndarray, radius: float) -> np.ndarray:
    """Keep one point per hash bucket of diagonal ``radius``."""
    if len(points) == 0:
        return points
    side = radius / np.sqrt(points.shape[-1])
    keys = np.floor(wrap(points) / side).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


def _tails(V, seeds, T_long, tail_fraction, dt, stride):
    rhs = lambda t, z: V(z)
    from .flow import _step_sizes, rk4_step

    steps = _step_sizes(T_long, dt)
    t0 = T_long * (1 - tail_fraction)
    t, x, out = 0.0, wrap(seeds), []
    for n, h in enumerate(steps):
        x = wrap(rk4_step(rhs, t, x, h))
        t += h
        if t >= t0 and n % stride == 0:
            out.append(x)
    out.append(x)
    return np.stack(out, axis=1)  # (seeds, samples, d)


def approximate_minimal_set(
    V: VectorField,
    grid: GridDiscretization,
    T_long: float = 50.0,
    tail_fraction: float = 0.5,
    cluster_radius: float = 0.05,
    dt: float = 1e-2,
    backward: bool = True,
    stride: int = 5,
) -> np.ndarray:
    """Union of omega-limit clusters over the grid centers used as seeds.

    With ``backward=True`` the alpha-limits (omega-limits of ``-V``) are
    merged in as well, which picks up repelling minimal sets.
    """
    seeds = grid.centers
    tails = [_tails(V, seeds, T_long, tail_fraction, dt, stride)]
    if backward:
        tails.append(_tails(-V, seeds, T_long, tail_fraction, dt, stride))
    pts = np.concatenate([t.reshape(-1, grid.dim) for t in tails])
    return _bucket_dedupe(pts, cluster_radius)


def minimal_passage_check(traj: Trajectory, min_set, eps: float):
    """First sample time at which ``traj`` comes within ``eps`` of ``min_set``.

    Returns ``(passed, time)`` with ``time=None`` when it never does.
    """
    min_set = np.asarray(min_set, dtype=float).reshape(-1, traj.points.shape[1])
    if len(min_set) == 0:
        raise ValueError("min_set is empty")
    tree = cKDTree(wrap(min_set), boxsize=TWO_PI)
    dist, _ = tree.query(wrap(traj.points), k=1, distance_upper_bound=eps * (1 + 1e-12))
    hit = np.flatnonzero(dist <= eps)
    if len(hit) == 0:
        return False, None
    return True, float(traj.times[hit[0]])


def _random_disturbed_batch(V, starts, delta, T, dt, hold, rng):
    """Integrate a batch under piecewise-constant random disturbances of norm delta."""
    n, d = starts.shape
    n_hold = int(np.ceil(T / hold)) + 1
    dirs = rng.normal(size=(n_hold, n, d))
    dirs *= delta / np.linalg.norm(dirs, axis=-1, keepdims=True)

    def rhs(t, z):
        return V(z) + dirs[min(int(t / hold), n_hold - 1)]

    return integrate(rhs, starts, T, dt)


def random_disturbed_trajectories(
    V: VectorField, n: int, delta: float, T: float, dt: float = 1e-2, seed: int = 0, hold: float = 1.0, starts=None
) -> list:
    """``n`` delta-solutions from random starts under piecewise-constant disturbances.

    Each disturbance piece has norm exactly ``delta`` and lasts ``hold``.
    """
    rng = np.random.default_rng(seed)
    starts = rng.random((n, V.dim)) * TWO_PI if starts is None else wrap(np.asarray(starts, dtype=float))
    times, pts = _random_disturbed_batch(V, starts, delta, T, dt, hold, rng)
    return [Trajectory(times, pts[:, i], dt, (V.name,), {"delta": delta}) for i in range(len(starts))]


def estimate_passage_time(
    V: VectorField,
    min_set,
    eps: float,
    delta: float = 0.05,
    n_trials: int = 64,
    T_max: float = 100.0,
    dt: float = 1e-2,
    seed: int = 0,
    quantile: float = 0.95,
    hold: float = 1.0,
) -> float:
    """Empirical ``quantile`` of first-passage times into ``(min_set)_eps``.

    Trials never passing count as ``T_max``.
    """
    rng = np.random.default_rng(seed)
    d = V.dim
    starts = rng.random((n_trials, d)) * TWO_PI
    times, pts = _random_disturbed_batch(V, starts, delta, T_max, dt, hold, rng)
    tree = cKDTree(wrap(np.asarray(min_set).reshape(-1, d)), boxsize=TWO_PI)
    dist, _ = tree.query(pts.reshape(-1, d), k=1)
    near = (dist <= eps).reshape(len(times), n_trials)
    first = np.where(near.any(axis=0), times[np.argmax(near, axis=0)], T_max)
    return float(np.quantile(first, quantile))


@dataclass
class RecurrenceReport:
    chain_recurrent_cells: np.ndarray
    nonwandering_probes: np.ndarray
    nonwandering_flags: np.ndarray
    minimal_set_points: np.ndarray
    params: dict = field(default_factory=dict)

    def minimal_points_in_chain_region(self, grid: GridDiscretization) -> np.ndarray:
        cr = np.zeros(grid.n_cells, dtype=bool)
        cr[self.chain_recurrent_cells] = True
        return cr[grid.cell_of(self.minimal_set_points)]

    def to_csv(self, path, grid: GridDiscretization):
        cr = np.zeros(grid.n_cells, dtype=bool)
        cr[self.chain_recurrent_cells] = True
        has_min = np.zeros(grid.n_cells, dtype=bool)
        if len(self.minimal_set_points):
            has_min[grid.cell_of(self.minimal_set_points)] = True
        names = ["x", "y", "z"][: grid.dim] if grid.dim <= 3 else [f"x{i + 1}" for i in range(grid.dim)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["cell"] + names + ["chain_recurrent", "minimal"])
            for i, c in enumerate(grid.centers):
                w.writerow([i] + [f"{v:.17g}" for v in c] + [int(cr[i]), int(has_min[i])])


def recurrence_report(
    V: VectorField,
    grid: GridDiscretization,
    probes=None,
    delta_chain: Optional[float] = None,
    tau_step: float = 1.0,
    ball_radius: float = 0.1,
    T_max: float = 50.0,
    T_long: float = 50.0,
    cluster_radius: float = 0.05,
    dt: float = 1e-2,
) -> RecurrenceReport:
    g = build_chain_graph(V, grid, delta_chain, tau_step, dt)
    probes = np.zeros((0, grid.dim)) if probes is None else np.asarray(probes, dtype=float).reshape(-1, grid.dim)
    flags = np.array([nonwandering_indicator(V, p, ball_radius, T_max, dt=dt) for p in probes], dtype=bool)
    mins = approximate_minimal_set(V, grid, T_long, cluster_radius=cluster_radius, dt=dt)
    return RecurrenceReport(
        chain_recurrent_cells(g),
        probes,
        flags,
        mins,
        {
            "delta_chain": g.delta_chain,
            "tau_step": tau_step,
            "ball_radius": ball_radius,
            "T_max": T_max,
            "T_long": T_long,
            "cluster_radius": cluster_radius,
        },
    )
