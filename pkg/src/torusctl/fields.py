"""Vector fields on the flat torus, Lie brackets and Hörmander rank tests.

All field evaluators are vectorized: they take points of shape ``(..., d)``
and return ``(..., d)``; Jacobians return ``(..., d, d)`` with
``J[..., i, k] = dF_i / dx_k``.

Bracket convention: ``[F, G] = DG . F - DF . G``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .manifold import TWO_PI, wrap

DEFAULT_STEP = 1e-5
DEFAULT_RANK_TOL = 1e-8

__all__ = [
    "VectorField",
    "constant_field",
    "zero_field",
    "combine",
    "jacobian_fd",
    "lie_bracket",
    "LieWord",
    "enumerate_words",
    "RankReport",
    "RankScan",
    "bracket_rank",
    "hormander_scan",
    "grid_nodes",
]


@dataclass(frozen=True, eq=False)
class VectorField:
    """A C^1 vector field on the flat ``dim``-torus.

    Parameters
    ----------
    name : str
        Label used in reports and word printing.
    func : callable
        Vectorized evaluator ``(..., d) -> (..., d)``. Must be 2*pi periodic.
    dim : int
        Torus dimension.
    jac : callable, optional
        Analytic Jacobian ``(..., d) -> (..., d, d)``. When missing, central
        differences are used.
    fd_level : int
        Number of nested finite-difference layers already inside ``func``;
        controls the step used when differencing this field again.
    """

    name: str
    func: Callable
    dim: int
    jac: Optional[Callable] = None
    fd_level: int = 0
    note: str = ""

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.func(x), dtype=float)
        return np.broadcast_to(out, x.shape)

    @property
    def jac_level(self) -> int:
        return self.fd_level if self.jac is not None else self.fd_level + 1

    def fd_step(self, h: float = DEFAULT_STEP) -> float:
        # each nesting level takes the square root of the previous step
        return h ** (0.5**self.fd_level)

    def jacobian(self, x, h: float = DEFAULT_STEP):
        x = np.asarray(x, dtype=float)
        if self.jac is not None:
            out = np.asarray(self.jac(x), dtype=float)
            return np.broadcast_to(out, x.shape + (self.dim,))
        return jacobian_fd(self, x, self.fd_step(h))

    def __neg__(self):
        return combine([-1.0], [self], name=f"-{self.name}")

    def scaled(self, c: float, name: str | None = None):
        return combine([c], [self], name=name or f"{c:g}*{self.name}")


def constant_field(vec, name: str = "const") -> VectorField:
    vec = np.array(vec, dtype=float).reshape(-1)
    d = vec.size

    def func(x):
        return np.broadcast_to(vec, np.shape(x)).copy()

    def jac(x):
        return np.zeros(np.shape(x) + (d,))

    return VectorField(name, func, d, jac=jac, note="constant")


def zero_field(dim: int, name: str = "0") -> VectorField:
    return constant_field(np.zeros(dim), name)


def combine(coeffs: Sequence[float], fields: Sequence[VectorField], name: str | None = None) -> VectorField:
    """Constant-coefficient linear combination ``sum c_k F_k``."""
    if len(coeffs) != len(fields) or not fields:
        raise ValueError("need one coefficient per field")
    dim = fields[0].dim
    if any(f.dim != dim for f in fields):
        raise ValueError("fields live on tori of different dimension")
    coeffs = [float(c) for c in coeffs]
    pairs = [(c, f) for c, f in zip(coeffs, fields) if c != 0.0]

    def func(x):
        out = np.zeros(np.shape(x))
        for c, f in pairs:
            out = out + c * f(x)
        return out

    jac = None
    if all(f.jac is not None for _, f in pairs):
        def jac(x):
            out = np.zeros(np.shape(x) + (dim,))
            for c, f in pairs:
                out = out + c * f.jacobian(x)
            return out

    if name is None:
        name = " + ".join(f"{c:g}*{f.name}" for c, f in zip(coeffs, fields))
    level = max((f.fd_level for _, f in pairs), default=0)
    return VectorField(name, func, dim, jac=jac, fd_level=level)


def jacobian_fd(F: VectorField, x, h: float = DEFAULT_STEP):
    """Central-difference Jacobian; column ``i`` is ``(F(x+h e_i) - F(x-h e_i)) / 2h``."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        cols.append((F(x + e) - F(x - e)) / (2.0 * h))
    J = np.stack(cols, axis=-1)
    if not np.all(np.isfinite(J)):
        raise ValueError(f"non-finite Jacobian for field {F.name!r}")
    return J


def lie_bracket(F: VectorField, G: VectorField, h: float = DEFAULT_STEP) -> VectorField:
    """The field ``x -> DG(x) F(x) - DF(x) G(x)``."""
    if F.dim != G.dim:
        raise ValueError("bracket of fields on different tori")

    def func(x):
        fx, gx = F(x), G(x)
        out = np.einsum("...ij,...j->...i", G.jacobian(x, h), fx) - np.einsum(
            "...ij,...j->...i", F.jacobian(x, h), gx
        )
        if not np.all(np.isfinite(out)):
            raise ValueError(f"non-finite bracket [{F.name},{G.name}]")
        return out

    return VectorField(
        f"[{F.name},{G.name}]", func, F.dim, fd_level=max(F.jac_level, G.jac_level)
    )


@dataclass(frozen=True)
class LieWord:
    """Binary bracket tree over field indices. A leaf has ``index`` set."""

    index: Optional[int] = None
    left: Optional["LieWord"] = None
    right: Optional["LieWord"] = None

    def __post_init__(self):
        leaf = self.index is not None
        node = self.left is not None and self.right is not None
        if leaf == node:
            raise ValueError("a LieWord is either a leaf or a bracket of two words")

    @classmethod
    def leaf(cls, i: int) -> "LieWord":
        return cls(index=i)

    @classmethod
    def bracket(cls, a: "LieWord", b: "LieWord") -> "LieWord":
        return cls(left=a, right=b)

    @cached_property
    def depth(self) -> int:
        if self.index is not None:
            return 0
        return 1 + max(self.left.depth, self.right.depth)

    def label(self, names: Sequence[str] | None = None) -> str:
        if self.index is not None:
            return names[self.index] if names else f"X{self.index + 1}"
        return f"[{self.left.label(names)},{self.right.label(names)}]"

    def realize(self, fields: Sequence[VectorField], cache: dict | None = None) -> VectorField:
        if cache is None:
            cache = {}
        if self in cache:
            return cache[self]
        if self.index is not None:
            out = fields[self.index]
        else:
            out = lie_bracket(self.left.realize(fields, cache), self.right.realize(fields, cache))
        cache[self] = out
        return out


def enumerate_words(num_fields: int, max_depth: int) -> list[LieWord]:
    """All bracket words of depth <= max_depth.

    ``[w, w]`` is dropped and only one of ``[a, b]``, ``[b, a]`` is kept, so
    depth 1 over ``m`` fields contributes ``m (m - 1) / 2`` words.
    """
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    words = [LieWord.leaf(i) for i in range(num_fields)]
    for level in range(1, max_depth + 1):
        new = []
        for i, a in enumerate(words):
            for b in words[i + 1:]:
                if max(a.depth, b.depth) == level - 1:
                    new.append(LieWord.bracket(a, b))
        words.extend(new)
    return words


@dataclass
class RankReport:
    point: np.ndarray
    rank: int
    singular_values: np.ndarray
    depth_used: int
    tolerance: float

    @property
    def full(self) -> bool:
        return self.rank == self.point.shape[-1]


def _numerical_rank(svals: np.ndarray, tol: float) -> np.ndarray:
    top = svals[..., :1]
    return np.sum((svals > tol * top) & (top > 0), axis=-1)


def _word_matrix(fields, points, max_depth):
    words = enumerate_words(len(fields), max_depth)
    cache: dict = {}
    rows = [w.realize(fields, cache)(points) for w in words]
    return np.stack(rows, axis=-2)  # (..., W, d)


def bracket_rank(
    fields: Sequence[VectorField],
    x,
    max_depth: int = 2,
    tol: float = DEFAULT_RANK_TOL,
) -> RankReport:
    """Numerical rank of the span of all bracket words at ``x``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = wrap(x)
    svals = np.linalg.svd(_word_matrix(fields, x, max_depth), compute_uv=False)
    return RankReport(x, int(_numerical_rank(svals, tol)), svals, max_depth, tol)


def grid_nodes(resolution, dim: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Nodes ``k * 2pi / n`` per axis, flattened in C order."""
    res = (resolution,) * dim if np.isscalar(resolution) else tuple(resolution)
    if len(res) != dim or any(n < 1 for n in res):
        raise ValueError(f"bad grid resolution {resolution!r} for dimension {dim}")
    axes = [np.arange(n) * (TWO_PI / n) for n in res]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1), tuple(res)


def _coord_names(d):
    return ["x", "y", "z"][:d] if d <= 3 else [f"x{i + 1}" for i in range(d)]


@dataclass
class RankScan:
    points: np.ndarray
    ranks: np.ndarray
    singular_values: np.ndarray
    shape: tuple
    depth: int
    tolerance: float
    field_names: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.points.shape[-1]

    @property
    def min_rank(self) -> int:
        return int(self.ranks.min()) if self.ranks.size else self.dim

    @property
    def deficient(self) -> np.ndarray:
        """Points where the rank falls short of the dimension."""
        return self.points[self.ranks < self.dim]

    @property
    def sigma_min(self) -> np.ndarray:
        s = self.singular_values
        return s[:, self.dim - 1] if s.shape[1] >= self.dim else np.zeros(len(s))

    def deficient_runs(self, axis: int = -1) -> list:
        """Maximal runs of node values along ``axis`` whose whole slice is deficient.

        For the torus example with ``axis=-1`` these are the y-bands where the
        scanned fields lose rank for every x.
        """
        vals = np.unique(self.points[:, axis])
        bad = [bool(np.all(self.ranks[self.points[:, axis] == v] < self.dim)) for v in vals]
        runs, start, prev = [], None, None
        for v, b in zip(vals, bad):
            if b and start is None:
                start = v
            elif not b and start is not None:
                runs.append([float(start), float(prev)])
                start = None
            prev = v
        if start is not None:
            runs.append([float(start), float(vals[-1])])
        return runs

    def summary(self) -> dict:
        bad = self.deficient
        return {
            "fields": list(self.field_names),
            "cells": int(self.ranks.size),
            "depth": self.depth,
            "tolerance": self.tolerance,
            "min_rank": self.min_rank,
            "full_rank": bool(self.min_rank == self.dim),
            "deficient_cells": int(len(bad)),
            "deficiency_bounds": (
                [[float(lo), float(hi)] for lo, hi in zip(bad.min(axis=0), bad.max(axis=0))]
                if len(bad) else []
            ),
            "deficient_runs_last_axis": self.deficient_runs(-1),
        }

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(_coord_names(self.dim) + ["rank", "sigma_min"])
            for p, r, s in zip(self.points, self.ranks, self.sigma_min):
                w.writerow([f"{c:.17g}" for c in p] + [int(r), f"{s:.17g}"])


def hormander_scan(
    fields: Sequence[VectorField],
    resolution=64,
    max_depth: int = 2,
    tol: float = DEFAULT_RANK_TOL,
    drop_first: bool = False,
    region: Optional[Callable] = None,
) -> RankScan:
    """Bracket rank at every node of a uniform grid.

    ``drop_first`` removes ``fields[0]`` (the drift) before scanning.
    ``region`` is an optional predicate ``points (n, d) -> bool mask`` that
    restricts the scan.
    """
    fields = list(fields[1:] if drop_first else fields)
    if not fields:
        raise ValueError("no fields to scan")
    dim = fields[0].dim
    res = (resolution,) * dim if np.isscalar(resolution) else tuple(resolution)
    if any(n < 2 for n in res):
        raise ValueError("resolution must be >= 2 per axis")
    pts, shape = grid_nodes(res, dim)
    if region is not None:
        pts = pts[np.asarray(region(pts), dtype=bool)]
    svals = np.linalg.svd(_word_matrix(fields, pts, max_depth), compute_uv=False)
    ranks = _numerical_rank(svals, tol)
    return RankScan(pts, ranks, svals, shape, max_depth, tol, [f.name for f in fields])
