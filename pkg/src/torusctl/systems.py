"""Built-in systems.

``gated``      drift (0, (1 - cos x) sin y) with X1 = (1, 0), X2 = (0, eta(y))
``circle``     x' = 1 - cos x on the circle
``irrational`` constant drift (1, sqrt 2) with X1 = (1, 0)
``vertical``   drift (0, sin y), no constraint fields
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import VectorField, constant_field

__all__ = [
    "eta",
    "eta_prime",
    "GatedTorus",
    "gated_torus",
    "ControlSystem",
    "circle_system",
    "irrational_system",
    "vertical_system",
    "builtin",
    "BUILTINS",
]


def eta(y):
    """Smooth gate: ``exp(-1/cos 2y)`` where ``cos 2y > 0``, else 0.

    Positive exactly on ``[0, pi/4) u (3pi/4, 5pi/4) u (7pi/4, 2pi]``.
    """
    c = np.cos(2.0 * np.asarray(y, dtype=float))
    pos = c > 0
    with np.errstate(divide="ignore", over="ignore"):
        val = np.exp(-1.0 / np.where(pos, c, 1.0))
    return np.where(pos, val, 0.0)


def eta_prime(y):
    y = np.asarray(y, dtype=float)
    c = np.cos(2.0 * y)
    pos = c > 0
    safe = np.where(pos, c, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        val = eta(y) * (-2.0 * np.sin(2.0 * y)) / safe**2
    return np.where(pos & np.isfinite(val), val, 0.0)


@dataclass(frozen=True)
class ControlSystem:
    """Drift plus constraint fields: x' = V(x) + sum_j u_j X_j(x)."""

    name: str
    drift: VectorField
    controls: tuple

    @property
    def dim(self) -> int:
        return self.drift.dim

    @property
    def fields(self) -> list:
        return [self.drift, *self.controls]


@dataclass(frozen=True)
class GatedTorus(ControlSystem):
    eta_fn: object = eta

    @property
    def X1(self):
        return self.controls[0]

    @property
    def X2(self):
        return self.controls[1]

    @property
    def V(self):
        return self.drift


def _gated_drift():
    def func(z):
        x, y = z[..., 0], z[..., 1]
        return np.stack([np.zeros_like(x), (1.0 - np.cos(x)) * np.sin(y)], axis=-1)

    def jac(z):
        x, y = z[..., 0], z[..., 1]
        J = np.zeros(z.shape + (2,))
        J[..., 1, 0] = np.sin(x) * np.sin(y)
        J[..., 1, 1] = (1.0 - np.cos(x)) * np.cos(y)
        return J

    return VectorField("V", func, 2, jac=jac)


def _gate_field(eta_fn, eta_prime_fn):
    def func(z):
        y = z[..., 1]
        return np.stack([np.zeros_like(y), eta_fn(y)], axis=-1)

    def jac(z):
        J = np.zeros(z.shape + (2,))
        J[..., 1, 1] = eta_prime_fn(z[..., 1])
        return J

    return VectorField("X2", func, 2, jac=jac)


def gated_torus(eta_fn=eta, eta_prime_fn=eta_prime) -> GatedTorus:
    """The chain-transitive, bracket-generating, non-controllable torus system."""
    return GatedTorus(
        "gated",
        _gated_drift(),
        (constant_field([1.0, 0.0], "X1"), _gate_field(eta_fn, eta_prime_fn)),
        eta_fn,
    )


def circle_system() -> ControlSystem:
    drift = VectorField(
        "V",
        lambda x: 1.0 - np.cos(x),
        1,
        jac=lambda x: np.sin(x)[..., None],
    )
    return ControlSystem("circle", drift, ())


def irrational_system() -> ControlSystem:
    return ControlSystem(
        "irrational",
        constant_field([1.0, np.sqrt(2.0)], "V"),
        (constant_field([1.0, 0.0], "X1"),),
    )


def vertical_system() -> ControlSystem:
    def func(z):
        return np.stack([np.zeros(z.shape[:-1]), np.sin(z[..., 1])], axis=-1)

    def jac(z):
        J = np.zeros(z.shape + (2,))
        J[..., 1, 1] = np.cos(z[..., 1])
        return J

    return ControlSystem("vertical", VectorField("V", func, 2, jac=jac), ())


BUILTINS = {
    "gated": gated_torus,
    "circle": circle_system,
    "irrational": irrational_system,
    "vertical": vertical_system,
}


def builtin(name: str) -> ControlSystem:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise ValueError(f"unknown built-in system {name!r}; choose from {sorted(BUILTINS)}") from None
