"""Flat d-torus geometry.

Points are 1-D float arrays of angles in ``[0, 2*pi)``; tangent vectors are
plain component arrays (the metric is Euclidean). Every function accepts
stacked inputs of shape ``(..., d)`` and works row-wise.
"""

import numpy as np

TWO_PI = 2.0 * np.pi

__all__ = ["TWO_PI", "wrap", "displacement", "distance", "norm", "check_same_dim"]


def check_same_dim(a, b):
    if np.shape(a)[-1:] != np.shape(b)[-1:]:
        raise ValueError(
            f"dimension mismatch: {np.shape(a)[-1:]} vs {np.shape(b)[-1:]}"
        )


def wrap(raw):
    """Return the canonical representative of ``raw`` modulo ``2*pi``."""
    x = np.asarray(raw, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot wrap a non-finite coordinate")
    out = np.mod(x, TWO_PI)
    # np.mod(-1e-20, 2pi) rounds up to exactly 2pi
    out[out >= TWO_PI] = 0.0
    return out


def displacement(a, b):
    """Minimal-norm tangent vector ``v`` with ``wrap(a + v) == b``.

    Each component lies in ``(-pi, pi]``; an exact antipodal tie resolves to
    ``+pi``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    check_same_dim(a, b)
    delta = np.mod(b - a, TWO_PI)
    return np.where(delta > np.pi, delta - TWO_PI, delta)


def norm(v):
    return np.linalg.norm(np.asarray(v, dtype=float), axis=-1)


def distance(a, b):
    """Geodesic distance on the flat torus."""
    return norm(displacement(a, b))
