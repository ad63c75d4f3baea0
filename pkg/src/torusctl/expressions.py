"""Inline vector fields from text, e.g. ``["0", "(1 - cos(x)) * sin(y)"]``.

Accepted: the coordinates ``x, y`` (``x1..xd`` in higher dimension),
numbers, ``pi``, ``+ - * / **``, ``sin`` and ``cos``. Jacobians are
differentiated symbolically.
"""

from __future__ import annotations

import re
from typing import Sequence

import numpy as np
import sympy as sp
from sympy.parsing.sympy_parser import parse_expr, standard_transformations

from .fields import VectorField

__all__ = ["ExpressionError", "coordinate_names", "parse_component", "field_from_strings"]


class ExpressionError(ValueError):
    pass


_ALLOWED_FUNCS = {sp.sin, sp.cos}
_NUMBER = re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_NAME = re.compile(r"[A-Za-z]\w*")
_OPERATORS = set("+-*/() \t")


def _check_tokens(text: str, names: set):
    # parse_expr evaluates Python, so only whitelisted tokens may reach it
    rest = _NUMBER.sub(" ", text)
    for name in _NAME.findall(rest):
        if name not in names:
            raise ExpressionError(f"unknown name {name!r} in {text!r}")
    leftover = set(_NAME.sub(" ", rest)) - _OPERATORS
    if leftover:
        raise ExpressionError(f"illegal characters {sorted(leftover)} in {text!r}")


def coordinate_names(dim: int) -> list[str]:
    if dim == 1:
        return ["x"]
    if dim == 2:
        return ["x", "y"]
    return [f"x{i + 1}" for i in range(dim)]


def parse_component(text: str, symbols: Sequence[sp.Symbol]) -> sp.Expr:
    if not isinstance(text, (str, int, float)):
        raise ExpressionError(f"field component must be text or a number, got {type(text).__name__}")
    local = {s.name: s for s in symbols}
    _check_tokens(str(text), set(local) | {"sin", "cos", "pi"})
    local.update(sin=sp.sin, cos=sp.cos, pi=sp.pi)
    try:
        expr = parse_expr(str(text), local_dict=local, global_dict={"Integer": sp.Integer, "Float": sp.Float,
                                                                    "Rational": sp.Rational, "Symbol": sp.Symbol},
                          transformations=standard_transformations, evaluate=True)
    except Exception as exc:  # sympy raises a zoo of types on bad input
        raise ExpressionError(f"cannot parse {text!r}: {exc}") from None
    if not isinstance(expr, sp.Expr):
        raise ExpressionError(f"{text!r} is not an arithmetic expression")
    unknown = expr.free_symbols - set(symbols)
    if unknown:
        raise ExpressionError(f"unknown names in {text!r}: {sorted(map(str, unknown))}")
    for f in expr.atoms(sp.Function):
        if f.func not in _ALLOWED_FUNCS:
            raise ExpressionError(f"function {f.func} not allowed in {text!r}")
    if not expr.is_real and expr.is_real is not None:
        raise ExpressionError(f"{text!r} is not real")
    return expr


def field_from_strings(components: Sequence[str], name: str = "F") -> VectorField:
    """Compile component expressions into a :class:`VectorField` with analytic Jacobian."""
    comps = list(components)
    if not comps:
        raise ExpressionError("a field needs at least one component")
    d = len(comps)
    syms = tuple(sp.symbols(coordinate_names(d), real=True))
    exprs = [parse_component(c, syms) for c in comps]
    f_num = sp.lambdify(syms, exprs, "numpy")
    jac_num = sp.lambdify(syms, [[sp.diff(e, s) for s in syms] for e in exprs], "numpy")

    def func(z):
        z = np.asarray(z, dtype=float)
        vals = f_num(*np.moveaxis(z, -1, 0))
        return np.stack([np.broadcast_to(np.asarray(v, dtype=float), z.shape[:-1]) for v in vals], axis=-1)

    def jac(z):
        z = np.asarray(z, dtype=float)
        rows = jac_num(*np.moveaxis(z, -1, 0))
        J = np.empty(z.shape + (d,))
        for i, row in enumerate(rows):
            for j, v in enumerate(row):
                J[..., i, j] = v
        return J

    return VectorField(name, func, d, jac=jac, note=", ".join(map(str, exprs)))
