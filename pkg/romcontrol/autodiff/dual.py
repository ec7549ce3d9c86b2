"""Forward-mode duals.

A :class:`Dual` carries a primal and a tangent. Either part may be a numpy array, a traced
:class:`~romcontrol.autodiff.tape.Var` or another dual, so duals nest inside tapes
(forward-over-reverse) and inside each other. Every dual has an integer ``tag``; when duals with
different tags meet, the higher tag is the outer one and the lower-tagged dual is treated as a
constant inside its components. A missing tangent (``None``) is a structural zero.
"""

from collections.abc import Callable
from typing import Any, Optional

import numpy as np

from romcontrol.autodiff import ops


def _tag(x: Any) -> int:
    return x.tag if isinstance(x, Dual) else 0


def _parts(x: Any, tag: int) -> tuple[Any, Any]:
    if isinstance(x, Dual) and x.tag == tag:
        return x.primal, x.tangent
    return x, None


def _add(x: Any, y: Any) -> Any:
    if x is None:
        return y
    if y is None:
        return x
    return x + y


def _scale(t: Any, factor: Any) -> Any:
    return None if t is None else t * factor


class Dual:
    """Dual number over arrays: ``primal + tangent * eps`` with ``eps**2 = 0``."""

    __slots__ = ("primal", "tag", "tangent")
    __array_ufunc__ = None

    def __init__(self, primal: Any, tangent: Any = None, tag: int = 1) -> None:
        self.primal = primal
        self.tangent = tangent
        self.tag = tag

    @property
    def shape(self) -> tuple[int, ...]:
        return ops.shape(self.primal)

    def __repr__(self) -> str:
        return f"Dual(tag={self.tag}, shape={self.shape})"

    @staticmethod
    def _outer(x: Any, y: Any) -> int:
        return max(_tag(x), _tag(y))

    @staticmethod
    def add(x: Any, y: Any) -> "Dual":
        tag = Dual._outer(x, y)
        xp, xt = _parts(x, tag)
        yp, yt = _parts(y, tag)
        return Dual(xp + yp, _add(xt, yt), tag)

    @staticmethod
    def sub(x: Any, y: Any) -> "Dual":
        tag = Dual._outer(x, y)
        xp, xt = _parts(x, tag)
        yp, yt = _parts(y, tag)
        return Dual(xp - yp, _add(xt, None if yt is None else -yt), tag)

    @staticmethod
    def mul(x: Any, y: Any) -> "Dual":
        tag = Dual._outer(x, y)
        xp, xt = _parts(x, tag)
        yp, yt = _parts(y, tag)
        return Dual(xp * yp, _add(_scale(xt, yp), None if yt is None else xp * yt), tag)

    @staticmethod
    def matmul(x: Any, y: Any) -> "Dual":
        tag = Dual._outer(x, y)
        xp, xt = _parts(x, tag)
        yp, yt = _parts(y, tag)
        tangent = _add(None if xt is None else xt @ yp, None if yt is None else xp @ yt)
        return Dual(xp @ yp, tangent, tag)

    def __add__(self, other: Any) -> "Dual":
        return Dual.add(self, other)

    def __radd__(self, other: Any) -> "Dual":
        return Dual.add(other, self)

    def __sub__(self, other: Any) -> "Dual":
        return Dual.sub(self, other)

    def __rsub__(self, other: Any) -> "Dual":
        return Dual.sub(other, self)

    def __mul__(self, other: Any) -> "Dual":
        return Dual.mul(self, other)

    def __rmul__(self, other: Any) -> "Dual":
        return Dual.mul(other, self)

    def __truediv__(self, other: Any) -> "Dual":
        return Dual.mul(self, ops.reciprocal(other))

    def __rtruediv__(self, other: Any) -> "Dual":
        return Dual.mul(other, self.reciprocal())

    def __matmul__(self, other: Any) -> "Dual":
        return Dual.matmul(self, other)

    def __rmatmul__(self, other: Any) -> "Dual":
        return Dual.matmul(other, self)

    def __neg__(self) -> "Dual":
        return Dual(-self.primal, None if self.tangent is None else -self.tangent, self.tag)

    def __getitem__(self, key: Any) -> "Dual":
        tangent = None if self.tangent is None else self.tangent[key]
        return Dual(self.primal[key], tangent, self.tag)

    def _chain(self, primal: Any, derivative: Callable[[], Any]) -> "Dual":
        if self.tangent is None:
            return Dual(primal, None, self.tag)
        return Dual(primal, self.tangent * derivative(), self.tag)

    def tanh(self) -> "Dual":
        y = ops.tanh(self.primal)
        return self._chain(y, lambda: 1.0 - y * y)

    def sigmoid(self) -> "Dual":
        y = ops.sigmoid(self.primal)
        return self._chain(y, lambda: y * (1.0 - y))

    def relu(self) -> "Dual":
        return self._chain(ops.relu(self.primal), lambda: ops.step(self.primal))

    def step(self) -> Any:
        return ops.step(self.primal)

    def sin(self) -> "Dual":
        return self._chain(ops.sin(self.primal), lambda: ops.cos(self.primal))

    def cos(self) -> "Dual":
        return self._chain(ops.cos(self.primal), lambda: -ops.sin(self.primal))

    def exp(self) -> "Dual":
        y = ops.exp(self.primal)
        return self._chain(y, lambda: y)

    def reciprocal(self) -> "Dual":
        y = ops.reciprocal(self.primal)
        return self._chain(y, lambda: -(y * y))

    def _linear(self, fn: Callable[[Any], Any]) -> "Dual":
        return Dual(fn(self.primal), None if self.tangent is None else fn(self.tangent), self.tag)

    def sum(self, axis: Optional[int] = None) -> "Dual":
        return self._linear(lambda x: ops.sum(x, axis))

    def reshape(self, shape: tuple[int, ...]) -> "Dual":
        return self._linear(lambda x: ops.reshape(x, shape))

    def expand_dims(self, axis: int) -> "Dual":
        return self._linear(lambda x: ops.expand_dims(x, axis))

    def transpose(self) -> "Dual":
        return self._linear(ops.transpose)


def max_tag(*values: Any) -> int:
    """Highest dual tag found in ``values``, looking through nested primals and tangents."""
    best = 0
    for value in values:
        while isinstance(value, Dual):
            best = max(best, value.tag, max_tag(value.tangent))
            value = value.primal
    return best


def primal_of(x: Any, tag: int) -> Any:
    """Strip the perturbation with ``tag`` from ``x``."""
    if not isinstance(x, Dual) or x.tag < tag:
        return x
    if x.tag == tag:
        return x.primal
    tangent = None if x.tangent is None else primal_of(x.tangent, tag)
    return Dual(primal_of(x.primal, tag), tangent, x.tag)


def tangent_of(x: Any, tag: int) -> Any:
    """Coefficient of the perturbation with ``tag`` in ``x``; zeros when ``x`` does not carry it."""
    if isinstance(x, Dual) and x.tag == tag:
        return x.tangent if x.tangent is not None else _zeros_like(x.primal)
    if isinstance(x, Dual) and x.tag > tag:
        tangent = None if x.tangent is None else tangent_of(x.tangent, tag)
        return Dual(tangent_of(x.primal, tag), tangent, x.tag)
    return _zeros_like(x)


def _zeros_like(x: Any) -> np.ndarray:
    return np.zeros(ops.shape(x))


def jvp(
    fn: Callable[[Any], Any], primal: Any, tangent: Any, tag: Optional[int] = None
) -> tuple[Any, Any]:
    """Value and directional derivative of ``fn`` at ``primal`` along ``tangent``.

    Args:
        fn: Function written with :mod:`romcontrol.autodiff.ops` and arithmetic operators.
        primal: Point of evaluation (array, traced value or dual).
        tangent: Direction, shaped like ``primal``.
        tag: Perturbation tag. Defaults to one above any tag already present in the inputs.

    Returns:
        ``(fn(primal), d/de fn(primal + e * tangent) at e = 0)``.
    """
    if tag is None:
        tag = max_tag(primal, tangent) + 1
    out = fn(Dual(primal, tangent, tag))
    return primal_of(out, tag), tangent_of(out, tag)
