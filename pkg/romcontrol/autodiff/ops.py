"""Elementary operations shared by numpy arrays, traced values and duals.

Model, operator and control code is written once against these functions. Plain arrays are
computed with numpy directly; anything else (a traced :class:`~romcontrol.autodiff.tape.Var` or a
:class:`~romcontrol.autodiff.dual.Dual`) provides the same operations as methods. Arithmetic
operators (``+ - * / @``) dispatch on their own.
"""

from typing import Any, Optional

import numpy as np
from scipy import special

_PLAIN = (np.ndarray, np.generic, float, int)


def is_plain(x: Any) -> bool:
    return isinstance(x, _PLAIN)


def tanh(x: Any) -> Any:
    return np.tanh(x) if is_plain(x) else x.tanh()


def sigmoid(x: Any) -> Any:
    return special.expit(x) if is_plain(x) else x.sigmoid()


def relu(x: Any) -> Any:
    return np.maximum(x, 0.0) if is_plain(x) else x.relu()


def step(x: Any) -> Any:
    """Heaviside mask, 0 at 0. Always a constant array."""
    return (np.asarray(x) > 0.0).astype(np.float64) if is_plain(x) else x.step()


def sin(x: Any) -> Any:
    return np.sin(x) if is_plain(x) else x.sin()


def cos(x: Any) -> Any:
    return np.cos(x) if is_plain(x) else x.cos()


def exp(x: Any) -> Any:
    return np.exp(x) if is_plain(x) else x.exp()


def reciprocal(x: Any) -> Any:
    return 1.0 / np.asarray(x, dtype=np.float64) if is_plain(x) else x.reciprocal()


def sum(x: Any, axis: Optional[int] = None) -> Any:  # noqa: A001
    return np.sum(x, axis=axis) if is_plain(x) else x.sum(axis)


def reshape(x: Any, shape: tuple[int, ...]) -> Any:
    return np.reshape(x, shape) if is_plain(x) else x.reshape(tuple(shape))


def expand_dims(x: Any, axis: int) -> Any:
    return np.expand_dims(x, axis) if is_plain(x) else x.expand_dims(axis)


def transpose(x: Any) -> Any:
    """Swap the last two axes."""
    return np.swapaxes(x, -1, -2) if is_plain(x) else x.transpose()


def dot(x: Any, y: Any) -> Any:
    """Inner product over the last axis."""
    return sum(x * y, axis=-1)


def shape(x: Any) -> tuple[int, ...]:
    return tuple(np.shape(x)) if is_plain(x) else tuple(x.shape)


def value(x: Any) -> np.ndarray:
    """Concrete primal value of an array, traced value or dual."""
    while not is_plain(x):
        x = x.primal if hasattr(x, "primal") else x.value
    return np.asarray(x, dtype=np.float64)
