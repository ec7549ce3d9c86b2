"""Reverse-mode differentiation over recorded array operations.

Indexing is restricted to basic indices (integers, slices, ``...``).

A function is traced once on concrete inputs. Tracing records every elementary operation as a
:class:`Node` on an immutable :class:`Tape`; the tape can then be replayed on new inputs with
:func:`forward_eval` and differentiated with :func:`vjp`.

Values are float64 numpy arrays. Elementwise binary operations follow numpy broadcasting and
their pullbacks sum over the broadcast axes.

```python
tape, evaluation = trace(lambda x, y: (x * y).sum(), {"x": [1.0, 2.0], "y": [3.0, 4.0]})
grads = vjp(tape, evaluation, 1.0)
assert list(grads["x"]) == [3.0, 4.0]
```
"""

import dataclasses
from collections.abc import Callable, Mapping, Sequence
from typing import Any, Optional, Union

import numpy as np
from frozendict import frozendict
from scipy import special

from romcontrol.exceptions import ConfigurationError

ArrayLike = Union[float, int, Sequence[float], np.ndarray]


@dataclasses.dataclass(frozen=True, eq=False)
class Node:
    """A single recorded operation.

    Attributes:
        op: Operation name, a key of the forward and backward rule tables.
        parents: Indices of the nodes this node reads.
        attrs: Static attributes (axis, shape, index, constant value, slot name).
        differentiable: False for constants and anything computed only from constants.
    """

    op: str
    parents: tuple[int, ...] = ()
    attrs: frozendict = frozendict()
    differentiable: bool = True


@dataclasses.dataclass(frozen=True, eq=False)
class Tape:
    """Immutable, topologically ordered record of a traced function.

    Attributes:
        nodes: Recorded operations; every node reads only earlier nodes.
        slots: Input slot name to node index.
        outputs: Indices of the output nodes.
    """

    nodes: tuple[Node, ...]
    slots: frozendict
    outputs: tuple[int, ...]

    def slot_shape(self, name: str) -> tuple[int, ...]:
        return tuple(self.nodes[self.slots[name]].attrs["shape"])


@dataclasses.dataclass(frozen=True, eq=False)
class Evaluation:
    """Node values of one forward pass, kept for a later :func:`vjp`."""

    tape: Tape
    values: tuple[np.ndarray, ...]

    @property
    def outputs(self) -> tuple[np.ndarray, ...]:
        return tuple(self.values[i] for i in self.tape.outputs)

    @property
    def output(self) -> np.ndarray:
        """The single output of a one-output tape."""
        return self.values[self.tape.outputs[0]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _matmul_backward(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, ...]:
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if b.ndim == 1:
        grad_a = g[..., None] * b
        grad_b = (g[..., None] * a).reshape(-1, a.shape[-1]).sum(axis=0)
        return _unbroadcast(grad_a, a.shape), grad_b
    if a.ndim == 1:
        grad_a = (b @ g[..., None])[..., 0].reshape(-1, a.shape[0]).sum(axis=0)
        grad_b = a[:, None] * g[..., None, :]
        return grad_a, _unbroadcast(grad_b, b.shape)
    grad_a = g @ np.swapaxes(b, -1, -2)
    grad_b = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


def _getitem_backward(attrs: Mapping[str, Any], g: np.ndarray, a: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(a)
    grad[attrs["key"]] += g
    return grad


def _sum_backward(attrs: Mapping[str, Any], g: np.ndarray, a: np.ndarray) -> np.ndarray:
    axis = attrs["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


_Forward = Callable[..., np.ndarray]
_Backward = Callable[..., tuple[np.ndarray, ...]]

FORWARD: frozendict[str, _Forward] = frozendict(
    {
        "add": lambda attrs, a, b: a + b,
        "sub": lambda attrs, a, b: a - b,
        "mul": lambda attrs, a, b: a * b,
        "neg": lambda attrs, a: -a,
        "tanh": lambda attrs, a: np.tanh(a),
        "sigmoid": lambda attrs, a: special.expit(a),
        "relu": lambda attrs, a: np.maximum(a, 0.0),
        "sin": lambda attrs, a: np.sin(a),
        "cos": lambda attrs, a: np.cos(a),
        "exp": lambda attrs, a: np.exp(a),
        "reciprocal": lambda attrs, a: 1.0 / a,
        "matmul": lambda attrs, a, b: a @ b,
        "sum": lambda attrs, a: np.sum(a, axis=attrs["axis"]),
        "reshape": lambda attrs, a: np.reshape(a, attrs["shape"]),
        "getitem": lambda attrs, a: a[attrs["key"]],
        "expand_dims": lambda attrs, a: np.expand_dims(a, attrs["axis"]),
        "transpose": lambda attrs, a: np.swapaxes(a, -1, -2),
    }
)

# Each rule receives (attrs, cotangent, output value, *parent values).
BACKWARD: frozendict[str, _Backward] = frozendict(
    {
        "add": lambda attrs, g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "sub": lambda attrs, g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "mul": lambda attrs, g, out, a, b: (
            _unbroadcast(g * b, a.shape),
            _unbroadcast(g * a, b.shape),
        ),
        "neg": lambda attrs, g, out, a: (-g,),
        "tanh": lambda attrs, g, out, a: (g * (1.0 - out * out),),
        "sigmoid": lambda attrs, g, out, a: (g * out * (1.0 - out),),
        # ReLU derivative at 0 is 0.
        "relu": lambda attrs, g, out, a: (g * (a > 0.0),),
        "sin": lambda attrs, g, out, a: (g * np.cos(a),),
        "cos": lambda attrs, g, out, a: (-g * np.sin(a),),
        "exp": lambda attrs, g, out, a: (g * out,),
        "reciprocal": lambda attrs, g, out, a: (-g * out * out,),
        "matmul": lambda attrs, g, out, a, b: _matmul_backward(g, a, b),
        "sum": lambda attrs, g, out, a: (_sum_backward(attrs, g, a),),
        "reshape": lambda attrs, g, out, a: (np.reshape(g, a.shape),),
        "getitem": lambda attrs, g, out, a: (_getitem_backward(attrs, g, a),),
        "expand_dims": lambda attrs, g, out, a: (np.squeeze(g, attrs["axis"]),),
        "transpose": lambda attrs, g, out, a: (np.swapaxes(g, -1, -2),),
    }
)

_PLAIN = (np.ndarray, np.generic, float, int)


class Var:
    """A traced value: a node index on a :class:`Recorder` plus its concrete value."""

    __slots__ = ("index", "recorder", "value")
    # Makes numpy defer to Var's reflected operators instead of building object arrays.
    __array_ufunc__ = None

    def __init__(self, recorder: "Recorder", index: int, value: np.ndarray) -> None:
        self.recorder = recorder
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    @property
    def ndim(self) -> int:
        return int(self.value.ndim)

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.shape})"

    def _binary(self, op: str, a: Any, b: Any) -> Any:
        if not isinstance(a, (Var, *_PLAIN)) or not isinstance(b, (Var, *_PLAIN)):
            return NotImplemented
        return self.recorder.apply(op, a, b)

    def __add__(self, other: Any) -> Any:
        return self._binary("add", self, other)

    def __radd__(self, other: Any) -> Any:
        return self._binary("add", other, self)

    def __sub__(self, other: Any) -> Any:
        return self._binary("sub", self, other)

    def __rsub__(self, other: Any) -> Any:
        return self._binary("sub", other, self)

    def __mul__(self, other: Any) -> Any:
        return self._binary("mul", self, other)

    def __rmul__(self, other: Any) -> Any:
        return self._binary("mul", other, self)

    def __truediv__(self, other: Any) -> Any:
        if isinstance(other, _PLAIN):
            return self._binary("mul", self, 1.0 / np.asarray(other, dtype=np.float64))
        if not isinstance(other, Var):
            return NotImplemented
        return self * other.reciprocal()

    def __rtruediv__(self, other: Any) -> Any:
        if not isinstance(other, _PLAIN):
            return NotImplemented
        return self._binary("mul", other, self.reciprocal())

    def __matmul__(self, other: Any) -> Any:
        return self._binary("matmul", self, other)

    def __rmatmul__(self, other: Any) -> Any:
        return self._binary("matmul", other, self)

    def __neg__(self) -> "Var":
        return self.recorder.apply("neg", self)

    def __getitem__(self, key: Any) -> "Var":
        return self.recorder.apply("getitem", self, key=key)

    def tanh(self) -> "Var":
        return self.recorder.apply("tanh", self)

    def sigmoid(self) -> "Var":
        return self.recorder.apply("sigmoid", self)

    def relu(self) -> "Var":
        return self.recorder.apply("relu", self)

    def step(self) -> np.ndarray:
        """Heaviside mask of the value; constant with respect to the tape."""
        return (self.value > 0.0).astype(np.float64)

    def sin(self) -> "Var":
        return self.recorder.apply("sin", self)

    def cos(self) -> "Var":
        return self.recorder.apply("cos", self)

    def exp(self) -> "Var":
        return self.recorder.apply("exp", self)

    def reciprocal(self) -> "Var":
        return self.recorder.apply("reciprocal", self)

    def sum(self, axis: Optional[int] = None) -> "Var":
        return self.recorder.apply("sum", self, axis=axis)

    def reshape(self, shape: tuple[int, ...]) -> "Var":
        return self.recorder.apply("reshape", self, shape=tuple(shape))

    def expand_dims(self, axis: int) -> "Var":
        return self.recorder.apply("expand_dims", self, axis=axis)

    def transpose(self) -> "Var":
        """Swap the last two axes."""
        return self.recorder.apply("transpose", self)


class Recorder:
    """Mutable builder used while tracing; produces a frozen :class:`Tape`."""

    def __init__(self) -> None:
        self._nodes: list[Node] = []
        self._values: list[np.ndarray] = []
        self._slots: dict[str, int] = {}

    def input(self, name: str, value: ArrayLike) -> Var:
        """Declare an input slot.

        Args:
            name: Slot name.
            value: Value used for this trace.

        Returns:
            Traced input.

        Raises:
            ConfigurationError: If the slot name is already bound.
        """
        if name in self._slots:
            raise ConfigurationError(f"Input slot '{name}' declared twice")
        array = np.array(value, dtype=np.float64)
        self._slots[name] = self._append(
            Node("input", attrs=frozendict(name=name, shape=array.shape)), array
        )
        return Var(self, self._slots[name], array)

    def _append(self, node: Node, value: np.ndarray) -> int:
        self._nodes.append(node)
        self._values.append(value)
        return len(self._nodes) - 1

    def _const(self, value: Any) -> int:
        array = np.array(value, dtype=np.float64)
        node = Node("const", attrs=frozendict(value=array), differentiable=False)
        return self._append(node, array)

    def apply(self, op: str, *operands: Any, **attrs: Any) -> Var:
        """Record ``op`` applied to ``operands`` and return the traced result.

        Raises:
            ConfigurationError: If an operand belongs to another recorder.
        """
        parents = []
        for operand in operands:
            if isinstance(operand, Var):
                if operand.recorder is not self:
                    raise ConfigurationError("Cannot mix values traced on different tapes")
                parents.append(operand.index)
            else:
                parents.append(self._const(operand))
        frozen_attrs = frozendict(attrs)
        value = np.asarray(
            FORWARD[op](frozen_attrs, *(self._values[p] for p in parents)), dtype=np.float64
        )
        differentiable = any(self._nodes[p].differentiable for p in parents)
        index = self._append(Node(op, tuple(parents), frozen_attrs, differentiable), value)
        return Var(self, index, value)

    def finish(self, outputs: Sequence[Any]) -> tuple[Tape, Evaluation]:
        indices = []
        for output in outputs:
            if isinstance(output, Var):
                indices.append(output.index)
            else:
                indices.append(self._const(output))
        tape = Tape(tuple(self._nodes), frozendict(self._slots), tuple(indices))
        return tape, Evaluation(tape, tuple(self._values))


def trace(fn: Callable[..., Any], inputs: Mapping[str, ArrayLike]) -> tuple[Tape, Evaluation]:
    """Trace ``fn`` on concrete inputs.

    Args:
        fn: Function called with one keyword argument per input slot. Returns a traced value or
            a tuple of them.
        inputs: Slot name to value.

    Returns:
        The frozen tape and the evaluation recorded while tracing.
    """
    recorder = Recorder()
    traced = {name: recorder.input(name, value) for name, value in inputs.items()}
    result = fn(**traced)
    outputs = result if isinstance(result, tuple) else (result,)
    return recorder.finish(outputs)


def forward_eval(tape: Tape, inputs: Mapping[str, ArrayLike]) -> Evaluation:
    """Replay a tape on new inputs.

    Args:
        tape: Tape to evaluate.
        inputs: Slot name to value; every slot must be bound with its traced shape.

    Returns:
        All node values; the outputs are available through :attr:`Evaluation.outputs`.

    Raises:
        ConfigurationError: If a slot is unbound, unknown, or has the wrong size.
    """
    unknown = set(inputs) - set(tape.slots)
    if unknown:
        raise ConfigurationError(f"Unknown input slots: {sorted(unknown)}")
    values: list[np.ndarray] = []
    for node in tape.nodes:
        if node.op == "input":
            name = node.attrs["name"]
            if name not in inputs:
                raise ConfigurationError(f"Input slot '{name}' is not bound")
            value = np.array(inputs[name], dtype=np.float64)
            if value.shape != tuple(node.attrs["shape"]):
                raise ConfigurationError(
                    f"Input slot '{name}' expects shape {tuple(node.attrs['shape'])}, "
                    f"got {value.shape}"
                )
        elif node.op == "const":
            value = node.attrs["value"]
        else:
            value = np.asarray(
                FORWARD[node.op](node.attrs, *(values[p] for p in node.parents)), dtype=np.float64
            )
        values.append(value)
    return Evaluation(tape, tuple(values))


def vjp(
    tape: Tape, evaluation: Evaluation, cotangent: Union[ArrayLike, Sequence[ArrayLike]]
) -> dict[str, np.ndarray]:
    """Pull a cotangent on the outputs back to every input slot.

    Args:
        tape: Tape that produced ``evaluation``.
        evaluation: Forward pass on the inputs at which to differentiate.
        cotangent: One cotangent per output (a bare value for a one-output tape), each shaped
            like its output.

    Returns:
        Slot name to ``cotangent^T J`` for that slot.

    Raises:
        ConfigurationError: If the evaluation belongs to another tape or a cotangent has the
            wrong size.
    """
    if evaluation.tape is not tape:
        raise ConfigurationError("Evaluation was not produced by this tape")
    cotangents = (
        tuple(cotangent)
        if len(tape.outputs) > 1 and isinstance(cotangent, (tuple, list))
        else (cotangent,)
    )
    if len(cotangents) != len(tape.outputs):
        raise ConfigurationError(
            f"Expected {len(tape.outputs)} cotangents, got {len(cotangents)}"
        )

    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    for index, value in zip(tape.outputs, cotangents):
        output_shape = evaluation.values[index].shape
        array = np.array(value, dtype=np.float64)
        if array.shape != output_shape:
            if array.size != int(np.prod(output_shape)):
                raise ConfigurationError(
                    f"Cotangent of size {array.size} does not match output shape {output_shape}"
                )
            array = array.reshape(output_shape)
        grads[index] = array if grads[index] is None else grads[index] + array

    for index in range(len(tape.nodes) - 1, -1, -1):
        grad = grads[index]
        node = tape.nodes[index]
        if grad is None or not node.differentiable or node.op in ("input", "const"):
            continue
        parent_values = [evaluation.values[p] for p in node.parents]
        pulled = BACKWARD[node.op](node.attrs, grad, evaluation.values[index], *parent_values)
        for parent, parent_grad in zip(node.parents, pulled):
            if not tape.nodes[parent].differentiable:
                continue
            previous = grads[parent]
            grads[parent] = parent_grad if previous is None else previous + parent_grad

    result = {}
    for name, index in tape.slots.items():
        grad = grads[index]
        result[name] = (
            np.zeros_like(evaluation.values[index]) if grad is None else np.array(grad)
        )
    return result


def value_and_grad(
    fn: Callable[..., Any], inputs: Mapping[str, ArrayLike]
) -> tuple[float, dict[str, np.ndarray]]:
    """Value and gradient of a scalar-valued function in one trace and one backward pass."""
    tape, evaluation = trace(fn, inputs)
    output = evaluation.output
    if output.size != 1:
        raise ConfigurationError(f"value_and_grad needs a scalar output, got shape {output.shape}")
    return float(output.reshape(())), vjp(tape, evaluation, np.ones_like(output))
