"""Tests for tape.py functionality."""

import numpy as np
import pytest

from romcontrol.autodiff import ops
from romcontrol.autodiff.tape import forward_eval, trace, value_and_grad, vjp
from romcontrol.exceptions import ConfigurationError
from romcontrol.utils.test_utils import finite_difference


def _network(x, w, b):  # type: ignore[no-untyped-def]
    hidden = ops.tanh(x @ ops.transpose(w) + b)
    return ops.sum(ops.sigmoid(hidden) * ops.sin(hidden) + ops.relu(hidden), axis=None)


@pytest.fixture
def inputs() -> dict[str, np.ndarray]:
    rng = np.random.default_rng(3)
    return {
        "x": rng.standard_normal((4, 3)),
        "w": rng.standard_normal((5, 3)),
        "b": rng.standard_normal(5),
    }


def test_trace_records_value(inputs: dict[str, np.ndarray]) -> None:
    """The traced output equals the plain numpy evaluation."""
    tape, evaluation = trace(_network, inputs)
    assert evaluation.output == pytest.approx(_network(**inputs))
    assert tape.slot_shape("w") == (5, 3)


def test_vjp_matches_finite_differences(inputs: dict[str, np.ndarray]) -> None:
    """Every slot's gradient agrees with central differences."""
    tape, evaluation = trace(_network, inputs)
    grads = vjp(tape, evaluation, 1.0)
    for name in inputs:

        def partial(value: np.ndarray, name: str = name) -> float:
            return float(_network(**{**inputs, name: value}))

        expected = finite_difference(partial, inputs[name])
        np.testing.assert_allclose(grads[name], expected, rtol=1e-5, atol=1e-7)


def test_replay_on_new_inputs(inputs: dict[str, np.ndarray]) -> None:
    """A tape replays on fresh inputs of the traced shapes."""
    tape, _ = trace(_network, inputs)
    moved = {name: value + 0.5 for name, value in inputs.items()}
    evaluation = forward_eval(tape, moved)
    assert evaluation.output == pytest.approx(_network(**moved))
    grads = vjp(tape, evaluation, 1.0)
    _, expected = value_and_grad(_network, moved)
    np.testing.assert_allclose(grads["b"], expected["b"])


def test_broadcasting_pullback_sums_over_broadcast_axes() -> None:
    """Adding a (3,) vector to a (2, 3) matrix pulls back a column sum."""
    _, grads = value_and_grad(lambda a, b: ops.sum(a + b), {"a": np.ones((2, 3)), "b": np.ones(3)})
    np.testing.assert_allclose(grads["b"], [2.0, 2.0, 2.0])
    np.testing.assert_allclose(grads["a"], np.ones((2, 3)))


def test_division_and_indexing() -> None:
    """Division by a traced value and basic slicing are differentiable."""

    def fn(x):  # type: ignore[no-untyped-def]
        return ops.sum(x[1:] / x[:-1])

    x = np.array([1.0, 2.0, 4.0])
    value, grads = value_and_grad(fn, {"x": x})
    assert value == pytest.approx(4.0)
    expected = finite_difference(lambda v: float(np.sum(v[1:] / v[:-1])), x)
    np.testing.assert_allclose(grads["x"], expected, rtol=1e-6)


def test_multiple_outputs_take_one_cotangent_each() -> None:
    tape, evaluation = trace(lambda x: (ops.sum(x * x), ops.sum(x)), {"x": np.array([1.0, 2.0])})
    grads = vjp(tape, evaluation, (1.0, 3.0))
    np.testing.assert_allclose(grads["x"], [5.0, 7.0])


def test_relu_derivative_at_zero_is_zero() -> None:
    _, grads = value_and_grad(lambda x: ops.sum(ops.relu(x)), {"x": np.array([-1.0, 0.0, 2.0])})
    np.testing.assert_allclose(grads["x"], [0.0, 0.0, 1.0])


def test_unused_slot_gets_zero_gradient() -> None:
    _, grads = value_and_grad(lambda x, y: ops.sum(x), {"x": np.ones(2), "y": np.ones(3)})
    np.testing.assert_allclose(grads["y"], np.zeros(3))


def test_unknown_and_unbound_slots_are_rejected(inputs: dict[str, np.ndarray]) -> None:
    tape, _ = trace(_network, inputs)
    with pytest.raises(ConfigurationError, match="Unknown input slots"):
        forward_eval(tape, {**inputs, "z": 1.0})
    with pytest.raises(ConfigurationError, match="not bound"):
        forward_eval(tape, {"x": inputs["x"], "w": inputs["w"]})


def test_shape_mismatch_is_rejected(inputs: dict[str, np.ndarray]) -> None:
    tape, _ = trace(_network, inputs)
    with pytest.raises(ConfigurationError, match="expects shape"):
        forward_eval(tape, {**inputs, "b": np.ones(4)})


def test_vjp_rejects_foreign_evaluation(inputs: dict[str, np.ndarray]) -> None:
    tape, _ = trace(_network, inputs)
    _, other = trace(_network, inputs)
    with pytest.raises(ConfigurationError, match="not produced by this tape"):
        vjp(tape, other, 1.0)


def test_value_and_grad_needs_scalar() -> None:
    with pytest.raises(ConfigurationError, match="scalar"):
        value_and_grad(lambda x: x * 2.0, {"x": np.ones(2)})
