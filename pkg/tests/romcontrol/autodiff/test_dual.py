"""Tests for forward-mode duals."""

import numpy as np
import pytest

from romcontrol.autodiff import ops
from romcontrol.autodiff.dual import Dual, jvp, max_tag, tangent_of
from romcontrol.autodiff.tape import value_and_grad
from romcontrol.utils.test_utils import finite_difference


def _fn(x):  # type: ignore[no-untyped-def]
    w = np.array([[0.5, -1.0], [2.0, 0.3], [1.0, 1.0]])
    hidden = ops.tanh(x @ ops.transpose(w))
    return ops.sum(ops.exp(0.1 * hidden) * ops.cos(hidden) / (2.0 + ops.sigmoid(hidden)))


def test_jvp_matches_directional_finite_difference() -> None:
    x = np.array([0.3, -0.7])
    direction = np.array([1.0, 2.0])
    value, derivative = jvp(_fn, x, direction)
    assert float(value) == pytest.approx(float(_fn(x)))
    expected = finite_difference(lambda s: float(_fn(x + s * direction)), np.array(0.0))
    assert float(derivative) == pytest.approx(float(expected), rel=1e-6)


def test_nested_duals_give_second_derivatives() -> None:
    """Differentiating a jvp again yields f'' for f(x) = x sin x."""

    def first(y):  # type: ignore[no-untyped-def]
        return jvp(lambda z: ops.sin(z) * z, y, 1.0)[1]

    x = np.array(0.7)
    _, second = jvp(first, x, 1.0)
    assert float(second) == pytest.approx(2 * np.cos(0.7) - 0.7 * np.sin(0.7))


def test_missing_tangent_is_structural_zero() -> None:
    result = Dual(np.array([1.0, 2.0])) * 3.0
    assert result.tangent is None
    np.testing.assert_allclose(tangent_of(result, 1), [0.0, 0.0])


def test_lower_tag_is_constant_inside_higher_tag() -> None:
    inner = Dual(np.array(2.0), np.array(1.0), tag=1)
    outer = Dual(np.array(3.0), np.array(1.0), tag=2)
    product = inner * outer
    assert product.tag == 2
    # d/d(eps2) of (2 + eps1)(3 + eps2) = 2 + eps1
    derivative = tangent_of(product, 2)
    assert isinstance(derivative, Dual)
    assert float(derivative.primal) == pytest.approx(2.0)
    assert float(derivative.tangent) == pytest.approx(1.0)


def test_max_tag_looks_through_nesting() -> None:
    value = Dual(Dual(np.zeros(2), None, tag=1), None, tag=3)
    assert max_tag(value, np.ones(2)) == 3
    assert max_tag(np.ones(2)) == 0


def test_duals_inside_tapes() -> None:
    """Forward-over-reverse: the gradient of a directional derivative."""
    x = np.array([0.2, 0.4])
    direction = np.array([1.0, 0.0])

    def directional(x):  # type: ignore[no-untyped-def]
        return jvp(_fn, x, direction)[1]

    _, grads = value_and_grad(directional, {"x": x})
    expected = finite_difference(lambda y: float(jvp(_fn, y, direction)[1]), x)
    np.testing.assert_allclose(grads["x"], expected, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("seed", range(100))
def test_jvp_agrees_with_reverse_gradient(seed: int) -> None:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((4, 3))
    x = rng.standard_normal(3)
    v = rng.standard_normal(3)

    def fn(x):  # type: ignore[no-untyped-def]
        hidden = x @ ops.transpose(w)
        return ops.sum(ops.tanh(hidden) * ops.sigmoid(hidden) + ops.exp(0.5 * hidden))

    _, derivative = jvp(fn, x, v)
    _, grads = value_and_grad(fn, {"x": x})
    assert abs(float(derivative) - float(grads["x"] @ v)) < 1e-12
