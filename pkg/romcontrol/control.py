"""The learned control field V_xi: R^m -> R^m.

``V(theta) = s(theta) * (r(theta) + e(theta) * theta)`` where

- ``s`` is a sigmoid feed-forward network ending in one sigmoid unit (a gate in (0, 1)),
- ``r`` is a ReLU residual network: linear embedding to width w, ``depth`` blocks
  ``y <- y + W2 relu(W1 y + b1) + b2``, linear read-out to m,
- ``e`` is a ReLU feed-forward network with a linear read-out to m.

Parameters live in one flat vector; :class:`ControlNetSpec` owns its layout. Rows are batched:
``theta`` has shape (..., m).
"""

import dataclasses
import json
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from pydantic import Field
from pydantic.dataclasses import dataclass
from scipy import special

from romcontrol.autodiff import ops
from romcontrol.exceptions import ConfigurationError
from romcontrol.types import LAYOUT_VERSION, Layout


@dataclass(frozen=True)
class ControlNetSpec:
    """Shape of the control field.

    Attributes:
        dim: Input and output dimension m.
        width: Hidden width of every sub-network.
        depth: Hidden layers of the gate and the expansion network, residual blocks of the
            residual network.
    """

    dim: int = Field(ge=1)
    width: int = Field(default=64, ge=1)
    depth: int = Field(default=3, ge=1)

    @property
    def layout(self) -> Layout:
        m, w = self.dim, self.width
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for i in range(self.depth):
            shapes += [(f"gate.w{i}", (w, m if i == 0 else w)), (f"gate.b{i}", (w,))]
        shapes += [("gate.w_out", (1, w)), ("gate.b_out", (1,))]
        shapes += [("res.w_in", (w, m)), ("res.b_in", (w,))]
        for i in range(self.depth):
            shapes += [
                (f"res.w1_{i}", (w, w)),
                (f"res.b1_{i}", (w,)),
                (f"res.w2_{i}", (w, w)),
                (f"res.b2_{i}", (w,)),
            ]
        shapes += [("res.w_out", (m, w)), ("res.b_out", (m,))]
        for i in range(self.depth):
            shapes += [(f"exp.w{i}", (w, m if i == 0 else w)), (f"exp.b{i}", (w,))]
        shapes += [("exp.w_out", (m, w)), ("exp.b_out", (m,))]
        return Layout.of(*shapes)

    @property
    def n_params(self) -> int:
        return self.layout.size

    def describe(self) -> dict[str, Any]:
        return {"dim": self.dim, "width": self.width, "depth": self.depth}


@dataclasses.dataclass(frozen=True)
class ControlParams:
    """Flat control parameters xi with their spec."""

    values: np.ndarray
    spec: ControlNetSpec

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.spec.n_params,):
            raise ConfigurationError(
                f"Control net needs {self.spec.n_params} parameters, got shape {values.shape}"
            )
        object.__setattr__(self, "values", values)

    def replace(self, values: np.ndarray) -> "ControlParams":
        return ControlParams(values, self.spec)

    def save(self, path: Union[str, Path], metadata: Optional[dict[str, Any]] = None) -> None:
        """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64).

        The binary file holds the sub-networks back to back in layout order.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.values.astype("<f8").tofile(path.with_suffix(".bin"))
        manifest = {
            "spec": self.spec.describe(),
            "layout_version": LAYOUT_VERSION,
            "blocks": [
                {"name": b.name, "offset": b.offset, "shape": list(b.shape)}
                for b in self.spec.layout.blocks
            ],
            **(metadata or {}),
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Union[str, Path]) -> tuple["ControlParams", dict[str, Any]]:
        """Read parameters written by :meth:`save`.

        Returns:
            The parameters and the full manifest.

        Raises:
            ConfigurationError: If the files are unreadable or inconsistent.
        """
        path = Path(path)
        try:
            manifest = json.loads(path.with_suffix(".json").read_text())
            spec = ControlNetSpec(**manifest["spec"])
            values = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        except (OSError, KeyError, ValueError, TypeError) as e:
            raise ConfigurationError(f"Cannot read checkpoint {path}: {e}") from e
        return cls(values, spec), manifest


def init_params(spec: ControlNetSpec, rng: np.random.Generator) -> ControlParams:
    """Initialize control parameters.

    Gate weights use Xavier scaling, ReLU weights He scaling, biases start at zero, and the
    second layer of every residual block starts at zero so the residual network begins as its
    linear skip path.
    """
    layout = spec.layout
    parts: dict[str, np.ndarray] = {}
    for block in layout.blocks:
        kind = block.name.split(".")[1]
        if len(block.shape) == 1:
            parts[block.name] = np.zeros(block.shape)
            continue
        fan_out, fan_in = block.shape
        if block.name.startswith("gate."):
            std = np.sqrt(2.0 / (fan_in + fan_out))
        elif kind.startswith("w2_"):
            std = 0.0
        else:
            std = np.sqrt(2.0 / fan_in)
        parts[block.name] = std * rng.standard_normal(block.shape)
    return ControlParams(layout.join(parts), spec)


def _linear(x: Any, weight: Any, bias: Any) -> Any:
    return x @ ops.transpose(weight) + bias


def forward(spec: ControlNetSpec, xi: Any, theta: Any) -> Any:
    """V_xi(theta) written with generic ops, so ``xi`` and ``theta`` may be traced."""
    p = spec.layout.split(xi)
    h = theta
    for i in range(spec.depth):
        h = ops.sigmoid(_linear(h, p[f"gate.w{i}"], p[f"gate.b{i}"]))
    gate = ops.sigmoid(_linear(h, p["gate.w_out"], p["gate.b_out"]))

    y = _linear(theta, p["res.w_in"], p["res.b_in"])
    for i in range(spec.depth):
        inner = ops.relu(_linear(y, p[f"res.w1_{i}"], p[f"res.b1_{i}"]))
        y = y + _linear(inner, p[f"res.w2_{i}"], p[f"res.b2_{i}"])
    residual = _linear(y, p["res.w_out"], p["res.b_out"])

    h = theta
    for i in range(spec.depth):
        h = ops.relu(_linear(h, p[f"exp.w{i}"], p[f"exp.b{i}"]))
    expansion = _linear(h, p["exp.w_out"], p["exp.b_out"])
    return gate * (residual + expansion * theta)


def _check_theta(spec: ControlNetSpec, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1:] != (spec.dim,):
        raise ConfigurationError(f"Control field expects theta in R^{spec.dim}, got {theta.shape}")
    return theta


def eval_field(params: ControlParams, theta: np.ndarray) -> np.ndarray:
    """V_xi(theta) for theta of shape (m,) or (B, m).

    Raises:
        ConfigurationError: On a dimension mismatch.
    """
    return np.asarray(forward(params.spec, params.values, _check_theta(params.spec, theta)))


def field_vjp(
    params: ControlParams, theta: np.ndarray, cotangent: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pull a cotangent on V_xi(theta) back to theta and xi in one reverse pass.

    Args:
        params: Control parameters.
        theta: Points, shape (m,) or (B, m).
        cotangent: Cotangent on the field, shaped like ``theta``.

    Returns:
        ``(a^T dV/dtheta, a^T dV/dxi)``; the theta pullback is per row, the xi pullback is
        summed over rows.
    """
    spec = params.spec
    theta = _check_theta(spec, theta)
    single = theta.ndim == 1
    theta2 = np.atleast_2d(theta)
    cot = np.atleast_2d(np.asarray(cotangent, dtype=np.float64))
    if cot.shape != theta2.shape:
        raise ConfigurationError(f"Cotangent shape {cot.shape} does not match {theta2.shape}")
    p = spec.layout.split(params.values)
    grads = {name: np.zeros_like(value) for name, value in p.items()}

    gate_hidden = [theta2]
    for i in range(spec.depth):
        gate_hidden.append(special.expit(gate_hidden[-1] @ p[f"gate.w{i}"].T + p[f"gate.b{i}"]))
    gate = special.expit(gate_hidden[-1] @ p["gate.w_out"].T + p["gate.b_out"])

    res_states = [theta2 @ p["res.w_in"].T + p["res.b_in"]]
    res_pre = []
    for i in range(spec.depth):
        pre = res_states[-1] @ p[f"res.w1_{i}"].T + p[f"res.b1_{i}"]
        res_pre.append(pre)
        res_states.append(
            res_states[-1] + np.maximum(pre, 0.0) @ p[f"res.w2_{i}"].T + p[f"res.b2_{i}"]
        )
    residual = res_states[-1] @ p["res.w_out"].T + p["res.b_out"]

    exp_hidden = [theta2]
    for i in range(spec.depth):
        exp_hidden.append(np.maximum(exp_hidden[-1] @ p[f"exp.w{i}"].T + p[f"exp.b{i}"], 0.0))
    expansion = exp_hidden[-1] @ p["exp.w_out"].T + p["exp.b_out"]

    inner = residual + expansion * theta2
    d_gate = np.sum(cot * inner, axis=-1, keepdims=True)
    d_inner = gate * cot
    d_theta = d_inner * expansion

    # Gate.
    d_pre = d_gate * gate * (1.0 - gate)
    grads["gate.w_out"] = d_pre.T @ gate_hidden[-1]
    grads["gate.b_out"] = d_pre.sum(axis=0)
    d_h = d_pre @ p["gate.w_out"]
    for i in reversed(range(spec.depth)):
        out = gate_hidden[i + 1]
        d_pre = d_h * out * (1.0 - out)
        grads[f"gate.w{i}"] = d_pre.T @ gate_hidden[i]
        grads[f"gate.b{i}"] = d_pre.sum(axis=0)
        d_h = d_pre @ p[f"gate.w{i}"]
    d_theta = d_theta + d_h

    # Residual network.
    grads["res.w_out"] = d_inner.T @ res_states[-1]
    grads["res.b_out"] = d_inner.sum(axis=0)
    d_y = d_inner @ p["res.w_out"]
    for i in reversed(range(spec.depth)):
        hidden = np.maximum(res_pre[i], 0.0)
        grads[f"res.w2_{i}"] = d_y.T @ hidden
        grads[f"res.b2_{i}"] = d_y.sum(axis=0)
        d_pre = (d_y @ p[f"res.w2_{i}"]) * (res_pre[i] > 0.0)
        grads[f"res.w1_{i}"] = d_pre.T @ res_states[i]
        grads[f"res.b1_{i}"] = d_pre.sum(axis=0)
        d_y = d_y + d_pre @ p[f"res.w1_{i}"]
    grads["res.w_in"] = d_y.T @ theta2
    grads["res.b_in"] = d_y.sum(axis=0)
    d_theta = d_theta + d_y @ p["res.w_in"]

    # Expansion network.
    d_out = d_inner * theta2
    grads["exp.w_out"] = d_out.T @ exp_hidden[-1]
    grads["exp.b_out"] = d_out.sum(axis=0)
    d_h = d_out @ p["exp.w_out"]
    for i in reversed(range(spec.depth)):
        d_pre = d_h * (exp_hidden[i + 1] > 0.0)
        grads[f"exp.w{i}"] = d_pre.T @ exp_hidden[i]
        grads[f"exp.b{i}"] = d_pre.sum(axis=0)
        d_h = d_pre @ p[f"exp.w{i}"]
    d_theta = d_theta + d_h

    return (d_theta[0] if single else d_theta), spec.layout.join(grads)
