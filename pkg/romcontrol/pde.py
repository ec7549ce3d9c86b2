"""Differential operators F[u] evaluated through a model's analytic derivatives."""

from typing import Any, Optional

import numpy as np
from pydantic import Field, model_validator
from pydantic.dataclasses import dataclass

from romcontrol import rom
from romcontrol.autodiff import ops
from romcontrol.exceptions import ConfigurationError
from romcontrol.types import OperatorKind, TimeDirection

_REQUIRED_ORDER = {OperatorKind.HEAT: 2, OperatorKind.TANH_FLUX: 1, OperatorKind.HJB: 2}


@dataclass(frozen=True)
class OperatorSpec:
    """Right-hand side of u_t = F[u].

    Attributes:
        kind: ``heat`` (F = Lap u), ``tanh_flux`` (F = speed * div(tanh u) read componentwise)
            or ``hjb`` (F = -epsilon Lap u + |grad u|^2 / 2, posed backward in time).
        speed: Flux coefficient for ``tanh_flux``.
        epsilon: Viscosity for ``hjb``.
        time_direction: ``reversed`` turns a terminal-value problem into an initial-value
            problem in tau = T - t. Defaults to ``reversed`` for ``hjb`` and ``forward``
            otherwise.
    """

    kind: OperatorKind
    speed: float = 2.0
    epsilon: float = Field(default=0.2, gt=0)
    time_direction: Optional[TimeDirection] = None

    @model_validator(mode="after")
    def _check(self) -> "OperatorSpec":
        if not np.isfinite(self.speed):
            raise ValueError("speed must be finite")
        return self

    @property
    def direction(self) -> TimeDirection:
        if self.time_direction is not None:
            return self.time_direction
        return TimeDirection.REVERSED if self.kind is OperatorKind.HJB else TimeDirection.FORWARD

    @property
    def sign(self) -> float:
        return -1.0 if self.direction is TimeDirection.REVERSED else 1.0


def check_pairing(op: OperatorSpec, spec: rom.ModelSpec) -> None:
    """Raise :class:`ConfigurationError` if the model lacks the derivatives ``op`` needs."""
    if rom.family_of(spec).max_derivative_order < _REQUIRED_ORDER[op.kind]:
        raise ConfigurationError(
            f"Operator '{op.kind.value}' needs derivatives of order {_REQUIRED_ORDER[op.kind]} "
            f"that {spec.family.value} does not provide"
        )


def apply(op: OperatorSpec, spec: rom.ModelSpec, theta: Any, x: Any) -> Any:
    """F[u_theta](x).

    Args:
        op: Operator.
        spec: Model spec.
        theta: Parameters (..., m); arrays, traced values or duals.
        x: Points (..., N, d) or a single point (d,).

    Returns:
        Operator values, shape (..., N) (or (...) for a single point).
    """
    check_pairing(op, spec)
    if op.kind is OperatorKind.HEAT:
        return rom.laplacian(spec, theta, x)
    if op.kind is OperatorKind.TANH_FLUX:
        u = rom.evaluate(spec, theta, x)
        h = ops.tanh(u)
        return op.speed * (1.0 - h * h) * ops.sum(rom.grad_x(spec, theta, x), axis=-1)
    gradient = rom.grad_x(spec, theta, x)
    return -op.epsilon * rom.laplacian(spec, theta, x) + 0.5 * ops.sum(gradient * gradient, axis=-1)


def rate(op: OperatorSpec, spec: rom.ModelSpec, theta: Any, x: Any) -> Any:
    """Forward-time rate of the initial-value problem: F, or -F for a reversed operator."""
    value = apply(op, spec, theta, x)
    return -value if op.sign < 0 else value
