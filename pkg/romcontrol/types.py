"""Shared type definitions: enums, flat-vector layouts and typed specs.

Specs are pydantic dataclasses validated on construction. Use :func:`build` to construct one
from untrusted input so that validation failures surface as
:class:`~romcontrol.exceptions.ConfigurationError`.
"""

import dataclasses
import enum
from collections.abc import Mapping
from typing import Any, Optional, TypeVar

import numpy as np
from pydantic import Field, ValidationError
from pydantic.dataclasses import dataclass

from romcontrol.autodiff import ops
from romcontrol.exceptions import ConfigurationError

LAYOUT_VERSION = 1

SpecT = TypeVar("SpecT")


class ModelFamily(str, enum.Enum):
    PERIODIC_SINE_TANH = "periodic_sine_tanh"
    GAUSSIAN_MIXTURE = "gaussian_mixture"
    SINE_SERIES = "sine_series"


class OperatorKind(str, enum.Enum):
    HEAT = "heat"
    TANH_FLUX = "tanh_flux"
    HJB = "hjb"


class TimeDirection(str, enum.Enum):
    FORWARD = "forward"
    REVERSED = "reversed"


class SolverKind(str, enum.Enum):
    EULER = "euler"
    RK4 = "rk4"
    DOPRI5 = "dopri5"


class ResidualNorm(str, enum.Enum):
    L2 = "l2"
    H1 = "h1"


@dataclasses.dataclass(frozen=True)
class Block:
    """A named, shaped slice of a flat parameter vector."""

    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclasses.dataclass(frozen=True)
class Layout:
    """Ordered named blocks covering a flat vector without gaps."""

    blocks: tuple[Block, ...]

    @classmethod
    def of(cls, *shapes: tuple[str, tuple[int, ...]]) -> "Layout":
        blocks = []
        offset = 0
        for name, shape in shapes:
            block = Block(name, offset, tuple(shape))
            blocks.append(block)
            offset += block.size
        return cls(tuple(blocks))

    @property
    def size(self) -> int:
        return sum(block.size for block in self.blocks)

    def block(self, name: str) -> Block:
        for block in self.blocks:
            if block.name == name:
                return block
        raise ConfigurationError(f"Layout has no block named '{name}'")

    def split(self, flat: Any) -> dict[str, Any]:
        """Views of each block, keeping leading batch axes.

        Works on numpy arrays, traced values and duals.

        Args:
            flat: Array of shape ``(..., size)``.

        Returns:
            Block name to array of shape ``(..., *block.shape)``.

        Raises:
            ConfigurationError: If the last axis does not match the layout size.
        """
        shape = ops.shape(flat)
        if not shape or shape[-1] != self.size:
            raise ConfigurationError(
                f"Expected a vector with last axis {self.size}, got shape {shape}"
            )
        batch = shape[:-1]
        return {
            block.name: ops.reshape(
                flat[..., block.offset : block.offset + block.size], batch + block.shape
            )
            for block in self.blocks
        }

    def join(self, parts: Mapping[str, np.ndarray], batch: tuple[int, ...] = ()) -> np.ndarray:
        """Inverse of :meth:`split` for numpy arrays."""
        return np.concatenate(
            [np.reshape(parts[block.name], batch + (block.size,)) for block in self.blocks],
            axis=-1,
        )


@dataclass(frozen=True)
class SolverSpec:
    """ODE solver selection.

    Attributes:
        kind: Integrator.
        steps: Step count for the fixed-step integrators.
        rtol: Relative tolerance for DOPRI5.
        atol: Absolute tolerance for DOPRI5.
        max_steps: Step budget for DOPRI5, accepted plus rejected.
    """

    kind: SolverKind = SolverKind.RK4
    steps: int = Field(default=20, ge=1)
    rtol: float = Field(default=1e-6, gt=0)
    atol: float = Field(default=1e-8, gt=0)
    max_steps: int = Field(default=100000, ge=1)


def build(cls: type[SpecT], values: Optional[Mapping[str, Any]] = None, **kwargs: Any) -> SpecT:
    """Construct a pydantic spec, converting validation failures.

    Args:
        cls: Spec class.
        values: Field values, merged under ``kwargs``.
        **kwargs: Field values.

    Returns:
        Validated spec.

    Raises:
        ConfigurationError: If validation fails; the message names the offending fields.
    """
    merged = {**(values or {}), **kwargs}
    try:
        return cls(**merged)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in error['loc']) or cls.__name__}: {error['msg']}"
            for error in e.errors()
        )
        raise ConfigurationError(f"Invalid {cls.__name__}: {problems}") from e
    except TypeError as e:
        raise ConfigurationError(f"Invalid {cls.__name__}: {e}") from e


@dataclasses.dataclass(frozen=True)
class TargetSet:
    """Reference parameter pairs (theta(0), theta_bar(T)) for terminal-misfit augmentation.

    Attributes:
        initial: Starting parameters, shape (S, m).
        final: Reference parameters at ``horizon``, shape (S, m).
        horizon: Time T the references were advanced to.
        residuals: Per-step normal-equation residuals recorded while generating, shape (S, steps).
    """

    initial: np.ndarray
    final: np.ndarray
    horizon: float
    residuals: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.initial.shape != self.final.shape or self.initial.ndim != 2:
            raise ConfigurationError(
                f"Target pairs must be two (S, m) arrays, got {self.initial.shape} "
                f"and {self.final.shape}"
            )

    def __len__(self) -> int:
        return int(self.initial.shape[0])
