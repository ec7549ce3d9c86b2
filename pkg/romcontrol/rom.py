"""Reduced-order models u_theta(x), their parameter samplers, and initial-condition fitting.

Three families are shipped:

- ``periodic_sine_tanh``: ``sum_i c_i tanh(a_i . sin(pi (x - beta)) - b_i)``, 2-periodic in every
  coordinate. Layout ``a (n, d) | b (n) | c (n) | beta (d)``.
- ``gaussian_mixture``: ``sum_i w_i exp(-|a_i * (x - b_i)|^2 / 2)``, decaying at infinity.
  Layout ``w (n) | a (n, d) | b (n, d)``.
- ``sine_series``: ``sum_k c_k sin(pi k . x)`` over fixed integer wave vectors ``k``.
  Layout ``c (n)``.

``evaluate``, ``grad_x`` and ``laplacian`` are written with :mod:`romcontrol.autodiff.ops` so
that parameters may be numpy arrays, traced values or duals. ``grad_theta`` is a separate,
hand-derived numpy path. Parameters are batched as ``(..., m)`` and points as ``(..., N, d)``;
leading axes broadcast against each other.
"""

import dataclasses
import enum
import functools
import json
import logging
from abc import ABC, abstractmethod
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from pydantic import Field, model_validator
from pydantic.dataclasses import dataclass
from scipy import optimize, special

from romcontrol.autodiff import ops
from romcontrol.exceptions import ConfigurationError
from romcontrol.optim import Adam
from romcontrol.types import LAYOUT_VERSION, Layout, ModelFamily

InitialCondition = Callable[[np.ndarray], np.ndarray]

# Oracle norms below this (mean square) are treated as zero.
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of a model family instance.

    Attributes:
        family: Model family.
        dim: Spatial dimension d.
        terms: Term count n (number of modes for ``sine_series``).
        modes: Integer wave vectors for ``sine_series``, one per term.
    """

    family: ModelFamily
    dim: int = Field(ge=1)
    terms: int = Field(ge=1)
    modes: Optional[tuple[tuple[int, ...], ...]] = None

    @model_validator(mode="after")
    def _check_modes(self) -> "ModelSpec":
        if self.modes is None:
            return self
        if self.family is not ModelFamily.SINE_SERIES:
            raise ValueError("modes only apply to the sine_series family")
        if len(self.modes) != self.terms or any(len(k) != self.dim for k in self.modes):
            raise ValueError(f"modes must be {self.terms} integer vectors of length {self.dim}")
        return self

    @property
    def layout(self) -> Layout:
        return _layout(self.family, self.dim, self.terms)

    @property
    def n_params(self) -> int:
        return self.layout.size

    def wave_vectors(self) -> np.ndarray:
        """Wave vectors of a ``sine_series`` model, shape (n, d).

        Defaults to ``(1 + i // d) e_(i mod d)``.
        """
        if self.modes is not None:
            return np.array(self.modes, dtype=np.float64)
        vectors = np.zeros((self.terms, self.dim))
        for i in range(self.terms):
            vectors[i, i % self.dim] = 1 + i // self.dim
        return vectors

    def describe(self) -> dict[str, Any]:
        return {
            "family": self.family.value,
            "dim": self.dim,
            "terms": self.terms,
            "modes": None if self.modes is None else [list(k) for k in self.modes],
            "layout_version": LAYOUT_VERSION,
        }


@functools.lru_cache(maxsize=None)
def _layout(family: ModelFamily, dim: int, terms: int) -> Layout:
    if family is ModelFamily.PERIODIC_SINE_TANH:
        return Layout.of(("a", (terms, dim)), ("b", (terms,)), ("c", (terms,)), ("beta", (dim,)))
    if family is ModelFamily.GAUSSIAN_MIXTURE:
        return Layout.of(("w", (terms,)), ("a", (terms, dim)), ("b", (terms, dim)))
    return Layout.of(("c", (terms,)))


@dataclasses.dataclass(frozen=True)
class ParamVector:
    """Model parameters theta with the spec they belong to."""

    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.spec.n_params,):
            raise ConfigurationError(
                f"{self.spec.family.value} with d={self.spec.dim}, n={self.spec.terms} needs "
                f"{self.spec.n_params} parameters, got shape {values.shape}"
            )
        object.__setattr__(self, "values", values)

    def blocks(self) -> dict[str, np.ndarray]:
        return self.spec.layout.split(self.values)

    def save(self, path: Union[str, Path], metadata: Optional[dict[str, Any]] = None) -> None:
        """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.values.astype("<f8").tofile(path.with_suffix(".bin"))
        manifest = {**self.spec.describe(), **(metadata or {})}
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ParamVector":
        """Read a vector written by :meth:`save`.

        Raises:
            ConfigurationError: If the manifest is unreadable or disagrees with the data.
        """
        path = Path(path)
        try:
            manifest = json.loads(path.with_suffix(".json").read_text())
            spec = ModelSpec(
                family=ModelFamily(manifest["family"]),
                dim=manifest["dim"],
                terms=manifest["terms"],
                modes=(
                    None if manifest.get("modes") is None else tuple(map(tuple, manifest["modes"]))
                ),
            )
            values = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        except (OSError, KeyError, ValueError) as e:
            raise ConfigurationError(f"Cannot read parameter vector {path}: {e}") from e
        if manifest.get("layout_version", LAYOUT_VERSION) != LAYOUT_VERSION:
            raise ConfigurationError(f"Unsupported layout version in {path}")
        return cls(values, spec)


class Family(ABC):
    """Evaluation rules of one model family."""

    max_derivative_order = 2

    def __init__(self, spec: ModelSpec) -> None:
        self.spec = spec
        self.layout = spec.layout

    @abstractmethod
    def evaluate(self, theta: Any, x: Any) -> Any:
        """u_theta(x), shape (..., N)."""

    @abstractmethod
    def grad_x(self, theta: Any, x: Any) -> Any:
        """Spatial gradient, shape (..., N, d)."""

    @abstractmethod
    def laplacian(self, theta: Any, x: Any) -> Any:
        """Spatial Laplacian, shape (..., N)."""

    @abstractmethod
    def grad_theta(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Parameter gradient, shape (..., N, m). numpy only."""


class PeriodicSineTanh(Family):
    def _terms(self, theta: Any, x: Any) -> tuple[dict[str, Any], Any, Any, Any]:
        p = self.layout.split(theta)
        shifted = np.pi * (x - ops.expand_dims(p["beta"], -2))
        s = ops.sin(shifted)
        h = ops.tanh(s @ ops.transpose(p["a"]) - ops.expand_dims(p["b"], -2))
        return p, shifted, s, h

    def evaluate(self, theta: Any, x: Any) -> Any:
        p, _, _, h = self._terms(theta, x)
        return ops.sum(h * ops.expand_dims(p["c"], -2), axis=-1)

    def grad_x(self, theta: Any, x: Any) -> Any:
        p, shifted, _, h = self._terms(theta, x)
        weights = ops.expand_dims(p["c"], -2) * (1.0 - h * h)
        return np.pi * (weights @ p["a"]) * ops.cos(shifted)

    def laplacian(self, theta: Any, x: Any) -> Any:
        p, shifted, s, h = self._terms(theta, x)
        cos = ops.cos(shifted)
        a_t = ops.transpose(p["a"])
        curvature = (cos * cos) @ (a_t * a_t)
        slope = s @ a_t
        weights = ops.expand_dims(p["c"], -2) * (1.0 - h * h)
        return np.pi**2 * ops.sum(weights * (-2.0 * h * curvature - slope), axis=-1)

    def grad_theta(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        p, shifted, s, h = self._terms(theta, x)
        weights = p["c"][..., None, :] * (1.0 - h * h)
        parts = {
            "a": weights[..., :, None] * s[..., None, :],
            "b": -weights,
            "c": h,
            "beta": -np.pi * (weights @ p["a"]) * np.cos(shifted),
        }
        return self.layout.join(parts, h.shape[:-1])


class GaussianMixture(Family):
    def _terms(self, theta: Any, x: Any) -> tuple[dict[str, Any], Any, Any, Any]:
        p = self.layout.split(theta)
        diff = ops.expand_dims(x, -2) - ops.expand_dims(p["b"], -3)
        scale = ops.expand_dims(p["a"], -3)
        scaled = scale * diff
        bumps = ops.exp(-0.5 * ops.sum(scaled * scaled, axis=-1))
        return p, diff, scale, bumps

    def evaluate(self, theta: Any, x: Any) -> Any:
        p, _, _, bumps = self._terms(theta, x)
        return ops.sum(ops.expand_dims(p["w"], -2) * bumps, axis=-1)

    def grad_x(self, theta: Any, x: Any) -> Any:
        p, diff, scale, bumps = self._terms(theta, x)
        weighted = ops.expand_dims(ops.expand_dims(p["w"], -2) * bumps, -1)
        return -ops.sum(weighted * (scale * scale) * diff, axis=-2)

    def laplacian(self, theta: Any, x: Any) -> Any:
        p, diff, scale, bumps = self._terms(theta, x)
        squared = scale * scale
        inner = ops.sum(squared * squared * diff * diff, axis=-1) - ops.sum(squared, axis=-1)
        return ops.sum(ops.expand_dims(p["w"], -2) * bumps * inner, axis=-1)

    def grad_theta(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        p, diff, scale, bumps = self._terms(theta, x)
        weighted = (p["w"][..., None, :] * bumps)[..., None]
        parts = {
            "w": bumps,
            "a": -weighted * scale * diff * diff,
            "b": weighted * scale * scale * diff,
        }
        return self.layout.join(parts, bumps.shape[:-1])

    def log_density(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """log rho(x; theta) for the mixture of N(b_i, diag(a_i)^-2) with equal weights.

        Args:
            theta: Parameters, shape (..., m).
            x: Points, shape (..., N, d).

        Returns:
            Log density, shape (..., N).

        Raises:
            ConfigurationError: If any scale a_ij is zero.
        """
        p, diff, scale, _ = self._terms(theta, x)
        if np.any(p["a"] == 0.0):
            raise ConfigurationError("Importance density needs nonzero scales a_i")
        scaled = scale * diff
        log_norm = np.sum(np.log(np.abs(p["a"])), axis=-1) - 0.5 * self.spec.dim * np.log(2 * np.pi)
        component = log_norm[..., None, :] - 0.5 * np.sum(scaled * scaled, axis=-1)
        return special.logsumexp(component, axis=-1) - np.log(self.spec.terms)

    def sample_density(
        self, theta: np.ndarray, count: int, rng: np.random.Generator
    ) -> np.ndarray:
        """Draw ``count`` points per parameter row from rho(x; theta), shape (..., count, d)."""
        p = self.layout.split(theta)
        if np.any(p["a"] == 0.0):
            raise ConfigurationError("Importance density needs nonzero scales a_i")
        batch = p["w"].shape[:-1]
        components = rng.integers(0, self.spec.terms, size=batch + (count,))
        centers = np.take_along_axis(p["b"], components[..., None], axis=-2)
        scales = np.take_along_axis(p["a"], components[..., None], axis=-2)
        noise = rng.standard_normal(batch + (count, self.spec.dim))
        return centers + noise / scales


class SineSeries(Family):
    def __init__(self, spec: ModelSpec) -> None:
        super().__init__(spec)
        self.wave_vectors = spec.wave_vectors()
        self.wave_norms = np.sum(self.wave_vectors**2, axis=-1)

    def _phase(self, x: Any) -> Any:
        return np.pi * (x @ self.wave_vectors.T)

    def evaluate(self, theta: Any, x: Any) -> Any:
        c = ops.expand_dims(self.layout.split(theta)["c"], -2)
        return ops.sum(c * ops.sin(self._phase(x)), axis=-1)

    def grad_x(self, theta: Any, x: Any) -> Any:
        c = ops.expand_dims(self.layout.split(theta)["c"], -2)
        return np.pi * ((c * ops.cos(self._phase(x))) @ self.wave_vectors)

    def laplacian(self, theta: Any, x: Any) -> Any:
        c = ops.expand_dims(self.layout.split(theta)["c"], -2)
        return -(np.pi**2) * ops.sum(c * self.wave_norms * ops.sin(self._phase(x)), axis=-1)

    def grad_theta(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        basis = np.sin(self._phase(x))
        shape = np.broadcast_shapes(np.shape(theta)[:-1] + (1, 1), basis.shape)
        return np.broadcast_to(basis, shape).copy()


_FAMILIES: dict[ModelFamily, type[Family]] = {
    ModelFamily.PERIODIC_SINE_TANH: PeriodicSineTanh,
    ModelFamily.GAUSSIAN_MIXTURE: GaussianMixture,
    ModelFamily.SINE_SERIES: SineSeries,
}


@functools.lru_cache(maxsize=64)
def family_of(spec: ModelSpec) -> Family:
    return _FAMILIES[spec.family](spec)


def _theta(theta: Any) -> Any:
    return theta.values if isinstance(theta, ParamVector) else theta


def _points(spec: ModelSpec, x: Any) -> tuple[Any, bool]:
    if not ops.is_plain(x):
        return x, False
    points = np.asarray(x, dtype=np.float64)
    if points.shape[-1:] != (spec.dim,):
        raise ConfigurationError(f"Expected points in R^{spec.dim}, got shape {points.shape}")
    if points.ndim == 1:
        return points[None, :], True
    return points, False


def _call(method: str, spec: ModelSpec, theta: Any, x: Any) -> Any:
    points, single = _points(spec, x)
    out = getattr(family_of(spec), method)(_theta(theta), points)
    if not single:
        return out
    return out[..., 0, :] if method in ("grad_x", "grad_theta") else out[..., 0]


def evaluate(spec: ModelSpec, theta: Any, x: Any) -> Any:
    """u_theta(x).

    Args:
        spec: Model spec.
        theta: Parameters, shape (..., m), or a :class:`ParamVector`.
        x: A point (d,) or points (..., N, d).

    Returns:
        Values, shape (...) for a single point or (..., N).
    """
    return _call("evaluate", spec, theta, x)


def grad_x(spec: ModelSpec, theta: Any, x: Any) -> Any:
    return _call("grad_x", spec, theta, x)


def laplacian(spec: ModelSpec, theta: Any, x: Any) -> Any:
    return _call("laplacian", spec, theta, x)


def grad_theta(spec: ModelSpec, theta: Any, x: Any) -> np.ndarray:
    """Analytic parameter gradient, shape (..., m) for one point or (..., N, m)."""
    return np.asarray(_call("grad_theta", spec, np.asarray(_theta(theta), dtype=np.float64), x))


class SamplerKind(str, enum.Enum):
    UNIFORM_BALL = "uniform_ball"
    GAUSSIAN = "gaussian"
    UNIFORM_BOX = "uniform_box"
    HYPERBOLIC = "hyperbolic"
    HJB_BOX = "hjb_box"


@dataclass(frozen=True)
class InitSampler:
    """Distribution of initial parameters.

    Attributes:
        kind: Distribution.
        radius: Ball radius for ``uniform_ball``.
        mean: Mean for ``gaussian``.
        variance: Isotropic variance for ``gaussian``.
        low: Lower bound for ``uniform_box``.
        high: Upper bound for ``uniform_box``.
        one_dimensional: ``hyperbolic`` only: zero every column of a except the first.
        shared_beta: ``hyperbolic`` only: fixed shift beta instead of beta ~ N(0, I).
    """

    kind: SamplerKind
    radius: float = Field(default=20.0, gt=0)
    mean: float = 0.0
    variance: float = Field(default=0.5, gt=0)
    low: float = -1.0
    high: float = 1.0
    one_dimensional: bool = False
    shared_beta: Optional[tuple[float, ...]] = None


@dataclass(frozen=True)
class SamplerMixture:
    """Concatenation of several samplers in fixed proportions."""

    components: tuple[InitSampler, ...]
    fractions: tuple[float, ...]

    @model_validator(mode="after")
    def _check(self) -> "SamplerMixture":
        if len(self.components) != len(self.fractions) or not self.components:
            raise ValueError("components and fractions must be nonempty and of equal length")
        if any(f < 0 for f in self.fractions) or sum(self.fractions) <= 0:
            raise ValueError("fractions must be nonnegative with a positive sum")
        return self


Sampler = Union[InitSampler, SamplerMixture]


def _require(spec: ModelSpec, family: ModelFamily, kind: SamplerKind) -> None:
    if spec.family is not family:
        raise ConfigurationError(f"Sampler '{kind.value}' needs a {family.value} model")


def _draw(
    sampler: InitSampler, spec: ModelSpec, count: int, rng: np.random.Generator
) -> np.ndarray:
    m = spec.n_params
    layout = spec.layout
    if sampler.kind is SamplerKind.UNIFORM_BALL:
        directions = rng.standard_normal((count, m))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = sampler.radius * rng.uniform(size=(count, 1)) ** (1.0 / m)
        return directions * radii
    if sampler.kind is SamplerKind.GAUSSIAN:
        return sampler.mean + np.sqrt(sampler.variance) * rng.standard_normal((count, m))
    if sampler.kind is SamplerKind.UNIFORM_BOX:
        return rng.uniform(sampler.low, sampler.high, size=(count, m))
    if sampler.kind is SamplerKind.HYPERBOLIC:
        _require(spec, ModelFamily.PERIODIC_SINE_TANH, sampler.kind)
        n, d = spec.terms, spec.dim
        a = rng.standard_normal((count, n, d))
        if sampler.one_dimensional:
            a[..., 1:] = 0.0
        b = rng.standard_normal((count, n))
        c = rng.standard_normal((count, n))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        if sampler.shared_beta is None:
            beta = rng.standard_normal((count, d))
        else:
            if len(sampler.shared_beta) != d:
                raise ConfigurationError(f"shared_beta must have {d} entries")
            beta = np.broadcast_to(np.asarray(sampler.shared_beta, dtype=np.float64), (count, d))
        return layout.join({"a": a, "b": b, "c": c, "beta": beta}, (count,))
    if sampler.kind is SamplerKind.HJB_BOX:
        _require(spec, ModelFamily.GAUSSIAN_MIXTURE, sampler.kind)
        n, d = spec.terms, spec.dim
        parts = {
            "w": rng.uniform(-1.0, 0.0, size=(count, n)),
            "a": rng.uniform(0.1, 2.0, size=(count, n, d)),
            "b": rng.uniform(-2.0, 2.0, size=(count, n, d)),
        }
        return layout.join(parts, (count,))
    raise ConfigurationError(f"Unknown sampler kind: {sampler.kind}")


def sample_initial_array(
    sampler: Sampler, spec: ModelSpec, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``count`` i.i.d. parameter vectors as an array of shape (count, m).

    Raises:
        ConfigurationError: If ``count < 1``, the sampler kind is unknown, or the sampler does
            not fit the model family.
    """
    if count < 1:
        raise ConfigurationError(f"Sample count must be at least 1, got {count}")
    if isinstance(sampler, InitSampler):
        return _draw(sampler, spec, count, rng)
    total = sum(sampler.fractions)
    counts = [int(np.floor(count * f / total)) for f in sampler.fractions]
    counts[-1] += count - sum(counts)
    parts = [
        _draw(component, spec, n, rng)
        for component, n in zip(sampler.components, counts)
        if n > 0
    ]
    return np.concatenate(parts, axis=0)


def sample_initials(
    sampler: Sampler, spec: ModelSpec, count: int, rng: np.random.Generator
) -> list[ParamVector]:
    return [ParamVector(row, spec) for row in sample_initial_array(sampler, spec, count, rng)]


class DomainKind(str, enum.Enum):
    BOX = "box"
    MODEL_DENSITY = "model_density"


@dataclasses.dataclass(frozen=True)
class McBatch:
    """Monte-Carlo points with their integration weights.

    Attributes:
        points: Shape (N, d), shared by all parameter rows, or (..., N, d).
        weights: Shape (N,) or (..., N). A weighted mean approximates the integral.
    """

    points: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return int(self.points.shape[-2])


@dataclass(frozen=True)
class DomainSampler:
    """How Monte-Carlo points over the spatial domain are drawn.

    ``box`` draws uniformly from ``[low, high]^d`` with weight 1, so integrals use the
    normalized measure. ``model_density`` draws from the importance density rho(x; theta) of a
    Gaussian-mixture model with weights 1/rho, for integrals over all of R^d.
    """

    kind: DomainKind = DomainKind.BOX
    low: float = -1.0
    high: float = 1.0

    @property
    def needs_theta(self) -> bool:
        return self.kind is DomainKind.MODEL_DENSITY

    def draw(
        self,
        spec: ModelSpec,
        count: int,
        rng: np.random.Generator,
        theta: Optional[np.ndarray] = None,
    ) -> McBatch:
        """Draw a Monte-Carlo batch.

        Args:
            spec: Model spec (dimension, and the density family for ``model_density``).
            count: Points per batch (per parameter row for ``model_density``).
            rng: Random generator.
            theta: Parameters (..., m) defining the density; required for ``model_density``.

        Returns:
            The batch.

        Raises:
            ConfigurationError: On an empty batch or a missing density.
        """
        if count < 1:
            raise ConfigurationError("Monte-Carlo batch must contain at least one point")
        if self.kind is DomainKind.BOX:
            points = rng.uniform(self.low, self.high, size=(count, spec.dim))
            return McBatch(points, np.ones(count))
        if theta is None or spec.family is not ModelFamily.GAUSSIAN_MIXTURE:
            raise ConfigurationError("model_density sampling needs Gaussian-mixture parameters")
        family = family_of(spec)
        assert isinstance(family, GaussianMixture)
        theta = np.asarray(theta, dtype=np.float64)
        points = family.sample_density(theta, count, rng)
        return McBatch(points, np.exp(-family.log_density(theta, points)))


@dataclasses.dataclass(frozen=True)
class FitResult:
    """Outcome of :func:`fit_initial`.

    Attributes:
        theta: Best parameters found.
        misfit: Relative L2 misfit on a fresh batch (absolute RMS when g is numerically zero).
        iterations: Optimizer iterations spent.
        success: Whether ``misfit <= tolerance``.
    """

    theta: ParamVector
    misfit: float
    iterations: int
    success: bool


def relative_misfit(u: np.ndarray, target: np.ndarray, weights: np.ndarray) -> float:
    """Weighted relative L2 distance sqrt(sum w (u - g)^2 / sum w g^2)."""
    error = float(np.sum(weights * (u - target) ** 2))
    norm = float(np.sum(weights * target**2))
    if norm / max(float(np.sum(weights)), 1e-300) < NORM_FLOOR:
        return float(np.sqrt(error / float(np.sum(weights))))
    return float(np.sqrt(error / norm))


def fit_initial(
    spec: ModelSpec,
    g: InitialCondition,
    domain: DomainSampler,
    tolerance: float,
    budget: int,
    rng: np.random.Generator,
    log: logging.Logger,
    initial: Optional[ParamVector] = None,
    learning_rate: float = 1e-2,
    samples: int = 4096,
    resample_every: int = 100,
    refine: bool = True,
) -> FitResult:
    """Fit model parameters to an initial condition by minimizing the empirical L2 misfit.

    Runs Adam on fixed Monte-Carlo batches, resampled every ``resample_every`` steps, then
    optionally polishes with a trust-region least-squares solve on one batch.

    Args:
        spec: Model spec.
        g: Initial condition, mapping points (N, d) to values (N,).
        domain: Monte-Carlo rule. ``model_density`` uses the current parameters as proposal.
        tolerance: Target relative misfit.
        budget: Maximum Adam iterations.
        rng: Random generator.
        log: Logger.
        initial: Starting parameters; defaults to a small Gaussian draw.
        learning_rate: Adam step size.
        samples: Points per batch.
        resample_every: Batch refresh period.
        refine: Whether to run the least-squares polish.

    Returns:
        Best parameters with their misfit on a fresh batch. Failure is reported, not raised.

    Raises:
        ConfigurationError: If the budget is not positive.
    """
    if budget < 1:
        raise ConfigurationError("Fit budget must be positive")
    family = family_of(spec)
    if initial is None:
        theta = 0.1 * rng.standard_normal(spec.n_params)
        if spec.family is ModelFamily.GAUSSIAN_MIXTURE:
            theta = sample_initial_array(InitSampler(kind=SamplerKind.HJB_BOX), spec, 1, rng)[0]
    else:
        theta = initial.values.copy()

    def draw() -> tuple[McBatch, np.ndarray]:
        batch = domain.draw(spec, samples, rng, theta if domain.needs_theta else None)
        return batch, np.asarray(g(batch.points), dtype=np.float64)

    def misfit(params: np.ndarray, batch: McBatch, target: np.ndarray) -> float:
        return relative_misfit(family.evaluate(params, batch.points), target, batch.weights)

    batch, target = draw()
    best = theta.copy()
    best_misfit = misfit(theta, batch, target)
    if best_misfit <= tolerance:
        log.debug("Initial parameters already fit to {0:.3g}", best_misfit)
        return FitResult(ParamVector(theta, spec), best_misfit, 0, True)

    optimizer = Adam(learning_rate=learning_rate)
    iterations = 0
    for iterations in range(1, budget + 1):
        if iterations % resample_every == 0:
            current = misfit(theta, batch, target)
            if current < best_misfit:
                best, best_misfit = theta.copy(), current
            log.debug("Fit iteration {0}: misfit {1:.3g}", iterations, current)
            if current <= tolerance:
                break
            batch, target = draw()
        residual = family.evaluate(theta, batch.points) - target
        jacobian = family.grad_theta(theta, batch.points)
        grad = 2.0 * np.mean((batch.weights * residual)[:, None] * jacobian, axis=0)
        theta = optimizer.step(theta, grad)
    if not np.all(np.isfinite(theta)):
        theta = best
    current = misfit(theta, batch, target)
    if current < best_misfit:
        best, best_misfit = theta.copy(), current

    if refine and best_misfit > tolerance:
        sqrt_weights = np.sqrt(batch.weights / batch.size)

        def residuals(params: np.ndarray) -> np.ndarray:
            return np.asarray(sqrt_weights * (family.evaluate(params, batch.points) - target))

        def jacobian(params: np.ndarray) -> np.ndarray:
            return np.asarray(sqrt_weights[:, None] * family.grad_theta(params, batch.points))

        solution = optimize.least_squares(residuals, best, jac=jacobian, method="trf", max_nfev=200)
        if np.all(np.isfinite(solution.x)):
            refined = misfit(solution.x, batch, target)
            log.debug("Least-squares polish: misfit {0:.3g} -> {1:.3g}", best_misfit, refined)
            if refined < best_misfit:
                best = solution.x

    theta = best
    fresh, fresh_target = draw()
    final = misfit(best, fresh, fresh_target)
    success = final <= tolerance
    if not success:
        log.warning("Initial fit reached misfit {0:.3g} above tolerance {1:.3g}", final, tolerance)
    return FitResult(ParamVector(best, spec), final, iterations, success)


def as_initial_condition(
    spec: ModelSpec, theta: Union[ParamVector, np.ndarray]
) -> InitialCondition:
    """Wrap known parameters as an initial condition g(x) = u_theta(x)."""
    values = _theta(theta)
    return lambda x: np.asarray(evaluate(spec, values, x))


def stack(params: Sequence[ParamVector]) -> np.ndarray:
    return np.stack([p.values for p in params])
