"""Reference solutions, augmentation targets and error curves.

- Heat equation: Monte-Carlo heat-kernel convolution, single Fourier modes in closed form, and
  a spectral solver for periodic initial conditions on [-1, 1]^d.
- Scalar conservation law u_t = speed * d/dy tanh(u) in one dimension: first-order upwind.
- Viscous HJB: Cole-Hopf formula by importance-sampled log-mean-exp.
- Time marching of model parameters through the normal equations of the residual.
"""

import dataclasses
import itertools
import logging
import sys
from collections.abc import Callable, Sequence
from typing import Optional

import enlighten
import numpy as np
from scipy import linalg, special

from romcontrol import pde, rom
from romcontrol.exceptions import CFLError, ConfigurationError, SingularSystemError
from romcontrol.types import TargetSet

Field = Callable[[np.ndarray], np.ndarray]
TimeField = Callable[[np.ndarray, float], np.ndarray]

ORACLE_FLOOR = 1e-12


@dataclasses.dataclass(frozen=True)
class Estimate:
    """Monte-Carlo estimate with its standard error."""

    value: np.ndarray
    stderr: np.ndarray


def _points(x: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def heat_exact(
    g: Field, x: np.ndarray, t: float, n_mc: int, rng: np.random.Generator
) -> Estimate:
    """u(x, t) = E[g(y)], y ~ N(x, 2t I), for u_t = Lap u.

    Args:
        g: Initial condition on points (..., d).
        x: Points (P, d) or a single point (d,).
        t: Time, t >= 0. At t = 0 returns g(x) exactly.
        n_mc: Samples per point.
        rng: Random generator.

    Returns:
        Estimate per point, shape (P,).

    Raises:
        ConfigurationError: If ``n_mc < 1`` or ``t < 0``.
    """
    if n_mc < 1 or t < 0:
        raise ConfigurationError("heat_exact needs n_mc >= 1 and t >= 0")
    points = _points(x)
    if t == 0:
        value = np.asarray(g(points), dtype=np.float64)
        return Estimate(value, np.zeros_like(value))
    samples = points[:, None, :] + np.sqrt(2.0 * t) * rng.standard_normal(
        (points.shape[0], n_mc, points.shape[1])
    )
    values = np.asarray(g(samples), dtype=np.float64)
    stderr = values.std(axis=1, ddof=1) / np.sqrt(n_mc) if n_mc > 1 else np.zeros(len(points))
    return Estimate(values.mean(axis=1), stderr)


def heat_mode_exact(
    k: Sequence[float], amplitude: float, x: np.ndarray, t: float
) -> np.ndarray:
    """amplitude * exp(-pi^2 |k|^2 t) * sin(pi k . x)."""
    wave = np.asarray(k, dtype=np.float64)
    decay = np.exp(-(np.pi**2) * float(wave @ wave) * t)
    return np.asarray(amplitude * decay * np.sin(np.pi * (np.asarray(x) @ wave)))


@dataclasses.dataclass(frozen=True)
class SpectralHeat:
    """Heat-equation solution for a 2-periodic initial condition, as a truncated Fourier series.

    Attributes:
        wave_numbers: Integer frequencies per axis, shape (M, d); the basis is exp(i pi k . x).
        coefficients: Complex coefficients at t = 0, shape (M,).
    """

    wave_numbers: np.ndarray
    coefficients: np.ndarray

    def evaluate(self, x: np.ndarray, t: float) -> np.ndarray:
        points = _points(x)
        decay = np.exp(-(np.pi**2) * np.sum(self.wave_numbers**2, axis=1) * t)
        phases = np.exp(1j * np.pi * (points @ self.wave_numbers.T))
        return np.real(phases @ (self.coefficients * decay))


def heat_periodic(g: Field, dim: int, grid: int = 64) -> SpectralHeat:
    """Fourier decomposition of a 2-periodic initial condition sampled on a uniform grid.

    Convolving a periodic function with the free-space heat kernel gives the periodic solution,
    so this agrees with :func:`heat_exact` up to truncation and Monte-Carlo error.

    Args:
        g: Initial condition, 2-periodic in every coordinate.
        dim: Spatial dimension; the grid has ``grid**dim`` points.
        grid: Points per axis.

    Returns:
        The spectral solution.
    """
    axis = -1.0 + 2.0 * np.arange(grid) / grid
    mesh = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1)
    values = np.asarray(g(mesh.reshape(-1, dim)), dtype=np.float64).reshape((grid,) * dim)
    spectrum = np.fft.fftn(values) / grid**dim
    frequencies = np.fft.fftfreq(grid, d=1.0 / grid)
    wave_numbers = np.array(list(itertools.product(frequencies, repeat=dim)))
    # Grid starts at -1, so shift phases to the basis exp(i pi k . x).
    shift = np.exp(1j * np.pi * wave_numbers.sum(axis=1))
    return SpectralHeat(wave_numbers, spectrum.reshape(-1) * shift)


@dataclasses.dataclass(frozen=True)
class UpwindSolution:
    """Space-time grid of the upwind reference.

    Attributes:
        centers: Cell centers on (-1, 1), shape (n_x,).
        times: Recorded times, shape (R,).
        values: Cell averages at recorded times, shape (R, n_x).
    """

    centers: np.ndarray
    times: np.ndarray
    values: np.ndarray

    def at(self, y: np.ndarray, t: float) -> np.ndarray:
        """Periodic linear interpolation in y and linear interpolation in t."""
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1))
        if k == len(self.times) - 1:
            profile = self.values[k]
        else:
            s = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
            profile = (1 - s) * self.values[k] + s * self.values[k + 1]
        wrapped = (np.asarray(y) + 1.0) % 2.0 - 1.0
        extended_x = np.concatenate([self.centers[-1:] - 2.0, self.centers, self.centers[:1] + 2.0])
        extended_u = np.concatenate([profile[-1:], profile, profile[:1]])
        return np.interp(wrapped, extended_x, extended_u)


def upwind_1d(
    g: Field,
    horizon: float,
    n_t: int,
    n_x: int,
    speed: float = 2.0,
    record_every: int = 1,
) -> UpwindSolution:
    """Conservative first-order upwind solution of u_t = speed * d/dy tanh(u) on (-1, 1), periodic.

    The flux f(u) = speed * tanh(u) is nondecreasing, so information travels toward smaller y
    and the update takes the flux difference with the cell to the right.

    Args:
        g: Initial profile on points of shape (n_x,).
        horizon: Final time.
        n_t: Time steps.
        n_x: Cells.
        speed: Flux coefficient, >= 0.
        record_every: Record every this many steps (the final step is always recorded).

    Returns:
        Cell averages on the space-time grid.

    Raises:
        ConfigurationError: If ``speed`` is negative or the grid is empty.
        CFLError: If (T / n_t) * speed > dy; carries the smallest admissible ``n_t``.
    """
    if speed < 0 or n_t < 1 or n_x < 1:
        raise ConfigurationError("upwind_1d needs speed >= 0, n_t >= 1 and n_x >= 1")
    dy = 2.0 / n_x
    dt = horizon / n_t
    # sup of f' = speed * (1 - tanh^2) is speed
    if dt * speed > dy * (1 + 1e-12):
        required = int(np.ceil(horizon * speed / dy))
        raise CFLError(
            f"CFL violated: dt * {speed} = {dt * speed:.4g} > dy = {dy:.4g}; use n_t >= {required}",
            required,
        )
    centers = -1.0 + (np.arange(n_x) + 0.5) * dy
    u = np.asarray(g(centers), dtype=np.float64).copy()
    times, values = [0.0], [u.copy()]
    ratio = dt / dy
    for step in range(1, n_t + 1):
        h = np.tanh(u)
        assert np.all(speed * (1.0 - h * h) >= 0.0)
        flux = speed * h
        u = u + ratio * (np.roll(flux, -1) - flux)
        if step % record_every == 0 or step == n_t:
            times.append(step * dt)
            values.append(u.copy())
    return UpwindSolution(centers, np.array(times), np.stack(values))


def total_variation(u: np.ndarray) -> float:
    """Periodic total variation of a grid profile."""
    return float(np.sum(np.abs(np.roll(u, -1) - u)))


def cole_hopf(
    g: Field,
    x: np.ndarray,
    t: float,
    horizon: float,
    epsilon: float,
    rng: np.random.Generator,
    n_mc: int = 20000,
) -> Estimate:
    """Value function of the viscous HJB equation with terminal cost g at time T.

    u(x, t) = -2 epsilon log E[exp(-g(y) / (2 epsilon))], y ~ N(x, 2 epsilon (T - t) I),
    evaluated with a shifted log-sum-exp.

    Args:
        g: Terminal cost on points (..., d).
        x: Points (P, d) or a single point (d,).
        t: Time in [0, T]. At t = T returns g(x).
        horizon: Terminal time T.
        epsilon: Viscosity, > 0.
        rng: Random generator.
        n_mc: Samples per point.

    Returns:
        Estimate per point, shape (P,). The standard error is the delta-method error of the log.

    Raises:
        ConfigurationError: If epsilon <= 0, t is outside [0, T] or n_mc < 1.
    """
    if epsilon <= 0 or not 0 <= t <= horizon or n_mc < 1:
        raise ConfigurationError("cole_hopf needs epsilon > 0, 0 <= t <= T and n_mc >= 1")
    points = _points(x)
    if t == horizon:
        value = np.asarray(g(points), dtype=np.float64)
        return Estimate(value, np.zeros_like(value))
    samples = points[:, None, :] + np.sqrt(2.0 * epsilon * (horizon - t)) * rng.standard_normal(
        (points.shape[0], n_mc, points.shape[1])
    )
    exponents = -np.asarray(g(samples), dtype=np.float64) / (2.0 * epsilon)
    log_mean = special.logsumexp(exponents, axis=1) - np.log(n_mc)
    shifted = np.exp(exponents - exponents.max(axis=1, keepdims=True))
    relative = np.zeros(len(points))
    if n_mc > 1:
        relative = shifted.std(axis=1, ddof=1) / (np.sqrt(n_mc) * shifted.mean(axis=1))
    return Estimate(-2.0 * epsilon * log_mean, 2.0 * epsilon * relative)


def gaussian_cost(
    weights: Sequence[float], centers: np.ndarray, widths: Sequence[float]
) -> Field:
    """g(x) = sum_i c_i exp(-|x - b_i|^2 / sigma_i^2)."""
    c = np.asarray(weights, dtype=np.float64)
    b = np.asarray(centers, dtype=np.float64)
    sigma = np.asarray(widths, dtype=np.float64)

    def g(x: np.ndarray) -> np.ndarray:
        diff = np.asarray(x)[..., None, :] - b
        return np.asarray(np.sum(c * np.exp(-np.sum(diff**2, axis=-1) / sigma**2), axis=-1))

    return g


def gaussian_cost_params(
    spec: rom.ModelSpec, weights: Sequence[float], centers: np.ndarray, widths: Sequence[float]
) -> rom.ParamVector:
    """Exact Gaussian-mixture parameters of :func:`gaussian_cost`: w = c, a = sqrt(2)/sigma, b."""
    n = len(weights)
    if spec.terms != n:
        raise ConfigurationError(f"Model has {spec.terms} terms, cost has {n}")
    a = np.repeat((np.sqrt(2.0) / np.asarray(widths, dtype=np.float64))[:, None], spec.dim, axis=1)
    parts = {"w": np.asarray(weights, dtype=np.float64), "a": a, "b": np.asarray(centers)}
    return rom.ParamVector(spec.layout.join(parts), spec)


def density_rho(
    spec: rom.ModelSpec, theta: np.ndarray, count: int, rng: np.random.Generator
) -> rom.McBatch:
    """Draw points from the Gaussian-mixture importance density and weight them by 1/rho.

    Raises:
        ConfigurationError: If the model is not a Gaussian mixture or a scale is zero.
    """
    domain = rom.DomainSampler(kind=rom.DomainKind.MODEL_DENSITY)
    values = theta.values if isinstance(theta, rom.ParamVector) else theta
    return domain.draw(spec, count, rng, np.asarray(values, dtype=np.float64))


@dataclasses.dataclass(frozen=True)
class GramSystem:
    """Normal equations (G + lambda I) delta = p of the parameter-velocity least-squares problem.

    Attributes:
        gram: Symmetric positive semi-definite matrix, shape (m, m).
        rhs: Shape (m,).
        ridge: lambda >= 0.
    """

    gram: np.ndarray
    rhs: np.ndarray
    ridge: float = 0.0

    @classmethod
    def assemble(
        cls,
        model: rom.ModelSpec,
        operator: pde.OperatorSpec,
        theta: np.ndarray,
        batch: rom.McBatch,
        ridge: float = 0.0,
    ) -> "GramSystem":
        jacobian = rom.family_of(model).grad_theta(theta, batch.points)
        rate = np.asarray(pde.rate(operator, model, theta, batch.points))
        weighted = batch.weights[:, None] * jacobian
        return cls(
            weighted.T @ jacobian / batch.size, weighted.T @ rate / batch.size, ridge
        )

    def solve(self, log: Optional[logging.Logger] = None) -> tuple[np.ndarray, float]:
        """Solve by Cholesky, escalating the ridge by 100x from 1e-8 when the factorization fails.

        Returns:
            The solution and the ridge that was used.

        Raises:
            SingularSystemError: If the system stays singular up to a ridge of 1.
        """
        ridge = self.ridge
        identity = np.eye(len(self.rhs))
        while True:
            try:
                factor = linalg.cho_factor(self.gram + ridge * identity)
                solution = linalg.cho_solve(factor, self.rhs)
                if np.all(np.isfinite(solution)):
                    return solution, ridge
            except linalg.LinAlgError:
                pass
            ridge = 1e-8 if ridge == 0.0 else ridge * 100.0
            if ridge > 1.0:
                raise SingularSystemError("Gram system is singular even with ridge 1")
            if log is not None:
                log.warning("Gram system singular; retrying with ridge {0:.1e}", ridge)


def time_march_targets(
    initials: np.ndarray,
    model: rom.ModelSpec,
    operator: pde.OperatorSpec,
    dt: float,
    n_steps: int,
    ridge: float,
    domain: rom.DomainSampler,
    mc_points: int,
    rng: np.random.Generator,
    log: logging.Logger,
) -> TargetSet:
    """Advance parameters by explicit Euler steps of the least-squares parameter velocity.

    Every step solves (G(theta) + lambda I) delta = p(theta) on a fresh Monte-Carlo batch and sets
    theta <- theta + dt * delta. The normal-equation residual |G delta - p| / |p| is recorded.

    Args:
        initials: Starting parameters, shape (S, m).
        model: Model spec.
        operator: Operator; the forward-time rate is used.
        dt: Step size.
        n_steps: Number of steps; the targets are at T = dt * n_steps.
        ridge: Initial ridge lambda >= 0.
        domain: Monte-Carlo rule; ``model_density`` uses the current parameters.
        mc_points: Points per batch.
        rng: Random generator.
        log: Logger.

    Returns:
        The target pairs with per-step residuals.
    """
    if ridge < 0 or dt <= 0 or n_steps < 1:
        raise ConfigurationError("time marching needs ridge >= 0, dt > 0 and n_steps >= 1")
    initials = np.atleast_2d(np.asarray(initials, dtype=np.float64))
    finals = initials.copy()
    residuals = np.zeros((len(initials), n_steps))
    with enlighten.get_manager(enabled="pytest" not in sys.modules) as manager:
        with manager.counter(
            total=len(initials), desc="Time marching", unit="initials", color="white"
        ) as counter:
            for i, theta in enumerate(finals):
                for step in range(n_steps):
                    batch = domain.draw(
                        model, mc_points, rng, theta if domain.needs_theta else None
                    )
                    system = GramSystem.assemble(model, operator, theta, batch, ridge)
                    delta, used = system.solve(log)
                    norm = max(float(np.linalg.norm(system.rhs)), 1e-300)
                    residuals[i, step] = float(
                        np.linalg.norm(system.gram @ delta - system.rhs)
                    ) / norm
                    log.debug(
                        "Target {0} step {1}: residual {2:.3g} (ridge {3:.1e})",
                        i,
                        step,
                        residuals[i, step],
                        used,
                    )
                    theta = theta + dt * delta
                finals[i] = theta
                counter.update()
    return TargetSet(initials, finals, dt * n_steps, residuals)


@dataclasses.dataclass(frozen=True)
class CurvePoint:
    t: float
    error: float
    valid: bool


@dataclasses.dataclass(frozen=True)
class CurveSummary:
    """Mean and standard deviation of relative errors across initial conditions."""

    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    valid: np.ndarray


def relative_error_curve(
    model: rom.ModelSpec,
    theta_at: Callable[[float], np.ndarray],
    reference: TimeField,
    domain: rom.DomainSampler,
    times: Sequence[float],
    mc_points: int,
    rng: np.random.Generator,
    log: Optional[logging.Logger] = None,
) -> list[CurvePoint]:
    """Relative error |u_theta(t) - u*(t)|^2 / |u*(t)|^2 by Monte Carlo at each time.

    Args:
        model: Model spec.
        theta_at: Parameters at time t, shape (m,).
        reference: Oracle u*(x, t) on points (N, d).
        domain: Monte-Carlo rule; ``model_density`` uses theta(t) as proposal.
        times: Evaluation times.
        mc_points: Points per time.
        rng: Random generator.
        log: Optional logger for invalid points.

    Returns:
        One point per time; points whose oracle norm is below 1e-12 are marked invalid.
    """
    curve = []
    for t in times:
        theta = np.asarray(theta_at(float(t)), dtype=np.float64)
        batch = domain.draw(model, mc_points, rng, theta if domain.needs_theta else None)
        u = rom.evaluate(model, theta, batch.points)
        target = np.asarray(reference(batch.points, float(t)), dtype=np.float64)
        norm = float(np.mean(batch.weights * target**2))
        if norm < ORACLE_FLOOR:
            if log is not None:
                log.warning(
                    "Oracle norm {0:.3g} below floor at t={1}; point marked invalid", norm, t
                )
            curve.append(CurvePoint(float(t), float("nan"), False))
            continue
        error = float(np.mean(batch.weights * (u - target) ** 2)) / norm
        curve.append(CurvePoint(float(t), error, True))
    return curve


def aggregate_curves(curves: Sequence[Sequence[CurvePoint]]) -> CurveSummary:
    """Mean and standard deviation across curves on a shared time grid, ignoring invalid points."""
    times = np.array([p.t for p in curves[0]])
    errors = np.array([[p.error if p.valid else 0.0 for p in curve] for curve in curves])
    mask = np.array([[p.valid for p in curve] for curve in curves])
    counts = mask.sum(axis=0)
    valid = counts > 0
    safe = np.maximum(counts, 1)
    mean = np.sum(errors * mask, axis=0) / safe
    variance = np.sum(mask * (errors - mean) ** 2, axis=0) / safe
    return CurveSummary(
        times, np.where(valid, mean, np.nan), np.where(valid, np.sqrt(variance), np.nan), valid
    )
