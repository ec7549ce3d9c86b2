"""Deterministic ODE integrators and an Euler-Maruyama integrator for controlled diffusions.

Fields are called as ``f(t, y)`` on arrays of any shape. Every integrator returns a
:class:`Trajectory` that can be queried at arbitrary times: DOPRI5 through its 4th-order
continuous extension, fixed-step solvers through cubic Hermite interpolation.
"""

import dataclasses
import logging
from collections.abc import Callable
from typing import Optional

import numpy as np

from romcontrol.exceptions import ConfigurationError, SolverError, TrajectoryEscapeError
from romcontrol.types import SolverKind, SolverSpec

Field = Callable[[float, np.ndarray], np.ndarray]
Drift = Callable[[np.ndarray, float], np.ndarray]

# Dormand-Prince 5(4) tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B_HAT = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B - _B_HAT
# Continuous extension coefficients.
_D = np.array(
    [
        -12715105075 / 11282082432,
        0.0,
        87487479700 / 32700410799,
        -10690763975 / 1880347072,
        701980252875 / 199316789632,
        -1453857185 / 822651844,
        69997945 / 29380423,
    ]
)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
PI_ALPHA = 0.7 / 5
PI_BETA = 0.4 / 5


@dataclasses.dataclass
class SolverStats:
    """Work counters of one integration."""

    steps: int = 0
    accepted: int = 0
    rejected: int = 0
    evaluations: int = 0
    error_norms: list[float] = dataclasses.field(default_factory=list)

    def describe(self) -> dict[str, float]:
        return {
            "steps": self.steps,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "evaluations": self.evaluations,
            "max_error_norm": max(self.error_norms, default=0.0),
        }


@dataclasses.dataclass
class Trajectory:
    """States at strictly increasing times.

    Attributes:
        times: Shape (K,).
        states: Shape (K, *state_shape).
        derivatives: Field values at ``times``, same shape as ``states``.
        stats: Work counters.
        dense: DOPRI5 interpolation coefficients per step, shape (K - 1, 5, *state_shape),
            or None for Hermite interpolation.
    """

    times: np.ndarray
    states: np.ndarray
    derivatives: np.ndarray
    stats: SolverStats
    dense: Optional[np.ndarray] = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def at(self, t: float) -> np.ndarray:
        """State at time ``t`` inside the integrated span.

        Raises:
            ConfigurationError: If ``t`` is outside the span.
        """
        t0, t1 = float(self.times[0]), float(self.times[-1])
        if not (min(t0, t1) - 1e-12 <= t <= max(t0, t1) + 1e-12):
            raise ConfigurationError(f"t={t} outside the integrated span [{t0}, {t1}]")
        if len(self.times) == 1:
            return self.states[0].copy()
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        h = self.times[k + 1] - self.times[k]
        s = (t - self.times[k]) / h
        if self.dense is not None:
            r1, r2, r3, r4, r5 = self.dense[k]
            return np.asarray(r1 + s * (r2 + (1 - s) * (r3 + s * (r4 + (1 - s) * r5))))
        y0, y1 = self.states[k], self.states[k + 1]
        f0, f1 = self.derivatives[k], self.derivatives[k + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return np.asarray(h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1)


def _check_finite(y: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(y)):
        raise TrajectoryEscapeError("State left the finite range", t)


def euler_step(f: Field, t: float, y: np.ndarray, h: float, k1: np.ndarray) -> np.ndarray:
    return y + h * k1


def rk4_step(f: Field, t: float, y: np.ndarray, h: float, k1: np.ndarray) -> np.ndarray:
    """One classical Runge-Kutta step given the field value ``k1`` at (t, y)."""
    k2 = f(t + h / 2, y + h / 2 * k1)
    k3 = f(t + h / 2, y + h / 2 * k2)
    k4 = f(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _fixed(
    f: Field, y0: np.ndarray, t0: float, t1: float, steps: int, kind: SolverKind
) -> Trajectory:
    step = rk4_step if kind is SolverKind.RK4 else euler_step
    per_step = 4 if kind is SolverKind.RK4 else 1
    times = np.linspace(t0, t1, steps + 1)
    states = [np.array(y0, dtype=np.float64)]
    derivatives = [np.asarray(f(t0, states[0]))]
    stats = SolverStats(evaluations=1)
    for k in range(steps):
        h = times[k + 1] - times[k]
        y = step(f, times[k], states[-1], h, derivatives[-1])
        _check_finite(y, times[k + 1])
        states.append(y)
        derivatives.append(np.asarray(f(times[k + 1], y)))
        stats.steps += 1
        stats.accepted += 1
        stats.evaluations += per_step
    return Trajectory(times, np.stack(states), np.stack(derivatives), stats)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def _initial_step(
    f: Field, t0: float, y0: np.ndarray, f0: np.ndarray, span: float, rtol: float, atol: float
) -> float:
    scale = atol + rtol * np.abs(y0)
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = f(t0 + h0, y0 + h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def _dopri5(
    f: Field,
    y0: np.ndarray,
    t0: float,
    t1: float,
    spec: SolverSpec,
    log: Optional[logging.Logger],
) -> Trajectory:
    y = np.array(y0, dtype=np.float64)
    span = t1 - t0
    t = t0
    k1 = np.asarray(f(t, y))
    stats = SolverStats(evaluations=1)
    times, states, derivatives, dense = [t], [y], [k1], []
    if span == 0:
        return Trajectory(np.array(times), np.stack(states), np.stack(derivatives), stats, None)
    h = _initial_step(f, t, y, k1, span, spec.rtol, spec.atol)
    stats.evaluations += 1
    previous_error = 1e-4
    while t < t1:
        if stats.steps >= spec.max_steps:
            raise SolverError(f"DOPRI5 exceeded {spec.max_steps} steps at t={t:.6g}")
        h = min(h, t1 - t)
        if h <= 1e-14 * max(1.0, abs(t)):
            raise SolverError(f"DOPRI5 step size underflow at t={t:.6g}")
        stages = [k1]
        for i in range(1, 7):
            increment = sum(a * k for a, k in zip(_A[i], stages))
            stages.append(np.asarray(f(t + _C[i] * h, y + h * increment)))
        y_new = y + h * sum(b * k for b, k in zip(_B, stages) if b != 0.0)
        stats.evaluations += 6
        stats.steps += 1
        scale = spec.atol + spec.rtol * np.maximum(np.abs(y), np.abs(y_new))
        error = _rms(h * sum(e * k for e, k in zip(_E, stages) if e != 0.0) / scale)
        if not np.isfinite(error) or not np.all(np.isfinite(y_new)):
            stats.rejected += 1
            h *= MIN_FACTOR
            continue
        if error <= 1.0:
            k7 = stages[6]
            diff = y_new - y
            bspl = h * k1 - diff
            dense.append(
                np.stack(
                    [
                        y,
                        diff,
                        bspl,
                        diff - h * k7 - bspl,
                        h * sum(d * k for d, k in zip(_D, stages)),
                    ]
                )
            )
            t = t1 if t1 - (t + h) <= 1e-14 * max(1.0, abs(t1)) else t + h
            y, k1 = y_new, k7
            times.append(t)
            states.append(y)
            derivatives.append(k1)
            stats.accepted += 1
            stats.error_norms.append(error)
            if log is not None:
                log.debug("DOPRI5 accepted t={0:.6g} h={1:.3g} err={2:.3g}", t, h, error)
            factor = SAFETY * max(error, 1e-10) ** -PI_ALPHA * previous_error**PI_BETA
            h *= float(np.clip(factor, MIN_FACTOR, MAX_FACTOR))
            previous_error = max(error, 1e-4)
        else:
            stats.rejected += 1
            h *= max(MIN_FACTOR, SAFETY * error ** (-1 / 5))
    return Trajectory(
        np.array(times), np.stack(states), np.stack(derivatives), stats, np.stack(dense)
    )


def integrate(
    f: Field,
    y0: np.ndarray,
    span: tuple[float, float],
    spec: SolverSpec,
    log: Optional[logging.Logger] = None,
) -> Trajectory:
    """Integrate y' = f(t, y) from ``span[0]`` to ``span[1]``.

    Args:
        f: Field.
        y0: Initial state, any shape.
        span: ``(t0, t1)`` with ``t1 >= t0``.
        spec: Solver selection and tolerances.
        log: Optional logger for per-step diagnostics.

    Returns:
        States at the accepted time points.

    Raises:
        ConfigurationError: If the span is not finite or runs backward.
        SolverError: If DOPRI5 exceeds its step budget or its step underflows.
        TrajectoryEscapeError: If a fixed-step state becomes NaN or infinite.
    """
    t0, t1 = float(span[0]), float(span[1])
    if not (np.isfinite(t0) and np.isfinite(t1)) or t1 < t0:
        raise ConfigurationError(f"Invalid integration span {span}")
    if spec.kind is SolverKind.DOPRI5:
        return _dopri5(f, y0, t0, t1, spec, log)
    return _fixed(f, y0, t0, t1, spec.steps, spec.kind)


@dataclasses.dataclass
class PathEnsemble:
    """Euler-Maruyama sample paths.

    Attributes:
        times: Recorded times, shape (R,).
        states: Positions at recorded times, shape (R, *x0.shape).
        control_cost: Accumulated 0.5 * integral |drift|^2 dt per path, shape x0.shape[:-1].
    """

    times: np.ndarray
    states: np.ndarray
    control_cost: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def euler_maruyama(
    drift: Drift,
    epsilon: float,
    x0: np.ndarray,
    dt: float,
    horizon: float,
    rng: np.random.Generator,
    record_every: int = 0,
) -> PathEnsemble:
    """Simulate dX = drift(X, t) dt + sqrt(2 epsilon) dW.

    Args:
        drift: Control, mapping positions (..., d) and a time to velocities (..., d).
        epsilon: Diffusion parameter; the noise amplitude is sqrt(2 epsilon).
        x0: Starting positions, shape (..., d); every leading index is one path.
        dt: Step size. The last step is shortened to land on ``horizon``.
        horizon: Final time T.
        rng: Random generator.
        record_every: Record every this many steps (0 records only start and end).

    Returns:
        Recorded positions and the running control cost of every path.

    Raises:
        ConfigurationError: If ``dt`` or ``epsilon`` is invalid.
        TrajectoryEscapeError: If the drift produces NaN or infinite values.
    """
    if dt <= 0 or epsilon < 0 or horizon < 0:
        raise ConfigurationError("Euler-Maruyama needs dt > 0, epsilon >= 0 and T >= 0")
    x = np.array(x0, dtype=np.float64)
    amplitude = np.sqrt(2.0 * epsilon)
    cost = np.zeros(x.shape[:-1])
    times, states = [0.0], [x.copy()]
    t = 0.0
    step = 0
    while t < horizon - 1e-12:
        h = min(dt, horizon - t)
        velocity = np.asarray(drift(x, t))
        if not np.all(np.isfinite(velocity)):
            raise TrajectoryEscapeError("Drift left the finite range", t)
        cost += 0.5 * np.sum(velocity * velocity, axis=-1) * h
        x = x + velocity * h + amplitude * np.sqrt(h) * rng.standard_normal(x.shape)
        t += h
        step += 1
        if record_every and step % record_every == 0:
            times.append(t)
            states.append(x.copy())
    if times[-1] != t:
        times.append(t)
        states.append(x.copy())
    return PathEnsemble(np.array(times), np.stack(states), cost)
