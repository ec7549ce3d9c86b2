"""Training the control field.

The running cost of a parameter point is the Monte-Carlo residual of the parameter dynamics,

    r(theta; xi) = mean_n w_n (grad_theta u_theta(x_n) . V_xi(theta) - rate[u_theta](x_n))^2,

where ``rate`` is F, or -F for an operator posed backward in time. Trajectories carry the
augmented state ``[theta; s]`` with ``s' = r``, so the loss of one trajectory is ``s(T)``.

Gradients with respect to xi come from the continuous adjoint, integrated backward with
checkpointed forward states (:func:`adjoint_gradient`). :func:`unrolled_gradient` backpropagates
through the same fixed-step RK4 rollout on the tape and is the independent second path.
"""

import dataclasses
import enum
import logging
import sys
import time
from collections.abc import Callable
from typing import Any, Optional

import enlighten
import numpy as np
from pydantic import Field
from pydantic.dataclasses import dataclass

from romcontrol import control, pde, rom
from romcontrol.autodiff import ops
from romcontrol.autodiff.dual import Dual, jvp, tangent_of
from romcontrol.autodiff.tape import trace, vjp
from romcontrol.exceptions import ConfigurationError, DivergenceError, TrajectoryEscapeError
from romcontrol.odesolve import Trajectory, integrate, rk4_step
from romcontrol.optim import Adam
from romcontrol.types import ResidualNorm, SolverSpec, TargetSet

THETA_TAG = 1
SPACE_TAG = 2

# Terminal-misfit denominators below this are clamped.
MISFIT_FLOOR = 1e-8


@dataclasses.dataclass(frozen=True)
class ControlProblem:
    """Everything that defines the running cost apart from xi and the Monte-Carlo batch."""

    model: rom.ModelSpec
    operator: pde.OperatorSpec
    control: control.ControlNetSpec
    domain: rom.DomainSampler = rom.DomainSampler()
    residual_norm: ResidualNorm = ResidualNorm.L2

    def __post_init__(self) -> None:
        if self.control.dim != self.model.n_params:
            raise ConfigurationError(
                f"Control net dimension {self.control.dim} does not match the model's "
                f"{self.model.n_params} parameters"
            )
        pde.check_pairing(self.operator, self.model)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and sampling settings.

    Attributes:
        iterations: Maximum optimizer steps.
        batch_size: Trajectories per step (K), drawn from the pool.
        pool_size: Initial parameters in the training pool (M).
        mc_points: Monte-Carlo points per step (per trajectory for importance sampling).
        horizon: Final time T.
        steps: RK4 steps per rollout.
        learning_rate: Adam step size.
        beta1: Adam first-moment decay.
        beta2: Adam second-moment decay.
        stall_window: Window of the stalled-progress test.
        stall_tolerance: Stop once the moving-average loss decreases by less than this fraction
            per step. None disables the test.
        min_iterations: Iterations before the stalled-progress test may stop training.
        loss_tolerance: Stop once the loss falls below this value. None disables it.
        target_batch_size: Augmentation pairs per step; defaults to ``batch_size``.
        augmentation_weight: Weight of the augmentation loss.
        misfit_weight: Weight of the terminal misfit inside the augmentation loss.
        checkpoint_every: Period of intermediate checkpoints; 0 disables them.
    """

    iterations: int = Field(default=10000, ge=1)
    batch_size: int = Field(default=100, ge=1)
    pool_size: int = Field(default=10000, ge=1)
    mc_points: int = Field(default=1024, ge=1)
    horizon: float = Field(default=0.1, ge=0)
    steps: int = Field(default=20, ge=1)
    learning_rate: float = Field(default=5e-4, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    stall_window: int = Field(default=20, ge=1)
    stall_tolerance: Optional[float] = 1e-3
    min_iterations: int = Field(default=200, ge=0)
    loss_tolerance: Optional[float] = None
    target_batch_size: Optional[int] = None
    augmentation_weight: float = Field(default=1.0, ge=0)
    misfit_weight: float = Field(default=1.0, ge=0)
    checkpoint_every: int = Field(default=0, ge=0)


def residual(problem: ControlProblem, theta: Any, v: Any, x: Any) -> Any:
    """Pointwise residual grad_theta u . v - rate[u], shape (..., N)."""
    family = rom.family_of(problem.model)
    _, dudt = jvp(lambda th: family.evaluate(th, x), theta, v, tag=THETA_TAG)
    return dudt - pde.rate(problem.operator, problem.model, theta, x)


def residual_cost(problem: ControlProblem, theta: Any, v: Any, batch: rom.McBatch) -> Any:
    """Monte-Carlo squared norm of the residual for given parameter velocities.

    Args:
        problem: Model, operator and residual norm.
        theta: Parameters (..., m); arrays or traced values.
        v: Parameter velocities, shaped like ``theta``.
        batch: Monte-Carlo points and weights.

    Returns:
        Cost per parameter row, shape (...).

    Raises:
        ConfigurationError: On an empty batch.
    """
    if batch.size < 1:
        raise ConfigurationError("Running cost needs at least one Monte-Carlo point")
    n = batch.size
    error = residual(problem, theta, v, batch.points)
    cost = ops.sum(batch.weights * error * error, axis=-1) / n
    if problem.residual_norm is ResidualNorm.H1:
        for j in range(problem.model.dim):
            direction = np.zeros(batch.points.shape)
            direction[..., j] = 1.0
            shifted = Dual(batch.points, direction, SPACE_TAG)
            slope = tangent_of(residual(problem, theta, v, shifted), SPACE_TAG)
            cost = cost + ops.sum(batch.weights * slope * slope, axis=-1) / n
    return cost


def running_cost(
    problem: ControlProblem, params: control.ControlParams, theta: np.ndarray, batch: rom.McBatch
) -> np.ndarray:
    """r(theta; xi) for parameter rows of shape (m,) or (B, m)."""
    return np.asarray(
        residual_cost(problem, theta, control.eval_field(params, theta), batch), dtype=np.float64
    )


def running_cost_partials(
    problem: ControlProblem, theta: np.ndarray, v: np.ndarray, batch: rom.McBatch
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cost and its partial derivatives in theta (at fixed v) and in v, per row.

    Traces the dual-number residual on a tape and pulls back once.

    Returns:
        ``(r, dr/dtheta, dr/dv)`` with shapes (B,), (B, m), (B, m).
    """
    tape, evaluation = trace(
        lambda theta, v: residual_cost(problem, theta, v, batch), {"theta": theta, "v": v}
    )
    grads = vjp(tape, evaluation, np.ones_like(evaluation.output))
    return evaluation.output, grads["theta"], grads["v"]


def augmented_field(
    problem: ControlProblem, params: control.ControlParams, batch: rom.McBatch
) -> Callable[[float, np.ndarray], np.ndarray]:
    """Right-hand side [V_xi(theta); r(theta; xi)] of the augmented state."""
    m = problem.model.n_params

    def field(t: float, gamma: np.ndarray) -> np.ndarray:
        theta = gamma[..., :m]
        v = control.eval_field(params, theta)
        cost = np.asarray(residual_cost(problem, theta, v, batch))
        return np.concatenate([v, cost[..., None]], axis=-1)

    return field


def rollout(
    problem: ControlProblem,
    params: control.ControlParams,
    theta0: np.ndarray,
    batch: rom.McBatch,
    horizon: float,
    solver: SolverSpec,
    log: Optional[logging.Logger] = None,
) -> Trajectory:
    """Integrate the augmented state from ``[theta0; 0]``.

    Args:
        problem: Control problem.
        params: Control parameters.
        theta0: Initial parameters, shape (m,) or (B, m).
        batch: Monte-Carlo batch, fixed along the trajectory.
        horizon: Final time T.
        solver: Integrator.
        log: Optional logger for solver diagnostics.

    Returns:
        Trajectory of augmented states; the last component is the accumulated cost.

    Raises:
        TrajectoryEscapeError: If the state becomes NaN or infinite.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    gamma0 = np.concatenate([theta0, np.zeros(theta0.shape[:-1] + (1,))], axis=-1)
    return integrate(augmented_field(problem, params, batch), gamma0, (0.0, horizon), solver, log)


def solve(
    problem: ControlProblem,
    params: control.ControlParams,
    theta0: np.ndarray,
    horizon: float,
    solver: SolverSpec,
    log: Optional[logging.Logger] = None,
) -> Trajectory:
    """Integrate theta' = V_xi(theta) alone, without the running cost."""
    return integrate(
        lambda t, theta: control.eval_field(params, theta),
        np.asarray(theta0, dtype=np.float64),
        (0.0, horizon),
        solver,
        log,
    )


@dataclasses.dataclass(frozen=True)
class TerminalTargets:
    """Reference parameters for the terminal misfit of each trajectory row.

    Attributes:
        theta: Reference parameters, shape (B, m).
        weights: Loss weight of each row's misfit; zero for rows without a reference.
    """

    theta: np.ndarray
    weights: np.ndarray


def terminal_misfit(
    model: rom.ModelSpec, theta: np.ndarray, target: np.ndarray, batch: rom.McBatch
) -> tuple[np.ndarray, np.ndarray]:
    """Relative misfit |u_theta - u_target|^2 / max(|u_target|^2, floor) and its theta-gradient.

    Returns:
        ``(misfit, gradient)`` with shapes (B,) and (B, m).
    """
    family = rom.family_of(model)
    u = family.evaluate(theta, batch.points)
    reference = family.evaluate(target, batch.points)
    denominator = np.maximum(np.mean(batch.weights * reference**2, axis=-1), MISFIT_FLOOR)
    difference = u - reference
    misfit = np.mean(batch.weights * difference**2, axis=-1) / denominator
    jacobian = family.grad_theta(theta, batch.points)
    gradient = 2.0 * np.mean((batch.weights * difference)[..., None] * jacobian, axis=-2)
    return misfit, gradient / denominator[..., None]


@dataclasses.dataclass(frozen=True)
class GradientResult:
    """Loss and control gradient of one batch.

    Attributes:
        loss: Weighted sum of accumulated costs and terminal misfits.
        grad: Gradient with respect to the flat control parameters.
        costs: Accumulated cost s(T) per row.
        misfits: Terminal misfit per row (zero where no reference is given).
        final: theta(T) per row.
    """

    loss: float
    grad: np.ndarray
    costs: np.ndarray
    misfits: np.ndarray
    final: np.ndarray


def _weights(theta0: np.ndarray, cost_weights: Optional[np.ndarray]) -> np.ndarray:
    if cost_weights is None:
        return np.full(theta0.shape[0], 1.0 / theta0.shape[0])
    return np.asarray(cost_weights, dtype=np.float64)


def adjoint_gradient(
    problem: ControlProblem,
    params: control.ControlParams,
    theta0: np.ndarray,
    batch: rom.McBatch,
    horizon: float,
    steps: int,
    cost_weights: Optional[np.ndarray] = None,
    targets: Optional[TerminalTargets] = None,
    log: Optional[logging.Logger] = None,
) -> GradientResult:
    """Gradient of the batch loss with respect to xi by the continuous adjoint method.

    The forward pass runs RK4 on the augmented state and keeps theta at every step. The adjoint
    a = (a_theta, a_s) starts at a(T) = -dLoss/dgamma(T), so a_s = -cost_weight is constant, and
    is integrated backward with RK4 on the same grid; the midpoint states are replayed from the
    checkpoints with a half step.

    Args:
        problem: Control problem.
        params: Control parameters.
        theta0: Initial parameters, shape (B, m).
        batch: Monte-Carlo batch shared by the forward and backward passes.
        horizon: Final time T.
        steps: RK4 steps over [0, T].
        cost_weights: Loss weight of each row's accumulated cost; defaults to 1/B.
        targets: Optional terminal references.
        log: Optional logger.

    Returns:
        Loss, gradient and per-row diagnostics.

    Raises:
        TrajectoryEscapeError: If the forward or backward pass produces NaN or infinite values;
            the error carries the forward time of the failure.
    """
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=np.float64))
    weights = _weights(theta0, cost_weights)
    rows, m = theta0.shape
    if horizon == 0.0:
        return GradientResult(
            0.0, np.zeros(params.spec.n_params), np.zeros(rows), np.zeros(rows), theta0.copy()
        )
    h = horizon / steps
    field = augmented_field(problem, params, batch)

    def velocity(t: float, theta: np.ndarray) -> np.ndarray:
        return control.eval_field(params, theta)

    checkpoints = [theta0]
    gamma = np.concatenate([theta0, np.zeros((rows, 1))], axis=-1)
    for k in range(steps):
        t = k * h
        gamma = rk4_step(field, t, gamma, h, field(t, gamma))
        if not np.all(np.isfinite(gamma)):
            raise TrajectoryEscapeError("Forward rollout left the finite range", t + h)
        checkpoints.append(gamma[:, :m])
    costs = gamma[:, m]
    final = gamma[:, :m]

    misfits = np.zeros(rows)
    a_theta = np.zeros((rows, m))
    if targets is not None:
        misfits, misfit_grad = terminal_misfit(problem.model, final, targets.theta, batch)
        misfits = np.where(targets.weights > 0, misfits, 0.0)
        a_theta = -targets.weights[:, None] * misfit_grad
    a_s = -weights
    loss = float(np.sum(weights * costs))
    if targets is not None:
        loss += float(np.sum(targets.weights * misfits))

    def adjoint_rhs(theta: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = control.eval_field(params, theta)
        _, cost_theta, cost_v = running_cost_partials(problem, theta, v, batch)
        pull_theta, pull_xi = control.field_vjp(params, theta, a + a_s[:, None] * cost_v)
        return -(pull_theta + a_s[:, None] * cost_theta), pull_xi

    grad = np.zeros(params.spec.n_params)
    for k in range(steps - 1, -1, -1):
        t = k * h
        start, end = checkpoints[k], checkpoints[k + 1]
        middle = rk4_step(velocity, t, start, h / 2, velocity(t, start))
        da1, dg1 = adjoint_rhs(end, a_theta)
        da2, dg2 = adjoint_rhs(middle, a_theta - h / 2 * da1)
        da3, dg3 = adjoint_rhs(middle, a_theta - h / 2 * da2)
        da4, dg4 = adjoint_rhs(start, a_theta - h * da3)
        a_theta = a_theta - h / 6 * (da1 + 2 * da2 + 2 * da3 + da4)
        grad = grad - h / 6 * (dg1 + 2 * dg2 + 2 * dg3 + dg4)
        if not (np.all(np.isfinite(a_theta)) and np.all(np.isfinite(grad))):
            raise TrajectoryEscapeError("Adjoint pass left the finite range", t)
    if log is not None:
        log.debug("Adjoint gradient: loss {0:.6g}, |grad| {1:.3g}", loss, np.linalg.norm(grad))
    return GradientResult(loss, grad, costs, misfits, final)


def unrolled_gradient(
    problem: ControlProblem,
    params: control.ControlParams,
    theta0: np.ndarray,
    batch: rom.McBatch,
    horizon: float,
    steps: int,
    cost_weights: Optional[np.ndarray] = None,
    targets: Optional[TerminalTargets] = None,
) -> GradientResult:
    """Gradient of the same batch loss by backpropagation through the RK4 rollout."""
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=np.float64))
    weights = _weights(theta0, cost_weights)
    spec = params.spec
    h = horizon / steps
    family = rom.family_of(problem.model)

    def loss_fn(xi: Any) -> tuple[Any, Any, Any, Any]:
        def field(theta: Any) -> tuple[Any, Any]:
            v = control.forward(spec, xi, theta)
            return v, residual_cost(problem, theta, v, batch)

        theta: Any = theta0
        cost: Any = np.zeros(theta0.shape[0])
        for _ in range(steps):
            v1, r1 = field(theta)
            v2, r2 = field(theta + h / 2 * v1)
            v3, r3 = field(theta + h / 2 * v2)
            v4, r4 = field(theta + h * v3)
            theta = theta + h / 6 * (v1 + 2.0 * v2 + 2.0 * v3 + v4)
            cost = cost + h / 6 * (r1 + 2.0 * r2 + 2.0 * r3 + r4)
        loss = ops.sum(weights * cost)
        misfit: Any = np.zeros(theta0.shape[0])
        if targets is not None:
            reference = family.evaluate(targets.theta, batch.points)
            denominator = np.maximum(np.mean(batch.weights * reference**2, axis=-1), MISFIT_FLOOR)
            difference = family.evaluate(theta, batch.points) - reference
            misfit = ops.sum(batch.weights * difference * difference, axis=-1) / (
                batch.size * denominator
            )
            loss = loss + ops.sum(targets.weights * misfit)
        return loss, cost, misfit, theta

    tape, evaluation = trace(loss_fn, {"xi": params.values})
    loss, costs, misfits, final = evaluation.outputs
    cotangents = (np.ones(()), np.zeros_like(costs), np.zeros_like(misfits), np.zeros_like(final))
    grad = vjp(tape, evaluation, cotangents)["xi"]
    if targets is not None:
        misfits = np.where(targets.weights > 0, misfits, 0.0)
    return GradientResult(float(loss), grad, costs, misfits, final)


class StopReason(str, enum.Enum):
    MAX_ITERATIONS = "max_iterations"
    STALLED = "stalled"
    TOLERANCE = "tolerance"


@dataclasses.dataclass(frozen=True)
class LogRow:
    iteration: int
    loss: float
    wall_time: float
    grad_norm: float


@dataclasses.dataclass(frozen=True)
class TrainResult:
    """Outcome of training.

    Attributes:
        params: Final control parameters.
        history: One row per optimizer step.
        stop_reason: Why training stopped.
        pool: Training pool of initial parameters, shape (M, m).
    """

    params: control.ControlParams
    history: list[LogRow]
    stop_reason: StopReason
    pool: np.ndarray

    @property
    def iterations(self) -> int:
        return len(self.history)

    def losses(self) -> np.ndarray:
        return np.array([row.loss for row in self.history])


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing means over ``window`` entries, one per complete window."""
    if len(values) < window:
        return np.array([])
    cumulative = np.cumsum(np.insert(values, 0, 0.0))
    return (cumulative[window:] - cumulative[:-window]) / window


def stalled(losses: np.ndarray, window: int, tolerance: float) -> bool:
    """Whether the moving-average loss decreased by less than ``tolerance`` per step.

    Compares the mean of the last ``window`` losses with the mean of the ``window`` before.
    """
    if len(losses) < 2 * window:
        return False
    before = float(np.mean(losses[-2 * window : -window]))
    after = float(np.mean(losses[-window:]))
    if before <= 0.0:
        return True
    return (before - after) / before / window < tolerance


@dataclasses.dataclass
class _Streams:
    pool: np.random.Generator
    init: np.random.Generator
    batch: np.random.Generator
    points: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "_Streams":
        return cls(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)))


def train(
    problem: ControlProblem,
    config: TrainConfig,
    sampler: rom.Sampler,
    seed: int,
    log: logging.Logger,
    targets: Optional[TargetSet] = None,
    initial: Optional[control.ControlParams] = None,
    on_checkpoint: Optional[Callable[[int, control.ControlParams], None]] = None,
) -> TrainResult:
    """Train the control field on trajectories from a pool of initial parameters.

    Each step draws ``batch_size`` pool rows and, when ``targets`` is given, up to
    ``target_batch_size`` reference pairs; rolls them out together over a fresh Monte-Carlo
    batch; and takes one Adam step on the adjoint gradient of

        mean_pool s(T) + augmentation_weight * mean_targets (s(T) + misfit_weight * misfit).

    Args:
        problem: Control problem.
        config: Optimizer and sampling settings.
        sampler: Distribution of the training pool.
        seed: Seed of every random stream used.
        log: Logger.
        targets: Optional reference pairs for terminal-misfit augmentation.
        initial: Starting control parameters; drawn with :func:`control.init_params` if None.
        on_checkpoint: Called every ``checkpoint_every`` steps with the current parameters.

    Returns:
        Final parameters, history and stop reason.

    Raises:
        DivergenceError: If the loss or gradient stops being finite; carries the last finite
            parameters.
    """
    streams = _Streams.from_seed(seed)
    pool = rom.sample_initial_array(sampler, problem.model, config.pool_size, streams.pool)
    params = initial if initial is not None else control.init_params(problem.control, streams.init)
    optimizer = Adam(config.learning_rate, config.beta1, config.beta2)
    batch_size = min(config.batch_size, config.pool_size)
    use_targets = targets is not None and len(targets) > 0 and config.augmentation_weight > 0
    target_batch = 0
    if use_targets:
        assert targets is not None
        target_batch = min(config.target_batch_size or config.batch_size, len(targets))

    history: list[LogRow] = []
    stop_reason = StopReason.MAX_ITERATIONS
    started = time.monotonic()
    log.info(
        "Training control field: {0} parameters, pool {1}, batch {2}, {3} target pairs",
        problem.control.n_params,
        config.pool_size,
        batch_size,
        0 if targets is None else len(targets),
    )
    with enlighten.get_manager(enabled="pytest" not in sys.modules) as manager:
        with manager.counter(
            total=config.iterations, desc="Training", unit="steps", color="white"
        ) as counter:
            for iteration in range(1, config.iterations + 1):
                rows = pool[streams.batch.choice(config.pool_size, batch_size, replace=False)]
                cost_weights = np.full(batch_size, 1.0 / batch_size)
                terminal: Optional[TerminalTargets] = None
                if use_targets:
                    assert targets is not None
                    picked = streams.batch.choice(len(targets), target_batch, replace=False)
                    rows = np.concatenate([rows, targets.initial[picked]])
                    share = config.augmentation_weight / target_batch
                    cost_weights = np.concatenate([cost_weights, np.full(target_batch, share)])
                    reference = np.concatenate(
                        [np.zeros((batch_size, rows.shape[1])), targets.final[picked]]
                    )
                    misfit_weights = np.concatenate(
                        [np.zeros(batch_size), np.full(target_batch, share * config.misfit_weight)]
                    )
                    terminal = TerminalTargets(reference, misfit_weights)
                batch = problem.domain.draw(
                    problem.model,
                    config.mc_points,
                    streams.points,
                    rows if problem.domain.needs_theta else None,
                )
                try:
                    result = adjoint_gradient(
                        problem,
                        params,
                        rows,
                        batch,
                        config.horizon,
                        config.steps,
                        cost_weights,
                        terminal,
                    )
                except TrajectoryEscapeError as e:
                    raise DivergenceError(
                        f"Training diverged at iteration {iteration}: {e}", params.values, iteration
                    ) from e
                if not (np.isfinite(result.loss) and np.all(np.isfinite(result.grad))):
                    raise DivergenceError(
                        f"Loss or gradient is not finite at iteration {iteration}",
                        params.values,
                        iteration,
                    )
                params = params.replace(optimizer.step(params.values, result.grad))
                history.append(
                    LogRow(
                        iteration,
                        result.loss,
                        time.monotonic() - started,
                        float(np.linalg.norm(result.grad)),
                    )
                )
                log.debug(
                    "Iteration {0}: loss {1:.6g}, |grad| {2:.3g}",
                    iteration,
                    result.loss,
                    history[-1].grad_norm,
                )
                counter.update()
                if on_checkpoint is not None and config.checkpoint_every:
                    if iteration % config.checkpoint_every == 0:
                        on_checkpoint(iteration, params)
                if config.loss_tolerance is not None and result.loss < config.loss_tolerance:
                    stop_reason = StopReason.TOLERANCE
                    break
                if (
                    config.stall_tolerance is not None
                    and iteration >= config.min_iterations
                    and stalled(
                        np.array([row.loss for row in history]),
                        config.stall_window,
                        config.stall_tolerance,
                    )
                ):
                    stop_reason = StopReason.STALLED
                    break
    log.info("Training stopped after {0} iterations: {1}", len(history), stop_reason.value)
    return TrainResult(params, history, stop_reason, pool)


def nls_train(
    problem: ControlProblem,
    thetas: np.ndarray,
    config: TrainConfig,
    seed: int,
    log: logging.Logger,
    initial: Optional[control.ControlParams] = None,
) -> TrainResult:
    """Fit the control field by least squares over a fixed set of parameter points.

    Minimizes mean_theta r(theta; xi) without trajectories: every step draws ``batch_size``
    points of ``thetas`` and a fresh Monte-Carlo batch, and takes one Adam step. Stopping
    follows :func:`train`.

    Args:
        problem: Control problem.
        thetas: Parameter points, shape (S, m).
        config: Optimizer settings; ``horizon``, ``steps`` and ``pool_size`` are unused.
        seed: Seed of every random stream used.
        log: Logger.
        initial: Starting control parameters.

    Returns:
        Final parameters, history and stop reason; ``pool`` is ``thetas``.

    Raises:
        ConfigurationError: If ``thetas`` is empty.
        DivergenceError: If the loss or gradient stops being finite.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if thetas.shape[0] == 0:
        raise ConfigurationError("Least-squares fit needs at least one parameter point")
    streams = _Streams.from_seed(seed)
    params = initial if initial is not None else control.init_params(problem.control, streams.init)
    optimizer = Adam(config.learning_rate, config.beta1, config.beta2)
    batch_size = min(config.batch_size, thetas.shape[0])
    history: list[LogRow] = []
    stop_reason = StopReason.MAX_ITERATIONS
    started = time.monotonic()
    log.info("Least-squares fit over {0} parameter points", thetas.shape[0])
    with enlighten.get_manager(enabled="pytest" not in sys.modules) as manager:
        with manager.counter(
            total=config.iterations, desc="Least squares", unit="steps", color="white"
        ) as counter:
            for iteration in range(1, config.iterations + 1):
                rows = thetas[streams.batch.choice(thetas.shape[0], batch_size, replace=False)]
                batch = problem.domain.draw(
                    problem.model,
                    config.mc_points,
                    streams.points,
                    rows if problem.domain.needs_theta else None,
                )
                v = control.eval_field(params, rows)
                costs, _, cost_v = running_cost_partials(problem, rows, v, batch)
                loss = float(np.mean(costs))
                _, grad = control.field_vjp(params, rows, cost_v / batch_size)
                if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                    raise DivergenceError(
                        f"Loss or gradient is not finite at iteration {iteration}",
                        params.values,
                        iteration,
                    )
                params = params.replace(optimizer.step(params.values, grad))
                history.append(
                    LogRow(iteration, loss, time.monotonic() - started, float(np.linalg.norm(grad)))
                )
                counter.update()
                if config.loss_tolerance is not None and loss < config.loss_tolerance:
                    stop_reason = StopReason.TOLERANCE
                    break
                if (
                    config.stall_tolerance is not None
                    and iteration >= config.min_iterations
                    and stalled(
                        np.array([row.loss for row in history]),
                        config.stall_window,
                        config.stall_tolerance,
                    )
                ):
                    stop_reason = StopReason.STALLED
                    break
    log.info("Least-squares fit stopped after {0} iterations: {1}", len(history), stop_reason.value)
    return TrainResult(params, history, stop_reason, thetas)
