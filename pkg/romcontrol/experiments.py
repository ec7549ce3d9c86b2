"""Experiment pipelines shared by the command-line entry points.

Each stage writes its artifacts under the experiment's output directory:

- ``train``: ``config.toml`` (resolved snapshot), ``xi.json``/``xi.bin`` (checkpoint),
  ``training.csv``; optional intermediate checkpoints under ``checkpoints/``.
- ``solve``: ``trajectory.{bin,json,csv}`` with the accumulated cost as state column ``s``.
- ``eval``: ``errors.csv`` and ``errors.svg``.
- ``reproduce``: all of the above plus ``summary.json`` and, per experiment, the least-squares
  baseline curve or the controlled-diffusion particle files.

Random streams: training uses the four streams spawned from the seed; held-out initials,
augmentation targets, oracle evaluation and the diffusion demo use their own spawn keys, so no
held-out draw can coincide with a training draw.
"""

import dataclasses
import hashlib
import logging
import sys
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Optional

import enlighten
import numpy as np
import pandas as pd

from romcontrol import config as configuration
from romcontrol import oracle, plot, rom, storage, trainer
from romcontrol.cache import ReferenceCache, cache_key
from romcontrol.config import ExperimentConfig, OracleKind
from romcontrol.control import ControlParams
from romcontrol.exceptions import (
    CFLError,
    ConfigurationError,
    DivergenceError,
    FitError,
    RomControlError,
)
from romcontrol.odesolve import Trajectory, euler_maruyama
from romcontrol.types import TargetSet

HELD_OUT_STREAM = 1000
TARGET_STREAM = 1001
ORACLE_STREAM = 1002
DEMO_STREAM = 1003
SOLVE_STREAM = 1004

CHECKPOINT = "xi"
PARTIAL_CHECKPOINT = "xi_partial"


def stream(seed: int, key: int) -> np.random.Generator:
    """Generator for one named purpose, independent of the training streams."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def manifest_for(config: ExperimentConfig) -> storage.Manifest:
    return storage.Manifest(config.seed, storage.config_hash(configuration.resolved(config)))


def output_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / config.experiment.value


def sample_ids(rows: np.ndarray) -> set[str]:
    """Content hashes identifying parameter rows."""
    return {
        hashlib.sha256(np.ascontiguousarray(row, dtype="<f8").tobytes()).hexdigest()[:16]
        for row in np.atleast_2d(rows)
    }


def check_disjoint(training: np.ndarray, held_out: np.ndarray) -> None:
    """Raise :class:`RomControlError` if a held-out row also occurs in the training rows."""
    shared = sample_ids(training) & sample_ids(held_out)
    if shared:
        raise RomControlError(f"{len(shared)} held-out initials also occur in the training data")


def generate_targets(
    config: ExperimentConfig, cache: ReferenceCache, log: logging.Logger
) -> Optional[TargetSet]:
    """Time-marched augmentation targets, or None when ``targets.count`` is 0."""
    spec = config.targets
    if spec.count == 0:
        return None
    rng = stream(config.seed, TARGET_STREAM)
    initials = rom.sample_initial_array(config.target_sampler, config.model, spec.count, rng)
    dt = config.train.horizon / spec.steps
    snapshot = configuration.resolved(config)
    key = cache_key(
        "targets",
        initials,
        config.model.describe(),
        snapshot["operator"],
        snapshot["domain"],
        dt,
        spec.steps,
        spec.ridge,
        spec.mc_points,
        config.seed,
    )
    log.info("Generating {0} augmentation targets over {1} steps", spec.count, spec.steps)
    return cache.get_or_compute(
        key,
        lambda: oracle.time_march_targets(
            initials,
            config.model,
            config.operator,
            dt,
            spec.steps,
            spec.ridge,
            config.domain,
            spec.mc_points,
            rng,
            log,
        ),
    )


def save_checkpoint(
    params: ControlParams,
    path: Path,
    config: ExperimentConfig,
    training: Optional[dict[str, Any]] = None,
) -> Path:
    """Write a control checkpoint whose manifest records the model it was trained for."""
    metadata = {
        **manifest_for(config).as_dict(),
        "experiment": config.experiment.value,
        "model": config.model.describe(),
        "training": training or {},
    }
    params.save(path, metadata)
    return path


def load_checkpoint(path: Path, config: ExperimentConfig) -> ControlParams:
    """Read a checkpoint and check it against the configured model.

    Raises:
        ConfigurationError: If the checkpoint was trained for another model or net.
    """
    params, manifest = ControlParams.load(path)
    recorded = manifest.get("model")
    if recorded is not None and recorded != config.model.describe():
        raise ConfigurationError(
            f"Checkpoint {path} was trained for {recorded}, not {config.model.describe()}"
        )
    if params.spec != config.control_spec:
        raise ConfigurationError(
            f"Checkpoint {path} has control net {params.spec.describe()}, configuration asks "
            f"for {config.control_spec.describe()}"
        )
    return params


def write_training_log(
    history: Sequence[trainer.LogRow], path: Path, manifest: storage.Manifest
) -> Path:
    frame = pd.DataFrame(
        [dataclasses.asdict(row) for row in history],
        columns=["iteration", "loss", "wall_time", "grad_norm"],
    )
    return storage.write_csv(frame, path, manifest)


@dataclasses.dataclass(frozen=True)
class TrainOutcome:
    result: trainer.TrainResult
    checkpoint: Path
    targets: Optional[TargetSet]


def run_train(
    config: ExperimentConfig, cache: ReferenceCache, log: logging.Logger
) -> TrainOutcome:
    """Train the control field and write checkpoint, training log and config snapshot.

    Raises:
        DivergenceError: If training diverges; the last finite parameters are written to
            ``xi_partial`` first.
    """
    out = output_dir(config)
    configuration.write_snapshot(config, out / "config.toml")
    targets = generate_targets(config, cache, log)

    def on_checkpoint(iteration: int, params: ControlParams) -> None:
        path = save_checkpoint(
            params, out / "checkpoints" / f"{CHECKPOINT}_{iteration:06d}", config
        )
        log.info("Checkpoint written to {0}", path)

    try:
        result = trainer.train(
            config.problem,
            config.train,
            config.sampler,
            config.seed,
            log,
            targets=targets,
            on_checkpoint=on_checkpoint,
        )
    except DivergenceError as e:
        if e.last_good is not None:
            partial = ControlParams(e.last_good, config.control_spec)
            save_checkpoint(
                partial, out / PARTIAL_CHECKPOINT, config, {"diverged_at": e.iteration}
            )
            log.info("Partial checkpoint written to {0}", out / PARTIAL_CHECKPOINT)
        raise
    checkpoint = save_checkpoint(
        result.params,
        out / CHECKPOINT,
        config,
        {"iterations": result.iterations, "stop_reason": result.stop_reason.value},
    )
    write_training_log(result.history, out / "training.csv", manifest_for(config))
    log.info("Checkpoint written to {0}", checkpoint)
    return TrainOutcome(result, checkpoint, targets)


@dataclasses.dataclass(frozen=True)
class HeldOut:
    """Held-out initial parameters with a description of how each was produced."""

    initials: np.ndarray
    descriptions: list[dict[str, Any]]


def sample_costs(config: ExperimentConfig, count: int, rng: np.random.Generator) -> HeldOut:
    """Terminal costs sum_i c_i exp(-|x - b_i|^2 / sigma_i^2) with exact model parameters."""
    spec, costs = config.model, config.costs
    n, d = spec.terms, spec.dim
    rows, descriptions = [], []
    for _ in range(count):
        weights = rng.uniform(costs.weight_low, costs.weight_high, size=n)
        widths = np.sqrt(rng.uniform(costs.variance_low, costs.variance_high, size=n))
        centers = rng.uniform(-costs.center_bound, costs.center_bound, size=(n, d))
        rows.append(oracle.gaussian_cost_params(spec, weights, centers, widths).values)
        descriptions.append(
            {"weights": weights.tolist(), "widths": widths.tolist(), "centers": centers.tolist()}
        )
    return HeldOut(np.stack(rows), descriptions)


def held_out(config: ExperimentConfig) -> HeldOut:
    """Held-out initials drawn from their own random stream."""
    rng = stream(config.seed, HELD_OUT_STREAM)
    count = config.evaluation.held_out
    if config.oracle_kind is OracleKind.COLE_HOPF:
        return sample_costs(config, count, rng)
    initials = rom.sample_initial_array(config.held_out_sampler, config.model, count, rng)
    return HeldOut(initials, [{"sampler": "held_out", "index": i} for i in range(count)])


def fit_initials(
    config: ExperimentConfig,
    conditions: Sequence[rom.InitialCondition],
    log: logging.Logger,
    require: bool = True,
) -> tuple[np.ndarray, list[float]]:
    """Fit model parameters to each initial condition.

    Raises:
        FitError: If ``require`` and a fit stays above ``evaluation.fit_tolerance``.
    """
    rng = stream(config.seed, SOLVE_STREAM)
    rows, misfits = [], []
    for index, g in enumerate(conditions):
        fit = rom.fit_initial(
            config.model,
            g,
            config.domain,
            config.evaluation.fit_tolerance,
            config.evaluation.fit_budget,
            rng,
            log,
        )
        log.info(
            "Initial {0}: misfit {1:.3g} after {2} iterations", index, fit.misfit, fit.iterations
        )
        if require and not fit.success:
            raise FitError(
                f"Initial {index} fit to {fit.misfit:.3g}, above tolerance "
                f"{config.evaluation.fit_tolerance:.3g}",
                fit.misfit,
            )
        rows.append(fit.theta.values)
        misfits.append(fit.misfit)
    return np.stack(rows), misfits


def solve_initials(
    config: ExperimentConfig, params: ControlParams, initials: np.ndarray, log: logging.Logger
) -> Trajectory:
    """Integrate [theta; s] from every initial in one batch with the inference solver."""
    initials = np.atleast_2d(np.asarray(initials, dtype=np.float64))
    rng = stream(config.seed, SOLVE_STREAM)
    batch = config.domain.draw(
        config.model,
        config.train.mc_points,
        rng,
        initials if config.domain.needs_theta else None,
    )
    started = time.monotonic()
    trajectory = trainer.rollout(
        config.problem, params, initials, batch, config.train.horizon, config.solver, log
    )
    log.info(
        "Solved {0} initials in {1:.2f} s: {2}",
        len(initials),
        time.monotonic() - started,
        trajectory.stats.describe(),
    )
    return trajectory


def cost_nondecreasing(trajectory: Trajectory, tolerance: float) -> bool:
    """Whether the accumulated cost never drops by more than ``tolerance`` between samples."""
    return bool(np.all(np.diff(trajectory.states[..., -1], axis=0) >= -tolerance))


def _upwind(
    config: ExperimentConfig, theta0: np.ndarray, log: logging.Logger
) -> oracle.UpwindSolution:
    spec = config.model

    def profile(y: np.ndarray) -> np.ndarray:
        points = np.zeros((len(y), spec.dim))
        points[:, 0] = y
        return np.asarray(rom.evaluate(spec, theta0, points))

    n_t = config.oracle.n_t
    horizon = config.train.horizon
    try:
        return oracle.upwind_1d(
            profile, horizon, n_t, config.oracle.n_x, config.operator.speed, max(1, n_t // 200)
        )
    except CFLError as e:
        log.warning("Upwind reference needs {0} time steps; using them", e.required_steps)
        n_t = e.required_steps
        return oracle.upwind_1d(
            profile, horizon, n_t, config.oracle.n_x, config.operator.speed, max(1, n_t // 200)
        )


def reference_for(
    config: ExperimentConfig,
    theta0: np.ndarray,
    cache: ReferenceCache,
    rng: np.random.Generator,
    log: logging.Logger,
) -> oracle.TimeField:
    """Reference solution u*(x, t) for the initial condition u_theta0.

    For the HJB experiment ``t`` is reversed time, so u*(x, t) is the value function at
    ``T - t`` of the terminal cost u_theta0.
    """
    spec = config.model
    g = rom.as_initial_condition(spec, theta0)
    kind = config.oracle_kind
    if kind is OracleKind.SPECTRAL:
        spectral = oracle.heat_periodic(g, spec.dim, config.oracle.grid)
        return spectral.evaluate
    if kind is OracleKind.CONVOLUTION:
        n_mc = config.oracle.n_mc
        return lambda x, t: oracle.heat_exact(g, x, t, n_mc, rng).value
    if kind is OracleKind.UPWIND:
        key = cache_key(
            "upwind",
            theta0,
            spec.describe(),
            config.train.horizon,
            config.oracle.n_t,
            config.oracle.n_x,
            config.operator.speed,
        )
        solution = cache.get_or_compute(key, lambda: _upwind(config, theta0, log))
        return lambda x, t: solution.at(np.asarray(x)[..., 0], t)
    horizon, epsilon, n_mc = config.train.horizon, config.operator.epsilon, config.oracle.n_mc
    return lambda x, t: oracle.cole_hopf(g, x, horizon - t, horizon, epsilon, rng, n_mc).value


def curve_frame(summary: oracle.CurveSummary) -> pd.DataFrame:
    return pd.DataFrame(
        {"t": summary.times, "mean": summary.mean, "std": summary.std, "valid": summary.valid}
    )


def evaluate_trajectory(
    config: ExperimentConfig,
    trajectory: Trajectory,
    cache: ReferenceCache,
    log: logging.Logger,
    threads: int = 1,
) -> oracle.CurveSummary:
    """Relative-error curves of every solved initial against its reference, aggregated.

    Every initial draws from its own spawned stream, so results do not depend on ``threads``.

    Raises:
        ConfigurationError: If the trajectory does not match the model.
    """
    m = config.model.n_params
    states = trajectory.states
    if states.ndim == 2:
        states = states[:, None, :]
    if states.shape[-1] not in (m, m + 1):
        raise ConfigurationError(
            f"Trajectory state has {states.shape[-1]} components; the model has {m} parameters"
        )
    initials = states[0, :, :m]
    seeds = np.random.SeedSequence(config.seed, spawn_key=(ORACLE_STREAM,)).spawn(len(initials))

    def theta_at(index: int) -> Callable[[float], np.ndarray]:
        return lambda t: np.atleast_2d(trajectory.at(t))[index, :m]

    def curve(index: int) -> list[oracle.CurvePoint]:
        rng = np.random.default_rng(seeds[index])
        reference = reference_for(config, initials[index], cache, rng, log)
        return oracle.relative_error_curve(
            config.model,
            theta_at(index),
            reference,
            config.domain,
            config.evaluation.times,
            config.evaluation.mc_points,
            rng,
            log,
        )

    curves = []
    with enlighten.get_manager(enabled="pytest" not in sys.modules) as manager:
        with manager.counter(
            total=len(initials), desc="Evaluating", unit="initials", color="white"
        ) as counter:
            with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
                for points in pool.map(curve, range(len(initials))):
                    curves.append(points)
                    counter.update()
    return oracle.aggregate_curves(curves)


def write_curve(
    summary: oracle.CurveSummary, path: Path, manifest: storage.Manifest, title: str
) -> Path:
    """Write ``<path>.csv`` and render ``<path>.svg`` from it."""
    csv = storage.write_csv(curve_frame(summary), path.with_suffix(".csv"), manifest)
    plot.error_curves({title: storage.read_csv(csv)}, path.with_suffix(".svg"), title)
    return csv


def check_thresholds(
    summary: oracle.CurveSummary, thresholds: Sequence[tuple[float, float]]
) -> list[dict[str, Any]]:
    """Compare the mean error at the evaluation time nearest each threshold time."""
    checks = []
    for t, limit in thresholds:
        index = int(np.argmin(np.abs(summary.times - t)))
        mean = float(summary.mean[index])
        valid = bool(summary.valid[index])
        checks.append(
            {
                "t": float(summary.times[index]),
                "mean": mean,
                "limit": limit,
                "passed": valid and mean <= limit,
            }
        )
    return checks


def controlled_diffusion(
    config: ExperimentConfig,
    trajectory: Trajectory,
    costs: HeldOut,
    out: Path,
    log: logging.Logger,
) -> list[dict[str, Any]]:
    """Steer particles with -grad u_theta and compare the total cost with zero control.

    For each terminal cost, ``demo.paths`` particles start uniformly in the configured box and
    run under both drifts with the same noise. Start and end positions of the controlled run are
    written to ``particles_<index>.csv``; the first cost is also plotted.
    """
    demo = config.demo
    spec = config.model
    m = spec.n_params
    horizon, epsilon = config.train.horizon, config.operator.epsilon
    seeds = np.random.SeedSequence(config.seed, spawn_key=(DEMO_STREAM,)).spawn(demo.costs)
    manifest = manifest_for(config)
    half = np.full(spec.dim, demo.start_half_width_rest)
    half[:2] = demo.start_half_width
    results = []
    for index in range(demo.costs):
        description = costs.descriptions[index]
        g = oracle.gaussian_cost(
            description["weights"], np.asarray(description["centers"]), description["widths"]
        )
        start = np.random.default_rng(seeds[index]).uniform(
            -half, half, size=(demo.paths, spec.dim)
        )

        def drift(x: np.ndarray, t: float, index: int = index) -> np.ndarray:
            theta = np.atleast_2d(trajectory.at(horizon - t))[index, :m]
            return -np.asarray(rom.grad_x(spec, theta, x))

        def zero(x: np.ndarray, t: float) -> np.ndarray:
            return np.zeros_like(x)

        noise = seeds[index].spawn(1)[0]
        controlled = euler_maruyama(
            drift, epsilon, start, demo.dt, horizon, np.random.default_rng(noise)
        )
        uncontrolled = euler_maruyama(
            zero, epsilon, start, demo.dt, horizon, np.random.default_rng(noise)
        )
        cost = float(np.mean(controlled.control_cost + g(controlled.final)))
        baseline = float(np.mean(uncontrolled.control_cost + g(uncontrolled.final)))
        log.info("Cost {0}: controlled {1:.4g}, zero control {2:.4g}", index, cost, baseline)
        frame = pd.DataFrame(
            {
                "path": np.arange(demo.paths),
                **{f"start_x{j}": start[:, j] for j in range(spec.dim)},
                **{f"end_x{j}": controlled.final[:, j] for j in range(spec.dim)},
            }
        )
        storage.write_csv(frame, out / f"particles_{index:02d}.csv", manifest)
        if index == 0:
            plot.particles(start, controlled.final, out / "particles_00.svg")
        results.append({"index": index, "controlled": cost, "zero_control": baseline})
    return results


def reproduce(
    config: ExperimentConfig, cache: ReferenceCache, log: logging.Logger, threads: int = 1
) -> dict[str, Any]:
    """Train, solve held-out initials, evaluate and write ``summary.json``.

    Returns:
        The summary, with a ``passed`` flag over every check.
    """
    started = time.monotonic()
    out = output_dir(config)
    manifest = manifest_for(config)
    outcome = run_train(config, cache, log)

    held = held_out(config)
    check_disjoint(outcome.result.pool, held.initials)
    if outcome.targets is not None:
        check_disjoint(outcome.targets.initial, held.initials)
    params = outcome.result.params
    trajectory = solve_initials(config, params, held.initials, log)
    storage.save_trajectory(
        trajectory,
        out / "trajectory",
        manifest,
        augmented=True,
        extra={"initials": held.descriptions},
    )
    summary = evaluate_trajectory(config, trajectory, cache, log, threads)
    write_curve(summary, out / "errors", manifest, "proposed")

    tolerance = 10 * config.solver.atol
    report: dict[str, Any] = {
        "experiment": config.experiment.value,
        "scale": config.scale.value,
        "iterations": outcome.result.iterations,
        "stop_reason": outcome.result.stop_reason.value,
        "held_out": len(held.initials),
        "held_out_disjoint": True,
        "cost_nondecreasing": cost_nondecreasing(trajectory, tolerance),
        "curve": curve_frame(summary).to_dict(orient="list"),
        "thresholds": check_thresholds(summary, config.evaluation.thresholds),
    }
    losses = outcome.result.losses()
    window = config.train.stall_window
    averages = trainer.moving_average(losses, window)
    if len(averages) > 1:
        report["loss_decreased"] = bool(averages[-1] < averages[0])

    passed = report["cost_nondecreasing"] and all(c["passed"] for c in report["thresholds"])
    if config.evaluation.compare_nls:
        log.info("Training the least-squares baseline with the same budget")
        baseline = trainer.nls_train(
            config.problem, outcome.result.pool, config.train, config.seed, log
        )
        baseline_trajectory = solve_initials(config, baseline.params, held.initials, log)
        baseline_summary = evaluate_trajectory(config, baseline_trajectory, cache, log, threads)
        write_curve(baseline_summary, out / "errors_nls", manifest, "least squares")
        plot.error_curves(
            {
                "proposed": curve_frame(summary),
                "least squares": curve_frame(baseline_summary),
            },
            out / "comparison.svg",
        )
        proposed_final = float(summary.mean[-1])
        baseline_final = float(baseline_summary.mean[-1])
        report["nls"] = {
            "iterations": baseline.iterations,
            "final_mean": baseline_final,
            "proposed_final_mean": proposed_final,
            "proposed_lower": proposed_final < baseline_final,
        }
        passed = passed and report["nls"]["proposed_lower"]
    if config.demo.enabled:
        demo = controlled_diffusion(config, trajectory, held, out, log)
        wins = sum(entry["controlled"] < entry["zero_control"] for entry in demo)
        report["demo"] = {"costs": demo, "wins": wins, "required": config.demo.min_wins}
        passed = passed and wins >= config.demo.min_wins
    report["passed"] = bool(passed)
    report["runtime_seconds"] = time.monotonic() - started
    storage.write_json(report, out / "summary.json", manifest)
    log.info("Summary written to {0}: passed={1}", out / "summary.json", report["passed"])
    return report
