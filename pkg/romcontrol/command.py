#!/usr/bin/env python3
"""Command-line entry points: ``train``, ``solve``, ``eval`` and ``reproduce``.

Every command resolves and validates its configuration before computing anything, so an invalid
configuration leaves no artifacts behind. Failures map to exit codes through
:attr:`RomControlError.exit_code`: 2 for configuration errors, 3 for aborted training or
integration, 4 for initial conditions that could not be fitted.
"""

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Optional

import numpy as np

from romcontrol import config as configuration
from romcontrol import experiments, log as logs, rom, storage
from romcontrol.cache import open_cache
from romcontrol.config import Experiment, ExperimentConfig
from romcontrol.exceptions import ConfigurationError, RomControlError


def _load(opts: argparse.Namespace, experiment: Optional[str] = None) -> ExperimentConfig:
    overrides = list(opts.overrides)
    for flag, key in (
        ("solver", "solver.kind"),
        ("rtol", "solver.rtol"),
        ("atol", "solver.atol"),
        ("steps", "solver.steps"),
        ("horizon", "train.horizon"),
    ):
        value = getattr(opts, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return configuration.load(opts.config, experiment, opts.scale, overrides)


def _threads(opts: argparse.Namespace) -> int:
    return 1 if opts.deterministic else max(1, opts.threads)


def cmd_train(opts: argparse.Namespace, log: logging.Logger) -> dict[str, Any]:
    """Train a control field and write its checkpoint, training log and config snapshot."""
    config = _load(opts)
    cache = open_cache(config.cache_dir, log)
    try:
        outcome = experiments.run_train(config, cache, log)
    finally:
        cache.close()
    losses = outcome.result.losses()
    return {
        "checkpoint": str(outcome.checkpoint),
        "iterations": outcome.result.iterations,
        "stop_reason": outcome.result.stop_reason.value,
        "final_loss": float(losses[-1]) if len(losses) else None,
    }


def _sine_mode(spec: str, amplitude: float, dim: int) -> rom.InitialCondition:
    try:
        wave = np.array([float(k) for k in spec.split(",")])
    except ValueError as e:
        raise ConfigurationError(f"Invalid wave vector '{spec}'") from e
    if wave.shape != (dim,):
        raise ConfigurationError(f"Wave vector '{spec}' needs {dim} components")
    return lambda x: amplitude * np.sin(np.pi * (np.asarray(x) @ wave))


def _initials(
    opts: argparse.Namespace, config: ExperimentConfig, log: logging.Logger
) -> tuple[np.ndarray, list[dict[str, Any]]]:
    """Initial parameters from the command line, with a description of each."""
    spec = config.model
    if opts.params:
        rows = []
        for path in opts.params:
            vector = rom.ParamVector.load(path)
            if vector.spec != spec:
                raise ConfigurationError(f"{path} holds parameters of another model")
            rows.append(vector.values)
        return np.stack(rows), [{"params": str(path), "fit": "skipped"} for path in opts.params]
    if opts.params_csv:
        frame = storage.read_csv(opts.params_csv)
        if frame.shape[1] != spec.n_params:
            raise ConfigurationError(
                f"{opts.params_csv} has {frame.shape[1]} columns; the model has "
                f"{spec.n_params} parameters"
            )
        rows = frame.to_numpy(dtype=np.float64)
        return rows, [{"params_csv": str(opts.params_csv), "row": i} for i in range(len(rows))]
    if opts.sine_mode:
        conditions = [_sine_mode(mode, opts.amplitude, spec.dim) for mode in opts.sine_mode]
        rows, misfits = experiments.fit_initials(config, conditions, log)
        return rows, [
            {"sine_mode": mode, "amplitude": opts.amplitude, "misfit": misfit}
            for mode, misfit in zip(opts.sine_mode, misfits)
        ]
    if opts.sample:
        held = experiments.held_out(_with_held_out(config, opts.sample))
        return held.initials, held.descriptions
    raise ConfigurationError(
        "Give initial conditions with --params, --params-csv, --sine-mode or --sample"
    )


def _with_held_out(config: ExperimentConfig, count: int) -> ExperimentConfig:
    resolved = configuration.resolved(config)
    resolved["evaluation"]["held_out"] = count
    if resolved.get("demo", {}).get("enabled"):
        resolved["demo"]["costs"] = min(resolved["demo"]["costs"], count)
    return configuration.build(ExperimentConfig, resolved)


def cmd_solve(opts: argparse.Namespace, log: logging.Logger) -> dict[str, Any]:
    """Solve one or many initial conditions with a trained control field."""
    config = _load(opts)
    out = experiments.output_dir(config)
    checkpoint = Path(opts.checkpoint) if opts.checkpoint else out / experiments.CHECKPOINT
    params = experiments.load_checkpoint(checkpoint, config)
    initials, descriptions = _initials(opts, config, log)
    trajectory = experiments.solve_initials(config, params, initials, log)
    target = Path(opts.output) if opts.output else out / "trajectory"
    storage.save_trajectory(
        trajectory,
        target,
        experiments.manifest_for(config),
        augmented=True,
        extra={"initials": descriptions, "checkpoint": str(checkpoint)},
    )
    return {
        "trajectory": str(target),
        "initials": len(initials),
        "stats": trajectory.stats.describe(),
        "misfits": [d["misfit"] for d in descriptions if "misfit" in d],
    }


def cmd_eval(opts: argparse.Namespace, log: logging.Logger) -> dict[str, Any]:
    """Relative-error curve of a stored trajectory against the configured reference."""
    config = _load(opts)
    out = experiments.output_dir(config)
    source = Path(opts.trajectory) if opts.trajectory else out / "trajectory"
    trajectory, _ = storage.load_trajectory(source)
    cache = open_cache(config.cache_dir, log)
    try:
        summary = experiments.evaluate_trajectory(config, trajectory, cache, log, _threads(opts))
    finally:
        cache.close()
    target = Path(opts.output) if opts.output else out / "errors"
    csv = experiments.write_curve(summary, target, experiments.manifest_for(config), "proposed")
    return {
        "curve": str(csv),
        "plot": str(target.with_suffix(".svg")),
        "thresholds": experiments.check_thresholds(summary, config.evaluation.thresholds),
    }


def cmd_reproduce(opts: argparse.Namespace, log: logging.Logger) -> dict[str, Any]:
    """Full pipeline of a shipped experiment."""
    if opts.experiment == Experiment.CUSTOM.value:
        raise ConfigurationError("reproduce runs shipped experiments only: heat, tanh_flux, hjb")
    config = _load(opts, opts.experiment)
    cache = open_cache(config.cache_dir, log)
    try:
        return experiments.reproduce(config, cache, log, _threads(opts))
    finally:
        cache.close()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="TOML configuration file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="BLOCK.KEY=VALUE",
        help="Override a configuration value (repeatable)",
    )
    common.add_argument("--scale", choices=["desk", "full"], help="Shipped default set")
    common.add_argument(
        "--threads", type=int, default=1, help="Worker threads over initial conditions"
    )
    common.add_argument(
        "--deterministic", action="store_true", help="Force single-threaded execution"
    )
    common.add_argument("-v", "--verbose", action="count", default=0, help="More logging")

    parser = argparse.ArgumentParser(
        prog="romcontrol",
        description="Learn parameter-space control fields that solve evolution PDEs",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("train", parents=[common], help="Train a control field")

    solve = commands.add_parser("solve", parents=[common], help="Solve initial conditions")
    solve.add_argument("--checkpoint", help="Checkpoint path without suffix")
    solve.add_argument("--params", action="append", help="Parameter vector (repeatable)")
    solve.add_argument("--params-csv", help="CSV with one parameter vector per row")
    solve.add_argument(
        "--sine-mode", action="append", help="Fit g = A sin(pi k.x), k as 1,0,... (repeatable)"
    )
    solve.add_argument("--amplitude", type=float, default=1.0, help="A for --sine-mode")
    solve.add_argument("--sample", type=int, help="Solve this many held-out draws")
    solve.add_argument("--horizon", type=float, help="Final time T")
    solve.add_argument("--solver", choices=["euler", "rk4", "dopri5"])
    solve.add_argument("--rtol", type=float)
    solve.add_argument("--atol", type=float)
    solve.add_argument("--steps", type=int, help="Steps of the fixed-step solvers")
    solve.add_argument("--output", help="Trajectory path without suffix")

    evaluate = commands.add_parser("eval", parents=[common], help="Error curve of a trajectory")
    evaluate.add_argument("--trajectory", help="Trajectory path without suffix")
    evaluate.add_argument("--output", help="Curve path without suffix")

    reproduce = commands.add_parser(
        "reproduce", parents=[common], help="Train, solve and evaluate a shipped experiment"
    )
    reproduce.add_argument("experiment", help="heat, tanh_flux or hjb")
    return parser


COMMANDS = {"train": cmd_train, "solve": cmd_solve, "eval": cmd_eval, "reproduce": cmd_reproduce}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        opts = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logs.configure(opts.verbose)
    log = logs.get_logger("command")
    try:
        report = COMMANDS[opts.command](opts, log)
    except RomControlError as e:
        log.error("{0}", e)
        return e.exit_code
    print(json.dumps(report, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
