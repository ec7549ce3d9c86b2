"""Tests for experiments.py functionality."""

import json
from pathlib import Path

import numpy as np
import pytest

from romcontrol import config as configuration
from romcontrol import experiments, oracle, storage
from romcontrol.cache import NullCache
from romcontrol.control import ControlParams
from romcontrol.exceptions import ConfigurationError, FitError, RomControlError
from romcontrol.utils.test_utils import FakeLogger, tiny_config

HJB_OVERRIDES = (
    "targets.count=4",
    "targets.steps=20",
    "targets.mc_points=32",
    "oracle.n_mc=200",
    "demo.costs=2",
    "demo.paths=20",
    "demo.min_wins=0",
    "demo.dt=0.05",
)
TANH_OVERRIDES = (
    "targets.count=4",
    "targets.steps=10",
    "targets.mc_points=32",
    "train.target_batch_size=2",
    "oracle.n_x=50",
    "oracle.n_t=50",
)


@pytest.fixture
def log() -> FakeLogger:
    return FakeLogger()


class TestStreams:
    def test_streams_are_reproducible_and_distinct(self) -> None:
        first = experiments.stream(3, experiments.HELD_OUT_STREAM).standard_normal(4)
        again = experiments.stream(3, experiments.HELD_OUT_STREAM).standard_normal(4)
        other = experiments.stream(3, experiments.TARGET_STREAM).standard_normal(4)
        np.testing.assert_array_equal(first, again)
        assert not np.array_equal(first, other)

    def test_check_disjoint(self) -> None:
        rows = np.arange(6.0).reshape(3, 2)
        experiments.check_disjoint(rows, rows + 0.5)
        with pytest.raises(RomControlError, match="1 held-out"):
            experiments.check_disjoint(rows, rows[1:2])

    def test_held_out_is_disjoint_from_training_pool(self, tmp_path: Path, log: FakeLogger) -> None:
        config = tiny_config(tmp_path)
        outcome = experiments.run_train(config, NullCache(), log)
        held = experiments.held_out(config)
        experiments.check_disjoint(outcome.result.pool, held.initials)
        assert len(held.initials) == 3
        np.testing.assert_array_equal(held.initials, experiments.held_out(config).initials)


class TestTrainStage:
    def test_run_train_writes_artifacts(self, tmp_path: Path, log: FakeLogger) -> None:
        config = tiny_config(tmp_path, overrides=["train.checkpoint_every=3"])
        outcome = experiments.run_train(config, NullCache(), log)
        out = tmp_path / "results" / "heat"
        assert (out / "config.toml").is_file()
        assert (out / "xi.json").is_file() and (out / "xi.bin").is_file()
        assert (out / "checkpoints" / "xi_000003.json").is_file()
        training = storage.read_csv(out / "training.csv")
        assert list(training.columns) == ["iteration", "loss", "wall_time", "grad_norm"]
        assert len(training) == outcome.result.iterations
        params = experiments.load_checkpoint(outcome.checkpoint, config)
        np.testing.assert_array_equal(params.values, outcome.result.params.values)

    def test_checkpoint_for_other_model_is_rejected(self, tmp_path: Path, log: FakeLogger) -> None:
        config = tiny_config(tmp_path)
        outcome = experiments.run_train(config, NullCache(), log)
        other = tiny_config(tmp_path, overrides=["model.terms=3"])
        with pytest.raises(ConfigurationError, match="was trained for"):
            experiments.load_checkpoint(outcome.checkpoint, other)

    def test_training_is_reproducible(self, tmp_path: Path, log: FakeLogger) -> None:
        first = experiments.run_train(tiny_config(tmp_path / "a"), NullCache(), log)
        second = experiments.run_train(tiny_config(tmp_path / "b"), NullCache(), log)
        np.testing.assert_array_equal(first.result.params.values, second.result.params.values)
        assert (tmp_path / "a" / "results" / "heat" / "xi.bin").read_bytes() == (
            tmp_path / "b" / "results" / "heat" / "xi.bin"
        ).read_bytes()


class TestSolveAndEvaluate:
    def test_solve_and_evaluate(self, tmp_path: Path, log: FakeLogger) -> None:
        config = tiny_config(tmp_path)
        params = ControlParams(np.zeros(config.control_spec.n_params), config.control_spec)
        held = experiments.held_out(config)
        trajectory = experiments.solve_initials(config, params, held.initials, log)
        assert trajectory.states.shape == (9, 3, config.model.n_params + 1)
        assert experiments.cost_nondecreasing(trajectory, 1e-12)
        summary = experiments.evaluate_trajectory(config, trajectory, NullCache(), log)
        assert summary.times.tolist() == list(config.evaluation.times)
        # A zero field leaves theta fixed, so the error starts at zero and grows.
        assert summary.mean[0] < 1e-8
        assert summary.mean[-1] > summary.mean[0]

    def test_threads_do_not_change_results(self, tmp_path: Path, log: FakeLogger) -> None:
        config = tiny_config(tmp_path, experiment="tanh_flux", overrides=TANH_OVERRIDES)
        params = ControlParams(np.zeros(config.control_spec.n_params), config.control_spec)
        trajectory = experiments.solve_initials(
            config, params, experiments.held_out(config).initials, log
        )
        single = experiments.evaluate_trajectory(config, trajectory, NullCache(), log, threads=1)
        pooled = experiments.evaluate_trajectory(config, trajectory, NullCache(), log, threads=3)
        np.testing.assert_array_equal(single.mean, pooled.mean)

    def test_trajectory_must_match_model(self, tmp_path: Path, log: FakeLogger) -> None:
        config = tiny_config(tmp_path)
        params = ControlParams(np.zeros(config.control_spec.n_params), config.control_spec)
        trajectory = experiments.solve_initials(
            config, params, experiments.held_out(config).initials, log
        )
        trajectory.states = trajectory.states[..., :2]
        with pytest.raises(ConfigurationError, match="components"):
            experiments.evaluate_trajectory(config, trajectory, NullCache(), log)

    def test_fit_initials(self, tmp_path: Path, log: FakeLogger) -> None:
        config = tiny_config(tmp_path, overrides=["evaluation.fit_tolerance=1e9"])
        rows, misfits = experiments.fit_initials(config, [lambda x: np.sin(np.pi * x[..., 0])], log)
        assert rows.shape == (1, config.model.n_params)
        assert misfits[0] <= 1e9

    def test_fit_failure_raises(self, tmp_path: Path, log: FakeLogger) -> None:
        config = tiny_config(
            tmp_path, overrides=["evaluation.fit_tolerance=1e-14", "evaluation.fit_budget=2"]
        )
        with pytest.raises(FitError) as info:
            experiments.fit_initials(config, [lambda x: np.sign(x[..., 0])], log)
        assert info.value.misfit > 1e-14
        assert info.value.exit_code == 4


class TestThresholds:
    def test_nearest_time_is_checked(self) -> None:
        summary = oracle.CurveSummary(
            np.array([0.0, 0.05, 0.1]),
            np.array([0.0, 0.01, 0.05]),
            np.zeros(3),
            np.array([True, True, True]),
        )
        checks = experiments.check_thresholds(summary, [(0.049, 0.02), (0.1, 0.04)])
        assert checks[0] == {"t": 0.05, "mean": 0.01, "limit": 0.02, "passed": True}
        assert not checks[1]["passed"]

    def test_invalid_point_fails(self) -> None:
        summary = oracle.CurveSummary(
            np.array([0.1]), np.array([np.nan]), np.array([np.nan]), np.array([False])
        )
        assert not experiments.check_thresholds(summary, [(0.1, 1.0)])[0]["passed"]


class TestReproduce:
    @pytest.mark.parametrize(
        "experiment,overrides",
        [
            ("heat", ("evaluation.compare_nls=true",)),
            ("tanh_flux", TANH_OVERRIDES),
            ("hjb", HJB_OVERRIDES),
        ],
    )
    def test_tiny_pipeline(
        self, tmp_path: Path, log: FakeLogger, experiment: str, overrides: tuple[str, ...]
    ) -> None:
        config = tiny_config(tmp_path, experiment=experiment, overrides=overrides)
        report = experiments.reproduce(config, NullCache(), log)
        out = tmp_path / "results" / experiment
        summary = json.loads((out / "summary.json").read_text())
        assert summary["experiment"] == experiment
        assert summary["held_out_disjoint"] is True
        assert summary["cost_nondecreasing"] is True
        assert summary["manifest"]["seed"] == 0
        assert report["iterations"] == summary["iterations"]
        assert (out / "errors.csv").is_file() and (out / "errors.svg").is_file()
        assert (out / "trajectory.bin").is_file()
        if experiment == "heat":
            assert (out / "errors_nls.csv").is_file()
            assert "nls" in report
        if experiment == "hjb":
            assert (out / "particles_00.csv").is_file()
            assert (out / "particles_01.csv").is_file()
            assert report["demo"]["required"] == 0


@pytest.mark.acceptance
@pytest.mark.parametrize("experiment", ["heat", "tanh_flux", "hjb"])
def test_desk_reproduction_passes(tmp_path: Path, experiment: str) -> None:
    config = configuration.load(
        experiment=experiment, overrides=[f"output_dir={tmp_path}", "cache_dir="]
    )
    report = experiments.reproduce(config, NullCache(), FakeLogger())
    assert report["passed"], report
