"""Tests for config.py functionality."""

from pathlib import Path

import pytest

from romcontrol import config as configuration
from romcontrol import rom
from romcontrol.config import Experiment, OracleKind, Scale
from romcontrol.exceptions import ConfigurationError
from romcontrol.types import ModelFamily, OperatorKind, SolverKind

CUSTOM = """
experiment = "custom"
seed = 3

[model]
family = "sine_series"
dim = 1
terms = 3

[operator]
kind = "heat"

[sampler]
kind = "uniform_box"
low = -0.5
high = 0.5

[evaluation]
times = [0.0, 0.05, 0.1]
"""


@pytest.fixture
def custom_file(tmp_path: Path) -> Path:
    path = tmp_path / "custom.toml"
    path.write_text(CUSTOM)
    return path


class TestDefaults:
    @pytest.mark.parametrize("experiment", ["heat", "tanh_flux", "hjb"])
    @pytest.mark.parametrize("scale", ["desk", "full"])
    def test_every_shipped_experiment_validates(self, experiment: str, scale: str) -> None:
        config = configuration.load(experiment=experiment, scale=scale)
        assert config.experiment is Experiment(experiment)
        assert config.scale is Scale(scale)
        assert config.control_spec.dim == config.model.n_params

    def test_heat_desk(self) -> None:
        config = configuration.load(experiment="heat")
        assert config.model.family is ModelFamily.PERIODIC_SINE_TANH
        assert config.oracle_kind is OracleKind.SPECTRAL
        assert config.solver.kind is SolverKind.DOPRI5
        assert isinstance(config.sampler, rom.SamplerMixture)
        assert config.held_out_sampler == rom.InitSampler(
            kind=rom.SamplerKind.GAUSSIAN, variance=0.5
        )

    @pytest.mark.parametrize("scale", ["desk", "full"])
    def test_hjb_demo_step(self, scale: str) -> None:
        assert configuration.load(experiment="hjb", scale=scale).demo.dt == 0.001

    def test_custom_ships_nothing(self) -> None:
        assert configuration.defaults("custom") == {}

    def test_unknown_experiment(self) -> None:
        with pytest.raises(ConfigurationError, match="Unknown experiment"):
            configuration.defaults("wave")

    def test_unknown_scale(self) -> None:
        with pytest.raises(ConfigurationError, match="Unknown experiment or scale"):
            configuration.load(experiment="heat", scale="huge")


class TestOverrides:
    def test_parse_values(self) -> None:
        assert configuration.parse_override("train.iterations=5") == {"train": {"iterations": 5}}
        assert configuration.parse_override("evaluation.times=[0.0, 0.1]") == {
            "evaluation": {"times": [0.0, 0.1]}
        }
        assert configuration.parse_override("output_dir=out/run") == {"output_dir": "out/run"}
        assert configuration.parse_override("train.loss_tolerance = 1e-3") == {
            "train": {"loss_tolerance": 1e-3}
        }

    @pytest.mark.parametrize("item", ["train.iterations", "=3", "train.=3"])
    def test_malformed_override(self, item: str) -> None:
        with pytest.raises(ConfigurationError, match="block.key=value"):
            configuration.parse_override(item)

    def test_overrides_apply_last(self, custom_file: Path) -> None:
        config = configuration.load(
            custom_file, overrides=["seed=11", "model.terms=2", "solver.kind=rk4"]
        )
        assert config.seed == 11
        assert config.model.terms == 2
        assert config.solver.kind is SolverKind.RK4

    def test_sampler_is_replaced_whole(self) -> None:
        config = configuration.load(experiment="heat", overrides=["sampler.kind=gaussian"])
        assert config.sampler == rom.InitSampler(kind=rom.SamplerKind.GAUSSIAN)

    def test_merge_keeps_untouched_keys(self) -> None:
        merged = configuration.merge({"train": {"a": 1, "b": 2}}, {"train": {"b": 3}})
        assert merged == {"train": {"a": 1, "b": 3}}


class TestValidation:
    def test_unknown_top_level_key(self) -> None:
        with pytest.raises(ConfigurationError, match="Unknown configuration keys: bogus"):
            configuration.load(experiment="heat", overrides=["bogus=1"])

    def test_unknown_block_key(self) -> None:
        with pytest.raises(ConfigurationError, match=r"Unknown keys in \[train\]: bogus"):
            configuration.load(experiment="heat", overrides=["train.bogus=1"])

    def test_out_of_range_value(self) -> None:
        with pytest.raises(ConfigurationError, match="iterations"):
            configuration.load(experiment="heat", overrides=["train.iterations=0"])

    def test_batch_larger_than_pool(self) -> None:
        with pytest.raises(ConfigurationError, match="batch_size"):
            configuration.load(experiment="heat", overrides=["train.batch_size=5000"])

    def test_oracle_must_fit_operator(self) -> None:
        with pytest.raises(ConfigurationError, match="upwind"):
            configuration.load(experiment="heat", overrides=["oracle.kind=upwind"])

    def test_evaluation_times_within_horizon(self) -> None:
        with pytest.raises(ConfigurationError, match="evaluation.times"):
            configuration.load(experiment="heat", overrides=["evaluation.times=[0.0, 0.5]"])

    def test_model_density_needs_gaussian_mixture(self) -> None:
        with pytest.raises(ConfigurationError, match="model_density"):
            configuration.load(experiment="heat", overrides=["domain.kind=model_density"])

    def test_experiment_is_required(self, tmp_path: Path) -> None:
        path = tmp_path / "empty.toml"
        path.write_text("seed = 1\n")
        with pytest.raises(ConfigurationError, match="Missing required key 'experiment'"):
            configuration.load(path)

    def test_custom_needs_model(self) -> None:
        with pytest.raises(ConfigurationError, match=r"Missing required block \[model\]"):
            configuration.load(experiment="custom")

    def test_unreadable_file(self, tmp_path: Path) -> None:
        path = tmp_path / "broken.toml"
        path.write_text("experiment = \n")
        with pytest.raises(ConfigurationError, match="Cannot read config"):
            configuration.load(path)
        with pytest.raises(ConfigurationError, match="Cannot read config"):
            configuration.load(tmp_path / "absent.toml")


class TestCustom:
    def test_custom_file(self, custom_file: Path) -> None:
        config = configuration.load(custom_file)
        assert config.experiment is Experiment.CUSTOM
        assert config.model.family is ModelFamily.SINE_SERIES
        assert config.operator.kind is OperatorKind.HEAT
        assert config.oracle_kind is OracleKind.SPECTRAL
        assert config.evaluation.times == (0.0, 0.05, 0.1)
        box = rom.InitSampler(kind=rom.SamplerKind.UNIFORM_BOX, low=-0.5, high=0.5)
        assert config.sampler == box

    def test_command_line_experiment_wins(self, custom_file: Path) -> None:
        config = configuration.load(custom_file, experiment="heat")
        assert config.experiment is Experiment.HEAT
        assert config.model.family is ModelFamily.SINE_SERIES


class TestSnapshot:
    @pytest.mark.parametrize("experiment", ["heat", "tanh_flux", "hjb"])
    def test_snapshot_reloads_to_same_config(self, tmp_path: Path, experiment: str) -> None:
        config = configuration.load(experiment=experiment, overrides=["seed=5"])
        path = configuration.write_snapshot(config, tmp_path / "run" / "config.toml")
        assert configuration.load(path) == config

    def test_resolved_is_plain_data(self) -> None:
        resolved = configuration.resolved(configuration.load(experiment="heat"))
        assert resolved["experiment"] == "heat"
        assert resolved["model"]["family"] == "periodic_sine_tanh"
        assert "loss_tolerance" not in resolved["train"]
