"""Tests for command.py functionality."""

import json
from pathlib import Path

import pytest

from romcontrol import storage
from romcontrol.command import main
from romcontrol.utils.test_utils import TINY_OVERRIDES


def _flags(tmp_path: Path, *extra: str) -> list[str]:
    overrides = [
        *TINY_OVERRIDES,
        "experiment=heat",
        "model.family=sine_series",
        f"output_dir={tmp_path / 'results'}",
        "cache_dir=",
        *extra,
    ]
    return [flag for item in overrides for flag in ("--set", item)]


def _report(capsys: pytest.CaptureFixture[str]) -> dict:
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def trained(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> Path:
    assert main(["train", *_flags(tmp_path)]) == 0
    report = _report(capsys)
    assert report["iterations"] >= 1
    return Path(report["checkpoint"])


def test_unknown_experiment_exits_with_configuration_code() -> None:
    assert main(["reproduce", "wave"]) == 2


def test_reproduce_rejects_custom(tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
    assert main(["reproduce", "custom", *_flags(tmp_path)]) == 2
    assert "shipped experiments only" in caplog.text
    assert not (tmp_path / "results").exists()


def test_unknown_experiment_names_it(caplog: pytest.LogCaptureFixture) -> None:
    assert main(["reproduce", "wave"]) == 2
    assert "wave" in caplog.text


def test_invalid_config_writes_nothing(tmp_path: Path) -> None:
    assert main(["train", *_flags(tmp_path, "bogus=1")]) == 2
    assert not (tmp_path / "results").exists()


def test_missing_command() -> None:
    assert main([]) == 2


def test_train_solve_eval(
    tmp_path: Path, trained: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    assert trained == tmp_path / "results" / "heat" / "xi"

    assert main(["solve", *_flags(tmp_path), "--sample", "2"]) == 0
    solved = _report(capsys)
    assert solved["initials"] == 2
    trajectory, meta = storage.load_trajectory(solved["trajectory"])
    assert trajectory.states.shape[1] == 2
    assert meta["checkpoint"] == str(trained)

    assert main(["eval", *_flags(tmp_path), "--deterministic"]) == 0
    evaluated = _report(capsys)
    assert Path(evaluated["curve"]).is_file()
    assert Path(evaluated["plot"]).is_file()
    assert [check["t"] for check in evaluated["thresholds"]]


def test_solve_sine_mode(
    tmp_path: Path, trained: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    flags = _flags(tmp_path, "evaluation.fit_tolerance=1e9")
    output = tmp_path / "sine"
    assert main(["solve", *flags, "--sine-mode", "1", "--output", str(output)]) == 0
    report = _report(capsys)
    assert report["trajectory"] == str(output)
    assert len(report["misfits"]) == 1
    assert (tmp_path / "sine.csv").is_file()


def test_unfittable_sine_mode_exits_with_fit_code(tmp_path: Path, trained: Path) -> None:
    # sin(3 pi x) is orthogonal to the model's two modes.
    flags = _flags(tmp_path, "evaluation.fit_tolerance=1e-6", "evaluation.fit_budget=2")
    assert main(["solve", *flags, "--sine-mode", "3"]) == 4


def test_wave_vector_must_match_dimension(tmp_path: Path, trained: Path) -> None:
    assert main(["solve", *_flags(tmp_path), "--sine-mode", "1,0"]) == 2


def test_solve_needs_initials(tmp_path: Path, trained: Path) -> None:
    assert main(["solve", *_flags(tmp_path)]) == 2


def test_solve_without_checkpoint(tmp_path: Path) -> None:
    assert main(["solve", *_flags(tmp_path), "--sample", "1"]) == 2
