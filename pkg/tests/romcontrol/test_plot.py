"""Tests for plot.py functionality."""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from romcontrol import plot, storage
from romcontrol.exceptions import ConfigurationError


@pytest.fixture
def curve() -> pd.DataFrame:
    return pd.DataFrame(
        {
            "t": [0.0, 0.05, 0.1],
            "mean": [0.0, 0.01, 0.03],
            "std": [0.0, 0.002, 0.01],
            "valid": [True, True, False],
        }
    )


def test_error_curves_are_reproducible(tmp_path: Path, curve: pd.DataFrame) -> None:
    first = plot.error_curves({"control": curve, "least squares": curve * 2}, tmp_path / "a.svg")
    second = plot.error_curves({"control": curve, "least squares": curve * 2}, tmp_path / "b.svg")
    assert first.read_bytes() == second.read_bytes()
    text = first.read_text()
    assert text.lstrip().startswith("<?xml")
    assert "least squares" in text


def test_error_curves_from_csv(tmp_path: Path, curve: pd.DataFrame) -> None:
    manifest = storage.Manifest(seed=0, config_hash="abc", version="test")
    csv = storage.write_csv(curve, tmp_path / "errors.csv", manifest)
    path = plot.error_curves_from_csv({"control": csv}, tmp_path / "figures" / "errors.svg")
    assert path.is_file()


def test_missing_columns(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError, match="lacks columns"):
        plot.error_curves({"broken": pd.DataFrame({"t": [0.0]})}, tmp_path / "x.svg")


def test_particles(tmp_path: Path) -> None:
    rng = np.random.default_rng(0)
    start = rng.uniform(-1, 1, (20, 3))
    first = plot.particles(start, start + 0.5, tmp_path / "p1.svg", title="cost 0")
    second = plot.particles(start, start + 0.5, tmp_path / "p2.svg", title="cost 0")
    assert first.read_bytes() == second.read_bytes()


def test_particles_shape_check(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError, match="particles"):
        plot.particles(np.zeros((3, 1)), np.zeros((3, 1)), tmp_path / "p.svg")
