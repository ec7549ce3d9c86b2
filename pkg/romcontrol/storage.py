"""Result files: CSV tables with provenance headers, JSON summaries and binary trajectories.

Every file carries the package version, seed and resolved-config hash: CSV files as ``#`` header
lines, JSON files under a ``manifest`` key.
"""

import dataclasses
import functools
import hashlib
import importlib.metadata
import json
import subprocess
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd

from romcontrol.exceptions import ConfigurationError
from romcontrol.odesolve import SolverStats, Trajectory

PathLike = Union[str, Path]


@functools.lru_cache(maxsize=1)
def version() -> str:
    """``git describe`` of the source tree, else the installed package version."""
    try:
        described = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            check=True,
            timeout=5,
        ).stdout.strip()
        if described:
            return described
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return importlib.metadata.version("romcontrol")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


def config_hash(resolved: Mapping[str, Any]) -> str:
    """SHA-256 of the canonical JSON of a resolved configuration."""
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclasses.dataclass(frozen=True)
class Manifest:
    """Provenance attached to every output file."""

    seed: Optional[int]
    config_hash: str
    version: str = dataclasses.field(default_factory=version)

    def as_dict(self) -> dict[str, Any]:
        return {"version": self.version, "seed": self.seed, "config_hash": self.config_hash}


def write_csv(frame: pd.DataFrame, path: PathLike, manifest: Manifest) -> Path:
    """Write a CSV whose first lines are ``# key: value`` provenance comments."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        for key, value in manifest.as_dict().items():
            handle.write(f"# {key}: {value}\n")
        frame.to_csv(handle, index=False)
    return path


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def read_csv_manifest(path: PathLike) -> dict[str, str]:
    """The ``# key: value`` header lines of a CSV written by :func:`write_csv`."""
    header = {}
    with open(path) as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition(": ")
            header[key] = value
    return header


def write_json(data: Mapping[str, Any], path: PathLike, manifest: Manifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps({"manifest": manifest.as_dict(), **data}, indent=2, sort_keys=True, default=str)
    )
    return path


def save_trajectory(
    trajectory: Trajectory,
    path: PathLike,
    manifest: Manifest,
    augmented: bool = False,
    extra: Optional[Mapping[str, Any]] = None,
) -> None:
    """Write ``<path>.bin``, ``<path>.json`` and ``<path>.csv``.

    The binary file holds states, derivatives and, for DOPRI5, interpolation coefficients as
    little-endian float64, back to back. The CSV has columns ``initial, t, [s,] theta_0 ...``
    with one row per initial condition and time.

    Args:
        trajectory: States of shape (K, m), (K, B, m) or augmented (..., m + 1).
        path: Path without suffix.
        manifest: Provenance.
        augmented: Whether the last state component is the accumulated cost s.
        extra: Additional manifest entries (initial-condition description, fit misfits).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = [trajectory.states, trajectory.derivatives]
    if trajectory.dense is not None:
        arrays.append(trajectory.dense)
    np.concatenate([a.astype("<f8").ravel() for a in arrays]).tofile(path.with_suffix(".bin"))
    meta = {
        "manifest": manifest.as_dict(),
        "times": trajectory.times.tolist(),
        "state_shape": list(trajectory.states.shape),
        "dense_shape": None if trajectory.dense is None else list(trajectory.dense.shape),
        "augmented": augmented,
        "stats": trajectory.stats.describe(),
        **(extra or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))

    states = trajectory.states
    if states.ndim == 2:
        states = states[:, None, :]
    n_times, n_initials, width = states.shape
    columns = [f"theta_{j}" for j in range(width - 1 if augmented else width)]
    if augmented:
        columns.append("s")
    frame = pd.DataFrame(states.transpose(1, 0, 2).reshape(-1, width), columns=columns)
    frame.insert(0, "t", np.tile(trajectory.times, n_initials))
    frame.insert(0, "initial", np.repeat(np.arange(n_initials), n_times))
    if augmented:
        frame = frame[["initial", "t", "s", *columns[:-1]]]
    write_csv(frame, path.with_suffix(".csv"), manifest)


def load_trajectory(path: PathLike) -> tuple[Trajectory, dict[str, Any]]:
    """Read a trajectory written by :func:`save_trajectory`.

    Returns:
        The trajectory and its JSON metadata.

    Raises:
        ConfigurationError: If the files are missing or inconsistent.
    """
    path = Path(path).with_suffix("")
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
        raw = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"Cannot read trajectory {path}: {e}") from e
    shape = tuple(meta["state_shape"])
    size = int(np.prod(shape))
    dense_shape = meta.get("dense_shape")
    expected = 2 * size + (int(np.prod(dense_shape)) if dense_shape else 0)
    if raw.size != expected:
        raise ConfigurationError(f"Trajectory {path} holds {raw.size} values, expected {expected}")
    states = raw[:size].reshape(shape)
    derivatives = raw[size : 2 * size].reshape(shape)
    dense = raw[2 * size :].reshape(dense_shape) if dense_shape else None
    stats = meta.get("stats", {})
    trajectory = Trajectory(
        np.array(meta["times"]),
        states,
        derivatives,
        SolverStats(
            steps=int(stats.get("steps", 0)),
            accepted=int(stats.get("accepted", 0)),
            rejected=int(stats.get("rejected", 0)),
            evaluations=int(stats.get("evaluations", 0)),
        ),
        dense,
    )
    return trajectory, meta
