"""SVG figures rendered from result CSVs.

Output is byte-identical for identical input: the SVG hash salt is fixed, no date is embedded and
text is kept as text rather than glyph paths.
"""

from collections.abc import Mapping
from pathlib import Path
from typing import Optional, Union

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from romcontrol.exceptions import ConfigurationError

PathLike = Union[str, Path]

_RC = {"svg.hashsalt": "romcontrol", "svg.fonttype": "none", "path.simplify": False}
_STYLES = ("-", "--", ":", "-.")
CURVE_COLUMNS = ("t", "mean", "std")


def _save(figure: Figure, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(path, format="svg", metadata={"Date": None})
    return path


def error_curves(
    curves: Mapping[str, pd.DataFrame], path: PathLike, title: Optional[str] = None
) -> Path:
    """Mean relative error against time with a shaded one-standard-deviation band per curve.

    Args:
        curves: Label to a frame with columns ``t, mean, std`` (``valid`` is honored if present).
        path: Output SVG path.
        title: Optional figure title.

    Returns:
        The written path.

    Raises:
        ConfigurationError: If a frame lacks a required column.
    """
    with matplotlib.rc_context(_RC):
        figure = Figure(figsize=(6.0, 4.0))
        axes = figure.add_subplot()
        for index, (label, frame) in enumerate(curves.items()):
            missing = [column for column in CURVE_COLUMNS if column not in frame.columns]
            if missing:
                raise ConfigurationError(f"Curve '{label}' lacks columns {missing}")
            if "valid" in frame.columns:
                frame = frame[frame["valid"].astype(bool)]
            t = frame["t"].to_numpy(dtype=np.float64)
            mean = frame["mean"].to_numpy(dtype=np.float64)
            std = frame["std"].to_numpy(dtype=np.float64)
            color = f"C{index % 10}"
            axes.plot(t, mean, _STYLES[index % len(_STYLES)], color=color, label=label)
            axes.fill_between(t, np.maximum(mean - std, 0.0), mean + std, color=color, alpha=0.25)
        axes.set_xlabel("t")
        axes.set_ylabel("relative error")
        axes.grid(True, alpha=0.3)
        if len(curves) > 1:
            axes.legend()
        if title:
            axes.set_title(title)
        figure.tight_layout()
        return _save(figure, path)


def error_curves_from_csv(paths: Mapping[str, PathLike], output: PathLike) -> Path:
    """Render :func:`error_curves` from curve CSVs with ``#`` header lines."""
    return error_curves(
        {label: pd.read_csv(path, comment="#") for label, path in paths.items()}, output
    )


def particles(
    start: np.ndarray, end: np.ndarray, path: PathLike, title: Optional[str] = None
) -> Path:
    """Start (circles) and end (triangles) positions of particles in the (x1, x2) plane."""
    if start.shape != end.shape or start.ndim != 2 or start.shape[1] < 2:
        raise ConfigurationError("particles needs two (P, d) arrays with d >= 2")
    with matplotlib.rc_context(_RC):
        figure = Figure(figsize=(4.5, 4.5))
        axes = figure.add_subplot()
        axes.scatter(start[:, 0], start[:, 1], marker="o", s=12, color="C3", label="X(0)")
        axes.scatter(end[:, 0], end[:, 1], marker="^", s=12, color="C2", label="X(T)")
        axes.set_xlabel("x1")
        axes.set_ylabel("x2")
        axes.set_aspect("equal", adjustable="datalim")
        axes.legend()
        if title:
            axes.set_title(title)
        figure.tight_layout()
        return _save(figure, path)
