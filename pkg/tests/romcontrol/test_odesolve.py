"""Tests for odesolve.py functionality."""

import numpy as np
import pytest

from romcontrol import odesolve
from romcontrol.exceptions import ConfigurationError, SolverError, TrajectoryEscapeError
from romcontrol.types import SolverKind, SolverSpec
from romcontrol.utils.test_utils import FakeLogger


def _decay(t: float, y: np.ndarray) -> np.ndarray:
    return -y


@pytest.mark.parametrize(
    "kind,steps,tolerance",
    [(SolverKind.EULER, 400, 5e-3), (SolverKind.RK4, 20, 1e-6), (SolverKind.DOPRI5, 1, 1e-5)],
)
def test_exponential_decay(kind: SolverKind, steps: int, tolerance: float) -> None:
    y0 = np.array([1.0, -2.0])
    trajectory = odesolve.integrate(_decay, y0, (0.0, 2.0), SolverSpec(kind=kind, steps=steps))
    np.testing.assert_allclose(trajectory.final, y0 * np.exp(-2.0), atol=tolerance)
    assert trajectory.times[0] == 0.0
    assert trajectory.times[-1] == pytest.approx(2.0)
    assert np.all(np.diff(trajectory.times) > 0)


def _decay_error(kind: SolverKind, steps: int) -> float:
    spec = SolverSpec(kind=kind, steps=steps)
    trajectory = odesolve.integrate(_decay, np.ones(1), (0.0, 1.0), spec)
    return abs(float(trajectory.final[0]) - np.exp(-1.0))


@pytest.mark.parametrize("kind,order", [(SolverKind.EULER, 1.0), (SolverKind.RK4, 4.0)])
def test_fixed_step_convergence_order(kind: SolverKind, order: float) -> None:
    steps = np.array([10, 20, 40, 80])
    errors = [_decay_error(kind, int(n)) for n in steps]
    slope = -np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert slope == pytest.approx(order, abs=0.2)


def test_fixed_step_counts() -> None:
    spec = SolverSpec(kind=SolverKind.RK4, steps=10)
    trajectory = odesolve.integrate(_decay, np.ones(3), (0.0, 1.0), spec)
    assert trajectory.states.shape == (11, 3)
    assert trajectory.stats.describe()["evaluations"] == 41
    assert trajectory.dense is None


def test_dopri5_meets_tolerance_and_logs() -> None:
    """Rotation keeps its norm; DOPRI5 stays within tolerance of the exact solution."""
    log = FakeLogger()

    def rotation(t: float, y: np.ndarray) -> np.ndarray:
        return np.array([-y[1], y[0]])

    spec = SolverSpec(kind=SolverKind.DOPRI5, rtol=1e-8, atol=1e-10)
    trajectory = odesolve.integrate(rotation, np.array([1.0, 0.0]), (0.0, np.pi), spec, log)
    np.testing.assert_allclose(trajectory.final, [-1.0, 0.0], atol=1e-6)
    assert trajectory.stats.accepted == len(trajectory.times) - 1
    assert trajectory.stats.describe()["max_error_norm"] <= 1.0
    assert any("DOPRI5 accepted" in message for message in log.at("debug"))


@pytest.mark.parametrize(
    "spec",
    [SolverSpec(kind=SolverKind.DOPRI5, rtol=1e-9, atol=1e-12), SolverSpec(steps=50)],
)
def test_dense_output_between_steps(spec: SolverSpec) -> None:
    trajectory = odesolve.integrate(_decay, np.array([1.0]), (0.0, 1.0), spec)
    for t in (0.0, 0.137, 0.5, 0.91, 1.0):
        np.testing.assert_allclose(trajectory.at(t), [np.exp(-t)], atol=1e-6)


def test_at_rejects_times_outside_span() -> None:
    trajectory = odesolve.integrate(_decay, np.ones(1), (0.0, 1.0), SolverSpec(steps=4))
    with pytest.raises(ConfigurationError, match="outside"):
        trajectory.at(1.5)


def test_zero_span_returns_initial_state() -> None:
    spec = SolverSpec(kind=SolverKind.DOPRI5)
    trajectory = odesolve.integrate(_decay, np.array([3.0]), (0.5, 0.5), spec)
    np.testing.assert_array_equal(trajectory.at(0.5), [3.0])


@pytest.mark.parametrize("span", [(1.0, 0.0), (0.0, float("inf"))])
def test_invalid_span(span: tuple[float, float]) -> None:
    with pytest.raises(ConfigurationError, match="Invalid integration span"):
        odesolve.integrate(_decay, np.ones(1), span, SolverSpec())


def test_dopri5_step_budget() -> None:
    spec = SolverSpec(kind=SolverKind.DOPRI5, rtol=1e-10, atol=1e-12, max_steps=2)
    with pytest.raises(SolverError, match="exceeded 2 steps"):
        odesolve.integrate(_decay, np.ones(1), (0.0, 50.0), spec)


def test_fixed_step_escape() -> None:
    with pytest.raises(TrajectoryEscapeError) as info:
        odesolve.integrate(
            lambda t, y: np.full_like(y, np.inf), np.ones(2), (0.0, 1.0), SolverSpec(steps=4)
        )
    assert info.value.time == pytest.approx(0.25)


def test_euler_maruyama_without_drift_has_no_cost() -> None:
    rng = np.random.default_rng(0)
    paths = odesolve.euler_maruyama(
        lambda x, t: np.zeros_like(x), 0.5, np.zeros((2000, 1)), 0.01, 1.0, rng
    )
    np.testing.assert_array_equal(paths.control_cost, np.zeros(2000))
    # Var X_T = 2 epsilon T
    assert np.var(paths.final[:, 0]) == pytest.approx(1.0, rel=0.15)


def test_euler_maruyama_constant_drift() -> None:
    rng = np.random.default_rng(1)
    paths = odesolve.euler_maruyama(
        lambda x, t: np.ones_like(x), 0.0, np.zeros((3, 2)), 0.3, 1.0, rng, record_every=1
    )
    np.testing.assert_allclose(paths.final, np.ones((3, 2)))
    np.testing.assert_allclose(paths.control_cost, np.ones(3))
    np.testing.assert_allclose(paths.times, [0.0, 0.3, 0.6, 0.9, 1.0])


def test_euler_maruyama_reproducible() -> None:
    def run() -> np.ndarray:
        rng = np.random.default_rng(4)
        return odesolve.euler_maruyama(
            lambda x, t: -x, 0.1, np.ones((5, 2)), 0.05, 0.5, rng
        ).final

    np.testing.assert_array_equal(run(), run())


@pytest.mark.parametrize("dt,epsilon", [(0.0, 0.1), (0.1, -1.0)])
def test_euler_maruyama_validation(dt: float, epsilon: float) -> None:
    with pytest.raises(ConfigurationError, match="Euler-Maruyama"):
        odesolve.euler_maruyama(
            lambda x, t: x, epsilon, np.zeros((1, 1)), dt, 1.0, np.random.default_rng(0)
        )
