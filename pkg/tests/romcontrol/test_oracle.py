"""Tests for oracle.py functionality."""

import numpy as np
import pytest
from scipy import integrate

from romcontrol import oracle, pde, rom
from romcontrol.exceptions import CFLError, ConfigurationError, SingularSystemError
from romcontrol.types import ModelFamily, OperatorKind
from romcontrol.utils.test_utils import FakeLogger, tiny_model


def _sine(x: np.ndarray) -> np.ndarray:
    return np.asarray(np.sin(np.pi * x[..., 0]))


class TestHeat:
    def test_mode_matches_spectral_solution(self) -> None:
        def g(x: np.ndarray) -> np.ndarray:
            return np.asarray(np.sin(np.pi * (x[..., 0] + 2 * x[..., 1])))

        spectral = oracle.heat_periodic(g, 2, 16)
        x = np.random.default_rng(0).uniform(-1, 1, (20, 2))
        np.testing.assert_allclose(
            spectral.evaluate(x, 0.03), oracle.heat_mode_exact((1, 2), 1.0, x, 0.03), atol=1e-10
        )

    def test_monte_carlo_matches_mode(self) -> None:
        x = np.array([[0.5], [-0.3], [0.1]])
        estimate = oracle.heat_exact(_sine, x, 0.05, 20000, np.random.default_rng(1))
        expected = oracle.heat_mode_exact((1,), 1.0, x, 0.05)
        np.testing.assert_allclose(estimate.value, expected, atol=0.03)
        assert np.all(estimate.stderr > 0)
        assert np.all(np.abs(estimate.value - expected) < 5 * estimate.stderr + 1e-3)

    def test_time_zero_is_exact(self) -> None:
        x = np.array([[0.25]])
        estimate = oracle.heat_exact(_sine, x, 0.0, 1, np.random.default_rng(0))
        np.testing.assert_allclose(estimate.value, _sine(x))
        np.testing.assert_array_equal(estimate.stderr, [0.0])

    def test_invalid_arguments(self) -> None:
        with pytest.raises(ConfigurationError):
            oracle.heat_exact(_sine, np.zeros((1, 1)), -1.0, 10, np.random.default_rng(0))


class TestUpwind:
    def test_cfl_violation_names_required_steps(self) -> None:
        with pytest.raises(CFLError) as info:
            oracle.upwind_1d(_sine_profile, 1.0, n_t=4, n_x=8, speed=2.0)
        assert info.value.required_steps == 8
        assert isinstance(info.value, ConfigurationError)

    def test_conservative_and_total_variation_diminishing(self) -> None:
        solution = oracle.upwind_1d(_sine_profile, 0.5, n_t=200, n_x=100, speed=2.0)
        variations = [oracle.total_variation(values) for values in solution.values]
        assert all(b <= a + 1e-12 for a, b in zip(variations, variations[1:]))
        totals = solution.values.sum(axis=1)
        np.testing.assert_allclose(totals, totals[0], atol=1e-10)
        assert solution.times[-1] == pytest.approx(0.5)

    def test_short_time_matches_transport(self) -> None:
        """For small amplitude tanh(u) ~ u, so the profile moves left at speed 2."""

        def profile(y: np.ndarray) -> np.ndarray:
            return 0.01 * np.sin(np.pi * y)

        solution = oracle.upwind_1d(profile, 0.1, n_t=400, n_x=400, speed=2.0, record_every=100)
        y = np.linspace(-0.9, 0.9, 7)
        np.testing.assert_allclose(solution.at(y, 0.1), profile(y + 0.2), atol=5e-4)
        assert len(solution.times) == 5

    def test_at_wraps_periodically(self) -> None:
        solution = oracle.upwind_1d(_sine_profile, 0.1, n_t=20, n_x=50)
        inside = solution.at(np.array([0.3]), 0.05)
        np.testing.assert_allclose(solution.at(np.array([2.3]), 0.05), inside)


def _sine_profile(y: np.ndarray) -> np.ndarray:
    return np.asarray(np.sin(np.pi * y))


class TestColeHopf:
    def test_terminal_time_returns_cost(self) -> None:
        g = oracle.gaussian_cost([1.0], np.zeros((1, 2)), [1.0])
        x = np.array([[0.3, -0.1]])
        estimate = oracle.cole_hopf(g, x, 1.0, 1.0, 0.5, np.random.default_rng(0))
        np.testing.assert_allclose(estimate.value, g(x))

    def test_linear_cost_has_closed_form(self) -> None:
        """For g(y) = a . y the value is a . x - |a|^2 (T - t) / 2."""
        a = np.array([0.5, -0.25])
        x = np.array([[0.2, 0.4], [-1.0, 0.0]])
        estimate = oracle.cole_hopf(
            lambda y: y @ a, x, 0.0, 1.0, 0.5, np.random.default_rng(2), n_mc=20000
        )
        expected = x @ a - 0.5 * float(a @ a)
        np.testing.assert_allclose(estimate.value, expected, atol=0.02)

    @pytest.mark.parametrize("x", [-0.5, 0.0, 0.5])
    def test_gaussian_cost_matches_quadrature(self, x: float) -> None:
        epsilon, horizon = 0.2, 1.0
        g = oracle.gaussian_cost([1.0], np.zeros((1, 1)), [1.0])
        variance = 2.0 * epsilon * horizon

        def integrand(y: float) -> float:
            kernel = np.exp(-((y - x) ** 2) / (2.0 * variance)) / np.sqrt(2.0 * np.pi * variance)
            return float(kernel * np.exp(-g(np.array([[y]]))[0] / (2.0 * epsilon)))

        mean, _ = integrate.quad(integrand, x - 12.0, x + 12.0)
        expected = -2.0 * epsilon * np.log(mean)
        estimate = oracle.cole_hopf(
            g, np.array([[x]]), 0.0, horizon, epsilon, np.random.default_rng(5), n_mc=200000
        )
        assert float(estimate.value[0]) == pytest.approx(expected, rel=0.01)

    def test_invalid_time(self) -> None:
        with pytest.raises(ConfigurationError):
            oracle.cole_hopf(_sine, np.zeros((1, 1)), 2.0, 1.0, 0.5, np.random.default_rng(0))


class TestGaussianCost:
    def test_model_parameters_reproduce_cost(self) -> None:
        spec = rom.ModelSpec(family=ModelFamily.GAUSSIAN_MIXTURE, dim=2, terms=2)
        centers = np.array([[0.5, -1.0], [-0.2, 0.3]])
        g = oracle.gaussian_cost([1.5, -0.7], centers, [0.8, 1.3])
        theta = oracle.gaussian_cost_params(spec, [1.5, -0.7], centers, [0.8, 1.3])
        x = np.random.default_rng(0).normal(size=(50, 2))
        np.testing.assert_allclose(rom.evaluate(spec, theta, x), g(x), rtol=1e-12)

    def test_term_count_must_match(self) -> None:
        spec = rom.ModelSpec(family=ModelFamily.GAUSSIAN_MIXTURE, dim=1, terms=3)
        with pytest.raises(ConfigurationError, match="3 terms"):
            oracle.gaussian_cost_params(spec, [1.0], np.zeros((1, 1)), [1.0])

    def test_density_batch_integrates_the_model_mass(self) -> None:
        """int exp(-|x|^2 / 2) dx over R^2 is 2 pi."""
        spec = rom.ModelSpec(family=ModelFamily.GAUSSIAN_MIXTURE, dim=2, terms=1)
        theta = rom.ParamVector(np.array([1.0, 1.0, 1.0, 0.0, 0.0]), spec)
        batch = oracle.density_rho(spec, theta, 20000, np.random.default_rng(4))
        integral = np.mean(batch.weights * rom.evaluate(spec, theta, batch.points))
        assert integral == pytest.approx(2 * np.pi, rel=0.05)


class TestGramSystem:
    def test_singular_system_escalates_ridge(self) -> None:
        log = FakeLogger()
        system = oracle.GramSystem(np.ones((2, 2)), np.array([1.0, 1.0]))
        solution, ridge = system.solve(log)
        assert ridge == pytest.approx(1e-8)
        np.testing.assert_allclose(system.gram @ solution, system.rhs, rtol=1e-6)
        assert len(log.at("warning")) == 1

    def test_indefinite_system_is_rejected(self) -> None:
        with pytest.raises(SingularSystemError):
            oracle.GramSystem(-2.0 * np.eye(2), np.ones(2)).solve()

    def test_assembled_heat_system_recovers_decay_rates(self) -> None:
        model = tiny_model()
        theta = np.array([0.6, -0.4])
        batch = rom.DomainSampler().draw(model, 256, np.random.default_rng(0))
        heat = pde.OperatorSpec(kind=OperatorKind.HEAT)
        system = oracle.GramSystem.assemble(model, heat, theta, batch)
        delta, ridge = system.solve()
        assert ridge == 0.0
        np.testing.assert_allclose(delta, -(np.pi**2) * np.array([1.0, 4.0]) * theta, rtol=1e-8)


class TestTimeMarching:
    def test_heat_targets_follow_euler_decay(self) -> None:
        model = tiny_model()
        initials = np.array([[1.0, 0.5], [-0.3, 0.2]])
        targets = oracle.time_march_targets(
            initials,
            model,
            pde.OperatorSpec(kind=OperatorKind.HEAT),
            dt=0.001,
            n_steps=20,
            ridge=0.0,
            domain=rom.DomainSampler(),
            mc_points=128,
            rng=np.random.default_rng(0),
            log=FakeLogger(),
        )
        factors = (1 - 0.001 * np.pi**2 * np.array([1.0, 4.0])) ** 20
        np.testing.assert_allclose(targets.final, initials * factors, rtol=1e-7)
        exact = initials * np.exp(-(np.pi**2) * np.array([1.0, 4.0]) * 0.02)
        np.testing.assert_allclose(targets.final, exact, rtol=3e-2)
        assert targets.horizon == pytest.approx(0.02)
        assert targets.residuals is not None
        assert targets.residuals.shape == (2, 20)
        assert np.max(targets.residuals) < 1e-8
        np.testing.assert_array_equal(targets.initial, initials)

    def test_invalid_step(self) -> None:
        with pytest.raises(ConfigurationError):
            oracle.time_march_targets(
                np.zeros((1, 2)),
                tiny_model(),
                pde.OperatorSpec(kind=OperatorKind.HEAT),
                dt=0.0,
                n_steps=1,
                ridge=0.0,
                domain=rom.DomainSampler(),
                mc_points=8,
                rng=np.random.default_rng(0),
                log=FakeLogger(),
            )


class TestErrorCurves:
    def test_exact_trajectory_has_zero_error(self) -> None:
        model = tiny_model()
        theta0 = np.array([0.8, 0.3])
        rates = -(np.pi**2) * np.array([1.0, 4.0])

        def reference(x: np.ndarray, t: float) -> np.ndarray:
            return oracle.heat_mode_exact((1,), 0.8, x, t) + oracle.heat_mode_exact((2,), 0.3, x, t)

        curve = oracle.relative_error_curve(
            model,
            lambda t: theta0 * np.exp(rates * t),
            reference,
            rom.DomainSampler(),
            [0.0, 0.01, 0.05],
            128,
            np.random.default_rng(0),
        )
        assert [point.t for point in curve] == [0.0, 0.01, 0.05]
        assert all(point.valid and point.error < 1e-20 for point in curve)

    def test_vanishing_oracle_marks_point_invalid(self) -> None:
        log = FakeLogger()
        curve = oracle.relative_error_curve(
            tiny_model(),
            lambda t: np.ones(2),
            lambda x, t: np.zeros(len(x)),
            rom.DomainSampler(),
            [0.5],
            16,
            np.random.default_rng(0),
            log,
        )
        assert not curve[0].valid
        assert np.isnan(curve[0].error)
        assert log.at("warning")

    def test_aggregate_ignores_invalid_points(self) -> None:
        curves = [
            [oracle.CurvePoint(0.0, 1.0, True), oracle.CurvePoint(1.0, float("nan"), False)],
            [oracle.CurvePoint(0.0, 3.0, True), oracle.CurvePoint(1.0, float("nan"), False)],
            [oracle.CurvePoint(0.0, 2.0, True), oracle.CurvePoint(1.0, 4.0, True)],
        ]
        summary = oracle.aggregate_curves(curves)
        np.testing.assert_allclose(summary.times, [0.0, 1.0])
        np.testing.assert_allclose(summary.mean, [2.0, 4.0])
        np.testing.assert_allclose(summary.std, [np.sqrt(2 / 3), 0.0])
        assert summary.valid.all()

    def test_aggregate_marks_all_invalid_time(self) -> None:
        summary = oracle.aggregate_curves([[oracle.CurvePoint(0.5, float("nan"), False)]])
        assert not summary.valid[0]
        assert np.isnan(summary.mean[0])
