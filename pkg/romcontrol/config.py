"""Experiment configuration.

A configuration is a TOML file with blocks ``[model]``, ``[operator]``, ``[control]``, ``[train]``,
``[solver]``, ``[sampler]``, ``[domain]``, ``[targets]``, ``[evaluation]``, ``[oracle]`` and
``[demo]`` plus top-level ``experiment``, ``scale``, ``seed``, ``output_dir``, ``cache_dir`` and
``residual_norm``. Values resolve in order: shipped defaults for the experiment and scale, then
the file, then ``--set block.key=value`` overrides. Experiment ``custom`` ships no defaults.
"""

import dataclasses
import enum
import tomllib
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any, Optional, Union

import tomli_w
from frozendict import frozendict
from pydantic import Field, TypeAdapter, model_validator
from pydantic.dataclasses import dataclass

from romcontrol import pde, rom
from romcontrol.cache import CACHE_DIR
from romcontrol.control import ControlNetSpec
from romcontrol.exceptions import ConfigurationError
from romcontrol.trainer import ControlProblem, TrainConfig
from romcontrol.types import ModelFamily, OperatorKind, ResidualNorm, SolverKind, SolverSpec, build

PathLike = Union[str, Path]


class Experiment(str, enum.Enum):
    HEAT = "heat"
    TANH_FLUX = "tanh_flux"
    HJB = "hjb"
    CUSTOM = "custom"


class Scale(str, enum.Enum):
    DESK = "desk"
    FULL = "full"


class OracleKind(str, enum.Enum):
    SPECTRAL = "spectral"
    CONVOLUTION = "convolution"
    UPWIND = "upwind"
    COLE_HOPF = "cole_hopf"


@dataclass(frozen=True)
class ControlBlock:
    """Control net shape; the input dimension is the model's parameter count."""

    width: int = Field(default=64, ge=1)
    depth: int = Field(default=3, ge=1)


@dataclass(frozen=True)
class TargetSpec:
    """Time-marched augmentation targets.

    Attributes:
        count: Number of target pairs; 0 disables augmentation.
        steps: Time-marching steps over the training horizon.
        ridge: Initial ridge of the Gram system.
        mc_points: Monte-Carlo points per Gram assembly.
        sampler: Distribution of the target initials; defaults to the training sampler.
    """

    count: int = Field(default=0, ge=0)
    steps: int = Field(default=50, ge=1)
    ridge: float = Field(default=1e-8, ge=0)
    mc_points: int = Field(default=1024, ge=1)
    sampler: Optional[Union[rom.SamplerMixture, rom.InitSampler]] = None


@dataclass(frozen=True)
class EvaluationSpec:
    """Held-out evaluation.

    Attributes:
        held_out: Number of held-out initial conditions.
        times: Evaluation times, within [0, train.horizon].
        mc_points: Monte-Carlo points per error evaluation.
        thresholds: ``(t, max mean relative error)`` pairs checked by ``reproduce``.
        fit_tolerance: Relative misfit accepted by the initial fit.
        fit_budget: Optimizer iterations of the initial fit.
        compare_nls: Also train the least-squares baseline with the same budget.
        sampler: Distribution of held-out initials; defaults to the training sampler.
    """

    held_out: int = Field(default=20, ge=1)
    times: tuple[float, ...] = (0.0, 0.02, 0.04, 0.06, 0.08, 0.1)
    mc_points: int = Field(default=4096, ge=1)
    thresholds: tuple[tuple[float, float], ...] = ()
    fit_tolerance: float = Field(default=1e-2, gt=0)
    fit_budget: int = Field(default=2000, ge=1)
    compare_nls: bool = False
    sampler: Optional[Union[rom.SamplerMixture, rom.InitSampler]] = None


@dataclass(frozen=True)
class OracleSpec:
    """Reference solution used for evaluation.

    Attributes:
        kind: ``spectral`` (periodic heat), ``convolution`` (free-space heat kernel by Monte
            Carlo), ``upwind`` (1-d tanh flux) or ``cole_hopf`` (viscous HJB). Inferred from the
            operator when unset.
        grid: Points per axis of the spectral decomposition.
        n_mc: Monte-Carlo samples per point for ``convolution`` and ``cole_hopf``.
        n_x: Upwind cells.
        n_t: Upwind time steps.
    """

    kind: Optional[OracleKind] = None
    grid: int = Field(default=32, ge=2)
    n_mc: int = Field(default=20000, ge=1)
    n_x: int = Field(default=1000, ge=1)
    n_t: int = Field(default=4000, ge=1)


@dataclass(frozen=True)
class CostSpec:
    """Held-out terminal costs sum_i c_i exp(-|x - b_i|^2 / sigma_i^2) for the HJB experiment."""

    weight_low: float = -1.0
    weight_high: float = 0.0
    variance_low: float = Field(default=0.5, gt=0)
    variance_high: float = Field(default=20.0, gt=0)
    center_bound: float = Field(default=2.0, gt=0)


@dataclass(frozen=True)
class DemoSpec:
    """Controlled-diffusion demonstration of the HJB experiment.

    Attributes:
        enabled: Whether ``reproduce`` runs it.
        costs: Number of terminal costs.
        paths: Paths per cost and control.
        dt: Euler-Maruyama step.
        start_half_width: Starting points are uniform in this half-width on the first two axes.
        start_half_width_rest: Half-width on the remaining axes.
        min_wins: Costs on which the controlled paths must beat zero control.
    """

    enabled: bool = False
    costs: int = Field(default=10, ge=1)
    paths: int = Field(default=1000, ge=1)
    dt: float = Field(default=0.01, gt=0)
    start_half_width: float = Field(default=1.5, gt=0)
    start_half_width_rest: float = Field(default=1.0, gt=0)
    min_wins: int = Field(default=8, ge=0)


Sampler = Union[rom.SamplerMixture, rom.InitSampler]

_INFERRED_ORACLE = frozendict(
    {
        OperatorKind.HEAT: OracleKind.SPECTRAL,
        OperatorKind.TANH_FLUX: OracleKind.UPWIND,
        OperatorKind.HJB: OracleKind.COLE_HOPF,
    }
)


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved experiment."""

    experiment: Experiment
    model: rom.ModelSpec
    operator: pde.OperatorSpec
    scale: Scale = Scale.DESK
    seed: int = Field(default=0, ge=0)
    output_dir: str = "results"
    cache_dir: str = CACHE_DIR
    residual_norm: ResidualNorm = ResidualNorm.L2
    control: ControlBlock = ControlBlock()
    train: TrainConfig = TrainConfig()
    solver: SolverSpec = SolverSpec(kind=SolverKind.DOPRI5)
    sampler: Sampler = rom.InitSampler(kind=rom.SamplerKind.GAUSSIAN)
    domain: rom.DomainSampler = rom.DomainSampler()
    targets: TargetSpec = TargetSpec()
    evaluation: EvaluationSpec = EvaluationSpec()
    oracle: OracleSpec = OracleSpec()
    costs: CostSpec = CostSpec()
    demo: DemoSpec = DemoSpec()

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        pde.check_pairing(self.operator, self.model)
        gaussian = self.model.family is ModelFamily.GAUSSIAN_MIXTURE
        if self.domain.kind is rom.DomainKind.MODEL_DENSITY and not gaussian:
            raise ValueError("domain.kind = model_density needs a gaussian_mixture model")
        kind = self.oracle.kind
        if kind in (OracleKind.SPECTRAL, OracleKind.CONVOLUTION):
            if self.operator.kind is not OperatorKind.HEAT:
                raise ValueError(f"oracle '{kind.value}' needs the heat operator")
        if kind is OracleKind.UPWIND and (
            self.operator.kind is not OperatorKind.TANH_FLUX
            or self.model.family is not ModelFamily.PERIODIC_SINE_TANH
        ):
            raise ValueError("oracle 'upwind' needs tanh_flux with a periodic_sine_tanh model")
        hjb = self.operator.kind is OperatorKind.HJB
        if kind is OracleKind.COLE_HOPF and not (hjb and gaussian):
            raise ValueError("oracle 'cole_hopf' needs hjb with a gaussian_mixture model")
        if self.demo.enabled and self.oracle_kind is not OracleKind.COLE_HOPF:
            raise ValueError("demo needs the hjb experiment")
        if self.demo.enabled and self.demo.costs > self.evaluation.held_out:
            raise ValueError("demo.costs must not exceed evaluation.held_out")
        horizon = self.train.horizon
        if any(t < 0 or t > horizon for t in self.evaluation.times):
            raise ValueError(f"evaluation.times must lie in [0, {horizon}]")
        if self.train.batch_size > self.train.pool_size:
            raise ValueError("train.batch_size must not exceed train.pool_size")
        return self

    @property
    def oracle_kind(self) -> OracleKind:
        if self.oracle.kind is not None:
            return self.oracle.kind
        return _INFERRED_ORACLE[self.operator.kind]

    @property
    def control_spec(self) -> ControlNetSpec:
        return ControlNetSpec(
            dim=self.model.n_params, width=self.control.width, depth=self.control.depth
        )

    @property
    def problem(self) -> ControlProblem:
        return ControlProblem(
            self.model, self.operator, self.control_spec, self.domain, self.residual_norm
        )

    @property
    def held_out_sampler(self) -> Sampler:
        return self.evaluation.sampler or self.sampler

    @property
    def target_sampler(self) -> Sampler:
        return self.targets.sampler or self.sampler


# Heat: uniform ball |theta| <= 20 plus N(0, 0.5 I), two to one.
_HEAT_POOL = frozendict(
    components=(
        frozendict(kind="uniform_ball", radius=20.0),
        frozendict(kind="gaussian", variance=0.5),
    ),
    fractions=(2.0, 1.0),
)
_HYPERBOLIC_POOL = frozendict(
    components=(
        frozendict(kind="hyperbolic", one_dimensional=True),
        frozendict(kind="hyperbolic", one_dimensional=False),
    ),
    fractions=(1.0, 1.0),
)

DEFAULTS: frozendict = frozendict(
    {
        (Experiment.HEAT, Scale.DESK): frozendict(
            model=frozendict(family="periodic_sine_tanh", dim=2, terms=10),
            operator=frozendict(kind="heat"),
            control=frozendict(width=64, depth=3),
            train=frozendict(
                iterations=2000,
                batch_size=32,
                pool_size=3000,
                mc_points=512,
                horizon=0.1,
                steps=20,
                min_iterations=1000,
            ),
            sampler=_HEAT_POOL,
            evaluation=frozendict(
                held_out=20,
                times=(0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1),
                mc_points=4096,
                thresholds=((0.01, 0.02), (0.1, 0.08)),
                compare_nls=True,
                sampler=frozendict(kind="gaussian", variance=0.5),
            ),
            oracle=frozendict(kind="spectral", grid=32),
        ),
        (Experiment.HEAT, Scale.FULL): frozendict(
            model=frozendict(family="periodic_sine_tanh", dim=10, terms=80),
            operator=frozendict(kind="heat"),
            control=frozendict(width=1000, depth=5),
            train=frozendict(
                iterations=10000, batch_size=100, pool_size=150000, mc_points=1024, horizon=0.1
            ),
            sampler=_HEAT_POOL,
            evaluation=frozendict(
                held_out=100,
                times=(0.0, 0.01, 0.02, 0.04, 0.06, 0.08, 0.1),
                thresholds=((0.01, 0.003), (0.1, 0.04)),
                compare_nls=True,
                sampler=frozendict(kind="gaussian", variance=0.5),
            ),
            oracle=frozendict(kind="convolution", n_mc=20000),
        ),
        (Experiment.TANH_FLUX, Scale.DESK): frozendict(
            model=frozendict(family="periodic_sine_tanh", dim=2, terms=10),
            operator=frozendict(kind="tanh_flux", speed=2.0),
            control=frozendict(width=64, depth=3),
            train=frozendict(
                iterations=2000,
                batch_size=32,
                pool_size=3000,
                mc_points=512,
                horizon=0.15,
                steps=20,
                min_iterations=1000,
                target_batch_size=16,
            ),
            sampler=_HYPERBOLIC_POOL,
            targets=frozendict(
                count=200,
                steps=60,
                mc_points=1024,
                sampler=frozendict(kind="hyperbolic", one_dimensional=True),
            ),
            evaluation=frozendict(
                held_out=10,
                times=(0.0, 0.03, 0.06, 0.09, 0.12, 0.15),
                mc_points=4096,
                thresholds=((0.15, 0.10),),
                sampler=frozendict(kind="hyperbolic", one_dimensional=True),
            ),
            oracle=frozendict(kind="upwind", n_x=400, n_t=400),
        ),
        (Experiment.TANH_FLUX, Scale.FULL): frozendict(
            model=frozendict(family="periodic_sine_tanh", dim=10, terms=80),
            operator=frozendict(kind="tanh_flux", speed=2.0),
            control=frozendict(width=600, depth=5),
            train=frozendict(
                iterations=10000, batch_size=100, pool_size=100000, mc_points=1024, horizon=0.15
            ),
            sampler=_HYPERBOLIC_POOL,
            targets=frozendict(
                count=1000, steps=150, sampler=frozendict(kind="hyperbolic", one_dimensional=True)
            ),
            evaluation=frozendict(
                held_out=100,
                times=(0.0, 0.03, 0.06, 0.09, 0.12, 0.15),
                thresholds=((0.15, 0.04),),
                sampler=frozendict(kind="hyperbolic", one_dimensional=True),
            ),
            oracle=frozendict(kind="upwind", n_x=1000, n_t=4000),
        ),
        (Experiment.HJB, Scale.DESK): frozendict(
            model=frozendict(family="gaussian_mixture", dim=2, terms=8),
            operator=frozendict(kind="hjb", epsilon=0.2),
            control=frozendict(width=64, depth=3),
            train=frozendict(
                iterations=1500,
                batch_size=32,
                pool_size=2000,
                mc_points=256,
                horizon=1.0,
                steps=20,
                min_iterations=750,
                target_batch_size=16,
            ),
            sampler=frozendict(kind="hjb_box"),
            domain=frozendict(kind="model_density"),
            targets=frozendict(count=64, steps=50, mc_points=512),
            evaluation=frozendict(
                held_out=10,
                times=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
                mc_points=1024,
                thresholds=((1.0, 0.12),),
            ),
            oracle=frozendict(kind="cole_hopf", n_mc=4000),
            demo=frozendict(enabled=True, costs=10, paths=1000, dt=0.001),
        ),
        (Experiment.HJB, Scale.FULL): frozendict(
            model=frozendict(family="gaussian_mixture", dim=8, terms=50),
            operator=frozendict(kind="hjb", epsilon=0.2),
            control=frozendict(width=1000, depth=5),
            train=frozendict(
                iterations=10000, batch_size=512, pool_size=100000, mc_points=1024, horizon=1.0
            ),
            sampler=frozendict(kind="hjb_box"),
            domain=frozendict(kind="model_density"),
            targets=frozendict(count=250, steps=100),
            evaluation=frozendict(
                held_out=100,
                times=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
                thresholds=((1.0, 0.075),),
            ),
            oracle=frozendict(kind="cole_hopf", n_mc=20000),
            demo=frozendict(enabled=True, costs=5, paths=1000, dt=0.001),
        ),
    }
)

_BLOCKS: frozendict = frozendict(
    model=rom.ModelSpec,
    operator=pde.OperatorSpec,
    control=ControlBlock,
    train=TrainConfig,
    solver=SolverSpec,
    domain=rom.DomainSampler,
    targets=TargetSpec,
    evaluation=EvaluationSpec,
    oracle=OracleSpec,
    costs=CostSpec,
    demo=DemoSpec,
)
_TOP_LEVEL = frozenset(f.name for f in dataclasses.fields(ExperimentConfig))


def defaults(experiment: Union[str, Experiment], scale: Union[str, Scale] = Scale.DESK) -> Mapping:
    """Shipped defaults of an experiment at a scale; empty for ``custom``.

    Raises:
        ConfigurationError: If the experiment or scale is unknown.
    """
    try:
        experiment = Experiment(experiment)
        scale = Scale(scale)
    except ValueError as e:
        names = ", ".join(known.value for known in Experiment)
        raise ConfigurationError(f"Unknown experiment or scale ({e}); experiments: {names}") from e
    if experiment is Experiment.CUSTOM:
        return frozendict()
    return DEFAULTS[(experiment, scale)]  # type: ignore[no-any-return]


def merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    """Recursive merge of nested mappings; ``override`` wins.

    Sampler tables are replaced whole, since a mixture and a single sampler do not combine.
    """
    merged = {key: _thaw(value) for key, value in base.items()}
    for key, value in override.items():
        nested = isinstance(value, Mapping) and isinstance(merged.get(key), Mapping)
        if nested and key != "sampler":
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = _thaw(value)
    return merged


def _thaw(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {key: _thaw(item) for key, item in value.items()}
    if isinstance(value, (tuple, list)):
        return [_thaw(item) for item in value]
    return value


def parse_override(item: str) -> dict[str, Any]:
    """Parse ``block.key=value`` into a nested mapping.

    The value is read as a TOML value when possible (``3``, ``1e-3``, ``true``, ``[0.0, 0.1]``)
    and as a bare string otherwise.

    Raises:
        ConfigurationError: If the item has no ``=`` or an empty key.
    """
    key, sep, raw = item.partition("=")
    path = [part.strip() for part in key.split(".")]
    if not sep or not all(path):
        raise ConfigurationError(f"Override '{item}' is not of the form block.key=value")
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    nested: dict[str, Any] = {path[-1]: value}
    for part in reversed(path[:-1]):
        nested = {part: nested}
    return nested


def _check_keys(data: Mapping[str, Any]) -> None:
    unknown = sorted(set(data) - _TOP_LEVEL)
    if unknown:
        raise ConfigurationError(f"Unknown configuration keys: {', '.join(unknown)}")
    for block, cls in _BLOCKS.items():
        values = data.get(block)
        if values is None:
            continue
        if not isinstance(values, Mapping):
            raise ConfigurationError(f"[{block}] must be a table")
        allowed = {f.name for f in dataclasses.fields(cls)}
        extra = sorted(set(values) - allowed)
        if extra:
            raise ConfigurationError(f"Unknown keys in [{block}]: {', '.join(extra)}")


def read_file(path: PathLike) -> dict[str, Any]:
    """Parse a TOML config file.

    Raises:
        ConfigurationError: If the file cannot be read or parsed.
    """
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigurationError(f"Cannot read config {path}: {e}") from e


def load(
    path: Optional[PathLike] = None,
    experiment: Optional[str] = None,
    scale: Optional[str] = None,
    overrides: Sequence[str] = (),
) -> ExperimentConfig:
    """Resolve a configuration from defaults, an optional file and overrides.

    Args:
        path: TOML file; may be omitted for shipped experiments.
        experiment: Experiment name; overrides the file's ``experiment``.
        scale: ``desk`` or ``full``; overrides the file's ``scale``.
        overrides: ``block.key=value`` strings, applied last.

    Returns:
        The validated configuration.

    Raises:
        ConfigurationError: If anything is missing, unknown or inconsistent.
    """
    data: dict[str, Any] = read_file(path) if path is not None else {}
    for item in overrides:
        data = merge(data, parse_override(item))
    if experiment is not None:
        data["experiment"] = experiment
    if scale is not None:
        data["scale"] = scale
    if "experiment" not in data:
        raise ConfigurationError("Missing required key 'experiment'")
    data.setdefault("scale", Scale.DESK.value)
    resolved = merge(defaults(data["experiment"], data["scale"]), data)
    _check_keys(resolved)
    for required in ("model", "operator"):
        if required not in resolved:
            raise ConfigurationError(f"Missing required block [{required}]")
    return build(ExperimentConfig, resolved)


def _drop_none(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {key: _drop_none(item) for key, item in value.items() if item is not None}
    if isinstance(value, list):
        return [_drop_none(item) for item in value]
    return value


def resolved(config: ExperimentConfig) -> dict[str, Any]:
    """JSON-compatible dictionary of every resolved value, without unset optionals."""
    dumped = TypeAdapter(ExperimentConfig).dump_python(config, mode="json")
    return _drop_none(dumped)  # type: ignore[no-any-return]


def write_snapshot(config: ExperimentConfig, path: PathLike) -> Path:
    """Write the resolved configuration as TOML; loading it reproduces ``config``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tomli_w.dumps(resolved(config)).encode())
    return path
