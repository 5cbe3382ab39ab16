import math
import tomllib
from collections.abc import Iterator
from contextlib import contextmanager
from contextvars import ContextVar
from enum import StrEnum
from pathlib import Path
from typing import Any, Self

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict, TomlConfigSettingsSource

from .errors import ConfigurationError

PROJECT_ROOT = Path(__file__).resolve().parents[2]
DEFAULT_CONFIG_PATH = PROJECT_ROOT / 'config.toml'

_toml_file: ContextVar[Path] = ContextVar('spowl_toml_file', default=DEFAULT_CONFIG_PATH)


class RunMode(StrEnum):
    SPOWL = 'spowl'
    POLICY_ONLY = 'policy-only'
    PLAN_ONLY = 'plan-only'
    CCE_GLOBAL = 'cce-global'
    CCE_LOCAL = 'cce-local'
    UNCONSTRAINED = 'unconstrained'


class PlannerMode(StrEnum):
    ADAPTIVE = 'adaptive'
    CCE_GLOBAL = 'cce-global'
    CCE_LOCAL = 'cce-local'


class ValueMode(StrEnum):
    MIN2OF5 = 'min2of5'
    AVG = 'avg'


class Aggregation(StrEnum):
    MIN = 'min'
    MAX = 'max'
    AVG = 'avg'


class FinalSelection(StrEnum):
    UNIFORM = 'uniform'
    WEIGHTED = 'weighted'


class EnvKind(StrEnum):
    POINT = 'point'
    GRID = 'grid'


class Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True, ser_json_inf_nan='constants')


class EnvConfig(Section):
    kind: EnvKind = EnvKind.POINT
    # point-hazard arena, positions live in [-arena_size, arena_size]^2
    arena_size: float = Field(default=2.0, gt=0)
    num_hazards: int = Field(default=8, ge=0)
    hazard_radius: float = Field(default=0.3, gt=0)
    hazard_clearance: float = Field(default=0.2, ge=0)
    goal_tolerance: float = Field(default=0.3, gt=0)
    min_goal_distance: float = Field(default=1.0, ge=0)
    episode_length: int = Field(default=200, ge=1)
    dt: float = Field(default=0.1, gt=0)
    acceleration: float = Field(default=2.0, gt=0)
    max_speed: float = Field(default=1.0, gt=0)
    progress_coef: float = 1.0
    goal_bonus: float = 10.0
    observed_hazards: int = Field(default=4, ge=1)
    # grid CMDP
    grid_size: int = Field(default=5, ge=2)
    grid_slip: float = Field(default=0.0, ge=0, lt=1)
    grid_episode_length: int = Field(default=25, ge=1)


class DecoderConfig(Section):
    enabled: bool = False
    weight: float = Field(default=0.1, ge=0)
    no_consistency: bool = False


class ModelConfig(Section):
    latent_dim: int = Field(default=64, ge=2)
    simnorm_group: int = Field(default=8, ge=2)
    hidden_dim: int = Field(default=128, ge=1)
    num_q: int = Field(default=5, ge=1)
    num_cost: int = Field(default=5, ge=1)
    num_cost_q: int = Field(default=5, ge=1)
    num_bins: int = Field(default=101, ge=3)
    vmin: float = -10.0
    vmax: float = 10.0
    gamma: float = Field(default=0.99, ge=0, lt=1)
    cost_gamma: float = Field(default=0.99, ge=0, lt=1)
    rho: float = Field(default=0.5, gt=0, le=1)
    horizon: int = Field(default=3, ge=0)
    tau: float = Field(default=0.01, gt=0, le=1)
    lr: float = Field(default=3e-4, gt=0)
    grad_clip_norm: float = Field(default=20.0, gt=0)
    reward_q_mode: ValueMode = ValueMode.MIN2OF5
    cost_target_aggregation: Aggregation = Aggregation.AVG
    consistency_coef: float = Field(default=1.0, ge=0)
    reward_coef: float = Field(default=1.0, ge=0)
    value_coef: float = Field(default=1.0, ge=0)
    cost_coef: float = Field(default=1.0, ge=0)
    cost_value_coef: float = Field(default=1.0, ge=0)
    decoder: DecoderConfig = DecoderConfig()

    @field_validator('num_bins')
    @classmethod
    def _odd_bins(cls, value: int) -> int:
        if value % 2 == 0:
            msg = f'num_bins must be odd, got {value}'
            raise ValueError(msg)
        return value

    @model_validator(mode='after')
    def _check_shapes(self) -> Self:
        if self.latent_dim % self.simnorm_group:
            msg = f'latent_dim {self.latent_dim} is not divisible by simnorm_group {self.simnorm_group}'
            raise ValueError(msg)
        if not self.vmin < 0 < self.vmax or self.vmin != -self.vmax:
            msg = f'symlog bounds must satisfy vmin == -vmax < 0, got ({self.vmin}, {self.vmax})'
            raise ValueError(msg)
        if self.reward_q_mode is ValueMode.MIN2OF5 and self.num_q < 2:  # noqa: PLR2004
            msg = 'reward_q_mode min2of5 needs at least two value heads'
            raise ValueError(msg)
        return self


class PolicyConfig(Section):
    hidden_dim: int = Field(default=128, ge=1)
    log_std_min: float = -10.0
    log_std_max: float = 2.0
    alpha: float = Field(default=1.0, ge=0)
    beta: float = Field(default=1e-3, ge=0)
    lr: float = Field(default=3e-4, gt=0)
    grad_clip_norm: float = Field(default=20.0, gt=0)
    q_mode: ValueMode = ValueMode.MIN2OF5
    constrained: bool = True
    budget: float = 0.1
    growth_rate: float = Field(default=1e-4, ge=0)
    initial_multiplier: float = Field(default=0.0, ge=0)
    initial_penalty: float = Field(default=1.0, gt=0)
    delta_subsample: int = Field(default=5, ge=1)
    delta_aggregation: Aggregation = Aggregation.AVG

    @model_validator(mode='after')
    def _check_bounds(self) -> Self:
        if self.log_std_min >= self.log_std_max:
            msg = 'log_std_min must be below log_std_max'
            raise ValueError(msg)
        if self.delta_aggregation is Aggregation.MIN:
            msg = 'delta_aggregation supports avg or max'
            raise ValueError(msg)
        return self


class PlannerConfig(Section):
    horizon: int = Field(default=3, ge=1)
    iterations: int = Field(default=6, ge=1)
    num_samples: int = Field(default=512, ge=0)
    num_prior: int = Field(default=24, ge=1)
    num_elites: int = Field(default=64, ge=1)
    init_std: float = Field(default=1.0, gt=0)
    min_std: float = Field(default=0.05, gt=0)
    mode: PlannerMode = PlannerMode.ADAPTIVE
    d_plan: float = Field(default=25.0, ge=0)
    final_selection: FinalSelection = FinalSelection.UNIFORM
    temperature: float = Field(default=0.5, gt=0)


class RunConfig(BaseSettings):
    mode: RunMode = RunMode.SPOWL
    seed: int = 0
    total_steps: int = Field(default=100_000, ge=1)
    seed_steps: int = Field(default=2_000, ge=0)
    buffer_capacity: int = Field(default=200_000, ge=1)
    batch_size: int = Field(default=64, ge=1)
    eval_every: int = Field(default=5_000, ge=0)
    eval_episodes: int = Field(default=10, ge=1)
    checkpoint_every: int = Field(default=25_000, ge=0)
    threads: int = Field(default=1, ge=1)
    run_dir: Path = Path('runs')
    log_dir: Path = Path('log')
    env: EnvConfig = EnvConfig()
    model: ModelConfig = ModelConfig()
    policy: PolicyConfig = PolicyConfig()
    planner: PlannerConfig = PlannerConfig()
    model_config = SettingsConfigDict(
        env_prefix='SPOWL_',
        env_file=str(PROJECT_ROOT / '.env'),
        env_nested_delimiter='__',
        case_sensitive=False,
        extra='forbid',
        frozen=True,
        ser_json_inf_nan='constants',
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        **_: Any,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (
            init_settings,
            env_settings,
            dotenv_settings,
            TomlConfigSettingsSource(settings_cls, toml_file=_toml_file.get()),
        )

    @model_validator(mode='after')
    def _check_cross_sections(self) -> Self:
        if self.policy.delta_subsample > self.model.num_cost_q:
            msg = f'policy.delta_subsample {self.policy.delta_subsample} exceeds model.num_cost_q {self.model.num_cost_q}'
            raise ValueError(msg)
        return self

    def resolved_planner(self) -> PlannerConfig:
        """Planner settings with the mode implied by the run mode."""
        match self.mode:
            case RunMode.CCE_GLOBAL:
                return self.planner.model_copy(update={'mode': PlannerMode.CCE_GLOBAL})
            case RunMode.CCE_LOCAL:
                return self.planner.model_copy(update={'mode': PlannerMode.CCE_LOCAL})
            case RunMode.UNCONSTRAINED:
                return self.planner.model_copy(update={'mode': PlannerMode.CCE_GLOBAL, 'd_plan': math.inf})
            case _:
                return self.planner.model_copy(update={'mode': PlannerMode.ADAPTIVE})

    def resolved_policy(self) -> PolicyConfig:
        """Policy settings; the unconstrained reference mode drops the cost constraint."""
        if self.mode is RunMode.UNCONSTRAINED:
            return self.policy.model_copy(update={'constrained': False})
        return self.policy

    def with_overrides(self, overrides: dict[str, Any]) -> 'RunConfig':
        """Return a validated copy with dotted keys (``planner.d_plan``) replaced."""
        data = self.model_dump()
        for dotted, value in overrides.items():
            *parents, leaf = dotted.split('.')
            node = data
            for part in parents:
                child = node.get(part)
                if not isinstance(child, dict):
                    msg = f'unknown config section {dotted!r}'
                    raise ConfigurationError(msg)
                node = child
            node[leaf] = value
        return validate_config(data)


def _describe(exc: ValidationError) -> str:
    return '; '.join(f'{".".join(str(p) for p in err["loc"]) or "<root>"}: {err["msg"]}' for err in exc.errors())


def validate_config(data: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        msg = f'invalid configuration: {_describe(exc)}'
        raise ConfigurationError(msg) from exc


@contextmanager
def _toml_source(path: Path) -> Iterator[None]:
    token = _toml_file.set(path)
    try:
        yield
    finally:
        _toml_file.reset(token)


def load_config(path: Path | None = None) -> RunConfig:
    """Load the run configuration from ``path`` (or ``config.toml``) merged with ``SPOWL_*`` env vars."""
    toml_path = path or DEFAULT_CONFIG_PATH
    if path is not None and not toml_path.is_file():
        msg = f'config file {toml_path} not found'
        raise ConfigurationError(msg)
    try:
        with _toml_source(toml_path):
            return RunConfig()
    except ValidationError as exc:
        msg = f'invalid configuration in {toml_path}: {_describe(exc)}'
        raise ConfigurationError(msg) from exc
    except tomllib.TOMLDecodeError as exc:
        msg = f'cannot parse {toml_path}: {exc}'
        raise ConfigurationError(msg) from exc


config = load_config()
