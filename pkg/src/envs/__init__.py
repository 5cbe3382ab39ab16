from src.core.config import EnvConfig, EnvKind

from .base import Env, StepResult
from .grid import (
    ExactGridModel,
    GridCMDP,
    MonteCarloEstimate,
    OracleValues,
    TabularPolicy,
    bellman_residual,
    discretize,
    grid_oracle_values,
    monte_carlo_values,
)
from .point_hazard import PointHazardEnv

__all__ = [
    'Env',
    'ExactGridModel',
    'GridCMDP',
    'MonteCarloEstimate',
    'OracleValues',
    'PointHazardEnv',
    'StepResult',
    'TabularPolicy',
    'bellman_residual',
    'discretize',
    'grid_oracle_values',
    'make_env',
    'monte_carlo_values',
]


def make_env(cfg: EnvConfig) -> Env:
    if cfg.kind is EnvKind.GRID:
        return GridCMDP.from_config(cfg)
    return PointHazardEnv(cfg)
