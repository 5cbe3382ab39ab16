import os
from pathlib import Path

import pytest

for _key in [key for key in os.environ if key.upper().startswith('SPOWL_')]:
    os.environ.pop(_key)

from src.core.config import RunConfig, validate_config  # noqa: E402

TINY = {
    'total_steps': 40,
    'seed_steps': 10,
    'batch_size': 4,
    'buffer_capacity': 1_000,
    'eval_every': 0,
    'eval_episodes': 1,
    'checkpoint_every': 0,
    'env': {'kind': 'grid', 'grid_size': 3, 'grid_episode_length': 10},
    'model': {
        'latent_dim': 8,
        'simnorm_group': 4,
        'hidden_dim': 16,
        'num_q': 2,
        'num_cost': 2,
        'num_cost_q': 2,
        'num_bins': 21,
        'horizon': 2,
    },
    'policy': {'hidden_dim': 16, 'delta_subsample': 2},
    'planner': {'horizon': 2, 'iterations': 2, 'num_samples': 16, 'num_prior': 4, 'num_elites': 4},
}


def tiny_config(tmp_path: Path, overrides: dict[str, object] | None = None) -> RunConfig:
    cfg = validate_config({**TINY, 'run_dir': str(tmp_path / 'runs'), 'log_dir': str(tmp_path / 'log')})
    return cfg.with_overrides(overrides) if overrides else cfg


@pytest.fixture
def tiny_cfg(tmp_path: Path) -> RunConfig:
    return tiny_config(tmp_path)
