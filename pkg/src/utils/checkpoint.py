"""Versioned checkpoint files: resolved config, network weights and the Lagrangian state."""

from __future__ import annotations

import pickle
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import torch

from src.core import logger
from src.core.config import RunConfig, validate_config
from src.core.errors import CheckpointError, ConfigurationError
from src.safe_policy import LagrangianState

if TYPE_CHECKING:
    from pathlib import Path

    from src.agent import Agent

log = logger.get('checkpoint')

FORMAT_VERSION = 1
REQUIRED_KEYS = ('version', 'config', 'obs_dim', 'action_dim', 'world_model', 'policy', 'lagrangian', 'step')


@dataclass(frozen=True)
class Checkpoint:
    config: RunConfig
    obs_dim: int
    action_dim: int
    world_model: dict[str, Any]
    policy: dict[str, Any]
    lagrangian: LagrangianState
    step: int
    optimizers: dict[str, Any] | None = None


def save(agent: Agent, path: Path, *, step: int) -> Path:
    payload = {
        'version': FORMAT_VERSION,
        'config': agent.cfg.model_dump(mode='json'),
        'obs_dim': agent.obs_dim,
        'action_dim': agent.action_dim,
        'world_model': agent.world_model.state_dict(),
        'policy': agent.policy.state_dict(),
        'lagrangian': agent.lagrangian.model_dump(),
        'step': step,
        'optimizers': {
            'model': agent.model_optimizer.state_dict(),
            'policy': agent.policy_optimizer.state_dict(),
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    log.info('saved checkpoint %s (step %d)', path, step)
    return path


def load(path: Path) -> Checkpoint:
    if not path.is_file():
        msg = f'checkpoint {path} not found'
        raise CheckpointError(msg)
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        msg = f'cannot read checkpoint {path}: {exc}'
        raise CheckpointError(msg) from exc
    if not isinstance(payload, dict) or any(key not in payload for key in REQUIRED_KEYS):
        msg = f'{path} is not a checkpoint: missing keys'
        raise CheckpointError(msg)
    if payload['version'] != FORMAT_VERSION:
        msg = f'checkpoint {path} has format version {payload["version"]}, expected {FORMAT_VERSION}'
        raise CheckpointError(msg)
    try:
        cfg = validate_config(payload['config'])
    except ConfigurationError as exc:
        msg = f'checkpoint {path} carries an invalid config: {exc}'
        raise CheckpointError(msg) from exc
    return Checkpoint(
        config=cfg,
        obs_dim=int(payload['obs_dim']),
        action_dim=int(payload['action_dim']),
        world_model=payload['world_model'],
        policy=payload['policy'],
        lagrangian=LagrangianState.model_validate(payload['lagrangian']),
        step=int(payload['step']),
        optimizers=payload.get('optimizers'),
    )
