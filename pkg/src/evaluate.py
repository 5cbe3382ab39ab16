"""Evaluation episodes for a trained agent and the ``eval`` command."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import TYPE_CHECKING

import humanfriendly
import numpy as np
from tqdm import tqdm

from src.agent import Agent
from src.core import logger
from src.envs import make_env
from src.utils import checkpoint
from src.utils.metrics import EpisodeRecord, Metrics, StepRecord, Summary, summarize

if TYPE_CHECKING:
    from collections.abc import Callable
    from pathlib import Path

    from src.core.config import EnvConfig
    from src.decision import Source
    from src.envs import Env

log = logger.get('evaluate')

EVAL_SEED_OFFSET = 1_000_000


def episode_seed(run_seed: int, episode: int, *, evaluation: bool = False) -> int:
    """Environment seed of one episode; evaluation episodes use their own seed range."""
    return (EVAL_SEED_OFFSET if evaluation else 0) + run_seed * 10_007 + episode


@dataclass(frozen=True)
class Episode:
    record: EpisodeRecord
    steps: list[StepRecord]


@dataclass(frozen=True)
class EvalSummary:
    episodes: list[Episode]
    episode_return: Summary
    episode_cost: Summary
    balance: Summary

    def row(self, step: int) -> dict[str, float]:
        return {
            'step': step,
            'return_mean': self.episode_return.mean,
            'return_std': self.episode_return.std,
            'cost_mean': self.episode_cost.mean,
            'cost_std': self.episode_cost.std,
            'balance_mean': self.balance.mean,
        }


EVAL_COLUMNS = ('step', 'return_mean', 'return_std', 'cost_mean', 'cost_std', 'balance_mean')


def run_episode(env: Env, seed: int, policy: Callable[[np.ndarray], tuple[np.ndarray, Source | None]]) -> Episode:
    """Play one episode; ``policy`` maps an observation to ``(action, source)``."""
    metrics = Metrics()
    obs = env.reset(seed=seed)
    done = False
    while not done:
        action, source = policy(obs)
        result = env.step(action)
        metrics.record_step(result.reward, result.cost, source)
        obs, done = result.observation, result.done
    steps = metrics.drain_steps()
    return Episode(metrics.end_episode(), steps)


def summarize_episodes(episodes: list[Episode]) -> EvalSummary:
    return EvalSummary(
        episodes=episodes,
        episode_return=summarize(e.record.episode_return for e in episodes),
        episode_cost=summarize(e.record.episode_cost for e in episodes),
        balance=summarize(e.record.balance for e in episodes),
    )


def evaluate_agent(agent: Agent, env_cfg: EnvConfig, episodes: int, *, seed: int | None = None) -> EvalSummary:
    """Deterministic-policy episodes with planning and switching as configured.

    The agent's warm start is restored afterwards so an interrupted training episode
    continues unchanged.
    """
    env = make_env(env_cfg)
    run_seed = agent.cfg.seed if seed is None else seed
    saved_warm_start = agent.warm_start

    def act(obs: np.ndarray) -> tuple[np.ndarray, Source | None]:
        step = agent.act(obs, evaluate=True)
        return step.action, step.source

    results = []
    for i in tqdm(range(episodes), desc='Evaluating', leave=False):
        agent.reset_episode()
        results.append(run_episode(env, episode_seed(run_seed, i, evaluation=True), act))
    agent.warm_start = saved_warm_start
    return summarize_episodes(results)


def zero_action_baseline(env_cfg: EnvConfig, episodes: int, *, seed: int = 0) -> EvalSummary:
    """Episodes of an agent that never accelerates, on the evaluation seeds."""
    env = make_env(env_cfg)
    zero = np.zeros(env.action_dim)
    results = [run_episode(env, episode_seed(seed, i, evaluation=True), lambda _obs: (zero, None)) for i in range(episodes)]
    return summarize_episodes(results)


def main(checkpoint_path: Path, episodes: int) -> EvalSummary:
    start = time.monotonic()
    ckpt = checkpoint.load(checkpoint_path)
    agent = Agent.from_checkpoint(ckpt)
    log.info('evaluating %s (mode %s, step %d) over %d episodes', checkpoint_path, ckpt.config.mode, ckpt.step, episodes)
    summary = evaluate_agent(agent, ckpt.config.env, episodes)
    log.notice(
        'return %s, cost %s, balance %s (%s)',
        summary.episode_return,
        summary.episode_cost,
        summary.balance,
        humanfriendly.format_timespan(time.monotonic() - start),
    )
    return summary
