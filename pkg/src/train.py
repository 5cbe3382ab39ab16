"""Training loop: plan, choose, step, store, update.

A run leaves a directory with ``manifest.json``, per-episode ``metrics.csv``, per-step
``steps.csv`` (the cost stream behind the cost rate), ``eval.csv``, checkpoints
``step_<n>.pt`` and ``final.pt``, the mirrored ``run.log``, and ``crash.pt`` + ``crash.json`` if training diverges.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import TYPE_CHECKING, Any

import humanfriendly
import torch
from tqdm import tqdm

from src.agent import Agent, UpdateStats
from src.core import logger
from src.core.config import RunConfig, load_config
from src.core.errors import TrainingError, UsageError
from src.envs import make_env
from src.evaluate import EVAL_COLUMNS, episode_seed, evaluate_agent
from src.utils import checkpoint
from src.utils.buffer import ReplayBuffer
from src.utils.metrics import CsvLog, EpisodeRecord, Metrics, StepRecord

if TYPE_CHECKING:
    from src.decision import Source
    from src.planner import PlanOutcome

log = logger.get('train')

MANIFEST_VERSION = 1


def seed_everything(seed: int, threads: int = 1) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(mode=True)


def default_run_dir(cfg: RunConfig) -> Path:
    stamp = datetime.now().astimezone().strftime('%Y%m%d-%H%M%S')
    return cfg.run_dir / f'{cfg.mode}-seed{cfg.seed}-{stamp}'


@dataclass
class RunFiles:
    root: Path
    metrics: CsvLog
    steps: CsvLog
    evals: CsvLog

    @classmethod
    def create(cls, root: Path, cfg: RunConfig) -> RunFiles:
        """Prepare ``root``; files left by an earlier run in the same directory are reset."""
        root.mkdir(parents=True, exist_ok=True)
        for stale in [*root.glob('step_*.pt'), root / 'final.pt', root / 'crash.pt', root / 'crash.json']:
            stale.unlink(missing_ok=True)
        manifest = {
            'manifest_version': MANIFEST_VERSION,
            'checkpoint_version': checkpoint.FORMAT_VERSION,
            'seed': cfg.seed,
            'mode': cfg.mode.value,
            'config': cfg.model_dump(mode='json'),
        }
        (root / 'manifest.json').write_text(json.dumps(manifest, indent=2), encoding='utf-8')
        return cls(
            root=root,
            metrics=CsvLog.for_records(root / 'metrics.csv', EpisodeRecord, truncate=True),
            steps=CsvLog.for_records(root / 'steps.csv', StepRecord, truncate=True),
            evals=CsvLog(root / 'eval.csv', EVAL_COLUMNS, truncate=True),
        )

    def dump_crash(self, agent: Agent, step: int, exc: TrainingError) -> None:
        checkpoint.save(agent, self.root / 'crash.pt', step=step)
        report = {'step': step, 'updates': agent.updates, 'error': str(exc), 'context': exc.context}
        (self.root / 'crash.json').write_text(json.dumps(report, indent=2, default=str), encoding='utf-8')


@dataclass(frozen=True)
class TrainResult:
    run_dir: Path
    agent: Agent
    metrics: Metrics


def _episode_losses(stats: UpdateStats | None) -> dict[str, float]:
    if stats is None:
        return {}
    return {
        'delta': stats.delta,
        'multiplier': stats.multiplier,
        'penalty': stats.penalty,
        'model_loss': stats.model_loss,
        'policy_loss': stats.policy_loss,
    }


def train(cfg: RunConfig, run_dir: Path | None = None, *, show_progress: bool = True) -> TrainResult:
    """Run one seeded training job; identical config and seed give identical logs."""
    seed_everything(cfg.seed, cfg.threads)
    files = RunFiles.create(run_dir or default_run_dir(cfg), cfg)
    logger.configure(cfg.log_dir)
    with logger.run_log(files.root):
        return _train(cfg, files, show_progress=show_progress)


def _train(cfg: RunConfig, files: RunFiles, *, show_progress: bool) -> TrainResult:
    env = make_env(cfg.env)
    agent = Agent(cfg, env.observation_dim, env.action_dim)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.observation_dim, env.action_dim, seed=cfg.seed)
    metrics = Metrics()
    horizon = cfg.model.horizon
    stats: UpdateStats | None = None
    log.info('training %s for %d steps into %s', cfg.mode, cfg.total_steps, files.root)

    start = time.monotonic()
    obs = env.reset(seed=episode_seed(cfg.seed, 0))
    step = 0
    try:
        for step in tqdm(range(1, cfg.total_steps + 1), desc=f'Training {cfg.mode}', leave=False, disable=not show_progress):
            source: Source | None = None
            outcome: PlanOutcome | None = None
            if step <= cfg.seed_steps:
                action = agent.random_action()
            else:
                chosen = agent.act(obs)
                action, source, outcome = chosen.action, chosen.source, chosen.outcome
            result = env.step(action)
            buffer.add(obs, action, result.reward, result.cost, result.observation, done=result.done, terminal=result.terminal)
            metrics.record_step(result.reward, result.cost, source, outcome)

            if step >= cfg.seed_steps and len(buffer) > horizon:
                try:
                    segment = buffer.sample(cfg.batch_size, horizon)
                except UsageError:
                    segment = None
                if segment is not None:
                    stats = agent.update(segment)

            if result.done:
                files.steps.write(metrics.drain_steps())
                record = metrics.end_episode(**_episode_losses(stats))
                files.metrics.write([record])
                log.notice(
                    'episode %d: return %.3f, cost %.1f, cost rate %.4f, balance %.2f',
                    record.episode,
                    record.episode_return,
                    record.episode_cost,
                    record.cost_rate,
                    record.balance,
                )
                obs = env.reset(seed=episode_seed(cfg.seed, metrics.episodes))
                agent.reset_episode()
            else:
                obs = result.observation

            if cfg.eval_every and step % cfg.eval_every == 0:
                summary = evaluate_agent(agent, cfg.env, cfg.eval_episodes)
                files.evals.write([summary.row(step)])
                log.notice('eval at step %d: return %s, cost %s', step, summary.episode_return, summary.episode_cost)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                checkpoint.save(agent, files.root / f'step_{step}.pt', step=step)
    except TrainingError as exc:
        log.exception('training diverged at step %d', step)
        files.dump_crash(agent, step, exc)
        raise

    files.steps.write(metrics.drain_steps())
    checkpoint.save(agent, files.root / 'final.pt', step=cfg.total_steps)
    log.notice(
        'finished %d steps in %s: %d episodes, cost rate %.4f',
        cfg.total_steps,
        humanfriendly.format_timespan(time.monotonic() - start),
        metrics.episodes,
        metrics.cost_rate,
    )
    return TrainResult(files.root, agent, metrics)


def main(config_path: Path | None = None, *, seed: int | None = None, mode: str | None = None) -> Path:
    cfg = load_config(config_path)
    overrides: dict[str, Any] = {}
    if seed is not None:
        overrides['seed'] = seed
    if mode is not None:
        overrides['mode'] = mode
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return train(cfg).run_dir
