"""Ablation grids: train every named variant over several seeds and tabulate the outcomes.

Grid file (TOML)::

    base = "config.toml"        # optional, relative to the grid file
    seeds = [0, 1, 2]

    [[runs]]
    name = "dplan-1"
    mode = "cce-global"
    planner.d_plan = 1.0

Writes ``ablation.csv`` (one row per run and seed) and ``ablation_summary.csv``
(mean and std per run) into ``<run_dir>/ablation-<grid stem>``.
"""

from __future__ import annotations

import tomllib
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from tqdm import tqdm

from src.core import logger
from src.core.config import RunConfig, load_config
from src.core.errors import ConfigurationError
from src.evaluate import evaluate_agent
from src.train import train
from src.utils.metrics import CsvLog, summarize

log = logger.get('ablate')

RECOMMENDED_SEEDS = 3
ROW_COLUMNS = ('name', 'seed', 'episode_return', 'episode_cost', 'cost_rate', 'balance')
SUMMARY_METRICS = ('episode_return', 'episode_cost', 'cost_rate', 'balance')


def flatten(table: dict[str, Any], prefix: str = '') -> dict[str, Any]:
    """Nested TOML tables to dotted override keys."""
    flat: dict[str, Any] = {}
    for key, value in table.items():
        dotted = f'{prefix}{key}'
        if isinstance(value, dict):
            flat.update(flatten(value, f'{dotted}.'))
        else:
            flat[dotted] = value
    return flat


class AblationRun(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    name: str = Field(min_length=1)
    overrides: dict[str, Any] = Field(default_factory=dict)


class AblationGrid(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    base: Path | None = None
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    runs: list[AblationRun] = Field(min_length=1)

    @field_validator('runs')
    @classmethod
    def _unique_names(cls, runs: list[AblationRun]) -> list[AblationRun]:
        names = [r.name for r in runs]
        if len(set(names)) != len(names):
            msg = f'run names must be unique, got {names}'
            raise ValueError(msg)
        return runs


def parse_grid(data: dict[str, Any]) -> AblationGrid:
    runs = []
    for table in data.get('runs', []):
        overrides = dict(table)
        name = overrides.pop('name', '')
        runs.append({'name': name, 'overrides': flatten(overrides)})
    try:
        return AblationGrid.model_validate({**data, 'runs': runs})
    except ValidationError as exc:
        msg = f'invalid ablation grid: {exc}'
        raise ConfigurationError(msg) from exc


def load_grid(path: Path) -> tuple[AblationGrid, RunConfig]:
    if not path.is_file():
        msg = f'ablation grid {path} not found'
        raise ConfigurationError(msg)
    try:
        data = tomllib.loads(path.read_text(encoding='utf-8'))
    except tomllib.TOMLDecodeError as exc:
        msg = f'cannot parse {path}: {exc}'
        raise ConfigurationError(msg) from exc
    grid = parse_grid(data)
    base = load_config(path.parent / grid.base) if grid.base else load_config()
    return grid, base


def run_grid(grid: AblationGrid, base: RunConfig, out_dir: Path) -> list[dict[str, Any]]:
    """Train and evaluate every run for every seed; returns the per-seed rows."""
    if len(grid.seeds) < RECOMMENDED_SEEDS:
        log.warning('only %d seeds per run; trends need at least %d', len(grid.seeds), RECOMMENDED_SEEDS)
    configs = [(run, base.with_overrides({**run.overrides, 'seed': seed})) for run in grid.runs for seed in grid.seeds]
    rows_log = CsvLog(out_dir / 'ablation.csv', ROW_COLUMNS, truncate=True)
    rows = []
    for run, cfg in tqdm(configs, desc='Ablation', leave=False):
        result = train(cfg, out_dir / run.name / f'seed-{cfg.seed}', show_progress=False)
        summary = evaluate_agent(result.agent, cfg.env, cfg.eval_episodes)
        row = {
            'name': run.name,
            'seed': cfg.seed,
            'episode_return': summary.episode_return.mean,
            'episode_cost': summary.episode_cost.mean,
            'cost_rate': result.metrics.cost_rate,
            'balance': summary.balance.mean,
        }
        rows_log.write([row])
        rows.append(row)
        log.notice('%s seed %d: return %.3f, cost %.3f', run.name, cfg.seed, row['episode_return'], row['episode_cost'])
    return rows


def summary_rows(rows: list[dict[str, Any]]) -> list[dict[str, Any]]:
    names = list(dict.fromkeys(row['name'] for row in rows))
    table = []
    for name in names:
        group = [row for row in rows if row['name'] == name]
        entry: dict[str, Any] = {'name': name, 'seeds': len(group)}
        for metric in SUMMARY_METRICS:
            stats = summarize(row[metric] for row in group)
            entry[f'{metric}_mean'] = stats.mean
            entry[f'{metric}_std'] = stats.std
        table.append(entry)
    return table


def main(grid_path: Path) -> Path:
    grid, base = load_grid(grid_path)
    logger.configure(base.log_dir)
    out_dir = base.run_dir / f'ablation-{grid_path.stem}'
    rows = run_grid(grid, base, out_dir)
    table = summary_rows(rows)
    columns = ['name', 'seeds'] + [f'{m}_{s}' for m in SUMMARY_METRICS for s in ('mean', 'std')]
    summary_path = out_dir / 'ablation_summary.csv'
    CsvLog(summary_path, columns, truncate=True).write(table)
    log.notice('ablation of %d runs x %d seeds written to %s', len(grid.runs), len(grid.seeds), out_dir)
    return out_dir
