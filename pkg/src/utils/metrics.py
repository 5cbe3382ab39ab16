"""Episode and step bookkeeping plus the CSV files a run leaves behind."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import TYPE_CHECKING, Any

import numpy as np

from src.decision import Source

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence
    from pathlib import Path

    from src.planner import PlanOutcome


@dataclass
class EpisodeRecord:
    episode: int
    step: int
    episode_return: float
    episode_cost: float
    cost_rate: float
    balance: float
    length: int
    delta: float = math.nan
    multiplier: float = math.nan
    penalty: float = math.nan
    model_loss: float = math.nan
    policy_loss: float = math.nan
    plan_value_mean: float = math.nan
    plan_cost_mean: float = math.nan
    fallback_rate: float = math.nan


@dataclass
class StepRecord:
    """One environment step; the ``plan_*`` and threshold columns stay empty without a planner call."""

    step: int
    episode: int
    cost: float
    source: str
    plan_value: float | None = None
    plan_cost: float | None = None
    threshold_value: float | None = None
    threshold_cost: float | None = None
    fallback: bool | None = None

    @classmethod
    def build(cls, step: int, episode: int, cost: float, source: Source | None, outcome: PlanOutcome | None) -> StepRecord:
        record = cls(step, episode, cost, '' if source is None else source.value)
        if outcome is None:
            return record
        record.plan_value, record.plan_cost, record.fallback = outcome.value, outcome.cost, outcome.fallback
        if outcome.thresholds is not None:
            record.threshold_value, record.threshold_cost = outcome.thresholds
        return record


@dataclass
class Metrics:
    """Running totals over a whole run and the current episode.

    The cost rate is the mean cost per environment step since the start of the run.
    """

    total_steps: int = 0
    total_cost: float = 0.0
    episodes: int = 0
    episode_return: float = 0.0
    episode_cost: float = 0.0
    episode_length: int = 0
    plan_decisions: int = 0
    decisions: int = 0
    plan_calls: int = 0
    plan_value_sum: float = 0.0
    plan_cost_sum: float = 0.0
    fallbacks: int = 0
    steps: list[StepRecord] = field(default_factory=list)
    history: list[EpisodeRecord] = field(default_factory=list)

    @property
    def cost_rate(self) -> float:
        return self.total_cost / self.total_steps if self.total_steps else 0.0

    @property
    def balance(self) -> float:
        """Fraction of the current episode's actions that came from the planner."""
        return self.plan_decisions / self.decisions if self.decisions else 0.0

    def record_step(self, reward: float, cost: float, source: Source | None, outcome: PlanOutcome | None = None) -> None:
        self.total_steps += 1
        self.total_cost += cost
        self.episode_return += reward
        self.episode_cost += cost
        self.episode_length += 1
        if source is not None:
            self.decisions += 1
            self.plan_decisions += source is Source.PLAN
        if outcome is not None:
            self.plan_calls += 1
            self.plan_value_sum += outcome.value
            self.plan_cost_sum += outcome.cost
            self.fallbacks += outcome.fallback
        self.steps.append(StepRecord.build(self.total_steps, self.episodes, cost, source, outcome))

    def end_episode(self, **losses: float) -> EpisodeRecord:
        calls = self.plan_calls or math.nan
        record = EpisodeRecord(
            episode=self.episodes,
            step=self.total_steps,
            episode_return=self.episode_return,
            episode_cost=self.episode_cost,
            cost_rate=self.cost_rate,
            balance=self.balance,
            length=self.episode_length,
            plan_value_mean=self.plan_value_sum / calls,
            plan_cost_mean=self.plan_cost_sum / calls,
            fallback_rate=self.fallbacks / calls,
            **losses,
        )
        self.history.append(record)
        self.episodes += 1
        self.episode_return = self.episode_cost = self.plan_value_sum = self.plan_cost_sum = 0.0
        self.episode_length = self.plan_decisions = self.decisions = self.plan_calls = self.fallbacks = 0
        return record

    def drain_steps(self) -> list[StepRecord]:
        drained, self.steps = self.steps, []
        return drained


def audit_cost_rate(costs: Sequence[float]) -> list[float]:
    """Cost rate after every step, recomputed from the raw cost stream."""
    running = np.cumsum(np.asarray(costs, dtype=np.float64))
    return (running / np.arange(1, len(running) + 1)).tolist()


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float

    def __str__(self) -> str:
        return f'{self.mean:.3f} ± {self.std:.3f}'


def summarize(values: Iterable[float]) -> Summary:
    array = np.asarray(list(values), dtype=np.float64)
    if not len(array):
        return Summary(math.nan, math.nan)
    return Summary(float(array.mean()), float(array.std()))


class CsvLog:
    """Append-only CSV file; the header is written when the file is created or truncated."""

    def __init__(self, path: Path, columns: Sequence[str], *, truncate: bool = False) -> None:
        self.path = path
        self.columns = list(columns)
        if truncate or not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open('w', newline='', encoding='utf-8') as f:
                csv.writer(f).writerow(self.columns)

    @classmethod
    def for_records(cls, path: Path, record_type: type, *, truncate: bool = False) -> CsvLog:
        return cls(path, [f.name for f in fields(record_type)], truncate=truncate)

    def write(self, rows: Iterable[dict[str, Any] | Any]) -> None:
        with self.path.open('a', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=self.columns)
            for row in rows:
                writer.writerow(row if isinstance(row, dict) else asdict(row))


def read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))
