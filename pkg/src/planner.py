"""Safe-improvement planning over the world model, plus the fixed-threshold CCE baseline.

Candidates are handled as batches: a :class:`CandidateSet` holds ``n`` action
sequences of shape ``(horizon, action_dim)`` together with their estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import StrEnum
from typing import TYPE_CHECKING, NamedTuple, Protocol

import torch
from torch import Tensor

from src.core.config import FinalSelection, PlannerConfig, PlannerMode, ValueMode
from src.core.errors import ConfigurationError

if TYPE_CHECKING:
    from src.world_model import Policy

ACTION_LOW, ACTION_HIGH = -1.0, 1.0


class LatentModel(Protocol):
    gamma: float
    cost_gamma: float

    def predict_next(self, z: Tensor, a: Tensor) -> Tensor: ...
    def predict_reward(self, z: Tensor, a: Tensor) -> Tensor: ...
    def predict_cost_heads(self, z: Tensor, a: Tensor) -> Tensor: ...
    def value_reward(self, z: Tensor, a: Tensor, mode: ValueMode = ValueMode.AVG) -> Tensor: ...
    def value_cost(self, z: Tensor, a: Tensor) -> Tensor: ...


class Provenance(StrEnum):
    POLICY_PRIOR = 'policy-prior'
    SAMPLED = 'sampled'


class CandidateSequence(NamedTuple):
    actions: Tensor
    provenance: Provenance
    value: float
    cost: float


@dataclass(frozen=True)
class CandidateSet:
    actions: Tensor
    from_prior: Tensor
    values: Tensor | None = None
    costs: Tensor | None = None

    def __len__(self) -> int:
        return self.actions.shape[0]

    def __getitem__(self, index: int) -> CandidateSequence:
        return CandidateSequence(
            actions=self.actions[index],
            provenance=Provenance.POLICY_PRIOR if bool(self.from_prior[index]) else Provenance.SAMPLED,
            value=math.nan if self.values is None else float(self.values[index]),
            cost=math.nan if self.costs is None else float(self.costs[index]),
        )

    @property
    def evaluated(self) -> bool:
        return self.values is not None and self.costs is not None

    def take(self, index: Tensor) -> CandidateSet:
        return CandidateSet(
            actions=self.actions[index],
            from_prior=self.from_prior[index],
            values=None if self.values is None else self.values[index],
            costs=None if self.costs is None else self.costs[index],
        )

    def with_estimates(self, values: Tensor, costs: Tensor) -> CandidateSet:
        return replace(self, values=values, costs=costs)

    @staticmethod
    def concat(*sets: CandidateSet) -> CandidateSet:
        parts = [s for s in sets if len(s)]
        if not all(s.evaluated for s in parts):
            msg = 'only evaluated candidate sets can be concatenated'
            raise ConfigurationError(msg)
        return CandidateSet(
            actions=torch.cat([s.actions for s in parts]),
            from_prior=torch.cat([s.from_prior for s in parts]),
            values=torch.cat([s.values for s in parts]),
            costs=torch.cat([s.costs for s in parts]),
        )


class EliteSelection(NamedTuple):
    elites: CandidateSet
    fallback: bool


@dataclass(frozen=True)
class PlanOutcome:
    action: Tensor
    sequence: Tensor
    mean: Tensor
    std: Tensor
    value: float
    cost: float
    chosen_value: float
    chosen_cost: float
    elite_count: int
    fallback: bool
    thresholds: tuple[float, float] | None = None


def generate_policy_prior(
    z0: Tensor,
    policy: Policy,
    model: LatentModel,
    count: int,
    horizon: int,
    *,
    deterministic: bool = False,
    generator: torch.Generator | None = None,
) -> CandidateSet:
    """Roll ``count`` policy trajectories of length ``horizon`` through the model from ``z0``."""
    if count < 1:
        msg = f'policy prior needs at least one sequence, got {count}'
        raise ConfigurationError(msg)
    z = z0.expand(count, z0.shape[-1])
    steps = []
    with torch.no_grad():
        for _ in range(horizon):
            a, _ = policy.sample(z, deterministic=deterministic, generator=generator)
            steps.append(a)
            z = model.predict_next(z, a)
    actions = torch.stack(steps, dim=1).clamp(ACTION_LOW, ACTION_HIGH)
    return CandidateSet(actions=actions, from_prior=torch.ones(count, dtype=torch.bool))


@torch.no_grad()
def estimate_values(
    z0: Tensor,
    actions: Tensor,
    model: LatentModel,
    policy: Policy,
    *,
    cost_bootstrap: bool = True,
) -> tuple[Tensor, Tensor]:
    """Discounted model returns ``J`` and costs ``J_c`` for a batch of sequences ``(n, H, m)``.

    Costs use the most pessimistic cost head per step. The terminal bootstraps use the
    ensemble averages at the deterministic policy action; ``cost_bootstrap=False``
    leaves the cost bootstrap out.
    """
    n, horizon, _ = actions.shape
    z = z0.expand(n, z0.shape[-1])
    value = torch.zeros(n, dtype=z.dtype)
    cost = torch.zeros(n, dtype=z.dtype)
    for i in range(horizon):
        a = actions[:, i]
        value = value + model.gamma**i * model.predict_reward(z, a)
        cost = cost + model.cost_gamma**i * model.predict_cost_heads(z, a).max(0).values
        z = model.predict_next(z, a)
    terminal_action, _ = policy.sample(z, deterministic=True)
    value = value + model.gamma**horizon * model.value_reward(z, terminal_action, ValueMode.AVG)
    if cost_bootstrap:
        cost = cost + model.cost_gamma**horizon * model.value_cost(z, terminal_action)
    return value, cost


def evaluate(z0: Tensor, candidates: CandidateSet, model: LatentModel, policy: Policy, *, cost_bootstrap: bool = True) -> CandidateSet:
    if not len(candidates):
        empty = torch.zeros(0, dtype=z0.dtype)
        return candidates.with_estimates(empty, empty)
    values, costs = estimate_values(z0, candidates.actions, model, policy, cost_bootstrap=cost_bootstrap)
    return candidates.with_estimates(values, costs)


def set_thresholds(prior: CandidateSet) -> tuple[float, float]:
    """Mean estimated return and cost of the policy prior."""
    if not len(prior) or not prior.evaluated:
        msg = 'thresholds need a non-empty, evaluated policy prior'
        raise ConfigurationError(msg)
    return float(prior.values.mean()), float(prior.costs.mean())


def rank_by_value(candidates: CandidateSet) -> Tensor:
    """Indices sorted by value (descending), ties by cost (ascending), then by input position."""
    order = torch.argsort(candidates.costs, stable=True)
    return order[torch.argsort(candidates.values[order], descending=True, stable=True)]


def select_elites(candidates: CandidateSet, prior: CandidateSet, d_reward: float, d_cost: float, k: int) -> EliteSelection:
    """Candidates beating the prior's mean return without exceeding its mean cost.

    Falls back to the prior when no candidate qualifies; keeps the ``k`` best by value
    when more than ``k`` do.
    """
    improving = (candidates.values >= d_reward) & (candidates.costs <= d_cost)
    if not improving.any():
        return EliteSelection(prior, fallback=True)
    improvement = candidates.take(improving.nonzero().flatten())
    if len(improvement) <= k:
        return EliteSelection(improvement, fallback=False)
    return EliteSelection(improvement.take(rank_by_value(improvement)[:k]), fallback=False)


def select_feasible(candidates: CandidateSet, d_plan: float, k: int) -> EliteSelection:
    """Fixed-threshold selection: top-``k`` by value among ``J_c < d_plan``, else the ``k`` safest."""
    feasible = candidates.costs < d_plan
    if not feasible.any():
        order = torch.argsort(candidates.costs, stable=True)
        return EliteSelection(candidates.take(order[:k]), fallback=True)
    pool = candidates.take(feasible.nonzero().flatten())
    return EliteSelection(pool.take(rank_by_value(pool)[:k]), fallback=False)


def shift_warm_start(mean: Tensor) -> Tensor:
    """Drop the executed first step and append a zero action."""
    return torch.cat([mean[1:], torch.zeros_like(mean[:1])])


def _pick_final(elites: CandidateSet, cfg: PlannerConfig, generator: torch.Generator | None) -> int:
    if cfg.final_selection is FinalSelection.WEIGHTED:
        scores = elites.values - elites.values.max()
        probs = torch.softmax(scores / cfg.temperature, dim=0)
        return int(torch.multinomial(probs, 1, generator=generator))
    return int(torch.randint(len(elites), (1,), generator=generator))


def plan(
    z0: Tensor,
    warm_start: Tensor,
    cfg: PlannerConfig,
    model: LatentModel,
    policy: Policy,
    *,
    generator: torch.Generator | None = None,
) -> PlanOutcome:
    """Iteratively refit a Gaussian over action sequences to the selected elites.

    The adaptive mode thresholds candidates against the policy prior; the CCE modes
    use the fixed ``cfg.d_plan`` with (global) or without (local) the cost bootstrap.
    The prior is generated and evaluated once and reused by every iteration.
    """
    horizon = cfg.horizon
    if warm_start.shape[0] != horizon:
        msg = f'warm start has {warm_start.shape[0]} steps, planner horizon is {horizon}'
        raise ConfigurationError(msg)
    cost_bootstrap = cfg.mode is not PlannerMode.CCE_LOCAL
    prior = generate_policy_prior(z0, policy, model, cfg.num_prior, horizon, generator=generator)
    prior = evaluate(z0, prior, model, policy, cost_bootstrap=cost_bootstrap)
    thresholds = set_thresholds(prior) if cfg.mode is PlannerMode.ADAPTIVE else None

    mean = warm_start.to(z0.dtype)
    std = torch.full_like(mean, cfg.init_std)
    selection = EliteSelection(prior, fallback=True)
    for _ in range(cfg.iterations):
        noise = torch.randn((cfg.num_samples, *mean.shape), generator=generator, dtype=mean.dtype)
        sampled = CandidateSet(
            actions=(mean + std * noise).clamp(ACTION_LOW, ACTION_HIGH),
            from_prior=torch.zeros(cfg.num_samples, dtype=torch.bool),
        )
        sampled = evaluate(z0, sampled, model, policy, cost_bootstrap=cost_bootstrap)
        candidates = CandidateSet.concat(sampled, prior)
        if thresholds is not None:
            selection = select_elites(candidates, prior, *thresholds, cfg.num_elites)
        else:
            selection = select_feasible(candidates, cfg.d_plan, cfg.num_elites)
        elite_actions = selection.elites.actions
        mean = elite_actions.mean(0)
        std = elite_actions.std(0, correction=0).clamp_min(cfg.min_std)

    elites = selection.elites
    chosen = _pick_final(elites, cfg, generator)
    mean_value, mean_cost = estimate_values(z0, mean.unsqueeze(0), model, policy, cost_bootstrap=cost_bootstrap)
    sequence = elites.actions[chosen]
    return PlanOutcome(
        action=sequence[0],
        sequence=sequence,
        mean=mean,
        std=std,
        value=float(mean_value[0]),
        cost=float(mean_cost[0]),
        chosen_value=float(elites.values[chosen]),
        chosen_cost=float(elites.costs[chosen]),
        elite_count=len(elites),
        fallback=selection.fallback,
        thresholds=thresholds,
    )


def cce_plan(
    z0: Tensor,
    warm_start: Tensor,
    cfg: PlannerConfig,
    model: LatentModel,
    policy: Policy,
    *,
    d_plan: float | None = None,
    generator: torch.Generator | None = None,
) -> PlanOutcome:
    """Fixed-threshold constrained cross-entropy planning."""
    if cfg.mode is PlannerMode.ADAPTIVE:
        msg = 'cce_plan needs planner mode cce-global or cce-local'
        raise ConfigurationError(msg)
    if d_plan is not None:
        cfg = cfg.model_copy(update={'d_plan': d_plan})
    if cfg.d_plan < 0:
        msg = f'd_plan must be non-negative, got {cfg.d_plan}'
        raise ConfigurationError(msg)
    return plan(z0, warm_start, cfg, model, policy, generator=generator)
