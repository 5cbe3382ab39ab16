"""Switching between the planner's action and the safe policy's action."""

from __future__ import annotations

from dataclasses import dataclass
from enum import StrEnum
from typing import TYPE_CHECKING

import torch

from src.core.config import ValueMode

if TYPE_CHECKING:
    from torch import Tensor

    from src.planner import LatentModel
    from src.world_model import Policy


class Source(StrEnum):
    PLAN = 'plan'
    POLICY = 'policy'


@dataclass(frozen=True)
class Decision:
    action: Tensor
    source: Source
    plan_value: float
    policy_value: float
    plan_cost: float
    policy_cost: float


def prefer_plan(plan_value: float, policy_value: float, plan_cost: float, policy_cost: float) -> bool:
    """The plan wins only when it is at least as valuable and at most as costly; ties go to the plan."""
    return plan_value >= policy_value and plan_cost <= policy_cost


@torch.no_grad()
def choose(z: Tensor, a_plan: Tensor, policy: Policy, model: LatentModel) -> Decision:
    a_policy, _ = policy.sample(z, deterministic=True)
    plan_value = float(model.value_reward(z, a_plan, ValueMode.AVG))
    policy_value = float(model.value_reward(z, a_policy, ValueMode.AVG))
    plan_cost = float(model.value_cost(z, a_plan))
    policy_cost = float(model.value_cost(z, a_policy))
    use_plan = prefer_plan(plan_value, policy_value, plan_cost, policy_cost)
    return Decision(
        action=a_plan if use_plan else a_policy,
        source=Source.PLAN if use_plan else Source.POLICY,
        plan_value=plan_value,
        policy_value=policy_value,
        plan_cost=plan_cost,
        policy_cost=policy_cost,
    )
