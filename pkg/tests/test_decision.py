import pytest
import torch

from src.decision import Source, choose, prefer_plan


@pytest.mark.parametrize(
    ('plan_value', 'policy_value', 'plan_cost', 'policy_cost', 'expected'),
    [
        (2.0, 1.0, 0.0, 1.0, True),
        (1.0, 1.0, 1.0, 1.0, True),
        (2.0, 1.0, 2.0, 1.0, False),
        (0.5, 1.0, 0.0, 1.0, False),
        (0.5, 1.0, 2.0, 1.0, False),
    ],
)
def test_prefer_plan_truth_table(plan_value: float, policy_value: float, plan_cost: float, policy_cost: float, expected: bool) -> None:
    assert prefer_plan(plan_value, policy_value, plan_cost, policy_cost) is expected


class FixedPolicy:
    def __init__(self, action: list[float]) -> None:
        self.action = torch.tensor(action)
        self.deterministic_calls = 0

    def sample(self, z, *, deterministic=False, generator=None):  # noqa: ARG002
        self.deterministic_calls += deterministic
        return self.action, torch.zeros(())


class LinearModel:
    """Value is the first action coordinate, cost the second."""

    gamma = cost_gamma = 0.9

    def value_reward(self, z, a, mode=None):  # noqa: ARG002
        return a[0]

    def value_cost(self, z, a):  # noqa: ARG002
        return a[1]


def test_choose_takes_the_dominating_plan() -> None:
    policy = FixedPolicy([0.0, 0.5])

    decision = choose(torch.zeros(4), torch.tensor([1.0, 0.5]), policy, LinearModel())

    assert decision.source is Source.PLAN
    assert decision.action.tolist() == [1.0, 0.5]
    assert policy.deterministic_calls == 1


def test_choose_keeps_the_policy_when_the_plan_costs_more() -> None:
    decision = choose(torch.zeros(4), torch.tensor([1.0, 0.75]), FixedPolicy([0.0, 0.5]), LinearModel())

    assert decision.source is Source.POLICY
    assert decision.action.tolist() == [0.0, 0.5]
    assert (decision.plan_value, decision.policy_value) == (1.0, 0.0)
    assert (decision.plan_cost, decision.policy_cost) == (0.75, 0.5)
