import math

import numpy as np
import pytest
import torch

from src.core.config import FinalSelection, PlannerConfig, PlannerMode
from src.core.errors import ConfigurationError
from src.envs.grid import ExactGridModel, GridCMDP, TabularPolicy, action_index
from src.planner import (
    CandidateSet,
    Provenance,
    cce_plan,
    estimate_values,
    generate_policy_prior,
    plan,
    rank_by_value,
    select_elites,
    select_feasible,
    set_thresholds,
    shift_warm_start,
)

RIGHT, UP, STAY = [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]


def _candidates(values: list[float], costs: list[float], *, prior: bool = False) -> CandidateSet:
    n = len(values)
    actions = torch.arange(n, dtype=torch.float64).reshape(n, 1, 1).expand(n, 2, 2).clone()
    return CandidateSet(
        actions=actions,
        from_prior=torch.full((n,), prior),
        values=torch.tensor(values, dtype=torch.float64),
        costs=torch.tensor(costs, dtype=torch.float64),
    )


def _stay_table(num_states: int) -> np.ndarray:
    table = np.zeros((num_states, 5))
    table[:, 0] = 1.0
    return table


@pytest.fixture
def corner_grid() -> tuple[ExactGridModel, TabularPolicy]:
    """2x2 grid: reward in cell 1 (right of the start), hazard in cell 2 (above it)."""
    env = GridCMDP(2, [0, 1, 0, 0], [0, 0, 1, 0])
    table = _stay_table(env.num_states)
    return ExactGridModel(env, table, 0.9, 0.8), TabularPolicy(table)


def test_estimate_values_matches_hand_computation(corner_grid) -> None:
    model, policy = corner_grid
    actions = torch.tensor([[RIGHT, STAY], [UP, STAY]], dtype=torch.float64)

    values, costs = estimate_values(model.belief(0), actions, model, policy)
    _, uncapped = estimate_values(model.belief(0), actions, model, policy, cost_bootstrap=False)

    # right then stay collects 1 per step forever; up then stay pays 1 per step forever
    assert values.tolist() == pytest.approx([1 + 0.9 + 0.81 * 10, 0.0])
    assert costs.tolist() == pytest.approx([0.0, 1 + 0.8 + 0.64 * 5])
    assert uncapped.tolist() == pytest.approx([0.0, 1.8])


def test_policy_prior_rolls_the_policy(corner_grid) -> None:
    model, policy = corner_grid

    prior = generate_policy_prior(model.belief(0), policy, model, 3, 4)

    assert prior.actions.shape == (3, 4, 2)
    assert torch.equal(prior.actions, torch.zeros(3, 4, 2, dtype=torch.float64))
    assert prior[0].provenance is Provenance.POLICY_PRIOR
    assert math.isnan(prior[0].value)


def test_policy_prior_needs_a_sequence(corner_grid) -> None:
    model, policy = corner_grid
    with pytest.raises(ConfigurationError):
        generate_policy_prior(model.belief(0), policy, model, 0, 2)


def test_set_thresholds_are_prior_means() -> None:
    assert set_thresholds(_candidates([1.0, 3.0], [0.5, 1.5], prior=True)) == (2.0, 1.0)
    with pytest.raises(ConfigurationError):
        set_thresholds(_candidates([], [], prior=True))


def test_rank_by_value_breaks_ties_by_cost_then_position() -> None:
    candidates = _candidates([1.0, 2.0, 2.0, 2.0], [0.0, 0.5, 0.1, 0.1])

    assert rank_by_value(candidates).tolist() == [2, 3, 1, 0]


def test_select_elites_falls_back_to_the_prior() -> None:
    prior = _candidates([1.0, 1.0], [1.0, 1.0], prior=True)
    candidates = _candidates([0.5, 2.0], [0.0, 5.0])

    selection = select_elites(candidates, prior, 1.0, 1.0, 4)

    assert selection.fallback
    assert selection.elites is prior


def test_select_elites_keeps_every_improvement_up_to_k() -> None:
    prior = _candidates([1.0], [1.0], prior=True)
    candidates = _candidates([1.0, 2.0, 3.0], [1.0, 0.5, 2.0])

    selection = select_elites(candidates, prior, 1.0, 1.0, 4)

    assert not selection.fallback
    assert selection.elites.values.tolist() == [1.0, 2.0]


def test_select_elites_keeps_the_k_best_improvements() -> None:
    prior = _candidates([0.0], [1.0], prior=True)
    candidates = _candidates([1.0, 4.0, 2.0, 3.0], [0.0, 0.0, 0.0, 0.0])

    selection = select_elites(candidates, prior, 0.0, 1.0, 2)

    assert selection.elites.values.tolist() == [4.0, 3.0]


def test_select_feasible_prefers_value_among_feasible() -> None:
    candidates = _candidates([5.0, 1.0, 2.0], [3.0, 0.0, 0.5])

    selection = select_feasible(candidates, 1.0, 1)

    assert not selection.fallback
    assert selection.elites.values.tolist() == [2.0]


def test_select_feasible_falls_back_to_the_safest() -> None:
    candidates = _candidates([5.0, 1.0, 2.0], [3.0, 2.0, 4.0])

    selection = select_feasible(candidates, 1.0, 2)

    assert selection.fallback
    assert selection.elites.costs.tolist() == [2.0, 3.0]


def test_select_feasible_with_infinite_threshold_is_pure_value() -> None:
    candidates = _candidates([5.0, 1.0, 2.0], [300.0, 0.0, 4.0])

    assert select_feasible(candidates, math.inf, 2).elites.values.tolist() == [5.0, 2.0]


def test_concat_requires_evaluated_sets() -> None:
    unevaluated = CandidateSet(actions=torch.zeros(1, 2, 2), from_prior=torch.zeros(1, dtype=torch.bool))
    with pytest.raises(ConfigurationError):
        CandidateSet.concat(_candidates([1.0], [0.0]), unevaluated)


def test_shift_warm_start_drops_the_first_step() -> None:
    mean = torch.tensor([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])

    assert shift_warm_start(mean).tolist() == [[2.0, 2.0], [3.0, 3.0], [0.0, 0.0]]


def test_plan_without_samples_returns_a_prior_action(corner_grid) -> None:
    model, policy = corner_grid
    cfg = PlannerConfig(horizon=2, iterations=2, num_samples=0, num_prior=4, num_elites=2)

    outcome = plan(model.belief(0), torch.zeros(2, 2), cfg, model, policy, generator=torch.Generator().manual_seed(0))

    assert outcome.action.tolist() == STAY
    assert torch.equal(outcome.mean, torch.zeros(2, 2, dtype=torch.float64))
    assert torch.allclose(outcome.std, torch.full((2, 2), cfg.min_std, dtype=torch.float64))
    assert outcome.thresholds is not None


def test_plan_finds_the_rewarding_move(corner_grid) -> None:
    model, policy = corner_grid
    cfg = PlannerConfig(
        horizon=2, iterations=4, num_samples=128, num_prior=4, num_elites=4, mode=PlannerMode.CCE_GLOBAL, d_plan=math.inf
    )

    outcome = plan(model.belief(0), torch.zeros(2, 2), cfg, model, policy, generator=torch.Generator().manual_seed(1))

    assert int(action_index(outcome.action)) == 1
    assert outcome.chosen_value == pytest.approx(10.0)
    assert outcome.thresholds is None


def test_adaptive_plan_improves_on_a_standing_prior(corner_grid) -> None:
    model, policy = corner_grid
    cfg = PlannerConfig(horizon=2, iterations=4, num_samples=128, num_prior=4, num_elites=4, final_selection=FinalSelection.WEIGHTED)

    outcome = plan(model.belief(0), torch.zeros(2, 2), cfg, model, policy, generator=torch.Generator().manual_seed(2))

    assert not outcome.fallback
    assert outcome.thresholds == pytest.approx((0.0, 0.0))
    assert outcome.chosen_value >= outcome.thresholds[0]
    assert outcome.chosen_cost <= outcome.thresholds[1]


def test_plan_rejects_a_mismatched_warm_start(corner_grid) -> None:
    model, policy = corner_grid
    with pytest.raises(ConfigurationError):
        plan(model.belief(0), torch.zeros(3, 2), PlannerConfig(horizon=2), model, policy)


def test_cce_plan_rejects_adaptive_mode_and_negative_threshold(corner_grid) -> None:
    model, policy = corner_grid
    with pytest.raises(ConfigurationError):
        cce_plan(model.belief(0), torch.zeros(2, 2), PlannerConfig(horizon=2), model, policy)
    with pytest.raises(ConfigurationError):
        cce_plan(model.belief(0), torch.zeros(2, 2), PlannerConfig(horizon=2, mode=PlannerMode.CCE_LOCAL), model, policy, d_plan=-1.0)


def test_cce_local_avoids_the_hazard_within_its_horizon(corner_grid) -> None:
    model, policy = corner_grid
    cfg = PlannerConfig(horizon=2, iterations=3, num_samples=64, num_prior=4, num_elites=4, mode=PlannerMode.CCE_LOCAL, d_plan=0.5)

    outcome = cce_plan(model.belief(0), torch.zeros(2, 2), cfg, model, policy, generator=torch.Generator().manual_seed(3))

    assert outcome.chosen_cost < 0.5
    assert int(action_index(outcome.action)) != 3


def test_adaptive_plan_matches_exhaustive_search_under_its_thresholds(corner_grid) -> None:
    model, policy = corner_grid
    z0 = model.belief(0)
    moves = torch.tensor([STAY, RIGHT, [-1.0, 0.0], UP, [0.0, -1.0]], dtype=torch.float64)
    sequences = torch.stack([torch.stack([a, b]) for a in moves for b in moves])
    values, costs = estimate_values(z0, sequences, model, policy)
    cfg = PlannerConfig(
        horizon=2, iterations=6, num_samples=128, num_prior=4, num_elites=8, final_selection=FinalSelection.WEIGHTED, temperature=0.01
    )

    outcome = plan(z0, torch.zeros(2, 2), cfg, model, policy, generator=torch.Generator().manual_seed(4))

    d_reward, d_cost = outcome.thresholds
    admissible = (values >= d_reward) & (costs <= d_cost)
    best = float(values[admissible].max())
    value, cost = estimate_values(z0, outcome.sequence.unsqueeze(0), model, policy)
    assert best == pytest.approx(10.0)
    assert float(value[0]) >= 0.95 * best
    assert float(cost[0]) <= d_cost
