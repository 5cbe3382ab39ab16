"""Slow property checks against independent references, run by the ``oracle-check`` command.

Each suite compares a component with something computed another way: finite
differences, a hand-derived table, a naive filter-and-sort, exhaustive search, exact
policy evaluation or Monte-Carlo rollouts.
"""

from __future__ import annotations

import itertools
import math
import time
from collections.abc import Callable
from dataclasses import dataclass

import humanfriendly
import numpy as np
import torch

from src.core import logger
from src.core.config import (
    Aggregation,
    EnvConfig,
    EnvKind,
    FinalSelection,
    ModelConfig,
    PlannerConfig,
    PlannerMode,
    PolicyConfig,
    ValueMode,
)
from src.envs import ExactGridModel, GridCMDP, TabularPolicy, bellman_residual, grid_oracle_values, monte_carlo_values
from src.envs.grid import DIRECTIONS, truncation_horizon
from src.numeric import DenseNet, OptimizerState, finite_difference_check, gradients, optimizer_step, trainable
from src.planner import CandidateSet, cce_plan, estimate_values, plan, select_elites
from src.representation import BinSpec, SimNormSpec, simnorm, symexp, symlog, twohot_decode, twohot_encode
from src.safe_policy import LagrangianState, PolicyNet, penalty_update, policy_loss, psi_and_multiplier
from src.utils.buffer import ReplayBuffer
from src.world_model import Segment, WorldModel

log = logger.get('oracle')

GRADIENT_TOLERANCE = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


SUITES: dict[str, Callable[[], tuple[bool, str]]] = {}


def suite(name: str) -> Callable[[Callable[[], tuple[bool, str]]], Callable[[], tuple[bool, str]]]:
    def register(func: Callable[[], tuple[bool, str]]) -> Callable[[], tuple[bool, str]]:
        SUITES[name] = func
        return func

    return register


def _randomize(module: torch.nn.Module, generator: torch.Generator) -> None:
    """Re-draw every dense layer, including the zero-initialised head outputs."""
    for child in module.modules():
        if isinstance(child, DenseNet):
            child.reset_parameters(generator)


def _tiny_model(generator: torch.Generator) -> tuple[WorldModel, PolicyNet]:
    cfg = ModelConfig(
        latent_dim=8,
        simnorm_group=4,
        hidden_dim=16,
        num_q=2,
        num_cost=2,
        num_cost_q=3,
        num_bins=21,
        horizon=2,
        reward_q_mode=ValueMode.AVG,
    )
    wm = WorldModel(cfg, obs_dim=4, action_dim=2, generator=generator)
    _randomize(wm, generator)
    policy = PolicyNet(PolicyConfig(hidden_dim=16, q_mode=ValueMode.AVG, delta_subsample=3), cfg.latent_dim, 2, generator=generator)
    return wm.double(), policy.double()


def _random_segment(generator: torch.Generator, horizon: int = 2, batch: int = 6, obs_dim: int = 4) -> Segment:
    lead = (horizon + 1, batch)
    return Segment(
        obs=torch.randn((*lead, obs_dim), generator=generator, dtype=torch.float64),
        actions=torch.rand((*lead, 2), generator=generator, dtype=torch.float64) * 2 - 1,
        rewards=torch.randn(lead, generator=generator, dtype=torch.float64),
        costs=torch.rand(lead, generator=generator, dtype=torch.float64),
        next_obs=torch.randn((*lead, obs_dim), generator=generator, dtype=torch.float64),
        dones=torch.zeros(lead, dtype=torch.bool),
    )


@suite('model-loss gradients')
def check_model_gradients() -> tuple[bool, str]:
    generator = torch.Generator().manual_seed(0)
    wm, policy = _tiny_model(generator)
    segment = _random_segment(generator)
    targets = wm.loss_targets(segment, policy, torch.Generator().manual_seed(1))
    result = finite_difference_check(
        wm.online_parameters(),
        lambda: wm.model_loss(segment, policy, targets=targets).total,
        generator=generator,
    )
    return result.max_relative_error <= GRADIENT_TOLERANCE, f'{result.checked} entries, worst {result.max_relative_error:.2e} at {result.worst_parameter}'


@suite('policy-loss gradients')
def check_policy_gradients() -> tuple[bool, str]:
    generator = torch.Generator().manual_seed(2)
    wm, policy = _tiny_model(generator)
    segment = _random_segment(generator)
    lagrangian = LagrangianState(multiplier=0.5, penalty=2.0, budget=0.0)
    result = finite_difference_check(
        trainable(policy),
        lambda: policy_loss(segment, wm, lagrangian, policy, generator=torch.Generator().manual_seed(3)).total,
        generator=generator,
    )
    return result.max_relative_error <= GRADIENT_TOLERANCE, f'{result.checked} entries, worst {result.max_relative_error:.2e} at {result.worst_parameter}'


@suite('augmented lagrangian table')
def check_lagrangian() -> tuple[bool, str]:
    # (multiplier, penalty, violation) -> (psi, next multiplier)
    table = [
        ((1.0, 2.0, 0.5), (0.75, 2.0)),
        ((1.0, 2.0, -1.0), (-0.25, 0.0)),
        ((0.0, 1.0, 0.0), (0.0, 0.0)),
        ((2.0, 4.0, -0.5), (0.0, 0.0)),
    ]
    failures = []
    for (lam, mu, violation), expected in table:
        psi, multiplier = psi_and_multiplier(violation, LagrangianState(multiplier=lam, penalty=mu))
        if not (math.isclose(psi, expected[0], abs_tol=1e-12) and math.isclose(multiplier, expected[1], abs_tol=1e-12)):
            failures.append(f'({lam}, {mu}, {violation}) -> ({psi}, {multiplier})')
    for (mu, growth), expected in (((0.1, 1e-4), 1.0), ((2.0, 0.5), 3.0)):
        got = penalty_update(LagrangianState(penalty=mu, growth_rate=growth)).penalty
        if not math.isclose(got, expected, abs_tol=1e-12):
            failures.append(f'penalty {mu} growth {growth} -> {got}')
    return not failures, '; '.join(failures) or f'{len(table) + 2} cases'


def naive_elites(values: list[float], costs: list[float], d_reward: float, d_cost: float, k: int) -> list[int] | None:
    improving = [i for i in range(len(values)) if values[i] >= d_reward and costs[i] <= d_cost]
    if not improving:
        return None
    if len(improving) <= k:
        return improving
    return sorted(improving, key=lambda i: (-values[i], costs[i], i))[:k]


@suite('elite selection')
def check_elite_selection(instances: int = 10_000) -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    prior = CandidateSet(
        actions=torch.full((1, 1, 1), -1.0),
        from_prior=torch.ones(1, dtype=torch.bool),
        values=torch.zeros(1),
        costs=torch.zeros(1),
    )
    branches = {'fallback': 0, 'all': 0, 'top-k': 0}
    for trial in range(instances):
        n = int(rng.integers(1, 16))
        # coarse values so that ties occur
        values = rng.integers(0, 6, n).astype(np.float64) / 2
        costs = rng.integers(0, 6, n).astype(np.float64) / 2
        d_reward, d_cost = float(rng.integers(0, 6)) / 2, float(rng.integers(0, 6)) / 2
        k = int(rng.integers(1, 8))
        candidates = CandidateSet(
            actions=torch.arange(n, dtype=torch.float64).reshape(n, 1, 1),
            from_prior=torch.zeros(n, dtype=torch.bool),
            values=torch.as_tensor(values),
            costs=torch.as_tensor(costs),
        )
        selection = select_elites(candidates, prior, d_reward, d_cost, k)
        expected = naive_elites(values.tolist(), costs.tolist(), d_reward, d_cost, k)
        improving = int(((values >= d_reward) & (costs <= d_cost)).sum())
        if expected is None:
            ok = selection.fallback and selection.elites is prior
            branches['fallback'] += 1
        else:
            got = selection.elites.actions[:, 0, 0].long().tolist()
            ok = not selection.fallback and got == expected
            branches['all' if improving <= k else 'top-k'] += 1
        if not ok:
            return False, f'instance {trial} differs from the filter-and-sort reference'
    return True, f'{instances} instances, branches {branches}'


def _exact_grid(size: int = 4, gamma: float = 0.9) -> tuple[GridCMDP, ExactGridModel, TabularPolicy]:
    env = GridCMDP.from_config(EnvConfig(kind=EnvKind.GRID, grid_size=size))
    table = np.full((env.num_states, env.num_actions), 1.0 / env.num_actions)
    return env, ExactGridModel(env, table, gamma, gamma), TabularPolicy(table)


def _all_sequences(horizon: int) -> torch.Tensor:
    moves = torch.as_tensor(DIRECTIONS, dtype=torch.float64)
    return torch.stack([torch.stack(seq) for seq in itertools.product(moves, repeat=horizon)])


def _plan_grid(model: ExactGridModel, policy: TabularPolicy, z0: torch.Tensor, d_plan: float, seed: int) -> tuple[float, float]:
    cfg = PlannerConfig(horizon=2, iterations=8, num_samples=256, num_prior=8, num_elites=16, mode=PlannerMode.CCE_GLOBAL)
    outcome = cce_plan(
        z0,
        torch.zeros(2, 2, dtype=torch.float64),
        cfg,
        model,
        policy,
        d_plan=d_plan,
        generator=torch.Generator().manual_seed(seed),
    )
    value, cost = estimate_values(z0, outcome.sequence.unsqueeze(0), model, policy)
    return float(value[0]), float(cost[0])


@suite('planner vs exhaustive search')
def check_planner_exhaustive() -> tuple[bool, str]:
    env, model, policy = _exact_grid()
    z0 = model.belief(env.start)
    values, costs = estimate_values(z0, _all_sequences(2), model, policy)
    levels = torch.unique(costs)
    d_cost = float(levels[len(levels) // 2]) + 1e-6
    best = float(values[costs <= d_cost].max())
    value, cost = _plan_grid(model, policy, z0, d_cost, seed=0)
    ok = cost <= d_cost and value >= best - 0.05 * abs(best) - 1e-9
    return ok, f'planner J={value:.4f} Jc={cost:.4f}, exhaustive best J={best:.4f} under Jc<={d_cost:.4f}'


def exhaustive_best(values: torch.Tensor, costs: torch.Tensor, d_reward: float, d_cost: float) -> float | None:
    """Best return among sequences clearing both adaptive thresholds, ``None`` if none does."""
    admissible = (values >= d_reward) & (costs <= d_cost)
    return float(values[admissible].max()) if admissible.any() else None


@suite('adaptive planner vs exhaustive search')
def check_adaptive_planner(seeds: int = 5) -> tuple[bool, str]:
    env, model, policy = _exact_grid()
    z0 = model.belief(env.start)
    values, costs = estimate_values(z0, _all_sequences(2), model, policy)
    cfg = PlannerConfig(
        horizon=2,
        iterations=8,
        num_samples=256,
        num_prior=8,
        num_elites=16,
        final_selection=FinalSelection.WEIGHTED,
        temperature=0.01,
    )
    failures = []
    for seed in range(seeds):
        outcome = plan(z0, torch.zeros(2, 2, dtype=torch.float64), cfg, model, policy, generator=torch.Generator().manual_seed(seed))
        d_reward, d_cost = outcome.thresholds
        best = exhaustive_best(values, costs, d_reward, d_cost)
        if best is None:
            if not outcome.fallback:
                failures.append(f'seed {seed}: no admissible sequence but the planner did not fall back')
            continue
        value, cost = estimate_values(z0, outcome.sequence.unsqueeze(0), model, policy)
        if outcome.fallback or float(cost[0]) > d_cost + 1e-9 or float(value[0]) < best - 0.05 * abs(best) - 1e-9:
            failures.append(f'seed {seed}: J={float(value[0]):.4f} Jc={float(cost[0]):.4f}, best J={best:.4f} under Jc<={d_cost:.4f}')
    return not failures, '; '.join(failures) or f'{seeds} seeds within 5% of the exhaustive optimum under the prior thresholds'


@suite('cce threshold trend')
def check_threshold_trend() -> tuple[bool, str]:
    env, model, policy = _exact_grid()
    z0 = model.belief(env.start)
    _, costs = estimate_values(z0, _all_sequences(2), model, policy)
    levels = torch.unique(costs).tolist()
    thresholds = [levels[0] + 1e-6, levels[len(levels) // 2] + 1e-6, levels[-1] + 1e-6, math.inf]
    chosen = [_plan_grid(model, policy, z0, d, seed=1)[0] for d in thresholds]
    slack = 0.05 * (max(chosen) - min(chosen) + 1e-9)
    ok = all(later >= earlier - slack for earlier, later in itertools.pairwise(chosen))
    return ok, ', '.join(f'd={d:.3g}: J={v:.4f}' for d, v in zip(thresholds, chosen, strict=True))


@suite('codecs')
def check_codecs(points: int = 1_000) -> tuple[bool, str]:
    bins = BinSpec()
    generator = torch.Generator().manual_seed(0)
    latent = simnorm(torch.randn(points, 64, generator=generator, dtype=torch.float64) * 5, SimNormSpec())
    group_error = float((latent.reshape(points, -1, 8).sum(-1) - 1).abs().max())
    y = torch.linspace(bins.vmin, bins.vmax, points, dtype=torch.float64)
    x = symexp(y)
    inverse_error = float(((symexp(symlog(x)) - x).abs() / x.abs().clamp_min(1)).max())
    encoded = twohot_encode(x, bins)
    roundtrip_error = float(((twohot_decode(encoded, bins) - x).abs() / x.abs().clamp_min(1)).max())
    support = int((encoded > 0).sum(-1).max())
    ok = group_error <= 1e-6 and inverse_error <= 1e-6 and roundtrip_error <= 1e-5 and support <= 2  # noqa: PLR2004
    return ok, f'simnorm {group_error:.1e}, symlog {inverse_error:.1e}, two-hot {roundtrip_error:.1e}, support {support}'


@suite('cost target aggregation')
def check_cost_target_order() -> tuple[bool, str]:
    generator = torch.Generator().manual_seed(4)
    wm, policy = _tiny_model(generator)
    segment = _random_segment(generator)
    targets = {}
    for how in Aggregation:
        wm.cfg = wm.cfg.model_copy(update={'cost_target_aggregation': how})
        targets[how] = wm.loss_targets(segment, policy, torch.Generator().manual_seed(5)).cost_q
    low, mid, high = targets[Aggregation.MIN], targets[Aggregation.AVG], targets[Aggregation.MAX]
    ok = bool((low < mid).all() and (mid < high).all())
    return ok, f'mean spread {float((high - low).mean()):.4f}'


@suite('squashed gaussian density')
def check_squashed_density(points: int = 200_001) -> tuple[bool, str]:
    cfg = PolicyConfig(hidden_dim=8)
    policy = PolicyNet(cfg, latent_dim=4, action_dim=1, generator=torch.Generator().manual_seed(6)).double()
    z = torch.full((1, 4), 0.25, dtype=torch.float64)
    mean, log_std = policy.distribution(z)
    a = torch.linspace(-1, 1, points, dtype=torch.float64)[1:-1]
    u = torch.atanh(a)
    std = log_std.exp()[0, 0]
    density = torch.exp(-0.5 * ((u - mean[0, 0]) / std) ** 2) / (std * math.sqrt(2 * math.pi)) / (1 - a**2)
    mass = float(torch.trapezoid(density, a))
    _, log_prob = policy.sample(z, generator=torch.Generator().manual_seed(7))
    action = policy.act(z, generator=torch.Generator().manual_seed(7))
    u_sample = torch.atanh(action[0, 0])
    reference = -0.5 * ((u_sample - mean[0, 0]) / std) ** 2 - torch.log(std * math.sqrt(2 * math.pi)) - torch.log(1 - action[0, 0] ** 2)
    log_prob_error = abs(float(log_prob[0]) - float(reference))
    return abs(mass - 1) <= 1e-3 and log_prob_error <= 1e-3, f'mass {mass:.5f}, log-prob error {log_prob_error:.1e}'  # noqa: PLR2004


@suite('grid policy evaluation')
def check_grid_values(rollouts: int = 1_000_000) -> tuple[bool, str]:
    env = GridCMDP.random(4, seed=0, slip=0.1)
    table = np.random.default_rng(1).dirichlet(np.ones(env.num_actions), size=env.num_states)
    gamma = 0.9
    values = grid_oracle_values(env, table, gamma, gamma)
    residual = bellman_residual(env, table, values, gamma, gamma)
    mc = monte_carlo_values(env, table, gamma, gamma, rollouts=rollouts, start=env.start, horizon=truncation_horizon(gamma, 1e-6))
    truncation = 1e-6 / (1 - gamma) * max(np.abs(env.reward_table).max(), env.cost_table.max())
    gap_j = abs(values.J[env.start] - mc.J[0])
    gap_c = abs(values.Jc[env.start] - mc.Jc[0])
    ok = residual <= 1e-9 and gap_j <= 3 * mc.J_stderr[0] + truncation and gap_c <= 3 * mc.Jc_stderr[0] + truncation  # noqa: PLR2004
    return ok, f'residual {residual:.1e}, |dJ| {gap_j:.2e} (se {mc.J_stderr[0]:.1e}), |dJc| {gap_c:.2e} (se {mc.Jc_stderr[0]:.1e})'


def _grid_buffer(env: GridCMDP, transitions: int, seed: int) -> ReplayBuffer:
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer(transitions, env.observation_dim, env.action_dim, seed=seed)
    obs = env.reset(seed=seed)
    for _ in range(transitions):
        action = rng.uniform(-1, 1, env.action_dim)
        result = env.step(action)
        buffer.add(obs, action, result.reward, result.cost, result.observation, done=result.done, terminal=result.terminal)
        obs = env.reset() if result.done else result.observation
    return buffer


@suite('world model fit on grid')
def check_model_fit(updates: int = 2_000) -> tuple[bool, str]:
    env = GridCMDP.from_config(EnvConfig(kind=EnvKind.GRID, grid_size=3))
    buffer = _grid_buffer(env, 1_000, seed=0)
    generator = torch.Generator().manual_seed(8)
    cfg = ModelConfig(latent_dim=16, simnorm_group=4, hidden_dim=64, num_bins=21, horizon=2, lr=1e-3)
    wm = WorldModel(cfg, env.observation_dim, env.action_dim, generator=generator)
    policy = PolicyNet(PolicyConfig(hidden_dim=32), cfg.latent_dim, env.action_dim, generator=generator)
    optimizer = OptimizerState(wm.online_parameters(), lr=cfg.lr)

    held_out = buffer.sample(256, 0)

    def prediction_error() -> float:
        with torch.no_grad():
            predicted = wm.predict_next(wm.encode(held_out.obs[0]), held_out.actions[0])
            return float(((predicted - wm.encode(held_out.next_obs[0])) ** 2).sum(-1).sqrt().mean())

    before = prediction_error()
    for _ in range(updates):
        segment = buffer.sample(64, cfg.horizon)
        targets = wm.loss_targets(segment, policy, generator)
        params = wm.online_parameters()
        grads = gradients(params, lambda segment=segment, targets=targets: wm.model_loss(segment, policy, targets=targets).total)
        optimizer_step(optimizer, params, grads, clip_norm=cfg.grad_clip_norm)
        wm.ema_update()
    after = prediction_error()

    def predicted_cost(state: int, move: int) -> float:
        z = wm.encode(torch.as_tensor(env.one_hot(state)))
        with torch.no_grad():
            return float(wm.predict_cost_heads(z, torch.as_tensor(DIRECTIONS[move], dtype=torch.float32)).mean())

    hazard, safe = predicted_cost(0, 1), predicted_cost(0, 3)
    ok = after * 10 <= before and hazard >= 0.5 and safe <= 0.1  # noqa: PLR2004
    return ok, f'latent error {before:.3e} -> {after:.3e}, cost into hazard {hazard:.3f}, into safe cell {safe:.3f}'


def run(names: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name, func in SUITES.items():
        if names and name not in names:
            continue
        start = time.monotonic()
        passed, detail = func()
        elapsed = humanfriendly.format_timespan(time.monotonic() - start)
        results.append(CheckResult(name, passed, detail))
        if passed:
            log.notice('PASS %s (%s): %s', name, elapsed, detail)
        else:
            log.error('FAIL %s (%s): %s', name, elapsed, detail)
    return results


def main() -> bool:
    torch.set_num_threads(1)
    results = run()
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error('%d of %d oracle suites failed: %s', len(failed), len(results), ', '.join(failed))
    else:
        log.notice('all %d oracle suites passed', len(results))
    return not failed
