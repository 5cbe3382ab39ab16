"""Discrete grid CMDP with exact dynamics, exact policy evaluation and an exact latent model.

States are cells ``index = y * size + x``; observations are one-hot vectors. Actions are
2-D continuous vectors mapped to the nearest of five moves (stay, right, left, up, down),
so the grid plugs into the same agent and planner as the point world.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor

from src.core import logger
from src.core.config import EnvConfig, ValueMode
from src.core.errors import ConfigurationError, UsageError

from .base import StepResult

log = logger.get('envs.grid')

DIRECTIONS = np.array([[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1]], dtype=np.float64)
NUM_ACTIONS = len(DIRECTIONS)
ROW_SUM_TOLERANCE = 1e-9


class OracleValues(NamedTuple):
    J: np.ndarray
    Jc: np.ndarray


class MonteCarloEstimate(NamedTuple):
    J: np.ndarray
    Jc: np.ndarray
    J_stderr: np.ndarray
    Jc_stderr: np.ndarray


def discretize(action: np.ndarray) -> np.ndarray:
    """Index of the nearest move for each action in ``(..., 2)``."""
    action = np.asarray(action, dtype=np.float64)
    distances = ((action[..., None, :] - DIRECTIONS) ** 2).sum(-1)
    return distances.argmin(-1)


class GridCMDP:
    """``size x size`` grid; entering a cell yields its reward and cost.

    With probability ``slip`` a move is replaced by one drawn uniformly from all five.
    Episodes end only by running out of time.
    """

    def __init__(
        self,
        size: int,
        reward_table: np.ndarray,
        cost_table: np.ndarray,
        *,
        slip: float = 0.0,
        episode_length: int = 25,
        start: int = 0,
    ) -> None:
        num_states = size * size
        reward_table = np.asarray(reward_table, dtype=np.float64).reshape(-1)
        cost_table = np.asarray(cost_table, dtype=np.float64).reshape(-1)
        if reward_table.shape != (num_states,) or cost_table.shape != (num_states,):
            msg = f'reward and cost tables need {num_states} entries for a {size}x{size} grid'
            raise ConfigurationError(msg)
        if (cost_table < 0).any():
            msg = 'cost table must be non-negative'
            raise ConfigurationError(msg)
        if not 0 <= slip < 1:
            msg = f'slip must lie in [0, 1), got {slip}'
            raise ConfigurationError(msg)
        if not 0 <= start < num_states:
            msg = f'start cell {start} is outside the grid'
            raise ConfigurationError(msg)
        self.size = size
        self.reward_table = reward_table
        self.cost_table = cost_table
        self.slip = slip
        self.start = start
        self._episode_length = episode_length
        self.transitions = self._build_transitions()
        # expected reward and cost of (state, action), shape (S, A)
        self.R = self.transitions @ reward_table
        self.C = self.transitions @ cost_table
        self._rng = np.random.default_rng(0)
        self.state = start
        self.t = 0
        self._done = True

    @classmethod
    def from_config(cls, cfg: EnvConfig) -> GridCMDP:
        """Start in the bottom-left corner, goal in the bottom-right, hazard wall in the middle column.

        The wall leaves the top row open, so the agent trades a detour against cost.
        """
        n = cfg.grid_size
        goal = n - 1
        reward = np.zeros(n * n)
        reward[goal] = 1.0
        cost = np.zeros(n * n)
        for y in range(n - 1):
            cell = y * n + n // 2
            if cell not in (0, goal):
                cost[cell] = 1.0
        return cls(n, reward, cost, slip=cfg.grid_slip, episode_length=cfg.grid_episode_length)

    @classmethod
    def random(cls, size: int, seed: int, *, slip: float = 0.1, hazard_fraction: float = 0.3, episode_length: int = 25) -> GridCMDP:
        rng = np.random.default_rng(seed)
        reward = rng.uniform(0.0, 1.0, size * size)
        cost = (rng.uniform(size=size * size) < hazard_fraction).astype(np.float64)
        return cls(size, reward, cost, slip=slip, episode_length=episode_length)

    @property
    def num_states(self) -> int:
        return self.size * self.size

    @property
    def num_actions(self) -> int:
        return NUM_ACTIONS

    @property
    def observation_dim(self) -> int:
        return self.num_states

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def episode_length(self) -> int:
        return self._episode_length

    @property
    def done(self) -> bool:
        return self._done

    def _build_transitions(self) -> np.ndarray:
        n, num_states = self.size, self.num_states
        deterministic = np.zeros((num_states, NUM_ACTIONS, num_states))
        for s in range(num_states):
            x, y = s % n, s // n
            for a, (dx, dy) in enumerate(DIRECTIONS.astype(int)):
                nx, ny = min(max(x + dx, 0), n - 1), min(max(y + dy, 0), n - 1)
                deterministic[s, a, ny * n + nx] = 1.0
        uniform = deterministic.mean(axis=1, keepdims=True)
        return (1.0 - self.slip) * deterministic + self.slip * uniform

    def one_hot(self, state: int) -> np.ndarray:
        obs = np.zeros(self.num_states, dtype=np.float32)
        obs[state] = 1.0
        return obs

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.state = self.start
        self.t = 0
        self._done = False
        log.debug('grid reset: %dx%d, start cell %d', self.size, self.size, self.start)
        return self.one_hot(self.state)

    def step(self, action: np.ndarray) -> StepResult:
        if self._done:
            msg = 'step() called on a finished episode; call reset() first'
            raise UsageError(msg)
        move = int(discretize(np.asarray(action).reshape(2)))
        self.state = int(self._rng.choice(self.num_states, p=self.transitions[self.state, move]))
        self.t += 1
        self._done = self.t >= self._episode_length
        return StepResult(
            self.one_hot(self.state),
            float(self.reward_table[self.state]),
            float(self.cost_table[self.state]),
            self._done,
        )


def _check_policy_table(env: GridCMDP, policy_table: np.ndarray) -> np.ndarray:
    table = np.asarray(policy_table, dtype=np.float64)
    if table.shape != (env.num_states, env.num_actions):
        msg = f'policy table must have shape {(env.num_states, env.num_actions)}, got {table.shape}'
        raise ConfigurationError(msg)
    if (table < 0).any() or not np.allclose(table.sum(-1), 1.0, atol=ROW_SUM_TOLERANCE, rtol=0):
        msg = 'policy table rows must be non-negative and sum to 1'
        raise ConfigurationError(msg)
    return table


def _check_discount(name: str, value: float) -> None:
    if not 0 <= value < 1:
        msg = f'{name} must lie in [0, 1), got {value}'
        raise ConfigurationError(msg)


def policy_kernel(env: GridCMDP, policy_table: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """State-to-state kernel and expected per-state reward and cost under the policy."""
    table = _check_policy_table(env, policy_table)
    kernel = np.einsum('sa,sat->st', table, env.transitions)
    return kernel, (table * env.R).sum(-1), (table * env.C).sum(-1)


def grid_oracle_values(env: GridCMDP, policy_table: np.ndarray, gamma: float, cost_gamma: float) -> OracleValues:
    """Exact discounted reward and cost values of every state, by a linear solve."""
    _check_discount('gamma', gamma)
    _check_discount('cost_gamma', cost_gamma)
    kernel, reward, cost = policy_kernel(env, policy_table)
    eye = np.eye(env.num_states)
    return OracleValues(
        J=np.linalg.solve(eye - gamma * kernel, reward),
        Jc=np.linalg.solve(eye - cost_gamma * kernel, cost),
    )


def bellman_residual(env: GridCMDP, policy_table: np.ndarray, values: OracleValues, gamma: float, cost_gamma: float) -> float:
    kernel, reward, cost = policy_kernel(env, policy_table)
    reward_residual = np.abs(reward + gamma * kernel @ values.J - values.J).max()
    cost_residual = np.abs(cost + cost_gamma * kernel @ values.Jc - values.Jc).max()
    return float(max(reward_residual, cost_residual))


def truncation_horizon(gamma: float, tolerance: float = 1e-10) -> int:
    """Steps after which the remaining discount weight drops below ``tolerance``."""
    if gamma == 0:
        return 1
    return math.ceil(math.log(tolerance) / math.log(gamma))


def _draw(cumulative: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(size=(cumulative.shape[0], 1))
    return np.minimum((u > cumulative).sum(-1), cumulative.shape[-1] - 1)


def monte_carlo_values(
    env: GridCMDP,
    policy_table: np.ndarray,
    gamma: float,
    cost_gamma: float,
    *,
    rollouts: int = 10_000,
    seed: int = 0,
    start: int | None = None,
    horizon: int | None = None,
) -> MonteCarloEstimate:
    """Sample discounted returns and costs, all rollouts advanced together.

    Estimates every state, or only ``start`` when given. Rollouts are truncated at
    ``horizon`` steps, by default where the discount weight falls below 1e-10.
    """
    _check_discount('gamma', gamma)
    _check_discount('cost_gamma', cost_gamma)
    table = _check_policy_table(env, policy_table)
    starts = np.arange(env.num_states) if start is None else np.array([start])
    steps = horizon or truncation_horizon(max(gamma, cost_gamma))
    rng = np.random.default_rng(seed)
    policy_cdf = table.cumsum(-1)
    kernel_cdf = env.transitions.cumsum(-1)

    state = np.repeat(starts, rollouts)
    returns = np.zeros(state.shape)
    costs = np.zeros(state.shape)
    for t in range(steps):
        action = _draw(policy_cdf[state], rng)
        state = _draw(kernel_cdf[state, action], rng)
        returns += gamma**t * env.reward_table[state]
        costs += cost_gamma**t * env.cost_table[state]

    returns = returns.reshape(len(starts), rollouts)
    costs = costs.reshape(len(starts), rollouts)
    scale = math.sqrt(rollouts)
    return MonteCarloEstimate(
        J=returns.mean(-1),
        Jc=costs.mean(-1),
        J_stderr=returns.std(-1, ddof=1) / scale,
        Jc_stderr=costs.std(-1, ddof=1) / scale,
    )


def _direction_tensor(dtype: torch.dtype) -> Tensor:
    return torch.as_tensor(DIRECTIONS, dtype=dtype)


def action_index(a: Tensor) -> Tensor:
    """Torch counterpart of :func:`discretize`."""
    distances = ((a.unsqueeze(-2) - _direction_tensor(a.dtype)) ** 2).sum(-1)
    return distances.argmin(-1)


class TabularPolicy:
    """Stochastic table policy with the learned policy's sampling interface.

    Latents are beliefs over cells; the policy acts for the most likely cell.
    """

    def __init__(self, policy_table: np.ndarray) -> None:
        self.table = torch.as_tensor(np.asarray(policy_table, dtype=np.float64))

    @classmethod
    def uniform(cls, env: GridCMDP) -> TabularPolicy:
        return cls(np.full((env.num_states, env.num_actions), 1.0 / env.num_actions))

    @classmethod
    def random(cls, env: GridCMDP, seed: int) -> TabularPolicy:
        return cls(np.random.default_rng(seed).dirichlet(np.ones(env.num_actions), size=env.num_states))

    def sample(self, z: Tensor, *, deterministic: bool = False, generator: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
        probs = self.table.to(z.dtype)[z.argmax(-1)]
        if deterministic:
            index = probs.argmax(-1)
        else:
            flat = probs.reshape(-1, probs.shape[-1])
            index = torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])
        log_prob = probs.gather(-1, index.unsqueeze(-1)).squeeze(-1).log()
        return _direction_tensor(z.dtype)[index], log_prob


class ExactGridModel:
    """The grid's true dynamics in the planner's latent-model interface.

    A latent is a belief vector over cells. Values are exact ``Q`` functions of
    ``policy_table``; the cost is repeated over ``num_cost_heads`` identical heads.
    """

    def __init__(self, env: GridCMDP, policy_table: np.ndarray, gamma: float, cost_gamma: float, *, num_cost_heads: int = 1) -> None:
        oracle = grid_oracle_values(env, policy_table, gamma, cost_gamma)
        self.env = env
        self.gamma = gamma
        self.cost_gamma = cost_gamma
        self.num_cost_heads = num_cost_heads
        self._P = torch.as_tensor(env.transitions)
        self._R = torch.as_tensor(env.R)
        self._C = torch.as_tensor(env.C)
        self._Q = torch.as_tensor(env.R + gamma * env.transitions @ oracle.J)
        self._Qc = torch.as_tensor(env.C + cost_gamma * env.transitions @ oracle.Jc)

    def encode(self, obs: Tensor) -> Tensor:
        return obs.to(torch.float64)

    def belief(self, state: int) -> Tensor:
        return torch.as_tensor(self.env.one_hot(state), dtype=torch.float64)

    def _pair(self, z: Tensor, a: Tensor) -> tuple[Tensor, Tensor]:
        lead = torch.broadcast_shapes(z.shape[:-1], a.shape[:-1])
        return z.expand(*lead, z.shape[-1]), action_index(a.to(z.dtype)).expand(lead)

    def _expect(self, table: Tensor, z: Tensor, a: Tensor) -> Tensor:
        z, index = self._pair(z, a)
        per_state = table.to(z.dtype).T[index]
        return (z * per_state).sum(-1)

    def predict_next(self, z: Tensor, a: Tensor) -> Tensor:
        z, index = self._pair(z, a)
        kernel = self._P.to(z.dtype).permute(1, 0, 2)[index]
        return torch.einsum('...s,...st->...t', z, kernel)

    def predict_reward(self, z: Tensor, a: Tensor) -> Tensor:
        return self._expect(self._R, z, a)

    def predict_cost_heads(self, z: Tensor, a: Tensor) -> Tensor:
        cost = self._expect(self._C, z, a)
        return cost.expand(self.num_cost_heads, *cost.shape)

    def value_reward(
        self,
        z: Tensor,
        a: Tensor,
        mode: ValueMode = ValueMode.AVG,
        *,
        target: bool = False,
        generator: torch.Generator | None = None,
    ) -> Tensor:
        del mode, target, generator
        return self._expect(self._Q, z, a)

    def value_cost(self, z: Tensor, a: Tensor, *, target: bool = False) -> Tensor:
        del target
        return self._expect(self._Qc, z, a)
