"""Ring replay buffer that hands out contiguous, single-episode segments."""

from __future__ import annotations

import numpy as np
import torch

from src.core.errors import ConfigurationError, UsageError
from src.world_model import Segment

MAX_DRAW_ROUNDS = 1_000


class ReplayBuffer:
    """Fixed-capacity transition store; the oldest transitions are overwritten first.

    Each transition remembers its episode id and its step inside the episode, so a
    window of ``length`` consecutive slots is a valid segment exactly when every slot
    belongs to the same episode with consecutive steps.
    """

    def __init__(self, capacity: int, obs_dim: int, action_dim: int, *, seed: int = 0) -> None:
        if capacity < 1:
            msg = f'buffer capacity must be positive, got {capacity}'
            raise ConfigurationError(msg)
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.costs = np.zeros(capacity, dtype=np.float32)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.episode_ids = np.full(capacity, -1, dtype=np.int64)
        self.steps = np.zeros(capacity, dtype=np.int64)
        self._cursor = 0
        self._size = 0
        self._episode = 0
        self._step = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self._size

    def add(
        self,
        obs: np.ndarray,
        action: np.ndarray,
        reward: float,
        cost: float,
        next_obs: np.ndarray,
        *,
        done: bool,
        terminal: bool = False,
    ) -> None:
        """Append one transition; ``done`` closes the episode, ``terminal`` stops bootstrapping."""
        if cost < 0:
            msg = f'cost must be non-negative, got {cost}'
            raise ConfigurationError(msg)
        i = self._cursor
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.costs[i] = cost
        self.next_obs[i] = next_obs
        self.terminals[i] = terminal
        self.episode_ids[i] = self._episode
        self.steps[i] = self._step
        self._cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self._step += 1
        if done:
            self._episode += 1
            self._step = 0

    def _windows(self, starts: np.ndarray, length: int) -> np.ndarray:
        return (starts[:, None] + np.arange(length)) % self.capacity

    def valid_starts(self, length: int) -> np.ndarray:
        """Start slots whose ``length``-window stays inside one stored episode."""
        if self._size < length:
            return np.zeros(0, dtype=np.int64)
        starts = np.arange(self._size) if self._size < self.capacity else np.arange(self.capacity)
        index = self._windows(starts, length)
        ids, steps = self.episode_ids[index], self.steps[index]
        same_episode = (ids == ids[:, :1]).all(axis=1) & (ids[:, 0] >= 0)
        consecutive = (np.diff(steps, axis=1) == 1).all(axis=1)
        return starts[same_episode & consecutive]

    def sample(self, batch_size: int, horizon: int) -> Segment:
        """Uniform segments of ``horizon + 1`` transitions, time-major.

        Start slots are drawn uniformly and windows crossing an episode boundary are
        redrawn.
        """
        length = horizon + 1
        chosen: list[np.ndarray] = []
        needed = batch_size
        for _ in range(MAX_DRAW_ROUNDS):
            if self._size < length:
                break
            starts = self._rng.integers(0, self._size, size=needed)
            index = self._windows(starts, length)
            ids, steps = self.episode_ids[index], self.steps[index]
            ok = (ids == ids[:, :1]).all(axis=1) & (np.diff(steps, axis=1) == 1).all(axis=1)
            chosen.append(starts[ok])
            needed -= int(ok.sum())
            if needed <= 0:
                break
        if needed > 0:
            msg = f'buffer holds no {length}-step segment yet ({self._size} transitions stored)'
            raise UsageError(msg)
        starts = np.concatenate(chosen)[:batch_size]
        index = self._windows(starts, length).T

        def tensor(array: np.ndarray) -> torch.Tensor:
            return torch.as_tensor(array[index])

        return Segment(
            obs=tensor(self.obs),
            actions=tensor(self.actions),
            rewards=tensor(self.rewards),
            costs=tensor(self.costs),
            next_obs=tensor(self.next_obs),
            dones=tensor(self.terminals),
        )
