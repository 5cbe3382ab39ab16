"""Point navigation with circular hazards: a small continuous CMDP.

Observation layout (float32, ``4 + 3 * observed_hazards`` entries):

- ``[0:2]`` agent velocity
- ``[2:4]`` goal position minus agent position
- then, for the ``observed_hazards`` hazards nearest to the agent, ``(dx, dy, radius)``
  with ``(dx, dy)`` the hazard center minus the agent position; missing hazards are zeros.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from src.core import logger
from src.core.config import EnvConfig
from src.core.errors import ConfigurationError, UsageError

from .base import StepResult

if TYPE_CHECKING:
    from collections.abc import Callable

log = logger.get('envs.point')

MAX_PLACEMENT_ATTEMPTS = 10_000


class PointHazardEnv:
    """Double-integrator point mass; cost 1 for every step ended inside a hazard."""

    def __init__(self, cfg: EnvConfig | None = None) -> None:
        self.cfg = cfg or EnvConfig()
        self._rng = np.random.default_rng(0)
        self.position = np.zeros(2)
        self.velocity = np.zeros(2)
        self.goal = np.zeros(2)
        self.hazard_centers = np.zeros((0, 2))
        self.t = 0
        self._done = True

    @property
    def observation_dim(self) -> int:
        return 4 + 3 * self.cfg.observed_hazards

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def episode_length(self) -> int:
        return self.cfg.episode_length

    @property
    def done(self) -> bool:
        return self._done

    def _uniform_point(self) -> np.ndarray:
        bound = self.cfg.arena_size
        return self._rng.uniform(-bound, bound, size=2)

    def _sample(self, accept: Callable[[np.ndarray], bool], what: str) -> np.ndarray:
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            point = self._uniform_point()
            if accept(point):
                return point
        msg = f'could not place the {what} after {MAX_PLACEMENT_ATTEMPTS} attempts; the arena is too crowded'
        raise ConfigurationError(msg)

    def reset(self, seed: int | None = None) -> np.ndarray:
        """Place agent, goal and hazards; hazards keep clear of the agent and never cover the goal."""
        cfg = self.cfg
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.position = self._uniform_point()
        self.velocity = np.zeros(2)
        self.goal = self._sample(lambda p: np.linalg.norm(p - self.position) >= cfg.min_goal_distance, 'goal')
        agent_gap = cfg.hazard_radius + cfg.hazard_clearance
        goal_gap = cfg.hazard_radius + cfg.goal_tolerance
        centers = [
            self._sample(
                lambda p: np.linalg.norm(p - self.position) >= agent_gap and np.linalg.norm(p - self.goal) >= goal_gap,
                'hazard',
            )
            for _ in range(cfg.num_hazards)
        ]
        self.hazard_centers = np.array(centers).reshape(-1, 2)
        self.t = 0
        self._done = False
        log.debug('point reset: goal at %s, %d hazards', np.round(self.goal, 3), len(self.hazard_centers))
        return self.observation()

    def place(self, position: np.ndarray, velocity: np.ndarray | None = None) -> np.ndarray:
        """Move the agent, e.g. to check the cost signal at a known point."""
        self.position = np.asarray(position, dtype=np.float64).copy()
        self.velocity = np.zeros(2) if velocity is None else np.asarray(velocity, dtype=np.float64).copy()
        return self.observation()

    def in_hazard(self, position: np.ndarray | None = None) -> bool:
        point = self.position if position is None else position
        if not len(self.hazard_centers):
            return False
        return bool((np.linalg.norm(self.hazard_centers - point, axis=1) < self.cfg.hazard_radius).any())

    def goal_distance(self) -> float:
        return float(np.linalg.norm(self.goal - self.position))

    def observation(self) -> np.ndarray:
        k = self.cfg.observed_hazards
        hazards = np.zeros((k, 3))
        if len(self.hazard_centers):
            offsets = self.hazard_centers - self.position
            nearest = np.argsort(np.linalg.norm(offsets, axis=1), kind='stable')[:k]
            hazards[: len(nearest), :2] = offsets[nearest]
            hazards[: len(nearest), 2] = self.cfg.hazard_radius
        return np.concatenate([self.velocity, self.goal - self.position, hazards.ravel()]).astype(np.float32)

    def step(self, action: np.ndarray) -> StepResult:
        if self._done:
            msg = 'step() called on a finished episode; call reset() first'
            raise UsageError(msg)
        cfg = self.cfg
        accel = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        previous_distance = self.goal_distance()

        velocity = self.velocity + cfg.acceleration * cfg.dt * accel
        speed = np.linalg.norm(velocity)
        if speed > cfg.max_speed:
            velocity *= cfg.max_speed / speed
        position = self.position + cfg.dt * velocity
        clipped = np.clip(position, -cfg.arena_size, cfg.arena_size)
        velocity[clipped != position] = 0.0
        self.position, self.velocity = clipped, velocity

        distance = self.goal_distance()
        reward = cfg.progress_coef * (previous_distance - distance)
        reached = distance <= cfg.goal_tolerance
        if reached:
            reward += cfg.goal_bonus
        cost = 1.0 if self.in_hazard() else 0.0
        self.t += 1
        self._done = reached or self.t >= cfg.episode_length
        return StepResult(self.observation(), float(reward), cost, self._done, terminal=reached)
