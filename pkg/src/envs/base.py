from typing import NamedTuple, Protocol

import numpy as np


class StepResult(NamedTuple):
    observation: np.ndarray
    reward: float
    cost: float
    done: bool
    # the episode ended in a terminal state rather than by running out of time
    terminal: bool = False


class Env(Protocol):
    @property
    def observation_dim(self) -> int: ...

    @property
    def action_dim(self) -> int: ...

    @property
    def episode_length(self) -> int: ...

    def reset(self, seed: int | None = None) -> np.ndarray: ...

    def step(self, action: np.ndarray) -> StepResult: ...
