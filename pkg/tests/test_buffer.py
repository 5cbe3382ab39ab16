import numpy as np
import pytest
import torch

from src.core.errors import ConfigurationError, UsageError
from src.utils.buffer import ReplayBuffer


def _fill(buffer: ReplayBuffer, lengths: list[int]) -> None:
    """Episodes whose observations encode ``(episode, step)``."""
    for episode, length in enumerate(lengths):
        for step in range(length):
            obs = np.array([episode, step], dtype=np.float32)
            next_obs = np.array([episode, step + 1], dtype=np.float32)
            buffer.add(obs, np.zeros(1), float(step), 0.0, next_obs, done=step == length - 1)


def test_sampled_segments_stay_inside_one_episode() -> None:
    rng = np.random.default_rng(0)
    buffer = ReplayBuffer(500, 2, 1, seed=1)
    _fill(buffer, rng.integers(1, 12, size=60).tolist())

    segment = buffer.sample(64, horizon=3)

    assert segment.obs.shape == (4, 64, 2)
    episodes, steps = segment.obs[..., 0], segment.obs[..., 1]
    assert (episodes == episodes[0]).all()
    assert (steps[1:] - steps[:-1] == 1).all()
    assert torch.equal(segment.next_obs[:-1], segment.obs[1:])
    assert torch.equal(segment.rewards, steps)


def test_valid_starts_skip_episode_boundaries() -> None:
    buffer = ReplayBuffer(100, 2, 1)
    _fill(buffer, [3, 1, 4])

    assert buffer.valid_starts(2).tolist() == [0, 1, 4, 5, 6]
    assert buffer.valid_starts(5).tolist() == []


def test_cold_buffer_raises_usage_error() -> None:
    buffer = ReplayBuffer(100, 2, 1)
    _fill(buffer, [1, 1, 1])

    with pytest.raises(UsageError):
        buffer.sample(4, horizon=2)


def test_ring_overwrites_the_oldest_transitions() -> None:
    buffer = ReplayBuffer(8, 2, 1, seed=2)
    _fill(buffer, [5, 5, 5])

    assert len(buffer) == 8
    assert set(buffer.episode_ids.tolist()) == {1, 2}
    segment = buffer.sample(32, horizon=2)
    episodes, steps = segment.obs[..., 0], segment.obs[..., 1]
    assert (episodes == episodes[0]).all()
    assert (steps[1:] - steps[:-1] == 1).all()


def test_terminal_flags_become_dones() -> None:
    buffer = ReplayBuffer(10, 2, 1)
    for step in range(3):
        buffer.add(np.zeros(2), np.zeros(1), 0.0, 0.0, np.zeros(2), done=step == 2, terminal=step == 2)

    segment = buffer.sample(1, horizon=2)

    assert segment.dones[:, 0].tolist() == [False, False, True]


def test_negative_cost_is_rejected() -> None:
    buffer = ReplayBuffer(10, 2, 1)
    with pytest.raises(ConfigurationError):
        buffer.add(np.zeros(2), np.zeros(1), 0.0, -1.0, np.zeros(2), done=False)


def test_capacity_must_be_positive() -> None:
    with pytest.raises(ConfigurationError):
        ReplayBuffer(0, 2, 1)
