"""Implicit world model: encoder, latent dynamics, reward/value/cost heads and their joint TD loss."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Protocol

import torch
from torch import Tensor, nn

from src.core.config import Aggregation, ModelConfig, ValueMode
from src.core.errors import ConfigurationError
from src.numeric import Activation, DenseNet, forward, stop_gradient, trainable
from src.representation import BinSpec, SimNormSpec, decode_logits, discrete_ce

if TYPE_CHECKING:
    from collections.abc import Iterable


class Policy(Protocol):
    def sample(self, z: Tensor, *, deterministic: bool = False, generator: torch.Generator | None = None) -> tuple[Tensor, Tensor]: ...


@dataclass(frozen=True)
class Segment:
    """Time-major slice of real experience: every field has leading shape ``(H + 1, batch)``.

    ``dones`` marks terminal transitions whose successor must not be bootstrapped.
    """

    obs: Tensor
    actions: Tensor
    rewards: Tensor
    costs: Tensor
    next_obs: Tensor
    dones: Tensor

    def __post_init__(self) -> None:
        lead = tuple(self.rewards.shape)
        if len(lead) != 2:  # noqa: PLR2004
            msg = f'rewards must have shape (H + 1, batch), got {lead}'
            raise ConfigurationError(msg)
        for name in ('obs', 'actions', 'next_obs'):
            if tuple(getattr(self, name).shape[:2]) != lead:
                msg = f'{name} leading shape {tuple(getattr(self, name).shape[:2])} does not match {lead}'
                raise ConfigurationError(msg)
        for name in ('costs', 'dones'):
            if tuple(getattr(self, name).shape) != lead:
                msg = f'{name} shape {tuple(getattr(self, name).shape)} does not match {lead}'
                raise ConfigurationError(msg)
        if (self.costs < 0).any():
            msg = 'costs must be non-negative'
            raise ConfigurationError(msg)

    @property
    def horizon(self) -> int:
        return self.rewards.shape[0] - 1

    @property
    def batch_size(self) -> int:
        return self.rewards.shape[1]

    def to(self, dtype: torch.dtype) -> Segment:
        return Segment(
            obs=self.obs.to(dtype),
            actions=self.actions.to(dtype),
            rewards=self.rewards.to(dtype),
            costs=self.costs.to(dtype),
            next_obs=self.next_obs.to(dtype),
            dones=self.dones,
        )


@dataclass(frozen=True)
class LossTargets:
    """Stop-gradient inputs of the joint loss."""

    next_latents: Tensor
    q: Tensor
    cost_q: Tensor


@dataclass
class ModelLoss:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)


def td_target(reward: Tensor, next_value: Tensor, discount: float, done: Tensor) -> Tensor:
    """One-step bootstrapped target; terminal transitions drop the bootstrap term."""
    return reward + discount * (1.0 - done.to(reward.dtype)) * next_value


def aggregate(values: Tensor, how: Aggregation) -> Tensor:
    """Reduce an ensemble of shape ``(heads, ...)`` over its first dimension."""
    match how:
        case Aggregation.MIN:
            return values.min(0).values
        case Aggregation.MAX:
            return values.max(0).values
        case Aggregation.AVG:
            return values.mean(0)


def subsample(values: Tensor, count: int, generator: torch.Generator | None = None) -> Tensor:
    """Pick ``count`` ensemble heads without replacement."""
    if count > values.shape[0]:
        msg = f'cannot subsample {count} of {values.shape[0]} heads'
        raise ConfigurationError(msg)
    if count == values.shape[0]:
        return values
    index = torch.randperm(values.shape[0], generator=generator)[:count]
    return values[index.to(values.device)]


def reduce_value(values: Tensor, mode: ValueMode, generator: torch.Generator | None = None) -> Tensor:
    if mode is ValueMode.AVG:
        return values.mean(0)
    if values.shape[0] < 2:  # noqa: PLR2004
        msg = 'min2of5 needs at least two value heads'
        raise ConfigurationError(msg)
    return subsample(values, 2, generator).min(0).values


def _zero_output_layer(net: DenseNet) -> DenseNet:
    with torch.no_grad():
        net.linears[-1].weight.zero_()
        net.linears[-1].bias.zero_()
    return net


class WorldModel(nn.Module):
    """Encoder ``h``, dynamics ``f``, reward head and the value, cost and cost-value ensembles.

    The value and cost-value ensembles have EMA copies (``target_q``, ``target_cost_q``)
    that are only touched by :meth:`ema_update`.
    """

    def __init__(self, cfg: ModelConfig, obs_dim: int, action_dim: int, *, generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.simnorm_spec = SimNormSpec(latent_dim=cfg.latent_dim, group_size=cfg.simnorm_group)
        self.bins = BinSpec(num_bins=cfg.num_bins, vmin=cfg.vmin, vmax=cfg.vmax)
        latent, hidden, nb = cfg.latent_dim, cfg.hidden_dim, cfg.num_bins
        za = latent + action_dim

        def latent_net(width: int) -> DenseNet:
            return DenseNet(
                [width, hidden, latent],
                output_activation=Activation.SOFTMAX_GROUP,
                group_size=cfg.simnorm_group,
                generator=generator,
            )

        def head() -> DenseNet:
            return _zero_output_layer(DenseNet([za, hidden, nb], generator=generator))

        self.encoder = latent_net(obs_dim)
        self.dynamics = latent_net(za)
        self.reward = head()
        self.q_heads = nn.ModuleList(head() for _ in range(cfg.num_q))
        self.cost_heads = nn.ModuleList(head() for _ in range(cfg.num_cost))
        self.cost_q_heads = nn.ModuleList(head() for _ in range(cfg.num_cost_q))
        self.target_q = copy.deepcopy(self.q_heads).requires_grad_(requires_grad=False)
        self.target_cost_q = copy.deepcopy(self.cost_q_heads).requires_grad_(requires_grad=False)
        self.decoder = DenseNet([latent, hidden, obs_dim], generator=generator) if cfg.decoder.enabled else None

    @property
    def gamma(self) -> float:
        return self.cfg.gamma

    @property
    def cost_gamma(self) -> float:
        return self.cfg.cost_gamma

    def online_parameters(self) -> dict[str, Tensor]:
        return trainable(self, exclude=('target_',))

    def _za(self, z: Tensor, a: Tensor) -> Tensor:
        if z.shape[-1] != self.cfg.latent_dim:
            msg = f'latent width {z.shape[-1]} does not match {self.cfg.latent_dim}'
            raise ConfigurationError(msg)
        if a.shape[-1] != self.action_dim:
            msg = f'action width {a.shape[-1]} does not match {self.action_dim}'
            raise ConfigurationError(msg)
        return torch.cat(_broadcast_pair(z, a), dim=-1)

    def encode(self, obs: Tensor) -> Tensor:
        return forward(self.encoder, obs)

    def predict_next(self, z: Tensor, a: Tensor) -> Tensor:
        return self.dynamics(self._za(z, a))

    def predict_reward(self, z: Tensor, a: Tensor) -> Tensor:
        return decode_logits(self.reward(self._za(z, a)), self.bins)

    def predict_cost_heads(self, z: Tensor, a: Tensor) -> Tensor:
        za = self._za(z, a)
        return torch.stack([decode_logits(head(za), self.bins) for head in self.cost_heads])

    def q_values(self, z: Tensor, a: Tensor, *, target: bool = False) -> Tensor:
        za = self._za(z, a)
        heads = self.target_q if target else self.q_heads
        return torch.stack([decode_logits(head(za), self.bins) for head in heads])

    def cost_q_values(self, z: Tensor, a: Tensor, *, target: bool = False) -> Tensor:
        za = self._za(z, a)
        heads = self.target_cost_q if target else self.cost_q_heads
        return torch.stack([decode_logits(head(za), self.bins) for head in heads])

    def value_reward(
        self,
        z: Tensor,
        a: Tensor,
        mode: ValueMode = ValueMode.AVG,
        *,
        target: bool = False,
        generator: torch.Generator | None = None,
    ) -> Tensor:
        return reduce_value(self.q_values(z, a, target=target), mode, generator)

    def value_cost(self, z: Tensor, a: Tensor, *, target: bool = False) -> Tensor:
        return self.cost_q_values(z, a, target=target).mean(0)

    @torch.no_grad()
    def loss_targets(self, segment: Segment, policy: Policy, generator: torch.Generator | None = None) -> LossTargets:
        next_latents = self.encode(segment.next_obs)
        next_actions, _ = policy.sample(next_latents, generator=generator)
        next_q = self.value_reward(next_latents, next_actions, self.cfg.reward_q_mode, target=True, generator=generator)
        next_cost_q = aggregate(self.cost_q_values(next_latents, next_actions, target=True), self.cfg.cost_target_aggregation)
        return LossTargets(
            next_latents=next_latents,
            q=td_target(segment.rewards, next_q, self.cfg.gamma, segment.dones),
            cost_q=td_target(segment.costs, next_cost_q, self.cfg.cost_gamma, segment.dones),
        )

    def td_targets(self, segment: Segment, policy: Policy, generator: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
        targets = self.loss_targets(segment, policy, generator)
        return targets.q, targets.cost_q

    def model_loss(
        self,
        segment: Segment,
        policy: Policy,
        *,
        targets: LossTargets | None = None,
        generator: torch.Generator | None = None,
    ) -> ModelLoss:
        """Joint consistency, reward, value, cost and cost-value loss over a latent rollout, weighted ``rho**t``."""
        cfg = self.cfg
        if segment.horizon != cfg.horizon:
            msg = f'segment horizon {segment.horizon} does not match the model horizon {cfg.horizon}'
            raise ConfigurationError(msg)
        if targets is None:
            targets = self.loss_targets(segment, policy, generator)
        next_latents = stop_gradient(targets.next_latents)
        consistency_coef = 0.0 if cfg.decoder.no_consistency else cfg.consistency_coef
        sums = dict.fromkeys(('consistency', 'reward', 'value', 'cost', 'cost_value'), 0.0)
        total = torch.zeros((), dtype=next_latents.dtype)
        z = self.encode(segment.obs[0])
        for t in range(segment.horizon + 1):
            za = self._za(z, segment.actions[t])
            z_next = self.dynamics(za)
            terms = {
                'consistency': ((z_next - next_latents[t]) ** 2).sum(-1).mean(),
                'reward': discrete_ce(self.reward(za), segment.rewards[t], self.bins).mean(),
                'value': _ensemble_ce(self.q_heads, za, targets.q[t], self.bins),
                'cost': _ensemble_ce(self.cost_heads, za, segment.costs[t], self.bins),
                'cost_value': _ensemble_ce(self.cost_q_heads, za, targets.cost_q[t], self.bins),
            }
            step_loss = (
                consistency_coef * terms['consistency']
                + cfg.reward_coef * terms['reward']
                + cfg.value_coef * terms['value']
                + cfg.cost_coef * terms['cost']
                + cfg.cost_value_coef * terms['cost_value']
            )
            total = total + cfg.rho**t * step_loss
            for name, value in terms.items():
                sums[name] += float(value.detach()) / (segment.horizon + 1)
            z = z_next
        if self.decoder is not None:
            reconstruction = self.decoder_loss(segment, cfg.decoder.weight)
            total = total + reconstruction
            sums['decoder'] = float(reconstruction.detach())
        return ModelLoss(total=total, terms=sums)

    def decoder_loss(self, segment: Segment, weight: float) -> Tensor:
        """Weighted mean squared reconstruction error of the observations from their latents."""
        if self.decoder is None:
            msg = 'decoder loss requested but the decoder head is disabled'
            raise ConfigurationError(msg)
        reconstruction = self.decoder(self.encode(segment.obs))
        return weight * ((reconstruction - segment.obs) ** 2).mean()

    @torch.no_grad()
    def ema_update(self, tau: float | None = None) -> None:
        rate = self.cfg.tau if tau is None else tau
        if not 0 < rate <= 1:
            msg = f'EMA rate must lie in (0, 1], got {rate}'
            raise ConfigurationError(msg)
        for target, online in ((self.target_q, self.q_heads), (self.target_cost_q, self.cost_q_heads)):
            for p_target, p_online in zip(target.parameters(), online.parameters(), strict=True):
                p_target.lerp_(p_online, rate)


def _broadcast_pair(z: Tensor, a: Tensor) -> tuple[Tensor, Tensor]:
    lead = torch.broadcast_shapes(z.shape[:-1], a.shape[:-1])
    return z.expand(*lead, z.shape[-1]), a.expand(*lead, a.shape[-1])


def _ensemble_ce(heads: Iterable[nn.Module], za: Tensor, target: Tensor, bins: BinSpec) -> Tensor:
    losses = [discrete_ce(head(za), target, bins).mean() for head in heads]
    return torch.stack(losses).mean()
