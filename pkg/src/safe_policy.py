"""Maximum-entropy tanh-Gaussian policy trained against an Augmented Lagrangian cost constraint."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor, nn
from torch.distributions import Normal

from src.core.config import Aggregation, PolicyConfig
from src.numeric import DenseNet, forward
from src.world_model import aggregate, subsample

if TYPE_CHECKING:
    from src.world_model import Segment, WorldModel

LOG_2 = math.log(2.0)


def tanh_log_det(u: Tensor) -> Tensor:
    """``log(1 - tanh(u)**2)`` in a form that stays finite for large ``|u|``."""
    return 2.0 * (LOG_2 - u - F.softplus(-2.0 * u))


class PolicyNet(nn.Module):
    """Diagonal Gaussian over pre-squash actions; ``tanh`` keeps actions inside ``[-1, 1]``."""

    def __init__(self, cfg: PolicyConfig, latent_dim: int, action_dim: int, *, generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.action_dim = action_dim
        self.net = DenseNet([latent_dim, cfg.hidden_dim, 2 * action_dim], generator=generator)

    def distribution(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Mean and log-std; the log-std is squashed into ``[log_std_min, log_std_max]``."""
        mean, raw = forward(self.net, z).chunk(2, dim=-1)
        low, high = self.cfg.log_std_min, self.cfg.log_std_max
        log_std = low + 0.5 * (high - low) * (torch.tanh(raw) + 1)
        return mean, log_std

    def sample(self, z: Tensor, *, deterministic: bool = False, generator: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
        mean, log_std = self.distribution(z)
        std = log_std.exp()
        if deterministic:
            u = mean
        else:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
            u = mean + std * noise
        log_prob = (Normal(mean, std).log_prob(u) - tanh_log_det(u)).sum(-1)
        return torch.tanh(u), log_prob

    def act(self, z: Tensor, *, deterministic: bool = False, generator: torch.Generator | None = None) -> Tensor:
        action, _ = self.sample(z, deterministic=deterministic, generator=generator)
        return action


class LagrangianState(BaseModel):
    model_config = ConfigDict(frozen=True)

    multiplier: float = Field(default=0.0, ge=0)
    penalty: float = Field(default=1.0, gt=0)
    growth_rate: float = Field(default=1e-4, ge=0)
    budget: float = 0.1
    step: int = Field(default=0, ge=0)

    @classmethod
    def from_config(cls, cfg: PolicyConfig) -> LagrangianState:
        return cls(
            multiplier=cfg.initial_multiplier,
            penalty=cfg.initial_penalty,
            growth_rate=cfg.growth_rate,
            budget=cfg.budget,
        )


def psi_and_multiplier[T: (Tensor, float)](delta: T, state: LagrangianState) -> tuple[T, float]:
    """Augmented Lagrangian penalty ``Psi`` for violation ``delta`` and the next multiplier.

    ``Psi`` keeps the autograd graph of ``delta`` in the active branch; the inactive
    branch is constant in ``delta``.
    """
    lam, mu = state.multiplier, state.penalty
    shifted = lam + mu * float(delta)
    if shifted >= 0:
        return lam * delta + 0.5 * mu * delta**2, shifted
    return 0.0 * delta - lam**2 / (2 * mu), 0.0


def penalty_update(state: LagrangianState) -> LagrangianState:
    return state.model_copy(update={'penalty': max(state.penalty * (state.growth_rate + 1.0), 1.0), 'step': state.step + 1})


def lagrangian_step(state: LagrangianState, delta: float) -> LagrangianState:
    """Multiplier update with the current penalty, then the penalty growth."""
    _, multiplier = psi_and_multiplier(float(delta), state)
    return penalty_update(state.model_copy(update={'multiplier': multiplier}))


def delta(
    latents: Tensor,
    policy: PolicyNet,
    world_model: WorldModel,
    budget: float,
    *,
    actions: Tensor | None = None,
    heads: int | None = None,
    aggregation: Aggregation = Aggregation.AVG,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Mean cost value of the policy's actions over ``latents``, minus the budget.

    ``heads``/``aggregation`` select the ensemble estimate: ``heads`` of the cost-value
    heads drawn without replacement, reduced with avg or max. The default is the
    full-ensemble average.
    """
    if actions is None:
        actions, _ = policy.sample(latents, generator=generator)
    values = world_model.cost_q_values(latents, actions)
    if heads is not None:
        values = subsample(values, heads, generator)
    return aggregate(values, aggregation).mean() - budget


@dataclass
class PolicyLoss:
    total: Tensor
    delta: float
    psi: float
    q: float
    entropy: float


def rollout_latents(segment: Segment, world_model: WorldModel) -> Tensor:
    """Latents ``z_0 = h(s_0)``, ``z_{t+1} = f(z_t, a_t)`` along the stored actions, without gradient."""
    with torch.no_grad():
        z = world_model.encode(segment.obs[0])
        latents = [z]
        for t in range(segment.horizon):
            z = world_model.predict_next(z, segment.actions[t])
            latents.append(z)
    return torch.stack(latents)


def policy_loss(
    segment: Segment,
    world_model: WorldModel,
    lagrangian: LagrangianState,
    policy: PolicyNet,
    *,
    generator: torch.Generator | None = None,
) -> PolicyLoss:
    cfg = policy.cfg
    latents = rollout_latents(segment, world_model)
    actions, log_prob = policy.sample(latents, generator=generator)
    q = world_model.value_reward(latents, actions, cfg.q_mode, generator=generator)
    entropy = -log_prob
    weights = world_model.cfg.rho ** torch.arange(latents.shape[0], dtype=q.dtype).unsqueeze(-1)
    objective = (weights * (-cfg.alpha * q - cfg.beta * entropy)).sum(0).mean()
    violation = delta(
        latents,
        policy,
        world_model,
        lagrangian.budget,
        actions=actions,
        heads=cfg.delta_subsample,
        aggregation=cfg.delta_aggregation,
        generator=generator,
    )
    if cfg.constrained:
        psi, _ = psi_and_multiplier(violation, lagrangian)
        total = objective + psi
    else:
        psi = torch.zeros(())
        total = objective
    return PolicyLoss(
        total=total,
        delta=float(violation.detach()),
        psi=float(psi.detach()),
        q=float(q.detach().mean()),
        entropy=float(entropy.detach().mean()),
    )
