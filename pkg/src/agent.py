"""The learning agent: world model, safe policy, Lagrangian state and their optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import torch

from src.core import logger
from src.core.config import RunConfig, RunMode
from src.decision import Source, choose
from src.numeric import OptimizerState, check_parameters, gradients, optimizer_step, trainable
from src.planner import PlanOutcome, plan, shift_warm_start
from src.safe_policy import LagrangianState, PolicyNet, lagrangian_step, policy_loss
from src.world_model import WorldModel

if TYPE_CHECKING:
    from src.safe_policy import PolicyLoss
    from src.utils.checkpoint import Checkpoint
    from src.world_model import ModelLoss, Segment

log = logger.get('agent')

PLANNING_MODES = frozenset({RunMode.SPOWL, RunMode.PLAN_ONLY, RunMode.CCE_GLOBAL, RunMode.CCE_LOCAL, RunMode.UNCONSTRAINED})


@dataclass(frozen=True)
class Act:
    action: np.ndarray
    source: Source | None
    outcome: PlanOutcome | None = None


@dataclass
class UpdateStats:
    model_loss: float
    policy_loss: float
    delta: float
    multiplier: float
    penalty: float
    model_grad_norm: float
    policy_grad_norm: float
    terms: dict[str, float] = field(default_factory=dict)


class Agent:
    """Acts with plan-then-choose control and learns from replayed segments.

    Every random draw (network init, planner noise, policy sampling, head subsampling)
    comes from one generator seeded with ``cfg.seed``.
    """

    def __init__(self, cfg: RunConfig, obs_dim: int, action_dim: int) -> None:
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.planner_cfg = cfg.resolved_planner()
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.world_model = WorldModel(cfg.model, obs_dim, action_dim, generator=self.generator)
        self.policy = PolicyNet(cfg.resolved_policy(), cfg.model.latent_dim, action_dim, generator=self.generator)
        self.lagrangian = LagrangianState.from_config(cfg.policy)
        self.model_optimizer = OptimizerState(self.world_model.online_parameters(), lr=cfg.model.lr)
        self.policy_optimizer = OptimizerState(trainable(self.policy), lr=cfg.policy.lr)
        self.updates = 0
        self.warm_start = torch.zeros(self.planner_cfg.horizon, action_dim)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> Agent:
        agent = cls(checkpoint.config, checkpoint.obs_dim, checkpoint.action_dim)
        agent.world_model.load_state_dict(checkpoint.world_model)
        agent.policy.load_state_dict(checkpoint.policy)
        agent.lagrangian = checkpoint.lagrangian
        if checkpoint.optimizers:
            agent.model_optimizer.load_state_dict(checkpoint.optimizers['model'])
            agent.policy_optimizer.load_state_dict(checkpoint.optimizers['policy'])
        agent.updates = checkpoint.step
        return agent

    @property
    def plans(self) -> bool:
        return self.cfg.mode in PLANNING_MODES

    def reset_episode(self) -> None:
        self.warm_start = torch.zeros(self.planner_cfg.horizon, self.action_dim)

    def random_action(self) -> np.ndarray:
        return (torch.rand(self.action_dim, generator=self.generator) * 2 - 1).numpy()

    @torch.no_grad()
    def act(self, obs: np.ndarray, *, evaluate: bool = False) -> Act:
        """Pick the next action; ``evaluate`` makes the policy part deterministic."""
        z = self.world_model.encode(torch.as_tensor(obs, dtype=torch.float32))
        if not self.plans:
            action, _ = self.policy.sample(z, deterministic=evaluate, generator=self.generator)
            return Act(action.numpy(), Source.POLICY)

        outcome = plan(z, self.warm_start, self.planner_cfg, self.world_model, self.policy, generator=self.generator)
        self.warm_start = shift_warm_start(outcome.mean)
        if self.cfg.mode is not RunMode.SPOWL:
            return Act(outcome.action.numpy(), Source.PLAN, outcome)

        decision = choose(z, outcome.action, self.policy, self.world_model)
        action = decision.action
        if decision.source is Source.POLICY and not evaluate:
            action, _ = self.policy.sample(z, generator=self.generator)
        return Act(action.numpy(), decision.source, outcome)

    def _model_step(self, segment: Segment) -> tuple[ModelLoss, float]:
        wm = self.world_model
        targets = wm.loss_targets(segment, self.policy, self.generator)
        params = wm.online_parameters()
        result: list[ModelLoss] = []

        def loss_fn() -> torch.Tensor:
            result.append(wm.model_loss(segment, self.policy, targets=targets, generator=self.generator))
            return result[-1].total

        grads = gradients(params, loss_fn, {'update': self.updates, 'loss': 'model'})
        norm = optimizer_step(self.model_optimizer, params, grads, clip_norm=self.cfg.model.grad_clip_norm)
        check_parameters(wm, {'update': self.updates})
        wm.ema_update()
        return result[-1], norm

    def _policy_step(self, segment: Segment) -> tuple[PolicyLoss, float]:
        params = trainable(self.policy)
        result: list[PolicyLoss] = []

        def loss_fn() -> torch.Tensor:
            result.append(policy_loss(segment, self.world_model, self.lagrangian, self.policy, generator=self.generator))
            return result[-1].total

        grads = gradients(params, loss_fn, {'update': self.updates, 'loss': 'policy', 'multiplier': self.lagrangian.multiplier})
        norm = optimizer_step(self.policy_optimizer, params, grads, clip_norm=self.policy.cfg.grad_clip_norm)
        check_parameters(self.policy, {'update': self.updates})
        return result[-1], norm

    def update(self, segment: Segment) -> UpdateStats:
        """One model step, one policy step, then the Lagrangian step on the same batch's violation."""
        model, model_norm = self._model_step(segment)
        pol, policy_norm = self._policy_step(segment)
        if self.policy.cfg.constrained:
            self.lagrangian = lagrangian_step(self.lagrangian, pol.delta)
        self.updates += 1
        return UpdateStats(
            model_loss=float(model.total.detach()),
            policy_loss=float(pol.total.detach()),
            delta=pol.delta,
            multiplier=self.lagrangian.multiplier,
            penalty=self.lagrangian.penalty,
            model_grad_norm=model_norm,
            policy_grad_norm=policy_norm,
            terms=model.terms,
        )
