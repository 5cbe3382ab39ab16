"""Dense networks, gradient extraction and the adaptive optimizer used by every learned component."""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from enum import StrEnum
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch import Tensor, nn

from src.core.errors import ConfigurationError, TrainingError

if TYPE_CHECKING:
    from collections.abc import Iterator

GradientSet = dict[str, Tensor]


class Activation(StrEnum):
    LINEAR = 'linear'
    MISH = 'mish'
    TANH = 'tanh'
    SOFTMAX_GROUP = 'softmax-group'


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    in_features: int
    out_features: int
    activation: Activation


def group_softmax(x: Tensor, group_size: int) -> Tensor:
    """Softmax over consecutive groups of ``group_size`` entries of the last dimension."""
    width = x.shape[-1]
    if width % group_size:
        msg = f'width {width} is not divisible by group size {group_size}'
        raise ConfigurationError(msg)
    grouped = x.reshape(*x.shape[:-1], width // group_size, group_size)
    return F.softmax(grouped, dim=-1).reshape(x.shape)


def _activate(x: Tensor, activation: Activation, group_size: int | None) -> Tensor:
    match activation:
        case Activation.LINEAR:
            return x
        case Activation.MISH:
            return F.mish(x)
        case Activation.TANH:
            return torch.tanh(x)
        case Activation.SOFTMAX_GROUP:
            if group_size is None:
                msg = 'softmax-group activation needs a group size'
                raise ConfigurationError(msg)
            return group_softmax(x, group_size)


class DenseNet(nn.Module):
    """Feed-forward network: Mish hidden layers and a configurable output activation.

    Parameters are initialised uniformly in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` from
    ``generator`` so that two nets built with equally seeded generators are identical.
    """

    def __init__(
        self,
        widths: Sequence[int],
        *,
        output_activation: Activation = Activation.LINEAR,
        group_size: int | None = None,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        if len(widths) < 2:  # noqa: PLR2004
            msg = f'a network needs at least an input and an output width, got {list(widths)}'
            raise ConfigurationError(msg)
        if output_activation is Activation.SOFTMAX_GROUP and (group_size is None or widths[-1] % group_size):
            msg = f'output width {widths[-1]} is not divisible by group size {group_size}'
            raise ConfigurationError(msg)
        self.group_size = group_size
        self.linears = nn.ModuleList(nn.Linear(fan_in, fan_out) for fan_in, fan_out in zip(widths[:-1], widths[1:], strict=True))
        self.activations = [Activation.MISH] * (len(self.linears) - 1) + [output_activation]
        self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for linear in self.linears:
            bound = 1.0 / math.sqrt(linear.in_features)
            linear.weight.uniform_(-bound, bound, generator=generator)
            linear.bias.uniform_(-bound, bound, generator=generator)

    @property
    def in_features(self) -> int:
        return self.linears[0].in_features

    @property
    def out_features(self) -> int:
        return self.linears[-1].out_features

    @property
    def layers(self) -> list[LayerSpec]:
        return [
            LayerSpec(in_features=linear.in_features, out_features=linear.out_features, activation=activation)
            for linear, activation in zip(self.linears, self.activations, strict=True)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for linear, activation in zip(self.linears, self.activations, strict=True):
            x = _activate(linear(x), activation, self.group_size)
        return x


def forward(net: DenseNet, x: Tensor) -> Tensor:
    """Run ``net`` on ``x`` after checking the input width."""
    if x.shape[-1] != net.in_features:
        msg = f'input width {x.shape[-1]} does not match network input width {net.in_features}'
        raise ConfigurationError(msg)
    return net(x)


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


def check_finite(name: str, value: Tensor, context: Mapping[str, object] | None = None) -> None:
    if not torch.isfinite(value).all():
        msg = f'{name} is not finite'
        raise TrainingError(msg, {**(context or {}), name: value.detach().flatten()[:8].tolist()})


def check_parameters(module: nn.Module, context: Mapping[str, object] | None = None) -> None:
    for name, param in module.named_parameters():
        check_finite(f'parameter {name}', param, context)


def gradients(
    params: Mapping[str, Tensor] | nn.Module,
    loss_fn: Callable[[], Tensor],
    context: Mapping[str, object] | None = None,
) -> GradientSet:
    """Evaluate ``loss_fn`` and return d(loss)/d(param) for every named parameter.

    Parameters that the loss does not reach (including through ``stop_gradient``)
    get a zero gradient.
    """
    named = dict(params.named_parameters()) if isinstance(params, nn.Module) else dict(params)
    loss = loss_fn()
    if loss.numel() != 1:
        msg = f'loss must be a scalar, got shape {tuple(loss.shape)}'
        raise ConfigurationError(msg)
    check_finite('loss', loss, context)
    tensors = list(named.values())
    grads = torch.autograd.grad(loss, tensors, allow_unused=True, materialize_grads=True)
    return dict(zip(named, grads, strict=True))


class OptimizerState:
    """Adam moments, step counter and hyperparameters for one set of parameters."""

    def __init__(
        self,
        params: Mapping[str, Tensor] | nn.Module,
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        named = dict(params.named_parameters()) if isinstance(params, nn.Module) else dict(params)
        self.names = list(named)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self._adam = torch.optim.Adam(list(named.values()), lr=lr, betas=betas, eps=eps)

    @property
    def step_count(self) -> int:
        states = [s for s in self._adam.state.values() if 'step' in s]
        if not states:
            return 0
        return int(states[0]['step'])

    def moments(self) -> Iterator[tuple[str, Tensor, Tensor]]:
        params = self._adam.param_groups[0]['params']
        for name, param in zip(self.names, params, strict=True):
            state = self._adam.state.get(param, {})
            yield name, state.get('exp_avg', torch.zeros_like(param)), state.get('exp_avg_sq', torch.zeros_like(param))

    def state_dict(self) -> dict:
        return self._adam.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self._adam.load_state_dict(state)


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, Tensor] | nn.Module,
    grads: GradientSet,
    *,
    clip_norm: float | None = None,
) -> float:
    """Apply one Adam update in place; returns the gradient norm before clipping."""
    named = dict(params.named_parameters()) if isinstance(params, nn.Module) else dict(params)
    if list(named) != state.names:
        msg = 'parameter names do not match the optimizer state'
        raise ConfigurationError(msg)
    for name, param in named.items():
        grad = grads.get(name)
        if grad is None or grad.shape != param.shape:
            got = None if grad is None else tuple(grad.shape)
            msg = f'gradient for {name} has shape {got}, expected {tuple(param.shape)}'
            raise ConfigurationError(msg)
        param.grad = grad.detach().clone()
    tensors = list(named.values())
    if clip_norm is not None:
        norm = float(nn.utils.clip_grad_norm_(tensors, clip_norm))
    else:
        norm = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(t.grad) for t in tensors])))
    state._adam.step()  # noqa: SLF001
    state._adam.zero_grad(set_to_none=True)  # noqa: SLF001
    return norm


def trainable(module: nn.Module, exclude: Iterable[str] = ()) -> dict[str, Tensor]:
    """Named parameters that require gradients, minus any whose name starts with an excluded prefix."""
    prefixes = tuple(exclude)
    return {name: p for name, p in module.named_parameters() if p.requires_grad and not (prefixes and name.startswith(prefixes))}


class GradientCheck(BaseModel):
    checked: int
    max_relative_error: float
    worst_parameter: str


@torch.no_grad()
def _perturbed_loss(param: Tensor, index: int, delta: float, loss_fn: Callable[[], Tensor]) -> float:
    flat = param.view(-1)
    original = flat[index].item()
    flat[index] = original + delta
    value = float(loss_fn())
    flat[index] = original
    return value


def finite_difference_check(
    params: Mapping[str, Tensor],
    loss_fn: Callable[[], Tensor],
    *,
    step: float = 1e-4,
    samples_per_param: int = 8,
    floor: float = 1e-3,
    generator: torch.Generator | None = None,
) -> GradientCheck:
    """Compare analytic gradients of ``loss_fn`` with central differences.

    ``loss_fn`` must be deterministic: reseed any sampling inside it on every call.
    The relative error of one entry is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    analytic = gradients(params, loss_fn)
    worst, worst_name, checked = 0.0, '', 0
    for name, param in params.items():
        count = param.numel()
        picks = torch.randperm(count, generator=generator)[: min(samples_per_param, count)]
        for index in picks.tolist():
            numeric = (_perturbed_loss(param, index, step, loss_fn) - _perturbed_loss(param, index, -step, loss_fn)) / (2 * step)
            exact = float(analytic[name].reshape(-1)[index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            checked += 1
            if error > worst:
                worst, worst_name = error, f'{name}[{index}]'
    return GradientCheck(checked=checked, max_relative_error=worst, worst_parameter=worst_name)
