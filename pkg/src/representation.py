"""SimNorm latents, symlog transform and two-hot discrete regression."""

from __future__ import annotations

from typing import Self

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import Tensor

from src.core.errors import ConfigurationError
from src.numeric import group_softmax


class SimNormSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    latent_dim: int = Field(default=64, ge=2)
    group_size: int = Field(default=8, ge=2)

    @model_validator(mode='after')
    def _divides(self) -> Self:
        if self.latent_dim % self.group_size:
            msg = f'latent_dim {self.latent_dim} is not divisible by group_size {self.group_size}'
            raise ValueError(msg)
        return self


class BinSpec(BaseModel):
    """Bins uniformly spaced in symlog space, symmetric about zero."""

    model_config = ConfigDict(frozen=True)

    num_bins: int = Field(default=101, ge=3)
    vmin: float = -10.0
    vmax: float = 10.0

    @model_validator(mode='after')
    def _symmetric(self) -> Self:
        if self.num_bins % 2 == 0:
            msg = f'num_bins must be odd, got {self.num_bins}'
            raise ValueError(msg)
        if not self.vmin < 0 < self.vmax or self.vmin != -self.vmax:
            msg = f'bounds must satisfy vmin == -vmax < 0, got ({self.vmin}, {self.vmax})'
            raise ValueError(msg)
        return self

    @property
    def bin_size(self) -> float:
        return (self.vmax - self.vmin) / (self.num_bins - 1)

    def centers(self, dtype: torch.dtype = torch.float32) -> Tensor:
        return torch.linspace(self.vmin, self.vmax, self.num_bins, dtype=dtype)


def simnorm(v: Tensor, spec: SimNormSpec) -> Tensor:
    if v.shape[-1] != spec.latent_dim:
        msg = f'latent width {v.shape[-1]} does not match {spec.latent_dim}'
        raise ConfigurationError(msg)
    return group_softmax(v, spec.group_size)


def symlog(x: Tensor) -> Tensor:
    return torch.sign(x) * torch.log1p(torch.abs(x))


def symexp(y: Tensor) -> Tensor:
    return torch.sign(y) * torch.expm1(torch.abs(y))


def twohot_encode(x: Tensor, bins: BinSpec) -> Tensor:
    """Interpolated mass on the two bins around ``symlog(x)``; values outside the range are clamped."""
    y = symlog(x).clamp(bins.vmin, bins.vmax)
    position = (y - bins.vmin) / bins.bin_size
    lower = position.floor().clamp(0, bins.num_bins - 2)
    upper_weight = (position - lower).unsqueeze(-1)
    index = lower.long().unsqueeze(-1)
    encoded = torch.zeros(*x.shape, bins.num_bins, dtype=x.dtype, device=x.device)
    encoded.scatter_(-1, index, 1 - upper_weight)
    encoded.scatter_add_(-1, index + 1, upper_weight)
    return encoded


def twohot_decode(probs: Tensor, bins: BinSpec) -> Tensor:
    centers = bins.centers(probs.dtype).to(probs.device)
    return symexp((probs * centers).sum(-1))


def decode_logits(logits: Tensor, bins: BinSpec) -> Tensor:
    return twohot_decode(F.softmax(logits, dim=-1), bins)


def discrete_ce(logits: Tensor, target: Tensor, bins: BinSpec) -> Tensor:
    """Cross-entropy between ``softmax(logits)`` and the two-hot encoding of ``target``, per element."""
    if logits.shape[-1] != bins.num_bins:
        msg = f'logit width {logits.shape[-1]} does not match {bins.num_bins} bins'
        raise ConfigurationError(msg)
    encoded = twohot_encode(target.to(logits.dtype), bins)
    return -(encoded * F.log_softmax(logits, dim=-1)).sum(-1)
