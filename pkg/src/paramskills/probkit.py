"""Exact distribution arithmetic for the training objective.

Categorical and diagonal-Gaussian log-probabilities, closed-form KL
divergences, reparameterized Gaussian draws, and straight-through Gumbel
sampling of one-hot indicators.  Everything here is a pure function of its
inputs: callers supply the noise tensors, so all randomness lives outside
this module and runs stay reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class CategoricalParams:
    """Unnormalized log-probabilities over K categories, shape (..., K)."""

    logits: torch.Tensor


@dataclass
class DiagGaussianParams:
    """Mean and log-variance of a diagonal Gaussian, both shape (..., d).

    log-variances are clamped to [LOGVAR_MIN, LOGVAR_MAX] on construction so
    downstream exp() calls cannot overflow.
    """

    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        self.logvar = self.logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


def cat_kl(q: CategoricalParams, p: CategoricalParams) -> torch.Tensor:
    """KL(q || p) between categoricals, computed in log-space.

    Reduces over the trailing category dimension; leading dimensions
    broadcast.  Terms with q_k == 0 contribute exactly zero.
    """
    if q.logits.shape[-1] != p.logits.shape[-1]:
        raise ValueError(
            f"category counts differ: {q.logits.shape[-1]} vs {p.logits.shape[-1]}"
        )
    log_q = F.log_softmax(q.logits, dim=-1)
    log_p = F.log_softmax(p.logits, dim=-1)
    return (log_q.exp() * (log_q - log_p)).sum(dim=-1)


def gauss_kl_unitvar(q: DiagGaussianParams, p_mean: torch.Tensor) -> torch.Tensor:
    """KL(q || N(p_mean, I)) for a diagonal Gaussian q, reduced over dims."""
    if q.mean.shape[-1] != p_mean.shape[-1]:
        raise ValueError(f"dims differ: {q.mean.shape[-1]} vs {p_mean.shape[-1]}")
    var = q.logvar.exp()
    return 0.5 * (var + (q.mean - p_mean) ** 2 - 1.0 - q.logvar).sum(dim=-1)


def gauss_log_prob(x: torch.Tensor, params: DiagGaussianParams) -> torch.Tensor:
    """Log-density of x under a diagonal Gaussian, reduced over the last dim."""
    if x.shape[-1] != params.mean.shape[-1]:
        raise ValueError(f"dims differ: {x.shape[-1]} vs {params.mean.shape[-1]}")
    sq = (x - params.mean) ** 2 * torch.exp(-params.logvar)
    return -0.5 * (math.log(2.0 * math.pi) + params.logvar + sq).sum(dim=-1)


def reparam_sample(params: DiagGaussianParams, noise: torch.Tensor) -> torch.Tensor:
    """mean + exp(logvar / 2) * noise; differentiable w.r.t. the parameters."""
    if noise.shape[-1] != params.mean.shape[-1]:
        raise ValueError(f"dims differ: {noise.shape[-1]} vs {params.mean.shape[-1]}")
    return params.mean + torch.exp(0.5 * params.logvar) * noise


def sample_categorical_st(
    params: CategoricalParams, temperature: float, noise: torch.Tensor
) -> torch.Tensor:
    """One-hot Gumbel sample with a straight-through gradient.

    The forward value is the one-hot argmax of (logits + noise) / temperature;
    the backward pass treats the output as the softmax relaxation at the same
    temperature, so gradients flow into the logits.  `noise` must hold
    standard Gumbel draws of the same shape as the logits.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    soft = F.softmax((params.logits + noise) / temperature, dim=-1)
    index = soft.argmax(dim=-1, keepdim=True)
    hard = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    return (hard - soft).detach() + soft


class NoiseSource:
    """Seeded stream of standard-normal and standard-Gumbel tensors."""

    def __init__(self, seed: int, dtype: torch.dtype = torch.float32):
        self.generator = torch.Generator().manual_seed(int(seed) % 2**63)
        self.dtype = dtype

    def normal(self, *shape: int) -> torch.Tensor:
        return torch.randn(shape, generator=self.generator, dtype=self.dtype)

    def gumbel(self, *shape: int) -> torch.Tensor:
        u = torch.rand(shape, generator=self.generator, dtype=self.dtype)
        tiny = torch.finfo(self.dtype).tiny
        neg_log_u = -torch.log(u.clamp_min(tiny))
        return -torch.log(neg_log_u.clamp_min(tiny))
