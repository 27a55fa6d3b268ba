"""Assembly of the training loss.

Four terms over a padded batch: mean negative action log-likelihood under
the subpolicy, a categorical KL pulling the causal skill policy toward the
trajectory-level posterior, an expected Gaussian KL doing the same for the
continuous parameters (the expectation over skills is computed exactly, not
sampled), and a squared-norm penalty on the active continuous parameters.
All terms are means over valid (unmasked) steps so the weights stay
comparable across trajectory lengths; a sum-form per-trajectory bound
accessor is provided for exactness checks against brute-force enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .probkit import (
    CategoricalParams,
    DiagGaussianParams,
    cat_kl,
    gauss_kl_unitvar,
    gauss_log_prob,
)
from .skillnet import ModelConfig, PolicyBundle
from .trajstore import Batch

FROM_Q = "from_q"
FROM_POLICY = "from_policy"

# Default weights for the Gaussian-head objective; beta_k / beta_z / lambda_norm.
# The scaled-down preset suits setups with deterministic-style action heads,
# whose reconstruction losses run smaller.


@dataclass
class LossWeights:
    beta_k: float = 0.5
    beta_z: float = 0.01
    lambda_norm: float = 0.1

    def __post_init__(self):
        if min(self.beta_k, self.beta_z, self.lambda_norm) < 0:
            raise ValueError("loss weights must be non-negative")


SCALED_DOWN_WEIGHTS = LossWeights(beta_k=0.1, beta_z=0.03, lambda_norm=0.03)


@dataclass
class LossReport:
    """The four loss terms plus their weighted total, as 0-d tensors."""

    bc: torch.Tensor
    kl_k: torch.Tensor
    kl_z: torch.Tensor
    norm_pen: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "bc": float(self.bc.detach()),
            "kl_k": float(self.kl_k.detach()),
            "kl_z": float(self.kl_z.detach()),
            "norm_pen": float(self.norm_pen.detach()),
            "total": float(self.total.detach()),
        }


@dataclass
class NoiseBundle:
    """Pre-drawn noise for one objective evaluation.

    gumbel: (B, M, K) standard Gumbel; z_skill: (B, K, d) standard normal for
    per-skill posterior draws; z_step: (B, M, d) standard normal for
    per-timestep policy draws.
    """

    gumbel: torch.Tensor
    z_skill: torch.Tensor
    z_step: torch.Tensor


def draw_noise(n_batch: int, n_steps: int, cfg: ModelConfig, source) -> NoiseBundle:
    return NoiseBundle(
        gumbel=source.gumbel(n_batch, n_steps, cfg.K),
        z_skill=source.normal(n_batch, cfg.K, cfg.d),
        z_step=source.normal(n_batch, n_steps, cfg.d),
    )


def bc_term(action_dists: DiagGaussianParams, actions: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the demonstrated actions over valid steps."""
    total = mask.sum()
    if total == 0:
        raise ValueError("bc_term needs at least one valid step")
    lp = gauss_log_prob(actions, action_dists)
    return -(lp * mask).sum() / total


def kl_k_term(q_logits: torch.Tensor, pi_logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean categorical KL(q || pi^K) over valid steps."""
    if q_logits.shape != pi_logits.shape:
        raise ValueError(f"logit shapes differ: {q_logits.shape} vs {pi_logits.shape}")
    kl = cat_kl(CategoricalParams(q_logits), CategoricalParams(pi_logits))
    return (kl * mask).sum() / mask.sum()


def kl_z_term(
    q_k_probs: torch.Tensor,
    q_z: DiagGaussianParams,
    pi_z_means: torch.Tensor,
    mask: torch.Tensor,
) -> torch.Tensor:
    """Mean of E_{k ~ q} KL(q_z_k || N(pi_mean[t, k], I)) over valid steps.

    The expectation over skills is the exact weighted sum, never a sample.
    q_z holds one Gaussian per skill (B, K, d); pi_z_means is (B, M, K, d).
    """
    if q_k_probs.shape != pi_z_means.shape[:3]:
        raise ValueError("q_k_probs shape does not match pi_z_means")
    per_skill = DiagGaussianParams(q_z.mean.unsqueeze(1), q_z.logvar.unsqueeze(1))
    kl = gauss_kl_unitvar(per_skill, pi_z_means)      # (B, M, K); zero when d == 0
    per_step = (q_k_probs * kl).sum(dim=-1)
    return (per_step * mask).sum() / mask.sum()


def norm_penalty(z_seq: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared Euclidean norm of the active continuous parameters."""
    sq = (z_seq ** 2).sum(dim=-1)
    return (sq * mask).sum() / mask.sum()


def total_loss(
    batch: Batch,
    bundle: PolicyBundle,
    weights: LossWeights,
    noise: NoiseBundle,
    sampling_source: str = FROM_Q,
) -> LossReport:
    """One full objective evaluation.

    Pretraining draws the skill assignment from the variational posterior;
    finetuning draws it from the causal policies (indexed z mean plus
    unit-variance noise).  The KL terms keep training the posterior in both
    modes.  Pure given (parameters, batch, noise).
    """
    vout = bundle.variational_forward(batch)
    pi_k_logits = bundle.discrete_policy_forward(batch)
    pi_z_means = bundle.continuous_policy_forward(batch)
    if sampling_source == FROM_Q:
        assignment = bundle.sample_assignment_from_q(vout, noise)
    elif sampling_source == FROM_POLICY:
        assignment = bundle.sample_assignment_from_policy(pi_k_logits, pi_z_means, noise)
    else:
        raise ValueError(f"unknown sampling_source: {sampling_source!r}")
    dists = bundle.action_dists(batch, assignment)
    bc = bc_term(dists, batch.actions, batch.mask)
    kl_k = kl_k_term(vout.k_logits, pi_k_logits, batch.mask)
    kl_z = kl_z_term(
        torch.softmax(vout.k_logits, dim=-1),
        DiagGaussianParams(vout.z_mean, vout.z_logvar),
        pi_z_means,
        batch.mask,
    )
    pen = norm_penalty(assignment.z_seq, batch.mask)
    total = bc + weights.beta_k * kl_k + weights.beta_z * kl_z + weights.lambda_norm * pen
    return LossReport(bc, kl_k, kl_z, pen, total)


def per_skill_action_log_probs(batch: Batch, bundle: PolicyBundle) -> torch.Tensor:
    """log pi^A(a_t | s'_t(k)) for every candidate skill k; requires d == 0.

    With no continuous parameters the subpolicy input for skill k is fully
    determined by k, so the (B, M, K) table is exact.
    """
    cfg = bundle.config
    if cfg.d != 0:
        raise ValueError("per-skill action log-probs require d == 0")
    if cfg.compress_dim is None:
        raise ValueError("per-skill action log-probs require the compressed path")
    b, m = batch.mask.shape
    z_empty = batch.states.new_zeros(b, m, 0)
    cols = []
    for k in range(cfg.K):
        onehot = batch.states.new_zeros(b, m, cfg.K)
        onehot[..., k] = 1.0
        k_in = onehot if cfg.compressor_sees_k else None
        s_comp = bundle.compress(z_empty, batch.proprio, k_in)
        dist = bundle.subpolicy_forward(s_comp, z_empty)
        cols.append(gauss_log_prob(batch.actions, dist))
    return torch.stack(cols, dim=-1)


def per_trajectory_elbo(
    batch: Batch, bundle: PolicyBundle, q_override: torch.Tensor | None = None
) -> torch.Tensor:
    """Sum-form evidence lower bound per trajectory, exact in the skill index.

    Only supported for d == 0, where the expectation over the per-step skill
    posterior has a closed form.  `q_override` replaces the posterior
    probabilities (B, M, K) wholesale, which makes the bound tight when the
    override equals the exact per-step posterior.
    """
    q_logits = bundle.variational_forward(batch).k_logits
    if q_override is None:
        q_probs = torch.softmax(q_logits, dim=-1)
    else:
        q_probs = q_override
    pi_logits = bundle.discrete_policy_forward(batch)
    lp = per_skill_action_log_probs(batch, bundle)
    recon = (q_probs * lp).sum(dim=-1)
    log_pi = torch.log_softmax(pi_logits, dim=-1)
    kl = (torch.xlogy(q_probs, q_probs) - q_probs * log_pi).sum(dim=-1)
    return ((recon - kl) * batch.mask).sum(dim=1)


def exactly_differentiable_parameters(
    bundle: PolicyBundle, sampling_source: str = FROM_Q
) -> list[tuple[str, torch.nn.Parameter]]:
    """Named parameters whose total_loss gradient is exact, not straight-through.

    The straight-through estimator is a deliberately biased surrogate: the
    hard skill sample is piecewise constant in the logits that produced it,
    so finite differences cannot see the relaxation gradient.  Parameters
    feeding the sampled logits are therefore excluded: the encoder trunk and
    its skill head when sampling from the posterior, the discrete policy when
    sampling from the policies.  Everything else (continuous heads, the
    compressor, the subpolicy, the non-sampled skill network) reaches the
    loss only through smooth paths.
    """
    if sampling_source == FROM_Q:
        excluded = ("encoder.embed", "encoder.gru", "encoder.k_head")
    elif sampling_source == FROM_POLICY:
        excluded = ("policy_k.",)
    else:
        raise ValueError(f"unknown sampling_source: {sampling_source!r}")
    return [
        (name, p)
        for name, p in bundle.named_parameters()
        if not name.startswith(excluded)
    ]
