"""The learnable components: a trajectory-level variational encoder, causal
discrete and continuous skill policies, a projective state compressor, and
the low-level action subpolicy.

Information flow is deliberately asymmetric: the encoder and the two skill
policies see full observations plus the task one-hot, while the subpolicy
sees only the compressed proprioceptive state and the continuous skill
parameters.  An uncompressed subpolicy variant (recurrent over raw proprio)
is available as an ablation when ``compress_dim`` is ``None``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .probkit import (
    CategoricalParams,
    DiagGaussianParams,
    LOGVAR_MAX,
    LOGVAR_MIN,
    reparam_sample,
    sample_categorical_st,
)
from .trajstore import Batch

_VALID_COMPRESS_DIMS = (1, 2, 3, None)

# Soft limit on emitted skill-parameter means.  Inside the limit the map is
# near-identity; outside it saturates, which stops the causal policy from
# extrapolating z far off the training distribution during closed-loop runs.
Z_LIMIT = 5.0


def _soft_clamp(x: torch.Tensor, limit: float = Z_LIMIT) -> torch.Tensor:
    return limit * torch.tanh(x / limit)


@dataclass
class ModelConfig:
    """Shapes and knobs for one policy bundle.

    d == 0 gives the discrete-only ablation, K == 1 the continuous-only one,
    and compress_dim == None swaps the projective compressor for a recurrent
    uncompressed subpolicy.
    """

    D_full: int
    D_prop: int
    D_act: int
    n_tasks: int
    K: int = 6
    d: int = 2
    hidden: int = 64
    compressor_hidden: int = 32
    compress_dim: int | None = 1
    compressor_sees_k: bool = False
    gs_temperature: float = 1.0
    z_aggregate_per_skill: bool = False
    action_logvar_center: float = -5.0
    action_logvar_span: float = 1.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.d < 0:
            raise ValueError("d must be >= 0")
        if self.hidden < 4:
            raise ValueError("hidden must be >= 4")
        if self.compress_dim not in _VALID_COMPRESS_DIMS:
            raise ValueError(f"compress_dim must be one of {_VALID_COMPRESS_DIMS}")
        if self.gs_temperature <= 0:
            raise ValueError("gs_temperature must be positive")

    @classmethod
    def from_manifest(cls, manifest, **overrides) -> "ModelConfig":
        return cls(
            D_full=manifest.D_full,
            D_prop=manifest.D_prop,
            D_act=manifest.D_act,
            n_tasks=manifest.n_tasks,
            **overrides,
        )

    def full_scale(self) -> "ModelConfig":
        """Full-scale widths (K=10, d=4, hidden 1024); desk defaults train on a CPU."""
        return replace(self, K=10, d=4, hidden=1024, compressor_hidden=128)


@dataclass
class VariationalOutput:
    k_logits: torch.Tensor  # (B, M, K)
    z_mean: torch.Tensor    # (B, K, d), one Gaussian per skill per trajectory
    z_logvar: torch.Tensor  # (B, K, d)


@dataclass
class HighLevelOutput:
    k_logits: torch.Tensor  # (B, M, K)
    z_means: torch.Tensor   # (B, M, K, d), all K candidates per timestep


@dataclass
class CompressorOutput:
    w: torch.Tensor  # (..., compress_dim, D_prop)
    b: torch.Tensor  # (..., compress_dim)


@dataclass
class SkillAssignment:
    k_onehots: torch.Tensor  # (B, M, K)
    z_seq: torch.Tensor      # (B, M, d)


def _linear(d_in: int, d_out: int) -> nn.Linear:
    # Zero-width layers are legal (d == 0 ablation); silence the init no-op warning.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return nn.Linear(d_in, d_out)


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(_linear(d_in, hidden), nn.ReLU(), _linear(hidden, d_out))


class _CausalStateEncoder(nn.Module):
    """Linear observation embedding, a unidirectional GRU, and a skip.

    The per-step feature is [GRU output, current embedding]: the recurrent
    half carries history, the skip half keeps the head directly reactive to
    the present observation, which matters in closed loop where the hidden
    state drifts off the demonstration distribution.  Feature width is
    2 * hidden.
    """

    def __init__(self, d_in: int, hidden: int):
        super().__init__()
        self.embed = _linear(d_in, hidden)
        self.gru = nn.GRU(hidden, hidden, batch_first=True)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        emb = self.embed(states)
        out, _ = self.gru(emb)
        return torch.cat([out, emb], dim=-1)

    def step(self, state_t: torch.Tensor, h: torch.Tensor | None):
        emb = self.embed(state_t)
        out, h = self.gru(emb.unsqueeze(1), h)
        return torch.cat([out.squeeze(1), emb], dim=-1), h


class GaussianActionHead(nn.Module):
    """Mean and banded log-variance over actions.

    A freely learned variance lets the likelihood down-weight the rare
    gripper-transition steps (their labels are genuinely mixed near phase
    boundaries), which is statistically sound but behaviorally fatal in
    closed loop.  Confining the log-variance to a narrow band keeps every
    step's mean-gradient at a comparable scale.
    """

    def __init__(self, d_in: int, d_act: int, center: float, span: float):
        super().__init__()
        self.center = center
        self.span = span
        self.mean_head = _linear(d_in, d_act)
        self.logvar_head = _linear(d_in, d_act)

    def forward(self, feats: torch.Tensor) -> DiagGaussianParams:
        logvar = self.center + self.span * torch.tanh(self.logvar_head(feats))
        return DiagGaussianParams(self.mean_head(feats), logvar)


class VariationalEncoder(nn.Module):
    """Bidirectional recurrent posterior over skills and their parameters.

    Emits per-timestep skill logits and a per-skill (K x d) Gaussian whose
    parameters are the masked average of per-timestep head outputs, so each
    skill keeps a single continuous parameter vector per trajectory.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = _linear(cfg.D_full, cfg.hidden)
        self.gru = nn.GRU(
            cfg.hidden + cfg.D_act + cfg.n_tasks,
            cfg.hidden,
            batch_first=True,
            bidirectional=True,
        )
        self.k_head = _mlp(2 * cfg.hidden, cfg.hidden, cfg.K)
        self.z_mean_head = _mlp(2 * cfg.hidden, cfg.hidden, cfg.K * cfg.d)
        self.z_logvar_head = _mlp(2 * cfg.hidden, cfg.hidden, cfg.K * cfg.d)

    def forward(self, batch: Batch) -> VariationalOutput:
        b, m, _ = batch.states.shape
        cfg = self.cfg
        onehot = batch.task_onehots.unsqueeze(1).expand(b, m, cfg.n_tasks)
        x = torch.cat([self.embed(batch.states), batch.actions, onehot], dim=-1)
        # Pack so the backward direction never reads padded steps: the output
        # is invariant to whatever happens to sit in the padding.
        packed = pack_padded_sequence(
            x, batch.lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        packed_out, _ = self.gru(packed)
        feats, _ = pad_packed_sequence(packed_out, batch_first=True, total_length=m)
        k_logits = self.k_head(feats)
        zm = self.z_mean_head(feats).view(b, m, cfg.K, cfg.d)
        zlv = self.z_logvar_head(feats).view(b, m, cfg.K, cfg.d)
        if cfg.z_aggregate_per_skill:
            w = torch.softmax(k_logits, dim=-1) * batch.mask.unsqueeze(-1)  # (B,M,K)
            denom = w.sum(dim=1).clamp_min(1e-8)                            # (B,K)
            z_mean = (w.unsqueeze(-1) * zm).sum(dim=1) / denom.unsqueeze(-1)
            z_logvar = (w.unsqueeze(-1) * zlv).sum(dim=1) / denom.unsqueeze(-1)
        else:
            w = batch.mask.unsqueeze(-1).unsqueeze(-1)                      # (B,M,1,1)
            denom = batch.mask.sum(dim=1).clamp_min(1.0).view(b, 1, 1)
            z_mean = (w * zm).sum(dim=1) / denom
            z_logvar = (w * zlv).sum(dim=1) / denom
        return VariationalOutput(
            k_logits, _soft_clamp(z_mean), z_logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)
        )


class DiscretePolicy(nn.Module):
    """Causal skill selector: GRU over states, head mixes in the task one-hot."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = _CausalStateEncoder(cfg.D_full, cfg.hidden)
        self.head = _mlp(2 * cfg.hidden + cfg.n_tasks, cfg.hidden, cfg.K)

    def forward(self, batch: Batch) -> torch.Tensor:
        feats = self.encoder(batch.states)
        b, m, _ = feats.shape
        onehot = batch.task_onehots.unsqueeze(1).expand(b, m, self.cfg.n_tasks)
        return self.head(torch.cat([feats, onehot], dim=-1))

    def step(self, state_t, onehot, h):
        feat, h = self.encoder.step(state_t, h)
        return self.head(torch.cat([feat, onehot], dim=-1)), h


class ContinuousPolicy(nn.Module):
    """Causal per-timestep means for all K candidate skill parameters."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = _CausalStateEncoder(cfg.D_full, cfg.hidden)
        self.head = _mlp(2 * cfg.hidden + cfg.n_tasks, cfg.hidden, cfg.K * cfg.d)

    def forward(self, batch: Batch) -> torch.Tensor:
        feats = self.encoder(batch.states)
        b, m, _ = feats.shape
        onehot = batch.task_onehots.unsqueeze(1).expand(b, m, self.cfg.n_tasks)
        out = _soft_clamp(self.head(torch.cat([feats, onehot], dim=-1)))
        return out.view(b, m, self.cfg.K, self.cfg.d)

    def step(self, state_t, onehot, h):
        feat, h = self.encoder.step(state_t, h)
        out = _soft_clamp(self.head(torch.cat([feat, onehot], dim=-1)))
        return out.view(-1, self.cfg.K, self.cfg.d), h


class Compressor(nn.Module):
    """Emits a projection axis (w, b) from the skill parameters.

    The compressed state is tanh(w . s_proj + b) per output row, so every
    component lies strictly inside (-1, 1).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.compress_dim is None:
            raise ValueError("Compressor requires compress_dim != None")
        self.cfg = cfg
        d_in = cfg.d + (cfg.K if cfg.compressor_sees_k else 0)
        ch = cfg.compressor_hidden
        self.trunk = nn.Sequential(_linear(d_in, ch), nn.ReLU(), _linear(ch, ch), nn.ReLU())
        self.w_head = _linear(ch, cfg.compress_dim * cfg.D_prop)
        self.b_head = _linear(ch, cfg.compress_dim)

    def _inputs(self, z, k_onehot):
        if self.cfg.compressor_sees_k:
            if k_onehot is None:
                raise ValueError("compressor_sees_k=True requires a k one-hot input")
            return torch.cat([z, k_onehot], dim=-1)
        return z

    def emit_axes(self, z, k_onehot=None) -> CompressorOutput:
        feats = self.trunk(self._inputs(z, k_onehot))
        w = self.w_head(feats).view(*feats.shape[:-1], self.cfg.compress_dim, self.cfg.D_prop)
        return CompressorOutput(w=w, b=self.b_head(feats))

    def forward(self, z, s_proj, k_onehot=None) -> torch.Tensor:
        axes = self.emit_axes(z, k_onehot)
        proj = (axes.w @ s_proj.unsqueeze(-1)).squeeze(-1) + axes.b
        # Saturated float tanh rounds to exactly +-1; keep the index strictly
        # inside (-1, 1) as the contract promises.
        bound = 1.0 - torch.finfo(proj.dtype).eps
        return torch.tanh(proj).clamp(-bound, bound)


class Subpolicy(nn.Module):
    """Feedforward action head over (compressed state, z) only.

    The full observation is unreachable from this module by construction;
    that is the point of the information asymmetry.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.compress_dim is None:
            raise ValueError("Subpolicy requires compress_dim != None")
        self.trunk = nn.Sequential(
            _linear(cfg.compress_dim + cfg.d, cfg.hidden),
            nn.ReLU(),
            _linear(cfg.hidden, cfg.hidden),
            nn.ReLU(),
        )
        self.head = GaussianActionHead(
            cfg.hidden, cfg.D_act, cfg.action_logvar_center, cfg.action_logvar_span
        )

    def forward(self, s_compressed, z) -> DiagGaussianParams:
        return self.head(self.trunk(torch.cat([s_compressed, z], dim=-1)))


class UncompressedSubpolicy(nn.Module):
    """Ablation action head: causal GRU over raw proprio history plus z."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = _CausalStateEncoder(cfg.D_prop, cfg.hidden)
        self.trunk = nn.Sequential(_linear(2 * cfg.hidden + cfg.d, cfg.hidden), nn.ReLU())
        self.head = GaussianActionHead(
            cfg.hidden, cfg.D_act, cfg.action_logvar_center, cfg.action_logvar_span
        )

    def forward(self, proprio_history, z_seq) -> DiagGaussianParams:
        return self.head(self.trunk(torch.cat([self.encoder(proprio_history), z_seq], dim=-1)))

    def step(self, proprio_t, z_t, h):
        feat, h = self.encoder.step(proprio_t, h)
        return self.head(self.trunk(torch.cat([feat, z_t], dim=-1))), h


class PolicyBundle(nn.Module):
    """All learnable components behind the operations the objective needs."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = VariationalEncoder(config)
        self.policy_k = DiscretePolicy(config)
        self.policy_z = ContinuousPolicy(config)
        if config.compress_dim is None:
            self.compressor = None
            self.subpolicy = UncompressedSubpolicy(config)
        else:
            self.compressor = Compressor(config)
            self.subpolicy = Subpolicy(config)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def _check_batch(self, batch: Batch) -> None:
        cfg = self.config
        dims = (batch.states.shape[-1], batch.proprio.shape[-1], batch.actions.shape[-1],
                batch.task_onehots.shape[-1])
        expected = (cfg.D_full, cfg.D_prop, cfg.D_act, cfg.n_tasks)
        if dims != expected:
            raise ValueError(f"batch dims {dims} do not match model config {expected}")

    def variational_forward(self, batch: Batch) -> VariationalOutput:
        self._check_batch(batch)
        return self.encoder(batch)

    def discrete_policy_forward(self, batch: Batch) -> torch.Tensor:
        self._check_batch(batch)
        return self.policy_k(batch)

    def continuous_policy_forward(self, batch: Batch) -> torch.Tensor:
        self._check_batch(batch)
        return self.policy_z(batch)

    def high_level_forward(self, batch: Batch) -> HighLevelOutput:
        return HighLevelOutput(
            k_logits=self.discrete_policy_forward(batch),
            z_means=self.continuous_policy_forward(batch),
        )

    def sample_assignment_from_q(self, vout: VariationalOutput, noise) -> SkillAssignment:
        """Straight-through skill indices plus one reparameterized z per skill."""
        k_onehots = sample_categorical_st(
            CategoricalParams(vout.k_logits), self.config.gs_temperature, noise.gumbel
        )
        z = reparam_sample(DiagGaussianParams(vout.z_mean, vout.z_logvar), noise.z_skill)
        z_seq = torch.einsum("bmk,bkd->bmd", k_onehots, z)
        return SkillAssignment(k_onehots, z_seq)

    def sample_assignment_from_policy(
        self, k_logits: torch.Tensor, z_means: torch.Tensor, noise
    ) -> SkillAssignment:
        """Skills from the causal policies: indexed z mean plus unit-variance noise."""
        k_onehots = sample_categorical_st(
            CategoricalParams(k_logits), self.config.gs_temperature, noise.gumbel
        )
        z_sel = torch.einsum("bmk,bmkd->bmd", k_onehots, z_means)
        return SkillAssignment(k_onehots, z_sel + noise.z_step)

    def compress(self, z, s_proj, k_onehot=None) -> torch.Tensor:
        if self.compressor is None:
            raise ValueError("compress() called with compress_dim=None")
        return self.compressor(z, s_proj, k_onehot)

    def subpolicy_forward(self, s_compressed, z) -> DiagGaussianParams:
        if self.config.compress_dim is None:
            raise ValueError("subpolicy_forward requires compress_dim != None")
        return self.subpolicy(s_compressed, z)

    def uncompressed_subpolicy_forward(self, proprio_history, z_seq) -> DiagGaussianParams:
        if self.config.compress_dim is not None:
            raise ValueError("uncompressed_subpolicy_forward requires compress_dim=None")
        return self.subpolicy(proprio_history, z_seq)

    def action_dists(self, batch: Batch, assignment: SkillAssignment) -> DiagGaussianParams:
        """Route (assignment, proprio) through the configured subpolicy path."""
        if self.config.compress_dim is None:
            return self.uncompressed_subpolicy_forward(batch.proprio, assignment.z_seq)
        k = assignment.k_onehots if self.config.compressor_sees_k else None
        s_comp = self.compress(assignment.z_seq, batch.proprio, k)
        return self.subpolicy_forward(s_comp, assignment.z_seq)


def build_bundle(config: ModelConfig, seed: int) -> PolicyBundle:
    """Construct a bundle with parameter init keyed to `seed`."""
    torch.manual_seed(int(seed) % 2**63)
    return PolicyBundle(config)
