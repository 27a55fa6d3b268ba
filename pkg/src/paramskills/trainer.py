"""Pretraining and finetuning loops, checkpointing, and seeding.

The optimizer contract is a first-order stochastic gradient method with a
per-parameter adaptive step size (Adam here), default rate 3e-4, with
gradients clipped to a global norm of 10 because straight-through estimators
occasionally spike.  Loops run single-threaded and are bit-deterministic
given (seed, config, dataset); every step appends one JSON line of loss
terms to the training log.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch

from .objective import FROM_POLICY, FROM_Q, LossWeights, draw_noise, total_loss
from .probkit import NoiseSource
from .skillnet import ModelConfig, PolicyBundle, build_bundle
from .trajstore import Trajectory, make_batch

PARAMS_NAME = "params.pt"
META_NAME = "meta.json"


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient goes non-finite."""


class CheckpointCorruptError(RuntimeError):
    """Raised when a stored parameter blob fails its digest check."""


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 8
    learning_rate: float = 3e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    sampling_source: str = FROM_Q
    eval_every: int | None = None
    precision: str = "single"
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be single|double, got {self.precision!r}")
        if self.sampling_source not in (FROM_Q, FROM_POLICY):
            raise ValueError(f"unknown sampling_source {self.sampling_source!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def finetune_config(steps: int = 500, **overrides) -> TrainConfig:
    """Finetuning defaults: batch of 3, assignments sampled from the policies."""
    kwargs = dict(batch_size=3, sampling_source=FROM_POLICY)
    kwargs.update(overrides)
    return TrainConfig(steps=steps, **kwargs)


@dataclass
class Checkpoint:
    bundle: PolicyBundle
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    rng_digest: str


def _dtype_of(precision: str) -> torch.dtype:
    return torch.float64 if precision == "double" else torch.float32


def _generator_digest(source: NoiseSource) -> str:
    state = source.generator.get_state().numpy().tobytes()
    return hashlib.sha256(state).hexdigest()


def _train(
    bundle: PolicyBundle,
    trajectories: list[Trajectory],
    cfg: TrainConfig,
    log_fh,
) -> tuple[list[tuple[int, PolicyBundle]], str]:
    """Shared optimization loop; returns eval_every snapshots and an RNG digest."""
    if not trajectories:
        raise ValueError("training needs a non-empty trajectory list")
    mcfg = bundle.config
    dtype = _dtype_of(cfg.precision)
    bundle.to(dtype)
    source = NoiseSource(cfg.seed + 1, dtype=dtype)
    sampler = np.random.default_rng([int(cfg.seed) % 2**32, 0xBA7C4])
    optimizer = torch.optim.Adam(bundle.parameters(), lr=cfg.learning_rate)
    snapshots: list[tuple[int, PolicyBundle]] = []

    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for step in range(1, cfg.steps + 1):
            idx = sampler.integers(len(trajectories), size=cfg.batch_size)
            batch = make_batch([trajectories[i] for i in idx], mcfg.n_tasks).to(dtype)
            noise = draw_noise(batch.size, batch.max_len, mcfg, source)
            report = total_loss(batch, bundle, cfg.weights, noise, cfg.sampling_source)
            if not torch.isfinite(report.total):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}: {report.as_dict()}"
                )
            optimizer.zero_grad()
            report.total.backward()
            torch.nn.utils.clip_grad_norm_(bundle.parameters(), cfg.grad_clip)
            for name, p in bundle.named_parameters():
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise TrainingDivergedError(
                        f"non-finite gradient for {name} at step {step}"
                    )
            optimizer.step()
            if log_fh is not None:
                line = {"step": step, "wall_time": time.time(), **report.as_dict()}
                log_fh.write(json.dumps(line) + "\n")
            if cfg.eval_every is not None and step % cfg.eval_every == 0:
                snapshots.append((step, copy.deepcopy(bundle)))
    finally:
        torch.set_num_threads(n_threads)

    if not snapshots or snapshots[-1][0] != cfg.steps:
        snapshots.append((cfg.steps, copy.deepcopy(bundle)))
    return snapshots, _generator_digest(source)


def _open_log(log_path):
    if log_path is None:
        return None
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    return open(log_path, "w")


def pretrain(
    trajectories: list[Trajectory],
    model_config: ModelConfig,
    train_config: TrainConfig,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Skill discovery: optimize the objective with assignments drawn from q."""
    torch.manual_seed(int(train_config.seed) % 2**63)
    bundle = PolicyBundle(model_config)
    log_fh = _open_log(log_path)
    try:
        snapshots, digest = _train(bundle, trajectories, train_config, log_fh)
    finally:
        if log_fh is not None:
            log_fh.close()
    return Checkpoint(bundle, model_config, train_config, train_config.steps, digest)


def finetune(
    checkpoint: Checkpoint,
    trajectories: list[Trajectory],
    train_config: TrainConfig,
    log_path: str | Path | None = None,
) -> list[Checkpoint]:
    """Adapt a pretrained checkpoint to (possibly unseen) task demonstrations.

    Returns one checkpoint per eval_every boundary plus the final step; the
    skill assignments come from the causal policies when the config says so
    (the finetune_config default).
    """
    bundle = copy.deepcopy(checkpoint.bundle)
    log_fh = _open_log(log_path)
    try:
        snapshots, digest = _train(bundle, trajectories, train_config, log_fh)
    finally:
        if log_fh is not None:
            log_fh.close()
    return [
        Checkpoint(b, checkpoint.model_config, train_config, step, digest)
        for step, b in snapshots
    ]


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Parameter blob plus a meta.json sidecar with configs and digests."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob_path = path / PARAMS_NAME
    torch.save(ckpt.bundle.state_dict(), blob_path)
    meta = {
        "model_config": asdict(ckpt.model_config),
        "train_config": ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "rng_digest": ckpt.rng_digest,
        "blob_sha256": hashlib.sha256(blob_path.read_bytes()).hexdigest(),
    }
    (path / META_NAME).write_text(json.dumps(meta, indent=2))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    meta = json.loads((path / META_NAME).read_text())
    blob_path = path / PARAMS_NAME
    digest = hashlib.sha256(blob_path.read_bytes()).hexdigest()
    if digest != meta["blob_sha256"]:
        raise CheckpointCorruptError(f"parameter blob digest mismatch in {path}")
    model_config = ModelConfig(**meta["model_config"])
    train_config = TrainConfig.from_dict(meta["train_config"])
    bundle = PolicyBundle(model_config).to(_dtype_of(train_config.precision))
    bundle.load_state_dict(torch.load(blob_path, weights_only=True))
    return Checkpoint(bundle, model_config, train_config, meta["step"], meta["rng_digest"])
