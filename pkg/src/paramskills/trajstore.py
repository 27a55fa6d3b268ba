"""Trajectory persistence, padded batching, and task splits.

Datasets are stored as a `manifest.json` plus a `trajectories.jsonl` file
with one trajectory per line (field names: task_id, states, proprio,
actions).  Floats are serialized through Python's shortest round-trip repr,
so save followed by load reproduces every float32 bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

MANIFEST_NAME = "manifest.json"
TRAJECTORIES_NAME = "trajectories.jsonl"


class DatasetFormatError(RuntimeError):
    """Raised when a stored dataset cannot be parsed."""


@dataclass
class Trajectory:
    """One demonstration: per-step full observations, proprio, and actions."""

    task_id: int
    states: np.ndarray   # (M, D_full) float32
    proprio: np.ndarray  # (M, D_prop) float32
    actions: np.ndarray  # (M, D_act) float32

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32)
        self.proprio = np.asarray(self.proprio, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        if self.states.ndim != 2 or self.proprio.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("trajectory fields must be 2-d arrays")
        lengths = {self.states.shape[0], self.proprio.shape[0], self.actions.shape[0]}
        if len(lengths) != 1:
            raise ValueError(f"inconsistent trajectory lengths: {lengths}")
        if self.states.shape[0] < 1:
            raise ValueError("trajectory must contain at least one step")
        for name in ("states", "proprio", "actions"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"non-finite values in trajectory {name}")

    @property
    def length(self) -> int:
        return self.states.shape[0]


@dataclass
class DatasetManifest:
    n_tasks: int
    D_full: int
    D_prop: int
    D_act: int
    env_config_digest: str
    generator_seed: int
    trajectory_count: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**d)


@dataclass
class Batch:
    """Zero-padded trajectory batch with a left-aligned validity mask."""

    states: torch.Tensor        # (B, M_max, D_full)
    proprio: torch.Tensor       # (B, M_max, D_prop)
    actions: torch.Tensor       # (B, M_max, D_act)
    mask: torch.Tensor          # (B, M_max), 1.0 on valid steps
    task_onehots: torch.Tensor  # (B, n_tasks)
    lengths: torch.Tensor       # (B,) int64

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def max_len(self) -> int:
        return self.states.shape[1]

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(
            states=self.states.to(dtype),
            proprio=self.proprio.to(dtype),
            actions=self.actions.to(dtype),
            mask=self.mask.to(dtype),
            task_onehots=self.task_onehots.to(dtype),
            lengths=self.lengths,
        )


def _check_manifest(trajectories: list[Trajectory], manifest: DatasetManifest) -> None:
    if manifest.trajectory_count != len(trajectories):
        raise ValueError(
            f"manifest trajectory_count {manifest.trajectory_count} != {len(trajectories)}"
        )
    for i, traj in enumerate(trajectories):
        dims = (traj.states.shape[1], traj.proprio.shape[1], traj.actions.shape[1])
        expected = (manifest.D_full, manifest.D_prop, manifest.D_act)
        if dims != expected:
            raise ValueError(f"trajectory {i} dims {dims} do not match manifest {expected}")
        if not 0 <= traj.task_id < manifest.n_tasks:
            raise ValueError(f"trajectory {i} task_id {traj.task_id} outside manifest range")


def save_dataset(
    trajectories: list[Trajectory], manifest: DatasetManifest, path: str | Path
) -> None:
    """Write manifest.json and trajectories.jsonl under `path` (a directory)."""
    _check_manifest(trajectories, manifest)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=2))
    with open(path / TRAJECTORIES_NAME, "w") as fh:
        for traj in trajectories:
            record = {
                "task_id": int(traj.task_id),
                "states": [[float(v) for v in row] for row in traj.states],
                "proprio": [[float(v) for v in row] for row in traj.proprio],
                "actions": [[float(v) for v in row] for row in traj.actions],
            }
            fh.write(json.dumps(record) + "\n")


def load_dataset(path: str | Path) -> tuple[list[Trajectory], DatasetManifest]:
    """Inverse of save_dataset; raises DatasetFormatError with a line number."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    manifest = DatasetManifest.from_dict(json.loads(manifest_path.read_text()))
    trajectories = []
    with open(path / TRAJECTORIES_NAME) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                trajectories.append(
                    Trajectory(
                        task_id=record["task_id"],
                        states=np.array(record["states"], dtype=np.float32),
                        proprio=np.array(record["proprio"], dtype=np.float32),
                        actions=np.array(record["actions"], dtype=np.float32),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from exc
    _check_manifest(trajectories, manifest)
    return trajectories, manifest


def make_batch(trajectories: list[Trajectory], n_tasks: int) -> Batch:
    """Pad trajectories to a common length and build mask plus task one-hots."""
    if not trajectories:
        raise ValueError("cannot batch an empty trajectory list")
    for traj in trajectories:
        if traj.task_id >= n_tasks:
            raise ValueError(f"task_id {traj.task_id} >= n_tasks {n_tasks}")
    m_max = max(t.length for t in trajectories)
    b = len(trajectories)
    d_full = trajectories[0].states.shape[1]
    d_prop = trajectories[0].proprio.shape[1]
    d_act = trajectories[0].actions.shape[1]
    states = torch.zeros(b, m_max, d_full)
    proprio = torch.zeros(b, m_max, d_prop)
    actions = torch.zeros(b, m_max, d_act)
    mask = torch.zeros(b, m_max)
    onehots = torch.zeros(b, n_tasks)
    lengths = torch.zeros(b, dtype=torch.int64)
    for i, traj in enumerate(trajectories):
        m = traj.length
        states[i, :m] = torch.from_numpy(traj.states)
        proprio[i, :m] = torch.from_numpy(traj.proprio)
        actions[i, :m] = torch.from_numpy(traj.actions)
        mask[i, :m] = 1.0
        onehots[i, traj.task_id] = 1.0
        lengths[i] = m
    return Batch(states, proprio, actions, mask, onehots, lengths)


def split_suite(suite: list, n_heldout: int, seed: int) -> tuple[list, list]:
    """Deterministic disjoint (pretrain, heldout) split of a task suite."""
    if n_heldout >= len(suite):
        raise ValueError(f"n_heldout {n_heldout} must be < suite size {len(suite)}")
    rng = np.random.default_rng([int(seed) % 2**32, 0x5F17])
    order = rng.permutation(len(suite))
    heldout_idx = sorted(order[:n_heldout].tolist())
    pretrain_idx = sorted(order[n_heldout:].tolist())
    return [suite[i] for i in pretrain_idx], [suite[i] for i in heldout_idx]
