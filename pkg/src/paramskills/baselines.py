"""Monolithic behavior-cloning comparator for the evaluation harness.

A single recurrent policy maps full observations (which include the task
one-hot) straight to a Gaussian over actions.  It trains on the same data,
optimizer, and step budgets as the hierarchical model and runs through the
same finetune-evaluate protocol, so the two are directly comparable.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn

from . import synthdemo
from .evalkit import EvalReport, ProtocolConfig, compute_metrics, _derived_seed
from .objective import bc_term
from .probkit import DiagGaussianParams
from .skillnet import GaussianActionHead, _CausalStateEncoder, _linear
from .synthdemo import Action, DEFAULT_PARAMS, EnvParams, TaskSpec
from .trainer import TrainConfig
from .trajstore import Trajectory, make_batch


class BCPolicy(nn.Module):
    """Causal GRU over full observations with a Gaussian action head.

    Uses the same encoder block and banded action head as the hierarchical
    model, so the comparison isolates the skill structure rather than
    head-parameterization differences.
    """

    def __init__(self, D_full: int, D_act: int, n_tasks: int, hidden: int = 64):
        super().__init__()
        self.n_tasks = n_tasks
        self.encoder = _CausalStateEncoder(D_full, hidden)
        self.trunk = nn.Sequential(_linear(2 * hidden + n_tasks, hidden), nn.ReLU())
        self.head = GaussianActionHead(hidden, D_act, center=-5.0, span=1.0)

    def _dist(self, feats, onehot) -> DiagGaussianParams:
        return self.head(self.trunk(torch.cat([feats, onehot], dim=-1)))

    def forward(self, batch) -> DiagGaussianParams:
        feats = self.encoder(batch.states)
        b, m, _ = feats.shape
        onehot = batch.task_onehots.unsqueeze(1).expand(b, m, self.n_tasks)
        return self._dist(feats, onehot)

    def step(self, obs_t, onehot, h):
        feat, h = self.encoder.step(obs_t, h)
        return self._dist(feat, onehot), h


def train_bc(
    policy: BCPolicy,
    trajectories: list[Trajectory],
    n_tasks: int,
    cfg: TrainConfig,
) -> list[tuple[int, BCPolicy]]:
    """Maximum-likelihood training; returns (step, snapshot) pairs like finetune."""
    if not trajectories:
        raise ValueError("training needs a non-empty trajectory list")
    sampler = np.random.default_rng([int(cfg.seed) % 2**32, 0xBCBC])
    optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate)
    snapshots: list[tuple[int, BCPolicy]] = []
    for step in range(1, cfg.steps + 1):
        idx = sampler.integers(len(trajectories), size=cfg.batch_size)
        batch = make_batch([trajectories[i] for i in idx], n_tasks)
        loss = bc_term(policy(batch), batch.actions, batch.mask)
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.grad_clip)
        optimizer.step()
        if cfg.eval_every is not None and step % cfg.eval_every == 0:
            snapshots.append((step, copy.deepcopy(policy)))
    if not snapshots or snapshots[-1][0] != cfg.steps:
        snapshots.append((cfg.steps, copy.deepcopy(policy)))
    return snapshots


def rollout_bc(
    policy: BCPolicy,
    task: TaskSpec,
    seed: int,
    env_params: EnvParams = DEFAULT_PARAMS,
) -> bool:
    """Greedy closed-loop episode; returns the binary success flag."""
    state = synthdemo.reset(task, seed, env_params)
    onehot = torch.zeros(1, policy.n_tasks)
    onehot[0, task.task_id] = 1.0
    h = None
    with torch.no_grad():
        for _ in range(task.max_steps):
            obs = torch.as_tensor(
                synthdemo.full_observation(state, task, policy.n_tasks),
                dtype=torch.float32,
            ).unsqueeze(0)
            dist, h = policy.step(obs, onehot, h)
            a = dist.mean[0].numpy().astype(np.float64)
            state = synthdemo.step(state, Action(a[:2], float(a[2])), env_params)
            if synthdemo.is_success(state, task):
                return True
    return False


def bc_protocol(
    policy: BCPolicy,
    heldout_tasks: list[TaskSpec],
    demos: list[Trajectory],
    config: ProtocolConfig = ProtocolConfig(),
    env_params: EnvParams = DEFAULT_PARAMS,
) -> EvalReport:
    """The finetune-evaluate grid for the behavior-cloning comparator."""
    if not heldout_tasks:
        raise ValueError("bc_protocol needs at least one held-out task")
    rows = []
    snapshot_steps: list[int] = []
    for task in heldout_tasks:
        task_demos = [tr for tr in demos if tr.task_id == task.task_id]
        if not task_demos:
            raise ValueError(f"no demonstrations for held-out task {task.task_id}")
        ft_cfg = TrainConfig(
            steps=config.finetune_steps,
            batch_size=config.batch_size,
            learning_rate=config.learning_rate,
            eval_every=config.eval_every,
            seed=_derived_seed(config.seed, task.task_id, 0xF17E),
        )
        torch.manual_seed(ft_cfg.seed)
        snapshots = train_bc(copy.deepcopy(policy), task_demos, policy.n_tasks, ft_cfg)
        snapshot_steps = [s for s, _ in snapshots]
        row = []
        for si, (_, snap) in enumerate(snapshots):
            outcomes = [
                rollout_bc(snap, task, _derived_seed(config.seed, task.task_id, si, j), env_params)
                for j in range(config.rollouts_per_eval)
            ]
            row.append(float(np.mean(outcomes)))
        rows.append(row)
    matrix = np.array(rows, dtype=np.float64)
    mean_success, mean_highest = compute_metrics(matrix)
    return EvalReport(
        task_ids=[t.task_id for t in heldout_tasks],
        snapshot_steps=snapshot_steps,
        success_rates=matrix,
        mean_success=mean_success,
        mean_highest_success=mean_highest,
        protocol_seed=config.seed,
        rollouts_per_eval=config.rollouts_per_eval,
    )
