"""Rollouts, the finetune-and-evaluate protocol, metrics, and diagnostics.

The protocol mirrors the training-time evaluation recipe: finetune a
pretrained checkpoint on each held-out task, snapshot every ``eval_every``
gradient steps, run a fixed number of greedy rollouts per snapshot, and
aggregate binary successes into Mean Success (average over the whole grid)
and Mean Highest Success (per-task max over snapshots, then averaged).
Also here: CSV/SVG trace exports, a rank-correlation monotonicity score for
compressed-state segments, and a task-identifiability probe that measures
how much task information a single raw observation carries.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from . import synthdemo
from .objective import LossWeights
from .skillnet import PolicyBundle
from .synthdemo import Action, DEFAULT_PARAMS, EnvParams, EnvState, TaskSpec
from .trainer import Checkpoint, finetune, finetune_config
from .trajstore import Trajectory, make_batch

_SVG_COLORS = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]


@dataclass
class RolloutTrace:
    """Per-step skill indices, parameters, compressed states, and actions."""

    task_id: int
    k_seq: np.ndarray        # (M,) int
    z_seq: np.ndarray        # (M, d)
    s_prime_seq: np.ndarray  # (M, compress_dim); zero-width when uncompressed
    actions: np.ndarray      # (M, D_act)
    states: list[EnvState]   # post-step snapshots; empty for annotated demos
    success: bool

    @property
    def length(self) -> int:
        return len(self.k_seq)


@dataclass
class ProtocolConfig:
    finetune_steps: int = 500
    eval_every: int = 50
    rollouts_per_eval: int = 20
    batch_size: int = 3
    learning_rate: float = 3e-4
    precision: str = "single"
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0


@dataclass
class EvalReport:
    task_ids: list[int]
    snapshot_steps: list[int]
    success_rates: np.ndarray  # (n_tasks, n_snapshots) in [0, 1]
    mean_success: float
    mean_highest_success: float
    protocol_seed: int
    rollouts_per_eval: int

    def to_dict(self) -> dict:
        return {
            "task_ids": [int(t) for t in self.task_ids],
            "snapshot_steps": [int(s) for s in self.snapshot_steps],
            "success_rates": [[float(v) for v in row] for row in self.success_rates],
            "mean_success": float(self.mean_success),
            "mean_highest_success": float(self.mean_highest_success),
            "protocol_seed": int(self.protocol_seed),
            "rollouts_per_eval": int(self.rollouts_per_eval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            task_ids=list(d["task_ids"]),
            snapshot_steps=list(d["snapshot_steps"]),
            success_rates=np.array(d["success_rates"], dtype=np.float64),
            mean_success=d["mean_success"],
            mean_highest_success=d["mean_highest_success"],
            protocol_seed=d["protocol_seed"],
            rollouts_per_eval=d["rollouts_per_eval"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_metrics(success_matrix) -> tuple[float, float]:
    """(mean over all entries, mean over tasks of the per-task maximum)."""
    matrix = np.asarray(success_matrix, dtype=np.float64)
    if matrix.size == 0:
        raise ValueError("success matrix is empty")
    if matrix.ndim != 2:
        raise ValueError(f"success matrix must be 2-d, got shape {matrix.shape}")
    return float(matrix.mean()), float(matrix.max(axis=1).mean())


def _derived_seed(*keys: int) -> int:
    return int(np.random.default_rng([int(k) % 2**32 for k in keys]).integers(2**31))


def rollout(
    checkpoint: Checkpoint,
    task: TaskSpec,
    seed: int,
    mode: str = "greedy",
    env_params: EnvParams = DEFAULT_PARAMS,
) -> RolloutTrace:
    """One closed-loop episode under the hierarchical policy.

    Greedy mode takes the argmax skill, the indexed mean parameters, and the
    mean action; stochastic mode samples the skill, adds unit-variance noise
    to the parameters, and samples the action.  Hidden states are carried
    incrementally, which matches the full-history forward pass exactly.
    """
    if mode not in ("greedy", "stochastic"):
        raise ValueError(f"mode must be greedy|stochastic, got {mode!r}")
    bundle, cfg = checkpoint.bundle, checkpoint.model_config
    if cfg.D_full != synthdemo.full_obs_dim(cfg.n_tasks) or cfg.D_act != synthdemo.ACTION_DIM:
        raise ValueError("checkpoint dimensions do not match the environment")
    dtype = bundle.dtype
    gen = torch.Generator().manual_seed(_derived_seed(seed, 0x5A3))
    state = synthdemo.reset(task, seed, env_params)
    onehot = torch.zeros(1, cfg.n_tasks, dtype=dtype)
    onehot[0, task.task_id] = 1.0
    h_k = h_z = h_sub = None
    ks, zs, sps, acts, snapshots = [], [], [], [], []
    success = False
    with torch.no_grad():
        for _ in range(task.max_steps):
            obs = torch.as_tensor(
                synthdemo.full_observation(state, task, cfg.n_tasks), dtype=dtype
            ).unsqueeze(0)
            logits, h_k = bundle.policy_k.step(obs, onehot, h_k)
            if mode == "greedy":
                k = int(logits.argmax())
            else:
                probs = torch.softmax(logits, dim=-1)
                k = int(torch.multinomial(probs[0], 1, generator=gen))
            z_means, h_z = bundle.policy_z.step(obs, onehot, h_z)
            z = z_means[0, k]
            if mode == "stochastic":
                z = z + torch.randn(cfg.d, generator=gen, dtype=dtype)
            prop = torch.as_tensor(
                synthdemo.proprio_observation(state), dtype=dtype
            ).unsqueeze(0)
            z_in = z.unsqueeze(0)
            if cfg.compress_dim is None:
                dist, h_sub = bundle.subpolicy.step(prop, z_in, h_sub)
                s_prime = np.zeros(0)
            else:
                k_onehot = None
                if cfg.compressor_sees_k:
                    k_onehot = torch.zeros(1, cfg.K, dtype=dtype)
                    k_onehot[0, k] = 1.0
                s_comp = bundle.compress(z_in, prop, k_onehot)
                dist = bundle.subpolicy_forward(s_comp, z_in)
                s_prime = s_comp[0].numpy().copy()
            a = dist.mean[0]
            if mode == "stochastic":
                a = a + torch.exp(0.5 * dist.logvar[0]) * torch.randn(
                    cfg.D_act, generator=gen, dtype=dtype
                )
            a = a.numpy().astype(np.float64)
            ks.append(k)
            zs.append(z.numpy().copy())
            sps.append(s_prime)
            acts.append(a)
            state = synthdemo.step(state, Action(a[:2], float(a[2])), env_params)
            snapshots.append(state)
            if synthdemo.is_success(state, task):
                success = True
                break
    d = cfg.d
    c = 0 if cfg.compress_dim is None else cfg.compress_dim
    return RolloutTrace(
        task_id=task.task_id,
        k_seq=np.array(ks, dtype=np.int64),
        z_seq=np.array(zs, dtype=np.float64).reshape(len(ks), d),
        s_prime_seq=np.array(sps, dtype=np.float64).reshape(len(ks), c),
        actions=np.array(acts, dtype=np.float64),
        states=snapshots,
        success=success,
    )


def run_protocol(
    checkpoint: Checkpoint,
    heldout_tasks: list[TaskSpec],
    demos: list[Trajectory],
    config: ProtocolConfig = ProtocolConfig(),
    env_params: EnvParams = DEFAULT_PARAMS,
) -> EvalReport:
    """Finetune per held-out task, evaluate every snapshot, fill the matrix.

    Each task restarts from the same pretrained checkpoint.  Rollout seeds
    are derived from (protocol seed, task, snapshot, rollout index), so the
    grid is reproducible and rollouts could run in parallel.
    """
    if not heldout_tasks:
        raise ValueError("run_protocol needs at least one held-out task")
    covered = {t.task_id for t in demos}
    missing = [t.task_id for t in heldout_tasks if t.task_id not in covered]
    if missing:
        raise ValueError(f"no demonstrations for held-out tasks {missing}")
    rows = []
    snapshot_steps: list[int] = []
    for task in heldout_tasks:
        task_demos = [tr for tr in demos if tr.task_id == task.task_id]
        ft_cfg = finetune_config(
            steps=config.finetune_steps,
            eval_every=config.eval_every,
            batch_size=config.batch_size,
            learning_rate=config.learning_rate,
            precision=config.precision,
            weights=config.weights,
            seed=_derived_seed(config.seed, task.task_id, 0xF17E),
        )
        snaps = finetune(checkpoint, task_demos, ft_cfg)
        snapshot_steps = [s.step for s in snaps]
        row = []
        for si, snap in enumerate(snaps):
            seeds = [
                _derived_seed(config.seed, task.task_id, si, j)
                for j in range(config.rollouts_per_eval)
            ]
            outcomes = [
                rollout(snap, task, seed, mode="greedy", env_params=env_params).success
                for seed in seeds
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


def annotate_trajectory(checkpoint: Checkpoint, trajectory: Trajectory) -> RolloutTrace:
    """Posterior skill labels and compressed states for one demonstration.

    Skills are the argmax of the posterior per step; the continuous
    parameters are the per-skill posterior means.  Demonstrations come from
    successful expert rollouts, so the trace is marked successful.
    """
    bundle, cfg = checkpoint.bundle, checkpoint.model_config
    batch = make_batch([trajectory], cfg.n_tasks).to(bundle.dtype)
    with torch.no_grad():
        vout = bundle.variational_forward(batch)
        k_seq = vout.k_logits[0].argmax(dim=-1)                  # (M,)
        z_per_skill = vout.z_mean[0]                             # (K, d)
        z_seq = z_per_skill[k_seq]                               # (M, d)
        if cfg.compress_dim is None:
            s_prime = torch.zeros(trajectory.length, 0)
        else:
            k_onehot = None
            if cfg.compressor_sees_k:
                k_onehot = torch.nn.functional.one_hot(k_seq, cfg.K).to(bundle.dtype)
            s_prime = bundle.compress(z_seq, batch.proprio[0], k_onehot)
    return RolloutTrace(
        task_id=trajectory.task_id,
        k_seq=k_seq.numpy().astype(np.int64),
        z_seq=z_seq.numpy().astype(np.float64),
        s_prime_seq=s_prime.numpy().astype(np.float64),
        actions=trajectory.actions.astype(np.float64),
        states=[],
        success=True,
    )


def _skill_segments(k_seq: np.ndarray) -> list[tuple[int, int]]:
    """Maximal [start, end) runs of a constant skill index."""
    segments = []
    start = 0
    for i in range(1, len(k_seq) + 1):
        if i == len(k_seq) or k_seq[i] != k_seq[start]:
            segments.append((start, i))
            start = i
    return segments


def monotonicity_score(trace: RolloutTrace, min_length: int = 5) -> np.ndarray:
    """|Spearman rank correlation| of s' against time, per skill segment.

    Only segments of at least `min_length` steps are scored; a segment with
    constant s' scores 0 (the all-ties convention).  Uses the first
    compressed component, so traces should come from compress_dim=1 runs.
    """
    if trace.s_prime_seq.shape[1] < 1:
        raise ValueError("trace has no compressed state channel")
    scores = []
    for start, end in _skill_segments(trace.k_seq):
        if end - start < min_length:
            continue
        s = trace.s_prime_seq[start:end, 0]
        if np.ptp(s) == 0.0:
            scores.append(0.0)
            continue
        rho = stats.spearmanr(s, np.arange(len(s))).statistic
        scores.append(0.0 if np.isnan(rho) else float(abs(rho)))
    return np.array(scores, dtype=np.float64)


def export_traces(trace: RolloutTrace, path: str | Path) -> tuple[Path, Path]:
    """Write `<path>.csv` and `<path>.svg` for one trace.

    CSV columns are exactly step, k, z_0.., s_0.., success.  The SVG plots
    s'_0 against the step, colored by skill, with vertical markers where the
    skill changes; the marker steps are mirrored in a metadata element.
    """
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path = base.with_suffix(".csv")
    svg_path = base.with_suffix(".svg")
    d = trace.z_seq.shape[1]
    c = trace.s_prime_seq.shape[1]
    header = (
        ["step", "k"]
        + [f"z_{i}" for i in range(d)]
        + [f"s_{i}" for i in range(c)]
        + ["success"]
    )
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(trace.length):
            writer.writerow(
                [t, int(trace.k_seq[t])]
                + [repr(float(v)) for v in trace.z_seq[t]]
                + [repr(float(v)) for v in trace.s_prime_seq[t]]
                + [int(trace.success)]
            )
    boundaries = [
        int(t) for t in range(1, trace.length) if trace.k_seq[t] != trace.k_seq[t - 1]
    ]
    svg_path.write_text(_trace_svg(trace, boundaries))
    return csv_path, svg_path


def _trace_svg(trace: RolloutTrace, boundaries: list[int]) -> str:
    width, height, margin = 640, 240, 30
    n = max(trace.length - 1, 1)

    def sx(t: float) -> float:
        return margin + (width - 2 * margin) * t / n

    def sy(v: float) -> float:
        return margin + (height - 2 * margin) * (1.0 - (v + 1.0) / 2.0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<metadata id="skill-boundaries">{json.dumps(boundaries)}</metadata>',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{sy(0)}" x2="{width - margin}" y2="{sy(0)}" '
        'stroke="#cccccc" stroke-dasharray="2,3"/>',
    ]
    if trace.s_prime_seq.shape[1] > 0:
        for start, end in _skill_segments(trace.k_seq):
            color = _SVG_COLORS[int(trace.k_seq[start]) % len(_SVG_COLORS)]
            pts = " ".join(
                f"{sx(t):.2f},{sy(trace.s_prime_seq[t, 0]):.2f}"
                for t in range(start, end)
            )
            parts.append(
                f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>'
            )
    for t in boundaries:
        parts.append(
            f'<line x1="{sx(t):.2f}" y1="{margin}" x2="{sx(t):.2f}" y2="{height - margin}" '
            'stroke="#999999" stroke-dasharray="4,3"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


@dataclass
class ProbeConfig:
    hidden: int = 64
    steps: int = 400
    batch_size: int = 512
    learning_rate: float = 1e-3
    test_fraction: float = 0.2
    seed: int = 0
    shuffle_labels: bool = False


def task_identifiability_probe(
    trajectories: list[Trajectory], n_tasks: int, config: ProbeConfig = ProbeConfig()
) -> float:
    """Held-out accuracy of task prediction from single raw observations.

    The task one-hot is stripped from the observations, and train/test splits
    are made per task over whole trajectories, so high accuracy means the
    remaining observation content separates tasks; that observation-space
    disjointness is what motivates compressing the subpolicy input.  With
    shuffle_labels the trajectory labels are randomized first, which should
    drive accuracy to chance.
    """
    task_ids = sorted({tr.task_id for tr in trajectories})
    if len(task_ids) < 2:
        raise ValueError("probe needs at least two tasks")
    rng = np.random.default_rng([int(config.seed) % 2**32, 0x9120])
    labels = np.array([tr.task_id for tr in trajectories], dtype=np.int64)
    if config.shuffle_labels:
        labels = rng.integers(n_tasks, size=len(trajectories))

    train_idx, test_idx = [], []
    for task in task_ids:
        members = [i for i, tr in enumerate(trajectories) if tr.task_id == task]
        members = list(rng.permutation(members))
        n_test = max(1, round(config.test_fraction * len(members)))
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    if not train_idx or not test_idx:
        raise ValueError("probe split left an empty train or test set")

    d_obs = trajectories[0].states.shape[1] - n_tasks

    def collect(indices):
        xs = np.concatenate([trajectories[i].states[:, :d_obs] for i in indices])
        ys = np.concatenate(
            [np.full(trajectories[i].length, labels[i]) for i in indices]
        )
        return (
            torch.from_numpy(xs.astype(np.float32)),
            torch.from_numpy(ys.astype(np.int64)),
        )

    x_train, y_train = collect(train_idx)
    x_test, y_test = collect(test_idx)

    torch.manual_seed(int(config.seed) % 2**63)
    model = torch.nn.Sequential(
        torch.nn.Linear(d_obs, config.hidden),
        torch.nn.ReLU(),
        torch.nn.Linear(config.hidden, n_tasks),
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(int(config.seed) % 2**63 + 1)
    for _ in range(config.steps):
        idx = torch.randint(len(x_train), (config.batch_size,), generator=gen)
        logits = model(x_train[idx])
        loss = torch.nn.functional.cross_entropy(logits, y_train[idx])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    with torch.no_grad():
        predictions = model(x_test).argmax(dim=-1)
    return float((predictions == y_test).float().mean())
