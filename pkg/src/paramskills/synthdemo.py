"""Synthetic multitask pick-and-place suite with scripted experts.

A 2-d kinematic workspace: an agent moves with per-axis clipped position
deltas, closes a gripper to grab the single object, carries it, and releases
it at a goal location.  The scripted expert walks through four phases
(approach, grasp, carry, release) and, run closed-loop, produces the
demonstration datasets used for skill pretraining.  Dynamics are pure
functions of their inputs; all sampling is keyed by explicit seeds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .trajstore import DatasetManifest, Trajectory

# Expert phase indices, in execution order.
APPROACH, GRASP, CARRY, RELEASE = 0, 1, 2, 3

# The expert starts closing the gripper well outside the grasp radius
# (harmless: the grasp itself still requires proximity) and opens it slowly
# while still homing on the goal, so demonstrations cover both gripper
# transients densely and an imitator that switches early stays on a
# successful path.  Once a transition has started the expert commits to it
# (hysteresis): mid-transition states then carry one consistent action
# regardless of zone-boundary jitter, which keeps the demonstrated action a
# near-function of the observation.  Zone fractions of grasp_radius and
# success_radius.
_CLOSE_FRACTION = 2.0
_DROP_FRACTION = 0.6
_OPEN_RATE = 0.5
_GRIP_COMMIT = 0.95

# Minimum object-to-goal separation when sampling task layouts; keeps every
# task non-trivial (a freshly reset episode is never already successful).
_MIN_OBJECT_GOAL_DIST = 0.3
_MIN_LAYOUT_DIST = 0.05


class GenerationError(RuntimeError):
    """Raised when a scripted-expert rollout fails to reach success."""


@dataclass(frozen=True)
class EnvParams:
    """Workspace geometry and interaction thresholds shared by all tasks."""

    workspace_half_extent: float = 1.0
    grasp_radius: float = 0.06
    grip_threshold: float = 0.5
    step_clip: float = 0.1


DEFAULT_PARAMS = EnvParams()


@dataclass
class TaskSpec:
    task_id: int
    object_start: np.ndarray
    goal_pos: np.ndarray
    workspace_half_extent: float = 1.0
    success_radius: float = 0.08
    max_steps: int = 80

    def __post_init__(self):
        self.object_start = np.asarray(self.object_start, dtype=np.float64)
        self.goal_pos = np.asarray(self.goal_pos, dtype=np.float64)
        ext = self.workspace_half_extent
        if ext <= 0 or self.success_radius <= 0 or self.max_steps < 1:
            raise ValueError("TaskSpec scalars must be positive")
        if self.success_radius >= ext:
            raise ValueError("success_radius must be smaller than the workspace")
        for name in ("object_start", "goal_pos"):
            vec = getattr(self, name)
            if vec.shape != (2,) or np.abs(vec).max() > ext:
                raise ValueError(f"{name} must be a 2-vector inside the workspace")


@dataclass
class EnvState:
    agent_pos: np.ndarray
    gripper: float
    object_pos: np.ndarray
    held: bool
    step_count: int

    def __post_init__(self):
        self.agent_pos = np.asarray(self.agent_pos, dtype=np.float64)
        self.object_pos = np.asarray(self.object_pos, dtype=np.float64)


@dataclass
class Action:
    delta_pos: np.ndarray
    delta_grip: float

    def __post_init__(self):
        self.delta_pos = np.asarray(self.delta_pos, dtype=np.float64)
        if self.delta_pos.shape != (2,):
            raise ValueError("delta_pos must be a 2-vector")


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) % 2**32, *[int(k) % 2**32 for k in keys]])


def make_suite(
    n_tasks: int,
    seed: int,
    params: EnvParams = DEFAULT_PARAMS,
    success_radius: float = 0.08,
    max_steps: int = 80,
) -> list[TaskSpec]:
    """Sample n_tasks pairwise-distinct pick-and-place layouts.

    Object start and goal are uniform in the workspace, re-sampled until the
    object-goal separation exceeds a margin and the layout (object, goal)
    vector differs from every earlier task by more than a minimum distance.
    success_radius and max_steps are copied onto every task.
    """
    if n_tasks < 2:
        raise ValueError(f"n_tasks must be >= 2, got {n_tasks}")
    rng = _rng(seed, 0xA11)
    ext = params.workspace_half_extent
    layouts: list[np.ndarray] = []
    specs: list[TaskSpec] = []
    while len(specs) < n_tasks:
        obj = rng.uniform(-ext, ext, size=2)
        goal = rng.uniform(-ext, ext, size=2)
        if np.linalg.norm(obj - goal) < _MIN_OBJECT_GOAL_DIST:
            continue
        layout = np.concatenate([obj, goal])
        if any(np.linalg.norm(layout - prev) <= _MIN_LAYOUT_DIST for prev in layouts):
            continue
        layouts.append(layout)
        specs.append(
            TaskSpec(
                task_id=len(specs),
                object_start=obj,
                goal_pos=goal,
                workspace_half_extent=ext,
                success_radius=success_radius,
                max_steps=max_steps,
            )
        )
    return specs


def save_suite(suite: list[TaskSpec], path: str | Path) -> None:
    records = []
    for task in suite:
        rec = asdict(task)
        rec["object_start"] = [float(v) for v in task.object_start]
        rec["goal_pos"] = [float(v) for v in task.goal_pos]
        records.append(rec)
    Path(path).write_text(json.dumps(records, indent=2))


def load_suite(path: str | Path) -> list[TaskSpec]:
    return [TaskSpec(**rec) for rec in json.loads(Path(path).read_text())]


def config_digest(params: EnvParams, suite: list[TaskSpec]) -> str:
    """Hex digest pinning the environment parameters and suite layout."""
    blob = json.dumps([asdict(params)] + json.loads(json.dumps(
        [[t.task_id, list(map(float, t.object_start)), list(map(float, t.goal_pos)),
          t.workspace_half_extent, t.success_radius, t.max_steps] for t in suite]
    )))
    return hashlib.sha256(blob.encode()).hexdigest()


def reset(task: TaskSpec, seed: int, params: EnvParams = DEFAULT_PARAMS) -> EnvState:
    """Fresh episode: agent at a seed-determined position, gripper open."""
    rng = _rng(seed, 0x7E5E7)
    ext = params.workspace_half_extent
    return EnvState(
        agent_pos=rng.uniform(-ext, ext, size=2),
        gripper=-1.0,
        object_pos=task.object_start.copy(),
        held=False,
        step_count=0,
    )


def step(state: EnvState, action: Action, params: EnvParams = DEFAULT_PARAMS) -> EnvState:
    """Advance the kinematics by one action; pure function of its inputs."""
    if not (np.isfinite(action.delta_pos).all() and np.isfinite(action.delta_grip)):
        raise ValueError("non-finite action components")
    ext = params.workspace_half_extent
    clip = params.step_clip
    agent = np.clip(state.agent_pos + np.clip(action.delta_pos, -clip, clip), -ext, ext)
    grip = float(np.clip(state.gripper + np.clip(action.delta_grip, -1.0, 1.0), -1.0, 1.0))
    held = state.held
    if not held and grip > params.grip_threshold:
        if np.linalg.norm(agent - state.object_pos) < params.grasp_radius:
            held = True
    if held and grip < 0.0:
        held = False
    obj = agent.copy() if held else state.object_pos.copy()
    return EnvState(agent, grip, obj, held, state.step_count + 1)


def is_success(state: EnvState, task: TaskSpec) -> bool:
    return (
        not state.held
        and np.linalg.norm(state.object_pos - task.goal_pos) < task.success_radius
    )


def expert_phase(state: EnvState, task: TaskSpec, params: EnvParams = DEFAULT_PARAMS) -> int:
    if not state.held:
        near_object = (
            np.linalg.norm(state.agent_pos - state.object_pos)
            < _CLOSE_FRACTION * params.grasp_radius
        )
        closing_started = state.gripper > -_GRIP_COMMIT
        return GRASP if (near_object or closing_started) else APPROACH
    near_goal = (
        np.linalg.norm(state.agent_pos - task.goal_pos)
        < _DROP_FRACTION * task.success_radius
    )
    opening_started = state.gripper < _GRIP_COMMIT
    return RELEASE if (near_goal or opening_started) else CARRY


def expert_action(
    state: EnvState,
    task: TaskSpec,
    noise_scale: float,
    seed: int,
    params: EnvParams = DEFAULT_PARAMS,
) -> Action:
    """Scripted 4-phase controller; deterministic given (state, seed)."""
    phase = expert_phase(state, task, params)
    clip = params.step_clip
    if phase == APPROACH:
        delta_pos = state.object_pos - state.agent_pos
        delta_grip = -1.0
    elif phase == GRASP:
        delta_pos = state.object_pos - state.agent_pos
        delta_grip = 1.0
    elif phase == CARRY:
        delta_pos = task.goal_pos - state.agent_pos
        delta_grip = 1.0
    else:
        delta_pos = task.goal_pos - state.agent_pos
        delta_grip = -_OPEN_RATE
    if noise_scale > 0:
        rng = _rng(seed, state.step_count, 0x0153)
        delta_pos = delta_pos + noise_scale * rng.standard_normal(2)
    return Action(np.clip(delta_pos, -clip, clip), delta_grip)


def full_observation(state: EnvState, task: TaskSpec, n_tasks: int) -> np.ndarray:
    """[agent (2), gripper (1), object (2), goal (2), task one-hot (n_tasks)]."""
    onehot = np.zeros(n_tasks)
    onehot[task.task_id] = 1.0
    return np.concatenate(
        [state.agent_pos, [state.gripper], state.object_pos, task.goal_pos, onehot]
    )


def proprio_observation(state: EnvState) -> np.ndarray:
    """[agent (2), gripper (1)]: the agent-internal part of the observation."""
    return np.concatenate([state.agent_pos, [state.gripper]])


def full_obs_dim(n_tasks: int) -> int:
    return 7 + n_tasks


PROPRIO_DIM = 3
ACTION_DIM = 3


def run_expert_episode(
    task: TaskSpec,
    n_tasks: int,
    env_seed: int,
    expert_seed: int,
    noise_scale: float,
    params: EnvParams = DEFAULT_PARAMS,
) -> tuple[Trajectory | None, bool]:
    """One closed-loop expert rollout, truncated at success or max_steps."""
    state = reset(task, env_seed, params)
    states, proprio, actions = [], [], []
    success = False
    for _ in range(task.max_steps):
        act = expert_action(state, task, noise_scale, expert_seed, params)
        states.append(full_observation(state, task, n_tasks))
        proprio.append(proprio_observation(state))
        actions.append(np.concatenate([act.delta_pos, [act.delta_grip]]))
        state = step(state, act, params)
        if is_success(state, task):
            success = True
            break
    if not states:
        return None, success
    traj = Trajectory(
        task_id=task.task_id,
        states=np.stack(states),
        proprio=np.stack(proprio),
        actions=np.stack(actions),
    )
    return traj, success


def generate_dataset(
    suite: list[TaskSpec],
    demos_per_task: int,
    noise_scale: float,
    seed: int,
    params: EnvParams = DEFAULT_PARAMS,
) -> list[Trajectory]:
    """demos_per_task successful expert rollouts for every suite task.

    Seeds for each (task, demo) pair are derived independently from `seed`,
    so generation could run in parallel and still match the sequential
    result.  A rollout that fails to reach success is an error.
    """
    if not suite:
        raise ValueError("suite must be non-empty")
    n_tasks = len(suite)
    out: list[Trajectory] = []
    for task in suite:
        for demo in range(demos_per_task):
            env_seed = int(_rng(seed, task.task_id, demo, 0).integers(2**31))
            expert_seed = int(_rng(seed, task.task_id, demo, 1).integers(2**31))
            traj, success = run_expert_episode(
                task, n_tasks, env_seed, expert_seed, noise_scale, params
            )
            if not success or traj is None:
                raise GenerationError(
                    f"expert failed on task {task.task_id} (seed {seed}, demo {demo})"
                )
            out.append(traj)
    return out


def build_manifest(
    suite: list[TaskSpec],
    trajectories: list[Trajectory],
    generator_seed: int,
    params: EnvParams = DEFAULT_PARAMS,
) -> DatasetManifest:
    n_tasks = len(suite)
    return DatasetManifest(
        n_tasks=n_tasks,
        D_full=full_obs_dim(n_tasks),
        D_prop=PROPRIO_DIM,
        D_act=ACTION_DIM,
        env_config_digest=config_digest(params, suite),
        generator_seed=int(generator_seed),
        trajectory_count=len(trajectories),
    )


def subset_for_tasks(trajectories: list[Trajectory], tasks: list[TaskSpec]) -> list[Trajectory]:
    wanted = {t.task_id for t in tasks}
    return [tr for tr in trajectories if tr.task_id in wanted]
