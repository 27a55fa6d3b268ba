"""Config-driven command line entry point.

Subcommands: gen-data, pretrain, finetune, eval, viz, probe.  Every run
takes an optional JSON config (schema-validated, unknown keys rejected)
plus flag overrides, and writes its outputs under one run directory that
always contains the fully resolved config:

    config.resolved.json   train.log.jsonl   ckpt/   eval/report.json
    viz/*.csv|svg          probe.json

Exit codes: 0 success, 1 usage or config validation error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, asdict, field, fields
from pathlib import Path

from . import baselines  # noqa: F401  (imported for CLI extensions in demos)
from . import evalkit, synthdemo, trainer, trajstore
from .objective import LossWeights
from .skillnet import ModelConfig


class UsageError(RuntimeError):
    pass


class ConfigError(RuntimeError):
    def __init__(self, offending_keys: list[str], context: str):
        self.offending_keys = offending_keys
        super().__init__(f"unknown config keys in {context}: {offending_keys}")


@dataclass
class EnvBlock:
    n_tasks: int = 12
    demos_per_task: int = 5
    noise_scale: float = 0.01
    seed: int = 3
    n_heldout: int = 2


@dataclass
class ModelBlock:
    K: int = 6                  # full-scale runs use 10
    d: int = 2                  # full-scale runs use 4
    hidden: int = 64            # full-scale runs use 1024
    compressor_hidden: int = 32  # full-scale runs use 128
    compress_dim: int | None = 1
    compressor_sees_k: bool = False
    gs_temperature: float = 1.0
    z_aggregate_per_skill: bool = False


@dataclass
class TrainBlock:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 3e-4
    seed: int = 0
    beta_k: float = 0.5
    beta_z: float = 0.01
    lambda_norm: float = 0.1
    eval_every: int | None = None
    precision: str = "single"
    grad_clip: float = 10.0


@dataclass
class EvalBlock:
    finetune_steps: int = 500
    eval_every: int = 50
    rollouts_per_eval: int = 20
    batch_size: int = 3
    learning_rate: float = 3e-4
    demos_per_finetune: int = 3
    seed: int = 0


@dataclass
class AblationBlock:
    compress_dim: int | None = None  # None leaves the model block untouched
    K: int | None = None
    discrete_only: bool = False
    continuous_only: bool = False
    uncompressed: bool = False


@dataclass
class RunConfig:
    env: EnvBlock = field(default_factory=EnvBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)
    ablation: AblationBlock = field(default_factory=AblationBlock)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved_model_block(self) -> ModelBlock:
        """Model block with the ablation overrides applied."""
        block = ModelBlock(**asdict(self.model))
        ab = self.ablation
        if ab.K is not None:
            block.K = ab.K
        if ab.compress_dim is not None:
            block.compress_dim = ab.compress_dim
        if ab.discrete_only:
            block.d = 0
        if ab.continuous_only:
            block.K = 1
        if ab.uncompressed:
            block.compress_dim = None
        return block


_BLOCKS = {
    "env": EnvBlock,
    "model": ModelBlock,
    "train": TrainBlock,
    "eval": EvalBlock,
    "ablation": AblationBlock,
}


def _block_from_dict(cls, data: dict, context: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(unknown, context)
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_BLOCKS))
    if unknown:
        raise ConfigError(unknown, "top level")
    blocks = {
        name: _block_from_dict(cls, data.get(name, {}), name)
        for name, cls in _BLOCKS.items()
    }
    return RunConfig(**blocks)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Parse a JSON config file and apply dotted-key flag overrides.

    A missing path or empty file yields the desk defaults.  Override keys
    look like "train.learning_rate"; unknown keys raise ConfigError.
    """
    data = {}
    if path is not None:
        text = Path(path).read_text().strip()
        if text:
            data = json.loads(text)
    config = config_from_dict(data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        block_name, _, field_name = key.partition(".")
        if block_name not in _BLOCKS:
            raise ConfigError([key], "override")
        block = getattr(config, block_name)
        if field_name not in {f.name for f in fields(type(block))}:
            raise ConfigError([key], "override")
        setattr(block, field_name, value)
    return config


def _echo_config(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(config.to_dict(), indent=2))


def _load_run_inputs(data_dir: Path):
    trajectories, manifest = trajstore.load_dataset(data_dir)
    suite = synthdemo.load_suite(data_dir / "suite.json")
    return trajectories, manifest, suite


def _model_config(config: RunConfig, manifest) -> ModelConfig:
    block = config.resolved_model_block()
    return ModelConfig.from_manifest(manifest, **asdict(block))


def _train_config(config: RunConfig) -> trainer.TrainConfig:
    t = config.train
    return trainer.TrainConfig(
        steps=t.steps,
        batch_size=t.batch_size,
        learning_rate=t.learning_rate,
        seed=t.seed,
        weights=LossWeights(t.beta_k, t.beta_z, t.lambda_norm),
        eval_every=t.eval_every,
        precision=t.precision,
        grad_clip=t.grad_clip,
    )


def _protocol_config(config: RunConfig) -> evalkit.ProtocolConfig:
    e = config.eval
    t = config.train
    return evalkit.ProtocolConfig(
        finetune_steps=e.finetune_steps,
        eval_every=e.eval_every,
        rollouts_per_eval=e.rollouts_per_eval,
        batch_size=e.batch_size,
        learning_rate=e.learning_rate,
        precision=t.precision,
        weights=LossWeights(t.beta_k, t.beta_z, t.lambda_norm),
        seed=e.seed,
    )


def _finetune_demos(trajectories, task_id: int, demos_per_finetune: int):
    demos = [tr for tr in trajectories if tr.task_id == task_id]
    if not demos:
        raise UsageError(f"dataset has no demonstrations for task {task_id}")
    return demos[:demos_per_finetune]


def cmd_gen_data(args) -> int:
    config = load_config(args.config, {
        "env.n_tasks": args.tasks,
        "env.demos_per_task": args.demos,
        "env.noise_scale": args.noise,
        "env.seed": args.seed,
    })
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    env = config.env
    suite = synthdemo.make_suite(env.n_tasks, env.seed)
    trajectories = synthdemo.generate_dataset(
        suite, env.demos_per_task, env.noise_scale, env.seed
    )
    manifest = synthdemo.build_manifest(suite, trajectories, env.seed)
    trajstore.save_dataset(trajectories, manifest, out_dir)
    synthdemo.save_suite(suite, out_dir / "suite.json")
    print(f"wrote {len(trajectories)} trajectories for {env.n_tasks} tasks to {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    config = load_config(args.config, {
        "train.steps": args.steps,
        "train.learning_rate": args.lr,
        "train.seed": args.seed,
        "train.batch_size": args.batch_size,
        "train.precision": args.precision,
    })
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    trajectories, manifest, suite = _load_run_inputs(Path(args.data))
    pretrain_tasks, _ = trajstore.split_suite(suite, config.env.n_heldout, config.env.seed)
    train_set = synthdemo.subset_for_tasks(trajectories, pretrain_tasks)
    ckpt = trainer.pretrain(
        train_set,
        _model_config(config, manifest),
        _train_config(config),
        log_path=out_dir / "train.log.jsonl",
    )
    trainer.save_checkpoint(ckpt, out_dir / "ckpt")
    print(f"pretrained {config.train.steps} steps on {len(train_set)} demos -> {out_dir}/ckpt")
    return 0


def cmd_finetune(args) -> int:
    config = load_config(args.config, {
        "eval.finetune_steps": args.steps,
        "eval.learning_rate": args.lr,
        "eval.eval_every": args.eval_every,
    })
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    ckpt = trainer.load_checkpoint(Path(args.ckpt))
    trajectories, _, _ = _load_run_inputs(Path(args.data))
    demos = _finetune_demos(trajectories, args.task, config.eval.demos_per_finetune)
    ft_cfg = trainer.finetune_config(
        steps=config.eval.finetune_steps,
        eval_every=config.eval.eval_every,
        batch_size=config.eval.batch_size,
        learning_rate=config.eval.learning_rate,
        precision=config.train.precision,
        weights=LossWeights(config.train.beta_k, config.train.beta_z, config.train.lambda_norm),
        seed=config.eval.seed,
    )
    snapshots = trainer.finetune(ckpt, demos, ft_cfg, log_path=out_dir / "train.log.jsonl")
    for snap in snapshots:
        trainer.save_checkpoint(snap, out_dir / "ckpt" / f"step_{snap.step:06d}")
    trainer.save_checkpoint(snapshots[-1], out_dir / "ckpt" / "final")
    print(f"finetuned task {args.task} for {ft_cfg.steps} steps, {len(snapshots)} snapshots")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config, {
        "eval.rollouts_per_eval": args.rollouts,
        "eval.finetune_steps": args.steps,
        "eval.seed": args.seed,
    })
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    ckpt = trainer.load_checkpoint(Path(args.ckpt))
    trajectories, _, suite = _load_run_inputs(Path(args.data))
    _, heldout_tasks = trajstore.split_suite(suite, config.env.n_heldout, config.env.seed)
    demos = []
    for task in heldout_tasks:
        demos.extend(_finetune_demos(trajectories, task.task_id, config.eval.demos_per_finetune))
    report = evalkit.run_protocol(ckpt, heldout_tasks, demos, _protocol_config(config))
    (out_dir / "eval").mkdir(parents=True, exist_ok=True)
    report.save(out_dir / "eval" / "report.json")
    print(
        f"mean_success={report.mean_success:.3f} "
        f"mean_highest_success={report.mean_highest_success:.3f}"
    )
    return 0


def cmd_viz(args) -> int:
    config = load_config(args.config, {})
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    ckpt = trainer.load_checkpoint(Path(args.ckpt))
    trajectories, _, suite = _load_run_inputs(Path(args.data))
    task = next((t for t in suite if t.task_id == args.task), None)
    if task is None:
        raise UsageError(f"task {args.task} not in suite")
    viz_dir = out_dir / "viz"
    trace = evalkit.rollout(ckpt, task, seed=args.rollout_seed, mode=args.mode)
    evalkit.export_traces(trace, viz_dir / f"rollout_task{task.task_id}")
    demos = [tr for tr in trajectories if tr.task_id == task.task_id]
    if demos:
        annotated = evalkit.annotate_trajectory(ckpt, demos[0])
        evalkit.export_traces(annotated, viz_dir / f"demo_task{task.task_id}")
    print(f"wrote traces under {viz_dir} (rollout success={trace.success})")
    return 0


def cmd_probe(args) -> int:
    config = load_config(args.config, {})
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    trajectories, manifest, _ = _load_run_inputs(Path(args.data))
    probe_cfg = evalkit.ProbeConfig(seed=config.eval.seed, shuffle_labels=args.shuffle_labels)
    accuracy = evalkit.task_identifiability_probe(trajectories, manifest.n_tasks, probe_cfg)
    (out_dir / "probe.json").write_text(json.dumps({
        "accuracy": accuracy,
        "n_tasks": manifest.n_tasks,
        "shuffle_labels": args.shuffle_labels,
    }, indent=2))
    print(f"single-observation task accuracy: {accuracy:.3f}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="paramskills", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a demonstration dataset")
    p.add_argument("--tasks", type=int, default=None)
    p.add_argument("--demos", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain on the non-held-out tasks")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--precision", choices=("single", "double"), default=None)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune a checkpoint on one task")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="finetune-and-rollout protocol on held-out tasks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("viz", help="export rollout and demonstration traces")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=("greedy", "stochastic"), default="greedy")
    p.add_argument("--rollout-seed", type=int, default=0)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("probe", help="single-observation task identifiability probe")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--shuffle-labels", action="store_true")
    p.set_defaults(fn=cmd_probe)

    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
