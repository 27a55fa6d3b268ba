"""Discovery of continuously parameterized skills from multitask demonstrations.

A three-level policy hierarchy (discrete skill selector, continuous
parameter policy, compressed-state subpolicy) trained jointly with a
trajectory-level variational posterior, plus a desk-scale synthetic
pick-and-place benchmark, a finetune-and-rollout evaluation protocol, and
diagnostics for the learned skills.
"""

from .evalkit import (
    EvalReport,
    ProbeConfig,
    ProtocolConfig,
    RolloutTrace,
    annotate_trajectory,
    compute_metrics,
    export_traces,
    monotonicity_score,
    rollout,
    run_protocol,
    task_identifiability_probe,
)
from .objective import (
    FROM_POLICY,
    FROM_Q,
    LossReport,
    LossWeights,
    NoiseBundle,
    draw_noise,
    per_trajectory_elbo,
    total_loss,
)
from .probkit import (
    CategoricalParams,
    DiagGaussianParams,
    NoiseSource,
    cat_kl,
    gauss_kl_unitvar,
    gauss_log_prob,
    reparam_sample,
    sample_categorical_st,
)
from .skillnet import ModelConfig, PolicyBundle, SkillAssignment, build_bundle
from .synthdemo import (
    Action,
    EnvParams,
    EnvState,
    TaskSpec,
    expert_action,
    generate_dataset,
    is_success,
    make_suite,
    reset,
    step,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    finetune,
    finetune_config,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .trajstore import (
    Batch,
    DatasetManifest,
    Trajectory,
    load_dataset,
    make_batch,
    save_dataset,
    split_suite,
)

__version__ = "0.1.0"
