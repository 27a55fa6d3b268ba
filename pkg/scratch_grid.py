"""Model-config grid for closed-loop viability (scratch, not shipped)."""
import json
import sys
import time

import numpy as np

import paramskills as ps
from paramskills import evalkit, synthdemo, trajstore, trainer
from paramskills.objective import LossWeights
from paramskills.skillnet import ModelConfig

suite = ps.make_suite(12, seed=7)
dataset = ps.generate_dataset(suite, 5, noise_scale=0.03, seed=3)
manifest = synthdemo.build_manifest(suite, dataset, 3)
pre_tasks, _ = trajstore.split_suite(suite, 2, seed=7)
train_set = synthdemo.subset_for_tasks(dataset, pre_tasks)

GRID = {
    "base": (dict(), LossWeights()),
    "d4": (dict(d=4), LossWeights()),
    "K10_d4": (dict(K=10, d=4), LossWeights()),
    "temp0.5": (dict(gs_temperature=0.5), LossWeights()),
    "norm0.01": (dict(), LossWeights(lambda_norm=0.01)),
    "beta_z0.1": (dict(), LossWeights(beta_z=0.1)),
    "sees_k": (dict(compressor_sees_k=True), LossWeights()),
    "K10_d4_norm0.01": (dict(K=10, d=4), LossWeights(lambda_norm=0.01)),
}

which = sys.argv[1:] or list(GRID)
for name in which:
    overrides, weights = GRID[name]
    t0 = time.time()
    mcfg = ModelConfig.from_manifest(manifest, **overrides)
    ckpt = trainer.pretrain(train_set, mcfg, ps.TrainConfig(steps=2000, seed=0, weights=weights))
    succ = []
    for task in pre_tasks[:4]:
        outcomes = [evalkit.rollout(ckpt, task, seed=j).success for j in range(10)]
        succ.append(float(np.mean(outcomes)))
    print(f'{name}: in-sample {np.round(succ, 2).tolist()} mean={np.mean(succ):.3f} ({time.time()-t0:.0f}s)', flush=True)
