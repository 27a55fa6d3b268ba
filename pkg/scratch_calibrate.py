"""Calibration run for the desk-scale generalization criterion (scratch, not shipped)."""
import sys
import time

import numpy as np
import torch

import paramskills as ps
from paramskills import baselines, evalkit, synthdemo, trajstore, trainer
from paramskills.skillnet import ModelConfig, build_bundle

SEED = int(sys.argv[1]) if len(sys.argv) > 1 else 0
PRETRAIN_STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 2000

t0 = time.time()
suite = ps.make_suite(12, seed=7)
dataset = ps.generate_dataset(suite, 5, noise_scale=0.03, seed=3)
manifest = synthdemo.build_manifest(suite, dataset, 3)
pretrain_tasks, heldout_tasks = trajstore.split_suite(suite, 2, seed=7)
print('heldout ids:', [t.task_id for t in heldout_tasks])
train_set = synthdemo.subset_for_tasks(dataset, pretrain_tasks)
heldout_demos = []
for task in heldout_tasks:
    heldout_demos.extend([tr for tr in dataset if tr.task_id == task.task_id][:3])

mcfg = ModelConfig.from_manifest(manifest)
tcfg = ps.TrainConfig(steps=PRETRAIN_STEPS, seed=SEED)
t1 = time.time()
ckpt = trainer.pretrain(train_set, mcfg, tcfg, log_path=f'/tmp/cal_pre_{SEED}.jsonl')
t2 = time.time()
print(f'[seed {SEED}] DEPS pretrain {PRETRAIN_STEPS} steps: {t2-t1:.1f}s')

import json
logs = [json.loads(l) for l in open(f'/tmp/cal_pre_{SEED}.jsonl')]
print('  loss: start %.3f -> end %.3f (bc %.3f -> %.3f)' % (
    logs[0]['total'], np.mean([l['total'] for l in logs[-50:]]),
    logs[0]['bc'], np.mean([l['bc'] for l in logs[-50:]])))

# in-sample rollout sanity: can the pretrained model do its own training tasks?
succ = []
for task in pretrain_tasks[:5]:
    outcomes = [evalkit.rollout(ckpt, task, seed=j).success for j in range(10)]
    succ.append(np.mean(outcomes))
print('  in-sample rollout success per task:', succ)

pcfg = evalkit.ProtocolConfig(seed=SEED)
t3 = time.time()
report = evalkit.run_protocol(ckpt, heldout_tasks, heldout_demos, pcfg)
t4 = time.time()
print(f'[seed {SEED}] DEPS protocol: {t4-t3:.1f}s mean={report.mean_success:.3f} mean_highest={report.mean_highest_success:.3f}')
print('  rates:', np.round(report.success_rates, 2))

# BC baseline
torch.manual_seed(SEED)
bc = baselines.BCPolicy(manifest.D_full, manifest.D_act, manifest.n_tasks, hidden=64)
t5 = time.time()
baselines.train_bc(bc, train_set, manifest.n_tasks, trainer.TrainConfig(steps=PRETRAIN_STEPS, seed=SEED))
t6 = time.time()
print(f'[seed {SEED}] BC pretrain: {t6-t5:.1f}s')
bc_report = baselines.bc_protocol(bc, heldout_tasks, heldout_demos, pcfg)
t7 = time.time()
print(f'[seed {SEED}] BC protocol: {t7-t6:.1f}s mean={bc_report.mean_success:.3f} mean_highest={bc_report.mean_highest_success:.3f}')
print('  rates:', np.round(bc_report.success_rates, 2))

# untrained baseline
untrained = trainer.Checkpoint(build_bundle(mcfg, seed=SEED + 500), mcfg, tcfg, 0, '')
outcomes = []
for task in heldout_tasks:
    outcomes += [evalkit.rollout(untrained, task, seed=j).success for j in range(20)]
print(f'[seed {SEED}] untrained mean success: {np.mean(outcomes):.3f}')
print(f'[seed {SEED}] total time: {time.time()-t0:.1f}s')
print('RESULT', SEED, report.mean_highest_success, bc_report.mean_highest_success, np.mean(outcomes))
