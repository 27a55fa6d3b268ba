import json

import pytest
import torch

from paramskills.objective import FROM_POLICY
from paramskills.skillnet import ModelConfig
from paramskills.trainer import (
    Checkpoint,
    CheckpointCorruptError,
    TrainConfig,
    TrainingDivergedError,
    finetune,
    finetune_config,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from paramskills.trajstore import make_batch


def read_log(path):
    return [json.loads(line) for line in open(path)]


def loss_fields(entry):
    return {k: entry[k] for k in ("bc", "kl_k", "kl_z", "norm_pen", "total")}


@pytest.fixture(scope="module")
def small_config(manifest):
    return ModelConfig.from_manifest(manifest, hidden=16)


class TestPretrain:
    def test_loss_decreases(self, dataset, small_config, tmp_path):
        log = tmp_path / "train.log.jsonl"
        pretrain(dataset, small_config, TrainConfig(steps=50, seed=0), log_path=log)
        entries = read_log(log)
        assert len(entries) == 50
        assert entries[-1]["total"] < entries[0]["total"]

    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=0)

    def test_deterministic_loss_stream(self, dataset, small_config, tmp_path):
        cfg = TrainConfig(steps=10, seed=4)
        pretrain(dataset, small_config, cfg, log_path=tmp_path / "a.jsonl")
        pretrain(dataset, small_config, cfg, log_path=tmp_path / "b.jsonl")
        a = [loss_fields(e) for e in read_log(tmp_path / "a.jsonl")]
        b = [loss_fields(e) for e in read_log(tmp_path / "b.jsonl")]
        assert a == b  # bit-identical floats after JSON round-trip

    def test_log_has_step_and_wall_time(self, dataset, small_config, tmp_path):
        log = tmp_path / "log.jsonl"
        pretrain(dataset, small_config, TrainConfig(steps=3, seed=0), log_path=log)
        entry = read_log(log)[0]
        assert entry["step"] == 1 and "wall_time" in entry

    def test_empty_dataset_rejected(self, small_config):
        with pytest.raises(ValueError):
            pretrain([], small_config, TrainConfig(steps=1))

    def test_double_precision_mode(self, dataset, small_config):
        ckpt = pretrain(dataset, small_config, TrainConfig(steps=3, seed=0, precision="double"))
        assert ckpt.bundle.dtype == torch.float64

    def test_diverged_loss_aborts_with_step(self, dataset, small_config):
        ckpt = pretrain(dataset, small_config, TrainConfig(steps=1, seed=0))
        with torch.no_grad():
            ckpt.bundle.policy_k.head[0].weight.fill_(float("nan"))
        with pytest.raises(TrainingDivergedError, match="step 1"):
            finetune(ckpt, dataset, finetune_config(steps=5, seed=0))


class TestFinetune:
    def test_snapshot_boundaries(self, dataset, small_config):
        ckpt = pretrain(dataset, small_config, TrainConfig(steps=2, seed=0))
        snaps = finetune(ckpt, dataset, finetune_config(steps=20, eval_every=5, seed=1))
        assert [s.step for s in snaps] == [5, 10, 15, 20]

    def test_final_appended_when_offset(self, dataset, small_config):
        ckpt = pretrain(dataset, small_config, TrainConfig(steps=2, seed=0))
        snaps = finetune(ckpt, dataset, finetune_config(steps=12, eval_every=5, seed=1))
        assert [s.step for s in snaps] == [5, 10, 12]

    def test_no_eval_every_gives_single_final(self, dataset, small_config):
        ckpt = pretrain(dataset, small_config, TrainConfig(steps=2, seed=0))
        snaps = finetune(ckpt, dataset, finetune_config(steps=7, seed=1))
        assert len(snaps) == 1 and snaps[0].step == 7

    def test_uses_policy_sampling_by_default(self):
        assert finetune_config(steps=5).sampling_source == FROM_POLICY

    def test_source_checkpoint_untouched(self, dataset, small_config):
        ckpt = pretrain(dataset, small_config, TrainConfig(steps=2, seed=0))
        before = {k: v.clone() for k, v in ckpt.bundle.state_dict().items()}
        finetune(ckpt, dataset, finetune_config(steps=5, seed=1))
        after = ckpt.bundle.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_loss_improves_on_training_data(self, dataset, small_config, tmp_path):
        ckpt = pretrain(dataset, small_config, TrainConfig(steps=30, seed=0))
        log = tmp_path / "ft.jsonl"
        finetune(ckpt, dataset, finetune_config(steps=40, seed=2), log_path=log)
        totals = [e["total"] for e in read_log(log)]
        assert min(totals[1:]) < totals[0]


class TestCheckpointIO:
    def test_forward_pass_roundtrip_bit_exact(self, dataset, small_config, manifest, tmp_path):
        ckpt = pretrain(dataset, small_config, TrainConfig(steps=5, seed=0))
        save_checkpoint(ckpt, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        probe = make_batch(dataset[:2], manifest.n_tasks)
        with torch.no_grad():
            for fn in ("discrete_policy_forward", "continuous_policy_forward"):
                a = getattr(ckpt.bundle, fn)(probe)
                b = getattr(loaded.bundle, fn)(probe)
                assert torch.equal(a, b)
            va = ckpt.bundle.variational_forward(probe)
            vb = loaded.bundle.variational_forward(probe)
            assert torch.equal(va.k_logits, vb.k_logits)
            assert torch.equal(va.z_mean, vb.z_mean)

    def test_sidecar_fields(self, dataset, small_config, tmp_path):
        ckpt = pretrain(dataset, small_config, TrainConfig(steps=2, seed=9))
        save_checkpoint(ckpt, tmp_path / "ck")
        meta = json.loads((tmp_path / "ck" / "meta.json").read_text())
        assert meta["step"] == 2
        assert meta["train_config"]["seed"] == 9
        assert meta["model_config"]["K"] == small_config.K
        assert len(meta["rng_digest"]) == 64 and len(meta["blob_sha256"]) == 64

    def test_corrupted_blob_detected(self, dataset, small_config, tmp_path):
        ckpt = pretrain(dataset, small_config, TrainConfig(steps=2, seed=0))
        save_checkpoint(ckpt, tmp_path / "ck")
        blob = tmp_path / "ck" / "params.pt"
        data = bytearray(blob.read_bytes())
        data[len(data) // 2] ^= 0xFF
        blob.write_bytes(bytes(data))
        with pytest.raises(CheckpointCorruptError):
            load_checkpoint(tmp_path / "ck")

    def test_double_checkpoint_roundtrip(self, dataset, small_config, manifest, tmp_path):
        ckpt = pretrain(dataset, small_config, TrainConfig(steps=2, seed=0, precision="double"))
        save_checkpoint(ckpt, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.bundle.dtype == torch.float64
        probe = make_batch(dataset[:1], manifest.n_tasks).to(torch.float64)
        with torch.no_grad():
            assert torch.equal(
                ckpt.bundle.discrete_policy_forward(probe),
                loaded.bundle.discrete_policy_forward(probe),
            )
