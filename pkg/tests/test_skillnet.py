import math

import numpy as np
import pytest
import torch

from paramskills.objective import draw_noise
from paramskills.probkit import NoiseSource
from paramskills.skillnet import Compressor, ModelConfig, PolicyBundle, build_bundle
from paramskills.trajstore import make_batch


def truncate(trajs, t):
    out = []
    for traj in trajs:
        cut = type(traj)(
            task_id=traj.task_id,
            states=traj.states[:t],
            proprio=traj.proprio[:t],
            actions=traj.actions[:t],
        )
        out.append(cut)
    return out


class TestModelConfig:
    def test_validation(self, manifest):
        with pytest.raises(ValueError):
            ModelConfig.from_manifest(manifest, K=0)
        with pytest.raises(ValueError):
            ModelConfig.from_manifest(manifest, d=-1)
        with pytest.raises(ValueError):
            ModelConfig.from_manifest(manifest, compress_dim=4)

    def test_ablation_configs_permitted(self, manifest):
        ModelConfig.from_manifest(manifest, d=0)
        ModelConfig.from_manifest(manifest, K=1)
        ModelConfig.from_manifest(manifest, compress_dim=None)

    def test_full_scale_preset(self, model_config):
        full = model_config.full_scale()
        assert (full.K, full.d, full.hidden) == (10, 4, 1024)


class TestVariationalEncoder:
    def test_z_shape_independent_of_length(self, bundle, dataset, manifest):
        cfg = bundle.config
        for group in (dataset[:2], dataset[:4]):
            vout = bundle.variational_forward(make_batch(group, manifest.n_tasks))
            assert vout.z_mean.shape == (len(group), cfg.K, cfg.d)
            assert vout.z_logvar.shape == (len(group), cfg.K, cfg.d)

    def test_single_valid_step_equals_that_step(self, bundle, dataset, manifest):
        # batching a length-1 trajectory with a longer one must give the same
        # aggregate as running the length-1 trajectory alone
        short = truncate(dataset[:1], 1)
        batch_pair = make_batch(short + dataset[1:2], manifest.n_tasks)
        batch_solo = make_batch(short, manifest.n_tasks)
        with torch.no_grad():
            paired = bundle.variational_forward(batch_pair)
            solo = bundle.variational_forward(batch_solo)
        assert torch.allclose(paired.z_mean[0], solo.z_mean[0], atol=1e-6)
        assert torch.allclose(paired.z_logvar[0], solo.z_logvar[0], atol=1e-6)

    def test_padding_content_is_invisible(self, bundle, dataset, manifest):
        batch = make_batch(dataset[:3], manifest.n_tasks)
        scrambled = make_batch(dataset[:3], manifest.n_tasks)
        pad = ~batch.mask.bool()
        scrambled.states[pad.unsqueeze(-1).expand_as(scrambled.states)] = 7.7
        scrambled.actions[pad.unsqueeze(-1).expand_as(scrambled.actions)] = -3.3
        with torch.no_grad():
            a = bundle.variational_forward(batch)
            b = bundle.variational_forward(scrambled)
        valid = batch.mask.bool()
        assert torch.equal(a.k_logits[valid], b.k_logits[valid])
        assert torch.equal(a.z_mean, b.z_mean)
        assert torch.equal(a.z_logvar, b.z_logvar)

    def test_per_skill_aggregation_flag(self, manifest, dataset):
        cfg = ModelConfig.from_manifest(manifest, z_aggregate_per_skill=True)
        bundle = build_bundle(cfg, seed=0)
        vout = bundle.variational_forward(make_batch(dataset[:2], manifest.n_tasks))
        assert vout.z_mean.shape == (2, cfg.K, cfg.d)
        assert torch.isfinite(vout.z_mean).all()

    def test_logvar_clamped(self, bundle, batch):
        vout = bundle.variational_forward(batch)
        assert vout.z_logvar.max() <= 10.0 and vout.z_logvar.min() >= -10.0


class TestCausality:
    @pytest.mark.parametrize("which", ["discrete", "continuous"])
    def test_prefix_invariance(self, which, bundle, dataset, manifest):
        t = 4
        full_batch = make_batch(dataset[:3], manifest.n_tasks)
        trunc_batch = make_batch(truncate(dataset[:3], t), manifest.n_tasks)
        with torch.no_grad():
            if which == "discrete":
                full = bundle.discrete_policy_forward(full_batch)
                trunc = bundle.discrete_policy_forward(trunc_batch)
            else:
                full = bundle.continuous_policy_forward(full_batch)
                trunc = bundle.continuous_policy_forward(trunc_batch)
        assert (full[:, :t] - trunc).abs().max() <= 1e-6

    def test_uncompressed_subpolicy_causal(self, manifest, dataset):
        cfg = ModelConfig.from_manifest(manifest, compress_dim=None)
        bundle = build_bundle(cfg, seed=0)
        t = 4
        full_batch = make_batch(dataset[:2], manifest.n_tasks)
        trunc_batch = make_batch(truncate(dataset[:2], t), manifest.n_tasks)
        z_full = torch.randn(2, full_batch.max_len, cfg.d)
        with torch.no_grad():
            full = bundle.uncompressed_subpolicy_forward(full_batch.proprio, z_full)
            trunc = bundle.uncompressed_subpolicy_forward(
                trunc_batch.proprio, z_full[:, :t]
            )
        assert (full.mean[:, :t] - trunc.mean).abs().max() <= 1e-6

    def test_task_onehot_changes_logits(self, bundle, dataset, manifest):
        batch = make_batch(dataset[:1], manifest.n_tasks)
        flipped = make_batch(dataset[:1], manifest.n_tasks)
        flipped.task_onehots = torch.roll(flipped.task_onehots, 1, dims=-1)
        with torch.no_grad():
            a = bundle.discrete_policy_forward(batch)
            b = bundle.discrete_policy_forward(flipped)
        assert not torch.allclose(a, b)


class TestShapes:
    def test_discrete_logits_shape(self, bundle, batch):
        cfg = bundle.config
        out = bundle.discrete_policy_forward(batch)
        assert out.shape == (batch.size, batch.max_len, cfg.K)

    def test_continuous_means_shape(self, bundle, batch):
        cfg = bundle.config
        out = bundle.continuous_policy_forward(batch)
        assert out.shape == (batch.size, batch.max_len, cfg.K, cfg.d)

    def test_d_zero_gives_empty_trailing_dim(self, manifest, dataset):
        cfg = ModelConfig.from_manifest(manifest, d=0)
        bundle = build_bundle(cfg, seed=0)
        batch = make_batch(dataset[:2], manifest.n_tasks)
        out = bundle.continuous_policy_forward(batch)
        assert out.shape == (2, batch.max_len, cfg.K, 0)

    def test_batch_dim_mismatch_rejected(self, bundle, dataset):
        bad = make_batch(dataset[:1], n_tasks=7)  # wrong one-hot width
        with pytest.raises(ValueError):
            bundle.discrete_policy_forward(bad)


class TestCompressor:
    def test_zeroed_head_outputs_zero(self, model_config):
        comp = Compressor(model_config)
        with torch.no_grad():
            for p in comp.parameters():
                p.zero_()
        out = comp(torch.randn(5, model_config.d), torch.randn(5, model_config.D_prop))
        assert torch.equal(out, torch.zeros(5, 1))

    def test_unit_axis_matches_tanh(self, model_config):
        # force w = (1, 0, 0), b = 0 through the head biases
        comp = Compressor(model_config)
        with torch.no_grad():
            for p in comp.parameters():
                p.zero_()
            comp.w_head.bias.copy_(torch.tensor([1.0, 0.0, 0.0]))
        s_proj = torch.tensor([[0.5, 9.0, 9.0]])
        out = comp(torch.zeros(1, model_config.d), s_proj).detach()
        assert float(out) == pytest.approx(math.tanh(0.5), abs=1e-6)
        assert math.tanh(0.5) == pytest.approx(0.462117, abs=1e-6)

    def test_outputs_strictly_inside_unit_interval(self, model_config):
        comp = Compressor(model_config)
        z = torch.randn(1000, model_config.d) * 5
        s = torch.randn(1000, model_config.D_prop) * 5
        out = comp(z, s)
        assert (out.abs() < 1.0).all()

    def test_compress_requires_compressed_mode(self, manifest):
        cfg = ModelConfig.from_manifest(manifest, compress_dim=None)
        bundle = build_bundle(cfg, seed=0)
        with pytest.raises(ValueError):
            bundle.compress(torch.zeros(1, cfg.d), torch.zeros(1, cfg.D_prop))

    def test_sees_k_flag_requires_onehot(self, manifest):
        cfg = ModelConfig.from_manifest(manifest, compressor_sees_k=True)
        bundle = build_bundle(cfg, seed=0)
        with pytest.raises(ValueError):
            bundle.compress(torch.zeros(1, cfg.d), torch.zeros(1, cfg.D_prop))
        out = bundle.compress(
            torch.zeros(1, cfg.d), torch.zeros(1, cfg.D_prop),
            torch.nn.functional.one_hot(torch.tensor([0]), cfg.K).float(),
        )
        assert out.shape == (1, 1)

    def test_emit_axes_shapes(self, manifest):
        cfg = ModelConfig.from_manifest(manifest, compress_dim=3)
        comp = Compressor(cfg)
        axes = comp.emit_axes(torch.randn(4, cfg.d))
        assert axes.w.shape == (4, 3, cfg.D_prop)
        assert axes.b.shape == (4, 3)


class TestSubpolicy:
    def test_output_widths(self, bundle):
        cfg = bundle.config
        dist = bundle.subpolicy_forward(torch.randn(5, cfg.compress_dim), torch.randn(5, cfg.d))
        assert dist.mean.shape == (5, cfg.D_act)
        assert dist.logvar.shape == (5, cfg.D_act)

    def test_input_width_is_compress_dim_plus_d(self, model_config):
        assert model_config.compress_dim == 1 and model_config.d == 2
        bundle = build_bundle(model_config, seed=0)
        assert bundle.subpolicy.trunk[0].in_features == 3

    def test_isolated_from_full_observation(self, bundle, batch):
        cfg = bundle.config
        s_comp = torch.randn(4, cfg.compress_dim)
        z = torch.randn(4, cfg.d)
        with torch.no_grad():
            before = bundle.subpolicy_forward(s_comp, z)
            batch.states += 100.0  # withheld input; must be unreachable
            after = bundle.subpolicy_forward(s_comp, z)
        assert torch.equal(before.mean, after.mean)
        assert torch.equal(before.logvar, after.logvar)

    def test_wrong_mode_errors(self, manifest, bundle):
        with pytest.raises(ValueError):
            bundle.uncompressed_subpolicy_forward(torch.zeros(1, 1, 3), torch.zeros(1, 1, 2))
        cfg = ModelConfig.from_manifest(manifest, compress_dim=None)
        unc = build_bundle(cfg, seed=0)
        with pytest.raises(ValueError):
            unc.subpolicy_forward(torch.zeros(1, 1), torch.zeros(1, cfg.d))


class TestSkillAssignment:
    def test_per_skill_z_constancy(self, bundle, batch):
        src = NoiseSource(4)
        noise = draw_noise(batch.size, batch.max_len, bundle.config, src)
        vout = bundle.variational_forward(batch)
        asg = bundle.sample_assignment_from_q(vout, noise)
        k_idx = asg.k_onehots.argmax(dim=-1)
        for b in range(batch.size):
            for k in range(bundle.config.K):
                rows = asg.z_seq[b][k_idx[b] == k]
                if len(rows) > 1:
                    assert torch.equal(rows, rows[0].expand_as(rows))

    def test_z_seq_drawn_from_sampled_set(self, bundle, batch):
        src = NoiseSource(4)
        noise = draw_noise(batch.size, batch.max_len, bundle.config, src)
        vout = bundle.variational_forward(batch)
        asg = bundle.sample_assignment_from_q(vout, noise)
        from paramskills.probkit import DiagGaussianParams, reparam_sample

        z_all = reparam_sample(DiagGaussianParams(vout.z_mean, vout.z_logvar), noise.z_skill)
        for b in range(batch.size):
            for t in range(batch.max_len):
                k = int(asg.k_onehots[b, t].argmax())
                assert torch.equal(asg.z_seq[b, t], z_all[b, k])

    def test_k_equals_one_collapses(self, manifest, dataset):
        cfg = ModelConfig.from_manifest(manifest, K=1)
        bundle = build_bundle(cfg, seed=0)
        batch = make_batch(dataset[:2], manifest.n_tasks)
        noise = draw_noise(batch.size, batch.max_len, cfg, NoiseSource(0))
        asg = bundle.sample_assignment_from_q(bundle.variational_forward(batch), noise)
        assert torch.equal(asg.k_onehots, torch.ones_like(asg.k_onehots))
        per_traj = asg.z_seq[0]
        assert torch.equal(per_traj, per_traj[0].expand_as(per_traj))

    def test_d_zero_gives_zero_width_z(self, manifest, dataset):
        cfg = ModelConfig.from_manifest(manifest, d=0)
        bundle = build_bundle(cfg, seed=0)
        batch = make_batch(dataset[:2], manifest.n_tasks)
        noise = draw_noise(batch.size, batch.max_len, cfg, NoiseSource(0))
        asg = bundle.sample_assignment_from_q(bundle.variational_forward(batch), noise)
        assert asg.z_seq.shape == (2, batch.max_len, 0)


def test_build_bundle_is_deterministic(model_config, batch):
    a = build_bundle(model_config, seed=12)
    b = build_bundle(model_config, seed=12)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    with torch.no_grad():
        assert torch.equal(a.discrete_policy_forward(batch), b.discrete_policy_forward(batch))


def test_all_forwards_finite(bundle, batch):
    with torch.no_grad():
        vout = bundle.variational_forward(batch)
        k_logits = bundle.discrete_policy_forward(batch)
        z_means = bundle.continuous_policy_forward(batch)
    for tensor in (vout.k_logits, vout.z_mean, vout.z_logvar, k_logits, z_means):
        assert torch.isfinite(tensor).all()
