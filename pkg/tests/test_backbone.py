import numpy as np
import pytest

from adanec.backbone import (JOINT, BackboneConfig, TrainConfig, arch_from_text,
                             arch_to_text, build_arch, forward_backbone,
                             backward_backbone, init_expert, load_expert,
                             predict, predict_batch, save_expert, train_expert,
                             training_loss)
from adanec.losses import LossConfig, rr_loss_and_grad
from tests.conftest import TINY_BACKBONE


def descriptor_param_count(arch):
    """Independent count: expand the descriptor and sum k*k*cin*cout + cout."""
    total = 0
    for spec in arch.all_layers():
        if spec.kind in ("conv", "dense"):
            if spec.kind == "conv":
                total += spec.ksize * spec.ksize * spec.cin * spec.cout
            else:
                total += spec.cin * spec.cout
            total += spec.cout
    return total


class TestBuildArch:
    def test_default_has_two_heads(self):
        arch = build_arch(BackboneConfig())
        heads = [s for s in arch.all_layers() if s.name.startswith("head_")]
        assert len(heads) == 2
        assert {s.name for s in heads} == {"head_t", "head_r"}
        assert all(s.cout == 3 for s in heads)

    def test_param_count_matches_descriptor_expansion(self):
        arch = build_arch(BackboneConfig(width=8, depth=2))
        model = init_expert(BackboneConfig(width=8, depth=2), 0, seed=0)
        assert sum(v.size for v in model.params.values()) == \
            descriptor_param_count(arch)

    def test_depth_six_downsamples_twice(self):
        arch = build_arch(BackboneConfig(width=16, depth=6))
        assert arch.down_factor == 4
        strided = [s for s in arch.trunk if s.kind == "conv" and s.stride == 2]
        ups = [s for s in arch.trunk if s.kind == "upsample"]
        assert len(strided) == len(ups) == 2

    def test_same_config_identical_name_shape_sets(self):
        a = build_arch(BackboneConfig(width=16, depth=6))
        b = build_arch(BackboneConfig(width=16, depth=6))
        assert a.param_shapes() == b.param_shapes()

    def test_rejections(self):
        with pytest.raises(ValueError, match="depth"):
            build_arch(BackboneConfig(depth=1))
        with pytest.raises(ValueError, match="width"):
            build_arch(BackboneConfig(width=4))

    def test_descriptor_text_round_trip(self):
        arch = build_arch(BackboneConfig(width=8, depth=4, activation="relu"))
        again = arch_from_text(arch_to_text(arch))
        assert again.param_shapes() == arch.param_shapes()
        assert again.config == arch.config


class TestPredict:
    def test_zero_params_give_half(self, rng):
        model = init_expert(TINY_BACKBONE, 0, seed=0)
        for k in model.params:
            model.params[k][:] = 0.0
        pred = predict(model, rng.random((16, 16, 3)))
        # sigmoid(0) = 0.5 everywhere
        assert np.allclose(pred.transmission, 0.5, atol=0)
        assert np.allclose(pred.reflection, 0.5, atol=0)

    def test_deterministic(self, rng):
        model = init_expert(TINY_BACKBONE, 0, seed=3)
        img = rng.random((16, 16, 3))
        a, b = predict(model, img), predict(model, img)
        assert np.array_equal(a.transmission, b.transmission)
        assert np.array_equal(a.reflection, b.reflection)

    def test_outputs_in_range(self, tiny_experts, rng):
        pred = predict(tiny_experts[0], rng.random((32, 32, 3)))
        for out in (pred.transmission, pred.reflection):
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_divisibility_error_names_factor(self, rng):
        model = init_expert(BackboneConfig(width=16, depth=6), 0, seed=0)
        with pytest.raises(ValueError, match="divisible"):
            predict_batch(model, rng.random((1, 30, 30, 3)).astype(np.float32))

    def test_single_conv_matches_explicit_loop(self, rng):
        """One 3x3 conv with hand-set weights on an 8x8 ramp, against an
        explicit-loop convolution with zero padding."""
        from adanec.nn.core import LayerSpec, forward_layers

        w = rng.standard_normal((3, 3, 3, 2))
        b = rng.standard_normal(2)
        params = {"c.w": w, "c.b": b}
        layer = [LayerSpec("c", "conv", cin=3, cout=2, ksize=3, stride=1,
                           act="none")]
        ramp = np.linspace(0, 1, 8 * 8 * 3).reshape(1, 8, 8, 3)
        got = forward_layers(layer, params, ramp)

        padded = np.zeros((10, 10, 3))
        padded[1:9, 1:9] = ramp[0]
        want = np.zeros((8, 8, 2))
        for y in range(8):
            for x in range(8):
                for o in range(2):
                    acc = 0.0
                    for i in range(3):
                        for j in range(3):
                            for c in range(3):
                                acc += padded[y + i, x + j, c] * w[i, j, c, o]
                    want[y, x, o] = acc + b[o]
        assert np.allclose(got[0], want, atol=1e-12)


class TestTraining:
    def test_zero_steps_keeps_init(self, tiny_manifest):
        trained = train_expert(tiny_manifest, 0, TrainConfig(steps=0), seed=77,
                               backbone=TINY_BACKBONE)
        fresh = init_expert(TINY_BACKBONE, 0, seed=77)
        for k in fresh.params:
            assert np.array_equal(trained.params[k], fresh.params[k])

    def test_overfits_single_repeated_sample(self, tmp_path):
        from adanec.synthesis import generate_dataset
        from tests.conftest import TINY_SPECS

        man = generate_dataset([TINY_SPECS[0]], 1, seed=5, out_dir=str(tmp_path),
                               height=16, width=16)
        cfg = TrainConfig(steps=600, batch=2,
                          loss=LossConfig(lambda_fid=1.0, lambda_rec=0.0))
        expert = train_expert(man, 0, cfg, seed=5,
                              backbone=BackboneConfig(width=16, depth=4))
        s = man.load_sample(0)
        pred = predict(expert, s.contaminated)
        fid = float(np.mean(np.abs(pred.transmission - s.transmission))
                    + np.mean(np.abs(pred.reflection - s.reflection)))
        assert fid < 0.05

    def test_training_beats_untrained(self, tiny_manifest, tiny_experts):
        loss_cfg = LossConfig()
        idx = tiny_manifest.indices_for_domain(0)
        untrained = init_expert(TINY_BACKBONE, 0, seed=200)
        before = training_loss(untrained, tiny_manifest, idx, loss_cfg)
        after = training_loss(tiny_experts[0], tiny_manifest, idx, loss_cfg)
        assert after < before

    def test_empty_domain_rejected(self, tiny_manifest):
        with pytest.raises(ValueError, match="no samples"):
            train_expert(tiny_manifest, 9, TrainConfig(steps=1),
                         seed=0, backbone=TINY_BACKBONE)

    def test_joint_uses_all_domains(self, tiny_manifest):
        expert = train_expert(tiny_manifest, JOINT, TrainConfig(steps=2),
                              seed=0, backbone=TINY_BACKBONE)
        assert expert.domain_id == JOINT

    def test_deterministic_given_seed(self, tiny_manifest):
        cfg = TrainConfig(steps=10)
        a = train_expert(tiny_manifest, 1, cfg, seed=31, backbone=TINY_BACKBONE)
        b = train_expert(tiny_manifest, 1, cfg, seed=31, backbone=TINY_BACKBONE)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])


class TestGradients:
    def test_miniature_net_matches_finite_differences(self, rng):
        """<=500 parameters (1x1 kernels), 20 random coordinates, step 1e-4."""
        cfg = BackboneConfig(width=8, depth=2, ksize=1)
        expert = init_expert(cfg, 0, seed=5, dtype=np.float64)
        n_params = sum(v.size for v in expert.params.values())
        assert n_params <= 500

        # a fresh net outputs near sigmoid(small) ~ 0.5, so targets drawn
        # away from mid-range keep every l1 residual clear of its kink
        x = rng.uniform(0.1, 0.4, (2, 8, 8, 3))
        band = rng.choice([0.10, 0.90], size=(2, 8, 8, 3))
        t_gt = band + rng.uniform(-0.05, 0.05, band.shape)
        r_gt = band[..., ::-1] + rng.uniform(-0.05, 0.05, band.shape)
        g = np.full((2, 1, 1, 1), 2.2)
        lcfg = LossConfig()

        def loss_of():
            t, r = forward_backbone(expert.arch, expert.params, x)
            l, _, _ = rr_loss_and_grad(t, r, t_gt, r_gt, x, g, lcfg)
            return l

        t, r, caches = forward_backbone(expert.arch, expert.params, x,
                                        want_cache=True)
        # keep |residuals| clear of the l1 kink relative to the probe step
        assert np.abs(t - t_gt).min() > 1e-3
        assert np.abs(r - r_gt).min() > 1e-3
        _, dt, dr = rr_loss_and_grad(t, r, t_gt, r_gt, x, g, lcfg)
        grads = backward_backbone(expert.arch, expert.params, caches, dt, dr)

        names = sorted(grads)
        h = 1e-4
        for _ in range(20):
            name = names[rng.integers(len(names))]
            flat = expert.params[name].reshape(-1)
            k = int(rng.integers(flat.size))
            orig = flat[k]
            flat[k] = orig + h
            lp = loss_of()
            flat[k] = orig - h
            lm = loss_of()
            flat[k] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name].reshape(-1)[k]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            assert rel < 1e-4, (name, k, fd, an)


class TestExpertCheckpoint:
    def test_save_load_bitwise(self, tmp_path, tiny_experts):
        p = tmp_path / "e.ckpt"
        save_expert(tiny_experts[1], p)
        loaded = load_expert(p)
        assert loaded.domain_id == 1
        assert loaded.arch.param_shapes() == tiny_experts[1].arch.param_shapes()
        for k in loaded.params:
            assert np.array_equal(loaded.params[k], tiny_experts[1].params[k])

    def test_validation_catches_shape_mismatch(self, tiny_experts):
        import dataclasses

        broken = dataclasses.replace(
            tiny_experts[0],
            params={**tiny_experts[0].params, "s1.w": np.zeros((1, 1, 3, 8),
                                                               np.float32)})
        with pytest.raises(ValueError, match="shape-mismatch"):
            broken.validate()
