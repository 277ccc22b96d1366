"""Acceptance suite: every exit criterion at its stated tolerance.

Criteria 2 and 6-9 consume one full default-scale pipeline run (session
fixture); criterion 10 performs two fresh reduced-scale runs. A pass/fail
line per criterion is printed in the terminal summary.
"""

import os
import time

import numpy as np
import pytest

from adanec.backbone import BackboneConfig, init_expert, load_expert
from adanec.combination import combine_ni, combine_of
from adanec.config import default_config, parse_config
from adanec.harness import run_pipeline
from adanec.losses import LossConfig
from adanec.rtaw import (RTAWConfig, WeightVector, init_rtaw, load_rtaw,
                         rtaw_batch_loss, softmax_weights, weights_for_batch)
from adanec.synthesis import DatasetManifest
from tests.conftest import record_criterion


def check(number, name, condition, detail=""):
    record_criterion(number, name, bool(condition))
    assert condition, f"criterion {number} ({name}) failed: {detail}"


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    cfg = default_config()
    t0 = time.perf_counter()
    report = run_pipeline(cfg, str(out))
    elapsed = time.perf_counter() - t0
    return cfg, str(out), report, elapsed


@pytest.fixture(scope="session")
def acceptance_experts(acceptance_run):
    _, out, _, _ = acceptance_run
    return [load_expert(os.path.join(out, "models", f"expert_{d}.ckpt"))
            for d in range(3)]


def test_criterion_1_simplex_suite():
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    for i in range(1000):
        n = 2 + i % 5
        v = rng.uniform(-50.0, 50.0, size=n)
        w = softmax_weights(v)
        assert abs(float(w.weights.sum()) - 1.0) <= 1e-6
        assert np.all(w.weights > 0.0)
        shifted = softmax_weights(v + rng.uniform(-50.0, 50.0))
        assert np.max(np.abs(shifted.weights - w.weights)) <= 1e-9
        i_ex = int(rng.integers(n))
        comp = softmax_weights(v, exclude=i_ex)
        ref = softmax_weights(np.delete(v, i_ex))
        assert np.max(np.abs(comp.weights - ref.weights)) <= 1e-12
    elapsed = time.perf_counter() - t0
    check(1, "simplex suite", elapsed < 5.0, f"took {elapsed:.1f}s")


def test_criterion_2_one_hot_degeneracy(acceptance_experts):
    rng = np.random.default_rng(22)
    worst = 0.0
    for k in range(20):
        img = rng.random((64, 64, 3))
        i = k % 3
        w = np.zeros(3)
        w[i] = 1.0
        wv = WeightVector(w)
        from adanec.backbone import predict

        solo = predict(acceptance_experts[i], img)
        for combo in (combine_of, combine_ni):
            pred = combo(acceptance_experts, None, img, wv)
            worst = max(worst, float(np.max(np.abs(
                pred.transmission - solo.transmission))))
            worst = max(worst, float(np.max(np.abs(
                pred.reflection - solo.reflection))))
    check(2, "one-hot degeneracy", worst < 1e-6, f"worst gap {worst:.2e}")


def test_criterion_3_affine_ni_equals_of():
    from tests.test_combination import _affine_expert

    rng = np.random.default_rng(33)
    experts = [_affine_expert(rng, 70 + i) for i in range(2)]
    worst = 0.0
    for trial in range(50):
        gen = np.random.default_rng(1000 + trial)
        raw = gen.random(2)
        w = WeightVector(raw / raw.sum())
        img = gen.random((8, 8, 3))
        of = combine_of(experts, None, img, w)
        ni = combine_ni(experts, None, img, w)
        worst = max(worst, float(np.max(np.abs(ni.transmission - of.transmission))))
        worst = max(worst, float(np.max(np.abs(ni.reflection - of.reflection))))
    check(3, "affine NI == OF", worst < 1e-5, f"max gap {worst:.2e}")


def _fd_check(loss_of, params, grads, rng, n_coords, h=1e-4):
    names = sorted(grads)
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        flat = params[name].reshape(-1)
        k = int(rng.integers(flat.size))
        orig = flat[k]
        flat[k] = orig + h
        lp = loss_of()
        flat[k] = orig - h
        lm = loss_of()
        flat[k] = orig
        fd = (lp - lm) / (2 * h)
        an = grads[name].reshape(-1)[k]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def test_criterion_4_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(44)

    # miniature weighting module: full objective incl. the in-domain term
    cfg = RTAWConfig(feature_dim=8, proj_dim=4, extractor_depth=2,
                     base_channels=8, lambda_ide=0.1,
                     loss=LossConfig(lambda_fid=1.0, lambda_rec=0.5))
    rtaw = init_rtaw(3, cfg, seed=9, dtype=np.float64)
    x = rng.uniform(0.1, 0.4, (2, 8, 8, 3))
    domains = np.array([0, 2])
    et = rng.uniform(0.1, 0.45, (3, 2, 8, 8, 3))
    er = rng.uniform(0.1, 0.45, (3, 2, 8, 8, 3))
    t_gt = rng.choice([0.05, 0.95], size=(2, 8, 8, 3))
    r_gt = rng.choice([0.05, 0.95], size=(2, 8, 8, 3))
    g = np.full((2, 1, 1, 1), 2.2)
    _, grads, _ = rtaw_batch_loss(rtaw, x, domains, et, er, t_gt, r_gt, x, g, cfg)

    def rtaw_loss():
        l, _, _ = rtaw_batch_loss(rtaw, x, domains, et, er, t_gt, r_gt, x, g,
                                  cfg, want_grads=False)
        return l

    worst_rtaw = _fd_check(rtaw_loss, rtaw.params, grads, rng, 20)

    # miniature backbone: restoration loss only (no weighting path here)
    from adanec.backbone import backward_backbone, forward_backbone
    from adanec.losses import rr_loss_and_grad

    bcfg = BackboneConfig(width=8, depth=2, ksize=1)
    expert = init_expert(bcfg, 0, seed=5, dtype=np.float64)
    bx = rng.uniform(0.1, 0.4, (2, 8, 8, 3))
    bt = rng.choice([0.08, 0.92], size=(2, 8, 8, 3))
    br = rng.choice([0.08, 0.92], size=(2, 8, 8, 3))
    bg = np.full((2, 1, 1, 1), 2.2)
    lcfg = LossConfig()

    def backbone_loss():
        t, r = forward_backbone(expert.arch, expert.params, bx)
        l, _, _ = rr_loss_and_grad(t, r, bt, br, bx, bg, lcfg)
        return l

    t, r, caches = forward_backbone(expert.arch, expert.params, bx,
                                    want_cache=True)
    _, dt, dr = rr_loss_and_grad(t, r, bt, br, bx, bg, lcfg)
    bgrads = backward_backbone(expert.arch, expert.params, caches, dt, dr)
    worst_bb = _fd_check(backbone_loss, expert.params, bgrads, rng, 20)

    elapsed = time.perf_counter() - t0
    ok = worst_rtaw < 1e-4 and worst_bb < 1e-4 and elapsed < 60.0
    check(4, "gradient checks", ok,
          f"rtaw {worst_rtaw:.2e}, backbone {worst_bb:.2e}, {elapsed:.0f}s")


def test_criterion_5_lodo_structural_zero():
    cfg = RTAWConfig(feature_dim=8, proj_dim=4, extractor_depth=2,
                     base_channels=8)
    ok = True
    for trial in range(10):
        rng = np.random.default_rng(5000 + trial)
        rtaw = init_rtaw(3, cfg, seed=trial, dtype=np.float64)
        x = rng.uniform(0.1, 0.9, (1, 8, 8, 3))
        dom = np.array([int(rng.integers(3))])
        et = rng.uniform(0.1, 0.9, (3, 1, 8, 8, 3))
        er = rng.uniform(0.1, 0.9, (3, 1, 8, 8, 3))
        t_gt = rng.uniform(0.1, 0.9, (1, 8, 8, 3))
        r_gt = rng.uniform(0.1, 0.9, (1, 8, 8, 3))
        g = np.full((1, 1, 1, 1), 2.2)
        _, _, info = rtaw_batch_loss(rtaw, x, dom, et, er, t_gt, r_gt, x, g, cfg)
        ok = ok and info["dv_rr"][0, dom[0]] == 0.0
    check(5, "LODO structural zero", ok)


def test_criterion_6_domain_gap_analog(acceptance_run):
    _, out, report, _ = acceptance_run
    from adanec.domaingap import accuracy_report, load_classifier

    man = DatasetManifest.load(os.path.join(out, "data", "train", "manifest.txt"))
    clf = load_classifier(os.path.join(out, "models", "classifier.ckpt"))
    with open(os.path.join(out, "models", "classifier_split.txt")) as fh:
        split = {}
        for line in fh:
            name, _, ids = line.partition("\t")
            split[name] = [int(i) for i in ids.strip().split(",")]
    rep = accuracy_report(clf, man, split)
    stage_s = report.stage_seconds.get("classifier", 0.0)
    ok = rep.overall_accuracy >= 0.70 and stage_s < 300.0
    check(6, "domain-gap classifier >= 70%", ok,
          f"accuracy {rep.overall_accuracy:.1%}, stage {stage_s:.0f}s")


def test_criterion_7_expert_specialization(acceptance_run):
    _, _, report, _ = acceptance_run
    details = []
    ok = True
    for d in range(3):
        own = report.row(f"expert_{d}", f"domain_{d}").psnr
        others = [report.row(f"expert_{d}", f"domain_{j}").psnr
                  for j in range(3) if j != d]
        cross = float(np.mean(others))
        details.append(f"expert_{d}: own {own:.2f} vs cross {cross:.2f}")
        ok = ok and own >= cross
    check(7, "expert specialization", ok, "; ".join(details))


def test_criterion_8_in_domain_preference(acceptance_run):
    _, out, _, _ = acceptance_run
    man = DatasetManifest.load(os.path.join(out, "data", "eval", "manifest.txt"))
    rtaw = load_rtaw(os.path.join(out, "models", "rtaw.ckpt"))
    details = []
    ok = True
    for d in range(3):
        idx = man.indices_for_domain(d)
        imgs = np.stack([man.load_sample(i).contaminated for i in idx])
        w = weights_for_batch(rtaw, imgs.astype(np.float32))
        mean_w = float(w[:, d].mean())
        argmax = float((w.argmax(axis=1) == d).mean())
        details.append(f"d{d}: mean {mean_w:.3f}, argmax {argmax:.0%}")
        ok = ok and mean_w > 1.0 / 3.0 and argmax >= 0.60
    check(8, "in-domain weight preference", ok, "; ".join(details))


def test_criterion_9_generalization_analog(acceptance_run):
    _, _, report, elapsed = acceptance_run
    of = report.row("of_rtaw_domain", "target").psnr
    joint = report.row("joint", "target").psnr
    experts = [report.row(f"expert_{d}", "target").psnr for d in range(3)]
    deltas = report.deltas_vs_joint("target")
    ok = (of >= max(experts)
          and of >= joint - 0.1
          and any(k.startswith("of_") for k in deltas)
          and any(k.startswith("ni_") for k in deltas)
          and elapsed < 1800.0)
    check(9, "target-domain fusion gain", ok,
          f"OF {of:.2f} vs experts {[f'{e:.2f}' for e in experts]} "
          f"joint {joint:.2f}, pipeline {elapsed:.0f}s")


DETERMINISM_CFG = """
data.size = 32
data.train_per_domain = 10
data.eval_per_domain = 4
data.target_count = 4
backbone.width = 8
backbone.depth = 2
train.steps = 15
rtaw.feature_dim = 8
rtaw.proj_dim = 4
rtaw.extractor_depth = 2
rtaw.base_channels = 8
rtaw.steps = 15
rtaw.batch = 4
classifier.steps = 25
eval.grid_samples = 1
domain.0.blur = 0.0:0.5
domain.1.blur = 1.0:1.6
domain.2.blur = 2.2:3.0
target.blur = 0.6:0.9
"""


def test_criterion_10_determinism(tmp_path):
    cfg = parse_config(DETERMINISM_CFG)
    run_pipeline(cfg, str(tmp_path / "a"))
    run_pipeline(cfg, str(tmp_path / "b"))
    names = ["report/report.tsv", "report/report.txt",
             "data/train/manifest.txt", "data/eval/manifest.txt",
             "models/expert_joint.ckpt", "models/expert_0.ckpt",
             "models/rtaw.ckpt", "models/classifier.ckpt",
             "report/grids/target_00.png"]
    same = True
    for name in names:
        with open(tmp_path / "a" / name, "rb") as fa, \
                open(tmp_path / "b" / name, "rb") as fb:
            if fa.read() != fb.read():
                same = False
                break
    check(10, "byte-identical reruns", same,
          f"first differing artifact: {name}" if not same else "")
