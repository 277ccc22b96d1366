"""Toy reflection-removal network and per-domain expert training.

The architecture is a small encoder-decoder: strided 3x3 convolutions
down, nearest-upsample + convolution back up, and two convolution heads
(transmission and reflection) fed by the last feature map concatenated
with the network input. Heads squash to [0,1] with a sigmoid. There is
deliberately no batch-statistics normalization anywhere, so convex
parameter interpolation between experts stays well-defined.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_archive, save_archive
from .imaging import check_image
from .losses import LossConfig, rr_loss_and_grad
from .nn.core import (
    Adam,
    LayerSpec,
    backward_layers,
    conv_shared_backward,
    conv_shared_forward,
    cosine_lr,
    forward_layers,
    init_params,
)

__all__ = [
    "JOINT",
    "BackboneConfig",
    "Arch",
    "build_arch",
    "ExpertModel",
    "Prediction",
    "init_expert",
    "predict",
    "predict_batch",
    "train_expert",
    "save_expert",
    "load_expert",
    "arch_to_text",
    "arch_from_text",
]

JOINT = "joint"


@dataclass(frozen=True)
class BackboneConfig:
    width: int = 16
    depth: int = 6
    ksize: int = 3
    activation: str = "silu"
    squash: str = "sigmoid"  # "none" gives an affine head (linear in params)


@dataclass(frozen=True)
class Arch:
    """Expanded layer lists; equal configs expand to identical name/shape sets."""

    trunk: tuple
    head_t: tuple
    head_r: tuple
    down_factor: int
    config: BackboneConfig

    def all_layers(self):
        return list(self.trunk) + list(self.head_t) + list(self.head_r)

    def param_shapes(self):
        shapes = {}
        for spec in self.all_layers():
            shapes.update(spec.param_shapes())
        return shapes


def build_arch(config: BackboneConfig) -> Arch:
    """Expand a (width, depth) config into concrete layer lists."""
    w, d, k = config.width, config.depth, config.ksize
    if d < 2:
        raise ValueError(f"depth must be >= 2, got {d}")
    if w < 8:
        raise ValueError(f"width must be >= 8, got {w}")
    act = config.activation

    n_down = (d - 1) // 2
    n_mid = d - 1 - 2 * n_down  # extra stage of even depths sits at the bottleneck

    trunk = [LayerSpec("s1", "conv", cin=3, cout=w, ksize=k, stride=1, act=act)]
    ch = w
    for i in range(n_down):
        trunk.append(LayerSpec(f"down{i + 1}", "conv", cin=ch, cout=ch * 2,
                               ksize=k, stride=2, act=act))
        ch *= 2
    for i in range(n_mid):
        trunk.append(LayerSpec(f"mid{i + 1}", "conv", cin=ch, cout=ch,
                               ksize=k, stride=1, act=act))
    # decoder convs run at the lower resolution, then nearest-upsample
    for i in range(n_down):
        trunk.append(LayerSpec(f"up{i + 1}", "conv", cin=ch, cout=ch // 2,
                               ksize=k, stride=1, act=act))
        trunk.append(LayerSpec(f"up{i + 1}_nn", "upsample"))
        ch //= 2

    head_act = "sigmoid" if config.squash == "sigmoid" else "none"
    head_t = [LayerSpec("head_t", "conv", cin=ch + 3, cout=3, ksize=k,
                        stride=1, act=head_act)]
    head_r = [LayerSpec("head_r", "conv", cin=ch + 3, cout=3, ksize=k,
                        stride=1, act=head_act)]
    return Arch(trunk=tuple(trunk), head_t=tuple(head_t), head_r=tuple(head_r),
                down_factor=2 ** n_down, config=config)


def arch_to_text(arch: Arch) -> str:
    c = arch.config
    lines = [
        f"width = {c.width}",
        f"depth = {c.depth}",
        f"ksize = {c.ksize}",
        f"activation = {c.activation}",
        f"squash = {c.squash}",
    ]
    for spec in arch.all_layers():
        lines.append(
            f"layer {spec.kind} name={spec.name} cin={spec.cin} cout={spec.cout}"
            f" k={spec.ksize} stride={spec.stride} act={spec.act}"
        )
    return "\n".join(lines)


def arch_from_text(text: str) -> Arch:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("layer "):
            continue
        k, _, v = line.partition(" = ")
        kv[k.strip()] = v.strip()
    config = BackboneConfig(width=int(kv["width"]), depth=int(kv["depth"]),
                            ksize=int(kv["ksize"]), activation=kv["activation"],
                            squash=kv["squash"])
    return build_arch(config)


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    transmission: np.ndarray
    reflection: np.ndarray


@dataclass
class ExpertModel:
    arch: Arch
    params: dict
    domain_id: object  # int or JOINT
    training_meta: dict = field(default_factory=dict)

    def validate(self):
        expected = self.arch.param_shapes()
        got = {k: v.shape for k, v in self.params.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            bad = [k for k in expected if k in got and expected[k] != got[k]]
            raise ValueError(
                f"parameter set does not match architecture: missing={missing} "
                f"extra={extra} shape-mismatch={bad}"
            )
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite values in parameter {k}")
        return self


def init_expert(config: BackboneConfig, domain_id, seed, dtype=np.float32):
    arch = build_arch(config)
    params = init_params(arch.all_layers(), seed, dtype=dtype)
    meta = {"seed": seed, "steps": 0, "lr": 0.0}
    return ExpertModel(arch=arch, params=params, domain_id=domain_id,
                       training_meta=meta).validate()


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def forward_backbone(arch, params, x, want_cache=False):
    """x: (B,H,W,3) in the parameter dtype. Returns (t_hat, r_hat[, caches])."""
    heads = list(arch.head_t) + list(arch.head_r)
    if want_cache:
        feat, trunk_caches = forward_layers(arch.trunk, params, x, want_cache=True)
        head_in = np.concatenate([feat, x], axis=-1)
        (t_hat, r_hat), head_cache = conv_shared_forward(heads, params, head_in,
                                                         want_cache=True)
        return t_hat, r_hat, (trunk_caches, head_cache, feat.shape[-1])
    feat = forward_layers(arch.trunk, params, x)
    head_in = np.concatenate([feat, x], axis=-1)
    (t_hat, r_hat), _ = conv_shared_forward(heads, params, head_in)
    return t_hat, r_hat


def backward_backbone(arch, params, caches, dt, dr):
    trunk_caches, head_cache, n_feat = caches
    heads = list(arch.head_t) + list(arch.head_r)
    d_head_in, grads = conv_shared_backward(heads, params, head_cache, [dt, dr])
    _, g_trunk = backward_layers(arch.trunk, params, trunk_caches,
                                 np.ascontiguousarray(d_head_in[..., :n_feat]))
    grads.update(g_trunk)
    return grads


def _check_divisible(arch, h, w):
    f = arch.down_factor
    if h % f or w % f:
        raise ValueError(
            f"input size {h}x{w} must be divisible by the downsampling "
            f"factor {f} of this architecture"
        )


def predict(expert: ExpertModel, img) -> Prediction:
    """Deterministic forward pass on a single image."""
    img = check_image(img)
    t, r = predict_batch(expert, np.asarray(img)[None])
    return Prediction(transmission=t[0], reflection=r[0])


def predict_batch(expert: ExpertModel, imgs):
    """Forward a (B,H,W,3) batch; outputs clipped to [0,1]."""
    _check_divisible(expert.arch, imgs.shape[1], imgs.shape[2])
    dtype = next(iter(expert.params.values())).dtype
    x = np.ascontiguousarray(imgs, dtype=dtype)
    t_hat, r_hat = forward_backbone(expert.arch, expert.params, x)
    if expert.arch.config.squash == "sigmoid":
        return t_hat, r_hat
    return np.clip(t_hat, 0.0, 1.0), np.clip(r_hat, 0.0, 1.0)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch: int = 8
    lr: float = 1e-3
    cosine: bool = True
    loss: LossConfig = field(default_factory=LossConfig)


def load_training_arrays(manifest, indices, dtype=np.float32):
    """Stack manifest samples into (M,H,W,3) arrays plus per-sample gamma."""
    imgs, ts, rs, gammas = [], [], [], []
    for i in indices:
        s = manifest.load_sample(i)
        imgs.append(np.asarray(s.contaminated, dtype=dtype))
        ts.append(np.asarray(s.transmission, dtype=dtype))
        rs.append(np.asarray(s.reflection, dtype=dtype))
        gammas.append(s.gamma)
    return (np.stack(imgs), np.stack(ts), np.stack(rs),
            np.asarray(gammas, dtype=dtype).reshape(-1, 1, 1, 1))


def train_expert(manifest, domain_id, config: TrainConfig, seed,
                 backbone: BackboneConfig = None, init_from: ExpertModel = None,
                 log=None) -> ExpertModel:
    """Train one expert on a single domain, or on all domains for JOINT.

    init_from warm-starts from an existing model (e.g. the joint baseline);
    fine-tuned siblings of one parent stay close enough in parameter space
    for convex parameter interpolation to produce sensible networks.
    """
    backbone = backbone or BackboneConfig()
    if domain_id == JOINT:
        indices = list(range(len(manifest.records)))
    else:
        indices = manifest.indices_for_domain(domain_id)
    if not indices:
        raise ValueError(f"no samples for domain {domain_id!r} in manifest")

    imgs, ts, rs, gammas = load_training_arrays(manifest, indices)
    if init_from is not None:
        if init_from.arch.param_shapes() != build_arch(backbone).param_shapes():
            raise ValueError("warm-start model does not match the architecture")
        expert = ExpertModel(arch=init_from.arch,
                             params={k: v.copy() for k, v in
                                     init_from.params.items()},
                             domain_id=domain_id)
    else:
        expert = init_expert(backbone, domain_id, seed)
    _check_divisible(expert.arch, imgs.shape[1], imgs.shape[2])

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    opt = Adam(lr=config.lr)
    t0 = time.perf_counter()
    for step in range(config.steps):
        idx = rng.integers(0, len(indices), size=config.batch)
        x, t_gt, r_gt, g = imgs[idx], ts[idx], rs[idx], gammas[idx]
        t_hat, r_hat, caches = forward_backbone(expert.arch, expert.params, x,
                                                want_cache=True)
        loss, dt, dr = rr_loss_and_grad(t_hat, r_hat, t_gt, r_gt, x, g, config.loss)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"expert training diverged: loss={loss} at step {step} "
                f"(domain {domain_id!r}, lr {config.lr})"
            )
        grads = backward_backbone(expert.arch, expert.params, caches, dt, dr)
        lr = cosine_lr(config.lr, step, config.steps) if config.cosine else config.lr
        opt.step(expert.params, grads, lr=lr)
        if log is not None and (step % 200 == 0 or step == config.steps - 1):
            log(f"expert[{domain_id}] step {step} loss {loss:.4f} "
                f"({time.perf_counter() - t0:.1f}s)")

    expert.training_meta = {"seed": seed, "steps": config.steps, "lr": config.lr,
                            "domain": domain_id}
    return expert.validate()


def training_loss(expert, manifest, indices, loss_cfg: LossConfig, batch=16):
    """Mean reflection-removal loss of a frozen expert over given samples."""
    imgs, ts, rs, gammas = load_training_arrays(manifest, indices)
    total, count = 0.0, 0
    for lo in range(0, len(indices), batch):
        sl = slice(lo, lo + batch)
        t_hat, r_hat = predict_batch(expert, imgs[sl])
        loss, _, _ = rr_loss_and_grad(t_hat, r_hat, ts[sl], rs[sl], imgs[sl],
                                      gammas[sl], loss_cfg)
        n = imgs[sl].shape[0]
        total += loss * n
        count += n
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_expert(expert: ExpertModel, path):
    meta = dict(expert.training_meta)
    meta["domain_id"] = expert.domain_id
    save_archive(path, "expert", arch_to_text(expert.arch), meta, expert.params)


def load_expert(path) -> ExpertModel:
    _, arch_text, meta, params = load_archive(path, expect_section="expert")
    arch = arch_from_text(arch_text)
    domain = meta.pop("domain_id", JOINT)
    if domain != JOINT:
        domain = int(domain)
    return ExpertModel(arch=arch, params=params, domain_id=domain,
                       training_meta=meta).validate()
