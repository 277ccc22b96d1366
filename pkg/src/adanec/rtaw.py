"""Reflection type-aware weighting.

One universal feature extractor and one per-expert extractor embed the
contaminated image; a cross-domain attention step projects each key with a
shared matrix and the query with its own, and scores each expert by the
inner product of the projections. Softmax over the scores gives the
expert weights.

Training is leave-one-domain-out: for a sample from domain i the fused
output uses the complement softmax over the other experts (so the
restoration loss sends no gradient to the in-domain score), while the
in-domain expert loss -log w_i on the full softmax pulls weight toward
the matching expert. Expert parameters stay frozen throughout.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import Prediction, predict_batch
from .checkpoint import load_archive, save_archive
from .losses import LossConfig, rr_loss_and_grad
from .nn.core import Adam, LayerSpec, backward_layers, forward_layers, init_params

__all__ = [
    "RTAWConfig",
    "RTAWModule",
    "WeightVector",
    "init_rtaw",
    "extract",
    "cdam_scores",
    "softmax_weights",
    "fuse_outputs",
    "ide_loss",
    "rr_loss",
    "train_rtaw",
    "weights_for_batch",
    "save_rtaw",
    "load_rtaw",
]


@dataclass(frozen=True)
class RTAWConfig:
    feature_dim: int = 128
    proj_dim: int = 64
    extractor_depth: int = 4
    base_channels: int = 16
    activation: str = "silu"
    steps: int = 600
    batch: int = 8
    lr: float = 1e-4
    lambda_ide: float = 0.1
    ide_form: str = "full"  # "full": -log softmax_N(v)[i]; "pairwise": logistic v_i > v_j
    loss: LossConfig = field(default_factory=LossConfig)


def extractor_layers(cfg: RTAWConfig):
    """Stride-2 conv stack ending in global average pooling."""
    layers = []
    cin = 3
    for i in range(cfg.extractor_depth):
        cout = (cfg.feature_dim if i == cfg.extractor_depth - 1
                else min(cfg.base_channels * 2 ** i, cfg.feature_dim))
        layers.append(LayerSpec(f"c{i + 1}", "conv", cin=cin, cout=cout,
                                ksize=3, stride=2, act=cfg.activation))
        cin = cout
    layers.append(LayerSpec("pool", "gap"))
    return layers


@dataclass
class RTAWModule:
    n_experts: int
    layers: tuple           # shared extractor shape for F and every F_i
    params: dict            # "f.*", "e<i>.*", "wk", "wq"
    config: RTAWConfig

    def validate(self):
        if self.n_experts < 2:
            raise ValueError(f"need at least 2 experts, got {self.n_experts}")
        d, dp = self.config.feature_dim, self.config.proj_dim
        if self.params["wk"].shape != (d, dp) or self.params["wq"].shape != (d, dp):
            raise ValueError("projection matrices must be feature_dim x proj_dim")
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite values in parameter {k}")
        return self


def _sub(params, prefix):
    plen = len(prefix)
    return {k[plen:]: v for k, v in params.items() if k.startswith(prefix)}


def init_rtaw(n_experts, cfg: RTAWConfig, seed, dtype=np.float32):
    layers = extractor_layers(cfg)
    params = {}
    for i, prefix in enumerate(["f."] + [f"e{j}." for j in range(n_experts)]):
        for k, v in init_params(layers, np.random.SeedSequence([seed, i]),
                                dtype=dtype).items():
            params[prefix + k] = v
    proj_rng = np.random.default_rng(np.random.SeedSequence([seed, n_experts + 1]))
    d, dp = cfg.feature_dim, cfg.proj_dim
    bound = 1.0 / np.sqrt(d)
    params["wk"] = proj_rng.uniform(-bound, bound, size=(d, dp)).astype(dtype)
    params["wq"] = proj_rng.uniform(-bound, bound, size=(d, dp)).astype(dtype)
    return RTAWModule(n_experts=n_experts, layers=tuple(layers), params=params,
                      config=cfg).validate()


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def extract_batch(rtaw: RTAWModule, x, want_cache=False):
    """Returns (Q: (B,d), K: (B,N,d)[, caches])."""
    caches = {}
    if want_cache:
        q, caches["f"] = forward_layers(rtaw.layers, _sub(rtaw.params, "f."), x,
                                        want_cache=True)
    else:
        q = forward_layers(rtaw.layers, _sub(rtaw.params, "f."), x)
    keys = []
    for i in range(rtaw.n_experts):
        sub = _sub(rtaw.params, f"e{i}.")
        if want_cache:
            k, caches[f"e{i}"] = forward_layers(rtaw.layers, sub, x, want_cache=True)
        else:
            k = forward_layers(rtaw.layers, sub, x)
        keys.append(k)
    K = np.stack(keys, axis=1)
    return (q, K, caches) if want_cache else (q, K)


def extract(rtaw: RTAWModule, img):
    """Universal query and per-expert key vectors for one image."""
    from .imaging import check_image

    x = np.asarray(check_image(img), dtype=rtaw.params["wk"].dtype)[None]
    q, K = extract_batch(rtaw, x)
    return q[0], [K[0, i] for i in range(rtaw.n_experts)]


def cdam_scores(q, keys, w_k, w_q):
    """Expertise scores v_i = <W_k^T k_i, W_q^T q>, one scalar per expert."""
    q = np.asarray(q)
    b = q @ w_q
    scores = []
    for k in keys:
        k = np.asarray(k)
        if k.shape != q.shape:
            raise ValueError(f"key shape {k.shape} does not match query {q.shape}")
        scores.append(float((k @ w_k) @ b))
    return np.asarray(scores, dtype=np.float64)


def _scores_batch(q, K, w_k, w_q):
    a = K @ w_k                 # (B, N, dp)
    b = q @ w_q                 # (B, dp)
    return np.einsum("bnd,bd->bn", a, b), a, b


# ---------------------------------------------------------------------------
# weights and losses
# ---------------------------------------------------------------------------

@dataclass
class WeightVector:
    """Point on the expert simplex; complement form drops one entry."""

    weights: np.ndarray
    excluded_index: int = None

    def validate(self):
        w = self.weights
        if w.size == 0:
            raise ValueError("empty weight vector")
        if np.any(w <= 0.0) or np.any(w > 1.0):
            raise ValueError(f"weights must lie in (0,1]: {w}")
        if abs(float(w.sum()) - 1.0) > 1e-6:
            raise ValueError(f"weights must sum to 1, got {float(w.sum())!r}")
        return self


def _stable_softmax(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()


def softmax_weights(expertise, exclude=None) -> WeightVector:
    """Numerically stable softmax, optionally over all entries but one."""
    v = np.asarray(expertise, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"expertise scores must be finite, got {v}")
    if exclude is None:
        return WeightVector(_stable_softmax(v), None)
    if v.size < 2:
        raise ValueError("complement softmax needs at least 2 entries")
    sub = np.delete(v, exclude)
    if sub.size == 0:
        raise ValueError("all entries excluded")
    return WeightVector(_stable_softmax(sub), int(exclude))


def fuse_outputs(predictions, w: WeightVector) -> Prediction:
    """Pixel-wise convex combination of predictions under w."""
    if len(predictions) != w.weights.size:
        raise ValueError(
            f"{len(predictions)} predictions vs {w.weights.size} weights"
        )
    shapes = {p.transmission.shape for p in predictions}
    if len(shapes) != 1:
        raise ValueError(f"prediction shapes differ: {sorted(shapes)}")
    t = sum(wi * p.transmission for wi, p in zip(w.weights, predictions))
    r = sum(wi * p.reflection for wi, p in zip(w.weights, predictions))
    return Prediction(transmission=t, reflection=r)


def ide_loss(w: WeightVector, in_domain):
    """-log of the in-domain weight; w must be the full softmax."""
    if w.excluded_index is not None:
        raise ValueError("in-domain expert loss needs the full softmax weights")
    return float(-np.log(w.weights[in_domain]))


def rr_loss(fused: Prediction, sample, config: LossConfig):
    """Reflection-removal loss of a fused prediction against one sample."""
    gamma = sample.gamma
    loss, _, _ = rr_loss_and_grad(
        fused.transmission[None], fused.reflection[None],
        np.asarray(sample.transmission)[None], np.asarray(sample.reflection)[None],
        np.asarray(sample.contaminated)[None],
        None if gamma is None else float(gamma), config)
    return loss


def _ide_value_and_grad(v_row, i, form):
    """Per-sample in-domain loss on raw scores; returns (loss, dL/dv_row)."""
    if form == "full":
        w = _stable_softmax(v_row.astype(np.float64))
        g = w.copy()
        g[i] -= 1.0
        return float(-np.log(w[i])), g
    if form == "pairwise":
        loss, g = 0.0, np.zeros_like(v_row, dtype=np.float64)
        n = 0
        for j in range(v_row.size):
            if j == i:
                continue
            z = v_row[i] - v_row[j]
            s = 1.0 / (1.0 + np.exp(-z)) if z >= 0 else np.exp(z) / (1.0 + np.exp(z))
            loss += -np.log(max(s, 1e-300))
            g[i] -= (1.0 - s)
            g[j] += (1.0 - s)
            n += 1
        return loss / n, g / n
    raise ValueError(f"unknown ide_form {form!r}")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def rtaw_batch_loss(rtaw: RTAWModule, x, domains, expert_t, expert_r,
                    t_gt, r_gt, contaminated, gamma, cfg: RTAWConfig,
                    want_grads=True):
    """Loss of one batch; expert predictions are fixed inputs.

    expert_t/expert_r: (N, B, H, W, 3). Returns (loss, grads, info); grads is
    None when want_grads is False. info carries the raw scores and the two
    score-gradient components for diagnostics.
    """
    n, bsz = rtaw.n_experts, x.shape[0]
    if want_grads:
        q, K, caches = extract_batch(rtaw, x, want_cache=True)
    else:
        q, K = extract_batch(rtaw, x)
    v, a, bq = _scores_batch(q, K, rtaw.params["wk"], rtaw.params["wq"])
    if not np.all(np.isfinite(v)):
        raise RuntimeError(f"expertise scores went non-finite: {v}")

    # complement fusion per sample
    fused_t = np.zeros_like(x)
    fused_r = np.zeros_like(x)
    wc_rows = []
    for b in range(bsz):
        i = int(domains[b])
        wc = softmax_weights(v[b], exclude=i)
        wc_rows.append(wc.weights)
        others = [j for j in range(n) if j != i]
        for wj, j in zip(wc.weights, others):
            fused_t[b] += np.asarray(wj, dtype=x.dtype) * expert_t[j, b]
            fused_r[b] += np.asarray(wj, dtype=x.dtype) * expert_r[j, b]

    loss_rr, dft, dfr = rr_loss_and_grad(fused_t, fused_r, t_gt, r_gt,
                                         contaminated, gamma, cfg.loss)

    loss_ide = 0.0
    dv_ide = np.zeros((bsz, n), dtype=np.float64)
    for b in range(bsz):
        li, gi = _ide_value_and_grad(v[b], int(domains[b]), cfg.ide_form)
        loss_ide += li / bsz
        dv_ide[b] = gi / bsz
    loss = loss_rr + cfg.lambda_ide * loss_ide

    dv_rr = np.zeros((bsz, n), dtype=np.float64)
    for b in range(bsz):
        i = int(domains[b])
        others = [j for j in range(n) if j != i]
        s = np.array([
            float(np.sum(dft[b] * expert_t[j, b]) + np.sum(dfr[b] * expert_r[j, b]))
            for j in others
        ])
        wc = wc_rows[b]
        dv_rr[b, others] = wc * (s - float(wc @ s))

    info = {"v": v, "dv_rr": dv_rr, "dv_ide": dv_ide,
            "loss_rr": loss_rr, "loss_ide": loss_ide}
    if not want_grads:
        return loss, None, info

    dv = (dv_rr + cfg.lambda_ide * dv_ide).astype(x.dtype)
    da = dv[:, :, None] * bq[:, None, :]                  # (B, N, dp)
    dbq = np.einsum("bn,bnd->bd", dv, a)
    d, dp = rtaw.config.feature_dim, rtaw.config.proj_dim
    grads = {
        "wk": K.reshape(-1, d).T @ da.reshape(-1, dp),
        "wq": q.T @ dbq,
    }
    dK = da @ rtaw.params["wk"].T                          # (B, N, d)
    dq = dbq @ rtaw.params["wq"].T
    _, g = backward_layers(rtaw.layers, _sub(rtaw.params, "f."), caches["f"], dq)
    grads.update({f"f.{k}": val for k, val in g.items()})
    for j in range(rtaw.n_experts):
        _, g = backward_layers(rtaw.layers, _sub(rtaw.params, f"e{j}."),
                               caches[f"e{j}"], np.ascontiguousarray(dK[:, j]))
        grads.update({f"e{j}.{k}": val for k, val in g.items()})
    return loss, grads, info


def _check_expert_alignment(experts):
    if len(experts) < 2:
        raise ValueError(f"need at least 2 experts, got {len(experts)}")
    ref = experts[0].arch.param_shapes()
    for e in experts[1:]:
        if e.arch.param_shapes() != ref:
            raise ValueError(
                "experts are not architecture-compatible "
                f"(expert {e.domain_id!r} differs)"
            )
    for i, e in enumerate(experts):
        if e.domain_id != i:
            raise ValueError(
                f"experts must be ordered by domain id 0..N-1, "
                f"position {i} holds {e.domain_id!r}"
            )


def train_rtaw(experts, manifest, cfg: RTAWConfig, seed, per_domain=0,
               log=None) -> RTAWModule:
    """Train the weighting module against frozen, domain-ordered experts."""
    from .backbone import load_training_arrays

    _check_expert_alignment(experts)
    n = len(experts)
    if manifest.n_domains != n:
        raise ValueError(
            f"manifest has {manifest.n_domains} domains but {n} experts given"
        )
    indices, domains = [], []
    for d in range(n):
        di = manifest.indices_for_domain(d)
        if not di:
            raise ValueError(f"manifest has no samples for domain {d}")
        if per_domain:
            di = di[:per_domain]
        indices.extend(di)
        domains.extend([d] * len(di))
    domains = np.asarray(domains)

    imgs, ts, rs, gammas = load_training_arrays(manifest, indices)

    # experts are frozen, so their predictions per sample are constants
    m = len(indices)
    pred_t = np.empty((n, m) + imgs.shape[1:], dtype=imgs.dtype)
    pred_r = np.empty_like(pred_t)
    for j, e in enumerate(experts):
        for lo in range(0, m, 32):
            sl = slice(lo, min(lo + 32, m))
            pred_t[j, sl], pred_r[j, sl] = predict_batch(e, imgs[sl])
    if log is not None:
        log(f"rtaw: cached predictions of {n} experts over {m} samples")

    rtaw = init_rtaw(n, cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    opt = Adam(lr=cfg.lr)
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(indices), size=cfg.batch)
        x = imgs[idx]
        loss, grads, _ = rtaw_batch_loss(
            rtaw, x, domains[idx], pred_t[:, idx], pred_r[:, idx],
            ts[idx], rs[idx], x, gammas[idx], cfg)
        if not np.isfinite(loss):
            raise RuntimeError(f"weighting training diverged: loss={loss} at step {step}")
        opt.step(rtaw.params, grads, lr=cfg.lr)
        if log is not None and (step % 200 == 0 or step == cfg.steps - 1):
            log(f"rtaw step {step} loss {loss:.4f} "
                f"({time.perf_counter() - t0:.1f}s)")
    return rtaw.validate()


def weights_for_batch(rtaw: RTAWModule, imgs):
    """Full-softmax weight rows (B, N), float64."""
    x = np.ascontiguousarray(imgs, dtype=rtaw.params["wk"].dtype)
    q, K = extract_batch(rtaw, x)
    v, _, _ = _scores_batch(q, K, rtaw.params["wk"], rtaw.params["wq"])
    return np.stack([softmax_weights(row).weights for row in v])


def expertise_for_batch(rtaw: RTAWModule, imgs):
    """Raw expertise scores (B, N), float64; for score-spread diagnostics."""
    x = np.ascontiguousarray(imgs, dtype=rtaw.params["wk"].dtype)
    q, K = extract_batch(rtaw, x)
    v, _, _ = _scores_batch(q, K, rtaw.params["wk"], rtaw.params["wq"])
    return v.astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_rtaw(rtaw: RTAWModule, path, extra_meta=None):
    c = rtaw.config
    arch = "\n".join([
        f"n_experts = {rtaw.n_experts}",
        f"feature_dim = {c.feature_dim}",
        f"proj_dim = {c.proj_dim}",
        f"extractor_depth = {c.extractor_depth}",
        f"base_channels = {c.base_channels}",
        f"activation = {c.activation}",
    ])
    save_archive(path, "rtaw", arch, extra_meta or {}, rtaw.params)


def load_rtaw(path) -> RTAWModule:
    _, arch_text, _, params = load_archive(path, expect_section="rtaw")
    kv = dict(line.split(" = ") for line in arch_text.strip().splitlines())
    cfg = RTAWConfig(feature_dim=int(kv["feature_dim"]),
                     proj_dim=int(kv["proj_dim"]),
                     extractor_depth=int(kv["extractor_depth"]),
                     base_channels=int(kv["base_channels"]),
                     activation=kv["activation"])
    return RTAWModule(n_experts=int(kv["n_experts"]),
                      layers=tuple(extractor_layers(cfg)),
                      params=params, config=cfg).validate()
