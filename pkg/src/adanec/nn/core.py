"""Minimal sequential conv-net machinery with hand-written backprop.

Layers operate on NHWC float arrays and are described by LayerSpec lists,
so two nets built from the same spec list always expose identical
parameter names and shapes. Compute dtype follows the parameter dtype
(float32 for training speed, float64 for finite-difference checks).
"""

from dataclasses import dataclass

import numpy as np

from .kernels import im2col, col2im

__all__ = [
    "LayerSpec",
    "init_params",
    "forward_layers",
    "backward_layers",
    "act_forward",
    "act_backward",
    "sigmoid",
    "Adam",
    "cosine_lr",
]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str            # conv | dense | upsample | gap
    cin: int = 0
    cout: int = 0
    ksize: int = 0
    stride: int = 1
    act: str = "none"    # silu | relu | sigmoid | none

    def param_shapes(self):
        if self.kind == "conv":
            return {
                f"{self.name}.w": (self.ksize, self.ksize, self.cin, self.cout),
                f"{self.name}.b": (self.cout,),
            }
        if self.kind == "dense":
            return {
                f"{self.name}.w": (self.cin, self.cout),
                f"{self.name}.b": (self.cout,),
            }
        return {}


def sigmoid(z):
    # exp may overflow to inf for very negative z; 1/(1+inf) -> 0 is correct
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def act_forward(kind, z):
    """Returns (y, aux); aux feeds the matching backward to skip recompute."""
    if kind == "none":
        return z, None
    if kind == "relu":
        return np.maximum(z, 0.0), None
    if kind == "sigmoid":
        s = sigmoid(z)
        return s, s
    if kind == "silu":
        s = sigmoid(z)
        return z * s, s
    raise ValueError(f"unknown activation {kind!r}")


def act_backward(kind, z, dy, aux=None):
    if kind == "none":
        return dy
    if kind == "relu":
        return dy * (z > 0)
    if kind == "sigmoid":
        s = sigmoid(z) if aux is None else aux
        return dy * s * (1.0 - s)
    if kind == "silu":
        s = sigmoid(z) if aux is None else aux
        return dy * (s * (1.0 + z * (1.0 - s)))
    raise ValueError(f"unknown activation {kind!r}")


def init_params(layers, seed, dtype=np.float32):
    """Fan-in-scaled uniform weights, zero biases, deterministic in seed.

    The bound sqrt(6 / fan_in) keeps activation variance roughly constant
    through deep silu/relu stacks.
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.default_rng(seed)
    params = {}
    for spec in layers:
        for name, shape in spec.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[:-1]))
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def _conv_forward(spec, params, x):
    k, s = spec.ksize, spec.stride
    p = k // 2
    n, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = im2col(xp, k, k, s, s)
    oh, ow = cols.shape[1], cols.shape[2]
    cmat = cols.reshape(n * oh * ow, k * k * spec.cin)
    wmat = params[f"{spec.name}.w"].reshape(k * k * spec.cin, spec.cout)
    z = cmat @ wmat + params[f"{spec.name}.b"]
    y, aux = act_forward(spec.act, z)
    cache = (x.shape, xp.shape, cmat, z, aux)
    return y.reshape(n, oh, ow, spec.cout), cache


def _conv_backward(spec, params, cache, dy):
    (n, h, w, _), (_, hp, wp, _), cmat, z, aux = cache
    k, s = spec.ksize, spec.stride
    p = k // 2
    oh, ow = dy.shape[1], dy.shape[2]
    dz = act_backward(spec.act, z, dy.reshape(n * oh * ow, spec.cout), aux)
    grads = {
        f"{spec.name}.w": (cmat.T @ dz).reshape(k, k, spec.cin, spec.cout),
        f"{spec.name}.b": dz.sum(axis=0),
    }
    wmat = params[f"{spec.name}.w"].reshape(k * k * spec.cin, spec.cout)
    dcols = (dz @ wmat.T).reshape(n, oh, ow, k, k, spec.cin)
    dxp = col2im(dcols, hp, wp, s, s)
    dx = dxp[:, p:p + h, p:p + w, :]
    return dx, grads


def conv_shared_forward(specs, params, x, want_cache=False):
    """Several conv layers reading the same input: one gather, one GEMM each."""
    first = specs[0]
    k, s = first.ksize, first.stride
    for spec in specs[1:]:
        assert (spec.ksize, spec.stride, spec.cin) == (k, s, first.cin)
    p = k // 2
    n = x.shape[0]
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = im2col(xp, k, k, s, s)
    oh, ow = cols.shape[1], cols.shape[2]
    cmat = cols.reshape(n * oh * ow, k * k * first.cin)
    outs, zs, auxs = [], [], []
    for spec in specs:
        wmat = params[f"{spec.name}.w"].reshape(k * k * spec.cin, spec.cout)
        z = cmat @ wmat + params[f"{spec.name}.b"]
        y, aux = act_forward(spec.act, z)
        outs.append(y.reshape(n, oh, ow, spec.cout))
        zs.append(z)
        auxs.append(aux)
    if not want_cache:
        return outs, None
    return outs, (x.shape, xp.shape, cmat, zs, auxs)


def conv_shared_backward(specs, params, cache, dys):
    """Backward of conv_shared_forward; returns (dx, grads)."""
    (n, h, w, _), (_, hp, wp, _), cmat, zs, auxs = cache
    first = specs[0]
    k, s = first.ksize, first.stride
    p = k // 2
    grads = {}
    dcmat = None
    for spec, z, aux, dy in zip(specs, zs, auxs, dys):
        oh, ow = dy.shape[1], dy.shape[2]
        dz = act_backward(spec.act, z, dy.reshape(n * oh * ow, spec.cout), aux)
        grads[f"{spec.name}.w"] = (cmat.T @ dz).reshape(k, k, spec.cin, spec.cout)
        grads[f"{spec.name}.b"] = dz.sum(axis=0)
        wmat = params[f"{spec.name}.w"].reshape(k * k * spec.cin, spec.cout)
        contrib = dz @ wmat.T
        dcmat = contrib if dcmat is None else dcmat + contrib
    oh = (hp - k) // s + 1
    ow = (wp - k) // s + 1
    dcols = dcmat.reshape(n, oh, ow, k, k, first.cin)
    dxp = col2im(dcols, hp, wp, s, s)
    return dxp[:, p:p + h, p:p + w, :], grads


def _dense_forward(spec, params, x):
    z = x @ params[f"{spec.name}.w"] + params[f"{spec.name}.b"]
    y, aux = act_forward(spec.act, z)
    return y, (x, z, aux)


def _dense_backward(spec, params, cache, dy):
    x, z, aux = cache
    dz = act_backward(spec.act, z, dy, aux)
    grads = {
        f"{spec.name}.w": x.T @ dz,
        f"{spec.name}.b": dz.sum(axis=0),
    }
    return dz @ params[f"{spec.name}.w"].T, grads


def forward_layers(layers, params, x, want_cache=False):
    """Run a sequential layer stack; optionally keep per-layer caches."""
    caches = [] if want_cache else None
    for spec in layers:
        if spec.kind == "conv":
            x, cache = _conv_forward(spec, params, x)
        elif spec.kind == "dense":
            x, cache = _dense_forward(spec, params, x)
        elif spec.kind == "upsample":
            cache = None
            x = x.repeat(2, axis=1).repeat(2, axis=2)
        elif spec.kind == "gap":
            cache = x.shape
            x = x.mean(axis=(1, 2))
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        if want_cache:
            caches.append(cache)
    return (x, caches) if want_cache else x


def backward_layers(layers, params, caches, dy):
    """Backprop through a stack run with want_cache=True.

    Returns (dx, grads) where grads maps parameter names to arrays.
    """
    grads = {}
    for spec, cache in zip(reversed(layers), reversed(caches)):
        if spec.kind == "conv":
            dy, g = _conv_backward(spec, params, cache, dy)
            grads.update(g)
        elif spec.kind == "dense":
            dy, g = _dense_backward(spec, params, cache, dy)
            grads.update(g)
        elif spec.kind == "upsample":
            n, h2, w2, c = dy.shape
            dy = dy.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))
        elif spec.kind == "gap":
            n, h, w, c = cache
            dy = np.broadcast_to(dy[:, None, None, :] / (h * w), (n, h, w, c)).copy()
    return dy, grads


def cosine_lr(base_lr, step, total_steps):
    return float(base_lr * 0.5 * (1.0 + np.cos(np.pi * step / max(total_steps, 1))))


class Adam:
    """Adaptive-moment SGD; state keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / bias1
            vhat = self.v[name] / bias2
            params[name] -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params[name].dtype)
