"""Hot array kernels with numba and pure-numpy variants.

Convolution layers are built as im2col gather + GEMM + col2im scatter; the
gather/scatter and the separable Gaussian blur are the only loops worth
jitting (the GEMM stays in BLAS either way). Both variants of each kernel
accumulate contributions in the same order, so outputs are bit-identical
across backends.

Array layout is NHWC throughout.
"""

import numpy as np

from .backend import BACKEND

__all__ = [
    "gaussian_kernel",
    "blur2d",
    "im2col",
    "col2im",
]


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps, radius ceil(3*sigma), float64."""
    if sigma < 0:
        raise ValueError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return np.ones(1, dtype=np.float64)
    r = int(np.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


# ---------------------------------------------------------------------------
# pure-numpy variants
# ---------------------------------------------------------------------------

def _blur_axis0_numpy(x, k):
    r = (k.shape[0] - 1) // 2
    xp = np.pad(x, ((r, r), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(x)
    h = x.shape[0]
    for t in range(k.shape[0]):
        out += k[t] * xp[t:t + h]
    return out


def _blur2d_numpy(img, k):
    out = _blur_axis0_numpy(img, k)
    out = _blur_axis0_numpy(out.transpose(1, 0, 2), k)
    return np.ascontiguousarray(out.transpose(1, 0, 2))


def _im2col_numpy(xp, kh, kw, sh, sw, oh, ow):
    n, hp, wp, c = xp.shape
    sn, s0, s1, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, kh, kw, c),
        strides=(sn, s0 * sh, s1 * sw, s0, s1, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def _col2im_numpy(cols, hp, wp, sh, sw):
    n, oh, ow, kh, kw, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + sh * oh:sh, j:j + sw * ow:sw, :] += cols[:, :, :, i, j, :]
    return out


# ---------------------------------------------------------------------------
# numba variants (same accumulation order as the numpy ones)
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _blur_axis0_impl(x, k, out):
        h, w, c = x.shape
        r = (k.shape[0] - 1) // 2
        for t in range(k.shape[0]):
            kt = k[t]
            for i in range(h):
                src = i + t - r
                if src < 0:
                    src = 0
                elif src > h - 1:
                    src = h - 1
                for j in range(w):
                    for cc in range(c):
                        out[i, j, cc] += kt * x[src, j, cc]

    def _blur_axis0_numba(x, k):
        out = np.zeros_like(x)
        _blur_axis0_impl(x, k, out)
        return out

    def _blur2d_numba(img, k):
        out = _blur_axis0_numba(img, k)
        out = _blur_axis0_numba(np.ascontiguousarray(out.transpose(1, 0, 2)), k)
        return np.ascontiguousarray(out.transpose(1, 0, 2))

    @njit(cache=True)
    def _im2col_impl(xp, kh, kw, sh, sw, cols):
        n, oh, ow = cols.shape[0], cols.shape[1], cols.shape[2]
        c = xp.shape[3]
        for nn in range(n):
            for y in range(oh):
                for x in range(ow):
                    for i in range(kh):
                        for j in range(kw):
                            for cc in range(c):
                                cols[nn, y, x, i, j, cc] = xp[nn, y * sh + i, x * sw + j, cc]

    def _im2col_numba(xp, kh, kw, sh, sw, oh, ow):
        n, _, _, c = xp.shape
        cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
        _im2col_impl(xp, kh, kw, sh, sw, cols)
        return cols

    # per-element accumulation order (ascending i, j) matches the numpy path
    @njit(cache=True)
    def _col2im_impl(cols, sh, sw, out):
        n, oh, ow, kh, kw, c = cols.shape
        for nn in range(n):
            for i in range(kh):
                for j in range(kw):
                    for y in range(oh):
                        for x in range(ow):
                            for cc in range(c):
                                out[nn, y * sh + i, x * sw + j, cc] += cols[nn, y, x, i, j, cc]

    def _col2im_numba(cols, hp, wp, sh, sw):
        n, _, _, _, _, c = cols.shape
        out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
        _col2im_impl(cols, sh, sw, out)
        return out


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------

def blur2d(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of an H x W x C image, edge-clamped borders."""
    if sigma == 0.0:
        return img.copy()
    k = gaussian_kernel(sigma).astype(img.dtype)
    img = np.ascontiguousarray(img)
    if BACKEND == "numba":
        return _blur2d_numba(img, k)
    return _blur2d_numpy(img, k)


def im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Gather sliding windows of a padded NHWC batch.

    Returns (N, OH, OW, KH, KW, C) with OH/OW implied by the padded size.
    """
    n, hp, wp, c = xp.shape
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    xp = np.ascontiguousarray(xp)
    if BACKEND == "numba":
        return _im2col_numba(xp, kh, kw, sh, sw, oh, ow)
    return _im2col_numpy(xp, kh, kw, sh, sw, oh, ow)


def col2im(cols: np.ndarray, hp: int, wp: int, sh: int, sw: int) -> np.ndarray:
    """Scatter-add window gradients back onto the padded NHWC grid."""
    cols = np.ascontiguousarray(cols)
    if BACKEND == "numba":
        return _col2im_numba(cols, hp, wp, sh, sw)
    return _col2im_numpy(cols, hp, wp, sh, sw)
