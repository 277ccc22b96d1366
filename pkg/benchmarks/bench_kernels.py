#!/usr/bin/env python3
"""Benchmark the numba-jitted kernels against the pure-numpy fallbacks.

The backend is fixed at import time, so this script runs the jitted
variants through the public entry points (warming the JIT first) and the
numpy variants through their private implementations. Outputs are checked
bit-for-bit while timing.

Run:  python benchmarks/bench_kernels.py
      ADANEC_KERNELS=numpy python benchmarks/bench_kernels.py   (numpy only)
"""

import time

import numpy as np

from adanec.nn.backend import active_backend
from adanec.nn.kernels import (_blur2d_numpy, _col2im_numpy, _im2col_numpy,
                               blur2d, col2im, gaussian_kernel, im2col)

CASES = [
    # (label, padded batch shape, kernel, stride)
    ("conv3x3 s1 64x64x16", (8, 66, 66, 16), 3, 1),
    ("conv3x3 s1 64x64x32", (8, 66, 66, 32), 3, 1),
    ("conv3x3 s2 64x64x16", (8, 66, 66, 16), 3, 2),
    ("conv3x3 s1 16x16x64", (8, 18, 18, 64), 3, 1),
]

BLUR_CASES = [("blur sigma 1.5 64x64", 1.5), ("blur sigma 4.0 64x64", 4.0)]


def timeit(fn, repeats=15):
    fn()  # warm (and JIT-compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = fn()
    return (time.perf_counter() - t0) / repeats, out


def main():
    backend = active_backend()
    print(f"active backend: {backend}")
    if backend != "numba":
        print("numba backend not active; timing the numpy path only\n")

    rng = np.random.default_rng(0)
    rows = []
    for label, shape, k, s in CASES:
        xp = rng.random(shape).astype(np.float32)
        oh = (shape[1] - k) // s + 1
        ow = (shape[2] - k) // s + 1
        t_active, cols = timeit(lambda: im2col(xp, k, k, s, s))
        t_numpy, cols_np = timeit(lambda: _im2col_numpy(xp, k, k, s, s, oh, ow))
        assert np.array_equal(cols, cols_np)
        rows.append((f"im2col {label}", t_active, t_numpy))

        t_active, back = timeit(lambda: col2im(cols, shape[1], shape[2], s, s))
        t_numpy, back_np = timeit(
            lambda: _col2im_numpy(cols, shape[1], shape[2], s, s))
        assert np.array_equal(back, back_np)
        rows.append((f"col2im {label}", t_active, t_numpy))

    for label, sigma in BLUR_CASES:
        img = rng.random((64, 64, 3))
        kern = gaussian_kernel(sigma).astype(img.dtype)
        t_active, a = timeit(lambda: blur2d(img, sigma))
        t_numpy, b = timeit(lambda: _blur2d_numpy(img, kern))
        assert np.array_equal(a, b)
        rows.append((label, t_active, t_numpy))

    width = max(len(r[0]) for r in rows) + 2
    print(f"{'kernel'.ljust(width)}{backend:>12}{'numpy':>12}{'speedup':>10}")
    for label, t_active, t_numpy in rows:
        print(f"{label.ljust(width)}{t_active * 1e3:>10.2f}ms"
              f"{t_numpy * 1e3:>10.2f}ms{t_numpy / t_active:>10.2f}x")


if __name__ == "__main__":
    main()
