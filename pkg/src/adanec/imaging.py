"""Image container conventions, quality metrics, and bit-exact PNG I/O.

An image is a plain H x W x 3 float ndarray with every value in [0, 1].
All metrics run in float64 regardless of the input dtype.
"""

import numpy as np
from PIL import Image as PILImage

from .nn.kernels import blur2d

__all__ = [
    "check_image",
    "psnr",
    "ssim",
    "save_png",
    "load_png",
]

PSNR_CAP_DB = 100.0
_PSNR_MSE_FLOOR = 1e-10

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def check_image(arr, name="image"):
    """Validate the image contract; returns the array unchanged."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must be HxWx3, got shape {arr.shape}")
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        raise ValueError(f"{name} must be at least 8x8, got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"{name} values must lie in [0,1], got range "
            f"[{arr.min():.6g}, {arr.max():.6g}]"
        )
    return arr


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB against peak value 1, capped at 100."""
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse < _PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a, b):
    """Mean structural similarity over an 11-tap Gaussian window (sigma 1.5).

    Uses the population local statistics and the standard stabilizers for
    dynamic range 1; the score is averaged over channels and all positions
    whose window fits entirely inside the image.
    """
    a, b = _check_pair(a, b)
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")
    pad = (SSIM_WINDOW - 1) // 2

    mu_a = blur2d(a, SSIM_SIGMA)
    mu_b = blur2d(b, SSIM_SIGMA)
    var_a = blur2d(a * a, SSIM_SIGMA) - mu_a * mu_a
    var_b = blur2d(b * b, SSIM_SIGMA) - mu_b * mu_b
    cov = blur2d(a * b, SSIM_SIGMA) - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    smap = num / den
    return float(np.mean(smap[pad:h - pad, pad:w - pad, :]))


def save_png(img, path):
    """Write an 8-bit RGB PNG; values quantized as round(255 * x), half up."""
    img = check_image(img)
    q = np.floor(255.0 * np.asarray(img, dtype=np.float64) + 0.5).astype(np.uint8)
    PILImage.fromarray(q, mode="RGB").save(path, format="PNG")


def load_png(path):
    """Read an 8-bit RGB PNG back to a float64 image (values / 255)."""
    with PILImage.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"expected an RGB PNG, got mode {im.mode!r}: {path}")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 PNG, got shape {arr.shape}: {path}")
    return arr
