"""Shared restoration losses with hand-written gradients.

All functions operate on batched NBHWC... (B, H, W, C) arrays and reduce
with means, so loss magnitudes are comparable across image sizes.
"""

from dataclasses import dataclass

import numpy as np

from .synthesis import remix, remix_vjp

__all__ = ["LossConfig", "l1_mean", "grad_l1_mean", "rr_loss_and_grad"]


@dataclass(frozen=True)
class LossConfig:
    lambda_fid: float = 1.0
    lambda_rec: float = 0.5
    grad_fidelity: bool = False  # adds an image-gradient fidelity term on T


def l1_mean(pred, target):
    """Mean absolute error plus its gradient with respect to pred."""
    diff = pred - target
    loss = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return loss, grad


def grad_l1_mean(pred, target):
    """L1 on forward-difference image gradients; returns loss and d/dpred."""
    loss = 0.0
    grad = np.zeros_like(pred)
    for axis in (1, 2):
        dp = np.diff(pred, axis=axis)
        dt = np.diff(target, axis=axis)
        l, g = l1_mean(dp, dt)
        loss += l
        # d(diff)/dx scatters +g to the leading and -g to the trailing slice
        sl_hi = [slice(None)] * pred.ndim
        sl_lo = [slice(None)] * pred.ndim
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        grad[tuple(sl_hi)] += g
        grad[tuple(sl_lo)] -= g
    return loss, grad


def rr_loss_and_grad(t_hat, r_hat, t_gt, r_gt, contaminated, gamma, cfg: LossConfig):
    """Reflection-removal loss: layer fidelity plus remix reconstruction.

    gamma may be a scalar or a (B,1,1,1) per-sample array. Returns
    (loss, d/dt_hat, d/dr_hat).
    """
    loss = 0.0
    dt = np.zeros_like(t_hat)
    dr = np.zeros_like(r_hat)

    if cfg.lambda_fid != 0.0:
        lt, gt_ = l1_mean(t_hat, t_gt)
        lr, gr_ = l1_mean(r_hat, r_gt)
        loss += cfg.lambda_fid * (lt + lr)
        dt += cfg.lambda_fid * gt_
        dr += cfg.lambda_fid * gr_
        if cfg.grad_fidelity:
            lg, gg = grad_l1_mean(t_hat, t_gt)
            loss += cfg.lambda_fid * lg
            dt += cfg.lambda_fid * gg

    if cfg.lambda_rec != 0.0:
        if gamma is None:
            raise ValueError("reconstruction loss requires synthesis metadata (gamma)")
        rec = remix(t_hat, r_hat, gamma)
        lrec, grec = l1_mean(rec, contaminated)
        loss += cfg.lambda_rec * lrec
        gdt, gdr = remix_vjp(t_hat, r_hat, gamma, cfg.lambda_rec * grec)
        dt += gdt
        dr += gdr

    return loss, dt, dr
