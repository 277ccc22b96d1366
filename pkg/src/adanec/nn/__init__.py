from .backend import active_backend
from .core import (
    Adam,
    LayerSpec,
    act_backward,
    act_forward,
    backward_layers,
    cosine_lr,
    forward_layers,
    init_params,
    sigmoid,
)
from .kernels import blur2d, col2im, gaussian_kernel, im2col

__all__ = [
    "active_backend",
    "Adam",
    "LayerSpec",
    "act_backward",
    "act_forward",
    "backward_layers",
    "cosine_lr",
    "forward_layers",
    "init_params",
    "sigmoid",
    "blur2d",
    "col2im",
    "gaussian_kernel",
    "im2col",
]
