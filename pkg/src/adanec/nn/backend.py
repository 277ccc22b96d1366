"""Kernel backend selection.

The hot inner loops (im2col / col2im gathers and the separable blur) exist
in two variants: numba-jitted loops and pure-numpy slicing. The active
variant is chosen once at import time from the ADANEC_KERNELS environment
variable:

    ADANEC_KERNELS=auto    use numba when importable (default)
    ADANEC_KERNELS=numba   require numba, fail loudly if missing
    ADANEC_KERNELS=numpy   force the pure-numpy fallback

Both variants accumulate in the same order, so results agree bit-for-bit;
see benchmarks/bench_kernels.py for the speed comparison.
"""

import os

_VALID = ("auto", "numba", "numpy")


def _resolve() -> str:
    mode = os.environ.get("ADANEC_KERNELS", "auto").lower()
    if mode not in _VALID:
        raise ValueError(
            f"ADANEC_KERNELS must be one of {_VALID}, got {mode!r}"
        )
    if mode == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        if mode == "numba":
            raise
        return "numpy"


BACKEND = _resolve()


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return BACKEND
