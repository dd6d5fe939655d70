"""Kernel backend selection.

The hot numeric kernels exist twice: a numba-jitted implementation and a
pure-numpy fallback with identical signatures and contracts. Selection is
controlled by the SPECDEC_BACKEND environment variable:

    SPECDEC_BACKEND=numba   force the jitted kernels (error if unavailable)
    SPECDEC_BACKEND=numpy   force the fallback
    unset / auto            numba when importable, else numpy

``benchmarks/kernel_bench.py`` compares the two.
"""

import os

_choice = os.environ.get("SPECDEC_BACKEND", "auto").lower()

if _choice in ("auto", "numba"):
    try:
        from . import _kernels_numba as _impl

        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        from . import _kernels_numpy as _impl

        BACKEND = "numpy"
elif _choice == "numpy":
    from . import _kernels_numpy as _impl

    BACKEND = "numpy"
else:
    raise RuntimeError(f"unknown SPECDEC_BACKEND={_choice!r} (numba|numpy|auto)")

matmul = _impl.matmul
matmul_bias = _impl.matmul_bias
softmax_rows = _impl.softmax_rows
masked_softmax_rows = _impl.masked_softmax_rows
layer_norm_rows = _impl.layer_norm_rows
gelu = _impl.gelu
gelu_grad = _impl.gelu_grad
conv1d = _impl.conv1d
conv1d_bwd = _impl.conv1d_bwd
avg_pool1d = _impl.avg_pool1d
avg_pool1d_bwd = _impl.avg_pool1d_bwd
stack_forward = _impl.stack_forward


def backend_name() -> str:
    return BACKEND
