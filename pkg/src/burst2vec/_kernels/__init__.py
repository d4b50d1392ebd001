"""Conv1d kernel backend selection.

The compiled Cython kernels are preferred when importable; otherwise the
numpy fallback is used. Setting ``B2V_PURE_PYTHON=1`` forces the fallback,
which is handy for A/B benchmarking and for debugging.

Both backends implement the same three functions and agree to float
round-off; ``BACKEND`` records which one is active.
"""

import os

from . import fallback

if os.environ.get("B2V_PURE_PYTHON"):
    _impl = fallback
    BACKEND = "python"
else:
    try:
        from . import _conv1d as _impl
        BACKEND = "native"
    except ImportError:
        _impl = fallback
        BACKEND = "python"

conv1d_forward = _impl.conv1d_forward
conv1d_backward_data = _impl.conv1d_backward_data
conv1d_backward_weight = _impl.conv1d_backward_weight

__all__ = [
    "BACKEND",
    "conv1d_forward",
    "conv1d_backward_data",
    "conv1d_backward_weight",
    "fallback",
]
