"""Pure-numpy conv1d kernels (im2col + BLAS).

Same contracts as the compiled versions in ``_conv1d.pyx``; used whenever the
extension is unavailable or ``B2V_PURE_PYTHON`` is set.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _windows(x, kernel, stride):
    """View of x (B, C, T) as (B, C, T_out, kernel) sliding windows."""
    b, c, t = x.shape
    t_out = (t - kernel) // stride + 1
    sb, sc, st = x.strides
    return as_strided(
        x,
        shape=(b, c, t_out, kernel),
        strides=(sb, sc, st * stride, st),
        writeable=False,
    )


def conv1d_forward(x, w, stride):
    """Valid cross-correlation of x (B, Cin, T) with w (Cout, Cin, K)."""
    b, cin, t = x.shape
    cout, _, k = w.shape
    t_out = (t - k) // stride + 1
    win = _windows(x, k, stride)  # (B, Cin, T_out, K)
    cols = win.transpose(0, 2, 1, 3).reshape(b * t_out, cin * k)
    y = cols @ w.reshape(cout, cin * k).T
    return np.ascontiguousarray(y.reshape(b, t_out, cout).transpose(0, 2, 1))


def conv1d_backward_data(grad_y, w, stride, t_in):
    """Gradient wrt the conv input; grad_y is (B, Cout, T_out)."""
    b, cout, t_out = grad_y.shape
    _, cin, k = w.shape
    # (B*T_out, Cout) @ (Cout, Cin*K) -> scatter-add windows back
    cols = grad_y.transpose(0, 2, 1).reshape(b * t_out, cout) @ w.reshape(cout, cin * k)
    cols = cols.reshape(b, t_out, cin, k)
    grad_x = np.zeros((b, cin, t_in), dtype=grad_y.dtype)
    for tau in range(t_out):
        base = tau * stride
        grad_x[:, :, base:base + k] += cols[:, tau]
    return grad_x

def conv1d_backward_weight(grad_y, x, stride, kernel):
    """Gradient wrt the conv weights; returns (Cout, Cin, K)."""
    b, cout, t_out = grad_y.shape
    _, cin, _ = x.shape
    win = _windows(x, kernel, stride)  # (B, Cin, T_out, K)
    cols = win.transpose(0, 2, 1, 3).reshape(b * t_out, cin * kernel)
    gw = grad_y.transpose(0, 2, 1).reshape(b * t_out, cout).T @ cols
    return gw.reshape(cout, cin, kernel)
