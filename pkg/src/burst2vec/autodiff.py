"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and records the operation that produced it, so
a scalar result can be backpropagated through the whole expression with
``Tensor.backward()``. The design follows the usual define-by-run recipe:
each op stores its parents plus a closure that maps the output gradient to
parent gradients, and ``backward`` replays the graph in reverse topological
order. Construction order is deterministic, so gradient accumulation order
(and therefore every gradient bit) is reproducible run to run.

Training code typically uses float32 tensors; the gradient-check suites use
float64. Ops inherit the operand dtype, and plain Python scalars are cast to
the tensor's dtype so they never silently promote a float32 graph.

The op set is the minimum the model needs: elementwise arithmetic, matmul,
strided 1-d convolution (backed by the compiled kernels when available),
relu, log/exp, softmax and log-softmax, axis reductions, concat/reshape/
transpose, and the gradient-reversal node used for adversarial training.
"""

from __future__ import annotations

import numpy as np

from . import _kernels


class GraphError(ValueError):
    """Structural problem in an autodiff graph (non-scalar loss, cycle)."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    @staticmethod
    def _make(data, parents, backward, op):
        req = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=req,
                      _parents=tuple(parents) if req else (),
                      _backward=backward if req else None, op=op)

    # -- backward -------------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar; accumulates into leaf ``.grad``."""
        if self.data.size != 1:
            raise GraphError(f"backward() requires a scalar, got shape {self.data.shape}")
        order = self._toposort()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _toposort(self):
        order = []
        # 0 = unseen, 1 = on stack, 2 = done; a node met while on-stack means a cycle
        state: dict[int, int] = {}
        stack = [(self, iter(self._parents))]
        state[id(self)] = 1
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if not p.requires_grad:
                    continue
                s = state.get(id(p), 0)
                if s == 1:
                    raise GraphError("cycle detected in computation graph")
                if s == 0:
                    state[id(p)] = 1
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                state[id(node)] = 2
                order.append(node)
                stack.pop()
        return order

    def _accum(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = grad.copy() if isinstance(grad, np.ndarray) else np.asarray(grad)
        else:
            self.grad = self.grad + grad

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor._make(out_data, (self, other), backward, "add")

    def __sub__(self, other):
        other = self._coerce(other)
        out_data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.data.shape))

        return Tensor._make(out_data, (self, other), backward, "sub")

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(out_data, (self, other), backward, "mul")

    def __truediv__(self, other):
        other = self._coerce(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / (other.data * other.data),
                                          other.data.shape))

        return Tensor._make(out_data, (self, other), backward, "div")

    def __neg__(self):
        def backward(g):
            self._accum(-g)

        return Tensor._make(-self.data, (self,), backward, "neg")

    def __radd__(self, other):
        return self._coerce(other).__add__(self)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __rmul__(self, other):
        return self._coerce(other).__mul__(self)

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def pow(self, exponent: float):
        out_data = self.data ** exponent

        def backward(g):
            self._accum(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(out_data, (self,), backward, "pow")

    def __pow__(self, exponent):
        return self.pow(float(exponent))

    def square(self):
        out_data = self.data * self.data

        def backward(g):
            self._accum(g * 2.0 * self.data)

        return Tensor._make(out_data, (self,), backward, "square")

    def abs(self):
        # subgradient 0 at exact ties, matching np.sign
        out_data = np.abs(self.data)
        sign = np.sign(self.data)

        def backward(g):
            self._accum(g * sign)

        return Tensor._make(out_data, (self,), backward, "abs")

    # -- nonlinearities ---------------------------------------------------------

    def relu(self):
        mask = self.data > 0

        def backward(g):
            self._accum(g * mask)

        return Tensor._make(self.data * mask, (self,), backward, "relu")

    def log(self):
        def backward(g):
            self._accum(g / self.data)

        return Tensor._make(np.log(self.data), (self,), backward, "log")

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            self._accum(g * out_data)

        return Tensor._make(out_data, (self,), backward, "exp")

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            self._accum(out_data * (g - inner))

        return Tensor._make(out_data, (self,), backward, "softmax")

    def log_softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out_data = shifted - lse
        soft = np.exp(out_data)

        def backward(g):
            self._accum(g - soft * g.sum(axis=axis, keepdims=True))

        return Tensor._make(out_data, (self,), backward, "log_softmax")

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor._make(out_data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ops ----------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape

        def backward(g):
            self._accum(g.reshape(orig))

        return Tensor._make(self.data.reshape(shape), (self,), backward, "reshape")

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))

        def backward(g):
            self._accum(g.transpose(inverse))

        return Tensor._make(self.data.transpose(axes), (self,), backward, "transpose")

    # -- linear algebra ------------------------------------------------------------

    def matmul(self, other):
        other = self._coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise GraphError("matmul expects 2-d operands, got "
                             f"{self.data.shape} @ {other.data.shape}")
        if self.data.shape[1] != other.data.shape[0]:
            raise GraphError(f"matmul shape mismatch: {self.data.shape} @ {other.data.shape}")
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        return Tensor._make(out_data, (self, other), backward, "matmul")

    def __matmul__(self, other):
        return self.matmul(other)


def concat(tensors, axis=0):
    """Concatenate tensors along an axis; backward splits the gradient."""
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._make(out_data, tensors, backward, "concat")


def conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Strided valid 1-d convolution: x (B, Cin, T), w (Cout, Cin, K).

    Output length is floor((T - K) / stride) + 1. Dispatches to the active
    kernel backend (compiled or numpy).
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise GraphError("conv1d expects x (B, Cin, T) and w (Cout, Cin, K)")
    b, cin, t = x.data.shape
    cout, cin_w, k = w.data.shape
    if cin != cin_w:
        raise GraphError(f"conv1d channel mismatch: input {cin}, weight {cin_w}")
    if t < k:
        raise GraphError(f"conv1d input length {t} shorter than kernel {k}")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data.astype(x.data.dtype, copy=False))
    out_data = _kernels.conv1d_forward(xd, wd, stride)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accum(_kernels.conv1d_backward_data(g, wd, stride, t))
        if w.requires_grad:
            w._accum(_kernels.conv1d_backward_weight(g, xd, stride, k))

    return Tensor._make(out_data, (x, w), backward, "conv1d")


def conv1d_output_length(t: int, kernel: int, stride: int) -> int:
    return (t - kernel) // stride + 1


def reverse_gradient(x: Tensor, scale: float) -> Tensor:
    """Gradient-reversal node: identity forward, -scale * grad backward.

    The adversarial training scheme hangs a discriminator or a cross-task head
    below this node; the head below still minimises its own loss, while
    everything above climbs it, scaled by ``scale``.
    """
    if scale < 0:
        raise ValueError(f"reversal scale must be nonnegative, got {scale}")

    def backward(g):
        x._accum(-scale * g)

    return Tensor._make(x.data.copy(), (x,), backward, "reverse_gradient")


def as_tensor(data, dtype=None, requires_grad=False) -> Tensor:
    arr = np.asarray(data, dtype=dtype) if dtype is not None else data
    return Tensor(arr, requires_grad=requires_grad)
