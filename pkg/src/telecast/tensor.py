"""Reverse-mode autodiff on float64 numpy arrays.

Graphs are built per forward pass and freed when backward() runs; there is
no persistent tape. Every op is pure given its inputs, so forward evaluation
is safe to run concurrently as long as each graph stays on one thread.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_node_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that skips graph recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """Invalid use of the computation graph (non-scalar loss, reuse, ...)."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float64 array that can participate in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward_fn", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._freed = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy)."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ---------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
        return out

    def backward(self, leaves=None) -> None:
        """Accumulate gradients of this scalar into every reachable leaf.

        `leaves`, when given, are additionally guaranteed a (possibly zero)
        grad buffer even if they do not appear in the graph. The graph is
        freed afterwards; a second call on the same tensor is an error.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise GraphError("backward already ran on this graph; build a new forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not require grad; nothing to differentiate")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            fn = node._backward_fn
            if fn is None:
                continue
            grads = fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            # free the interior of the graph as we go
            node.grad = None
            node._parents = ()
            node._backward_fn = None
            node._freed = True

        if leaves is not None:
            for leaf in leaves:
                if leaf.requires_grad and leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)

    # -- arithmetic -------------------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        other = self._coerce(other)
        try:
            data = self.data + other.data
        except ValueError:
            raise ShapeError(f"cannot broadcast {self.shape} + {other.shape}") from None
        a, b = self, other

        def backward_fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._result(data, (a, b), backward_fn)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return self._result(-self.data, (a,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        try:
            data = self.data * other.data
        except ValueError:
            raise ShapeError(f"cannot broadcast {self.shape} * {other.shape}") from None
        a, b = self, other

        def backward_fn(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return self._result(data, (a, b), backward_fn)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return self * (1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape handling ----------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape
        data = self.data.reshape(shape)
        return self._result(data, (a,), lambda g: (g.reshape(old),))

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inverse = tuple(np.argsort(axes))
        data = np.transpose(self.data, axes)
        return self._result(data, (a,), lambda g: (np.transpose(g, inverse),))

    def __getitem__(self, index) -> "Tensor":
        a = self
        data = self.data[index]

        def backward_fn(g):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)

        return self._result(data, (a,), backward_fn)

    def take(self, indices, axis: int) -> "Tensor":
        """Gather along one axis with a 1-D integer index array."""
        idx = np.asarray(indices)
        if idx.ndim != 1:
            raise ShapeError(f"take wants a 1-D index array, got shape {idx.shape}")
        a = self
        data = np.take(self.data, idx, axis=axis)

        def backward_fn(g):
            full = np.zeros_like(a.data)
            sel = (slice(None),) * (axis % a.ndim) + (idx,)
            np.add.at(full, sel, g)
            return (full,)

        return self._result(data, (a,), backward_fn)

    def roll(self, shift: int, axis: int) -> "Tensor":
        a = self
        data = np.roll(self.data, shift, axis=axis)
        return self._result(data, (a,), lambda g: (np.roll(g, -shift, axis=axis),))

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward_fn(g):
            if axis is None:
                return (np.broadcast_to(g.reshape((1,) * a.ndim), a.shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._result(data, (a,), backward_fn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else (
            np.prod([self.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- nonlinearities ------------------------------------------------------

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(self.data)
        return self._result(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))

    def gelu(self) -> "Tensor":
        """Gaussian error linear unit, tanh form."""
        a = self
        x = self.data
        x2 = x * x
        t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
        out_data = 0.5 * x * (1.0 + t)

        def backward_fn(g):
            d_inner = _GELU_C * (1.0 + 0.134145 * x2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            return (g * local,)

        return self._result(out_data, (a,), backward_fn)

    def softmax(self, axis: int = -1) -> "Tensor":
        if self.shape[axis] == 0:
            raise ShapeError(f"softmax over empty axis {axis} of shape {self.shape}")
        a = self
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward_fn(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            return (out_data * (g - dot),)

        return self._result(out_data, (a,), backward_fn)

    def layer_norm(self, eps: float = 1e-5) -> "Tensor":
        """Normalize the last axis to zero mean, unit variance (eps-regularized)."""
        a = self
        mu = self.data.mean(axis=-1, keepdims=True)
        centered = self.data - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv

        def backward_fn(g):
            m1 = g.mean(axis=-1, keepdims=True)
            m2 = (g * xhat).mean(axis=-1, keepdims=True)
            return (inv * (g - m1 - xhat * m2),)

        return self._result(xhat, (a,), backward_fn)

    def dropout(self, p: float, training: bool, rng=None) -> "Tensor":
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must satisfy 0 <= p < 1, got {p}")
        if not training or p == 0.0:
            return self
        if rng is None:
            raise ValueError("training-mode dropout needs an rng stream")
        a = self
        mask = (rng.unit_floats(self.shape) >= p) * (1.0 / (1.0 - p))
        return self._result(self.data * mask, (a,), lambda g: (g * mask,))


# -- free functions ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with shared leading batch axes; backward gives
    dA = dC @ B^T and dB = A^T @ dC."""
    a = Tensor._coerce(a)
    b = Tensor._coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        if b.ndim == 2 and a.ndim > 2:
            # shared right operand: one flat GEMM beats batched-matmul + sum
            k = a.shape[-1]
            n = g.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return _unbroadcast(ga, a.shape), gb

    return Tensor._result(data, (a, b), backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._result(data, tuple(tensors), backward_fn)


def conv_lag(x: Tensor, kernel: Tensor) -> Tensor:
    """Causal 1-D convolution along the trailing lag axis.

    x is (C, L) or (batch, C, L); kernel is (C_out, C, k). The input is
    left-padded with k-1 zeros so the output keeps length L and position t
    sees only lags <= t.
    """
    x = Tensor._coerce(x)
    kernel = Tensor._coerce(kernel)
    if kernel.ndim != 3:
        raise ShapeError(f"conv kernel must be (C_out, C, k), got {kernel.shape}")
    squeeze = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ShapeError(f"conv input must be (C, L) or (batch, C, L), got {x.shape}")
    c_out, c_in, k = kernel.shape
    length = x.shape[-1]
    if x.shape[-2] != c_in:
        raise ShapeError(f"conv channels disagree: input {x.shape} vs kernel {kernel.shape}")
    if k > length:
        raise ShapeError(f"kernel length {k} exceeds lag window {length}")

    xd = x.data[None] if squeeze else x.data
    batch = xd.shape[0]
    padded = np.zeros((batch, c_in, length + k - 1))
    padded[:, :, k - 1:] = xd
    out = np.zeros((batch, c_out, length))
    kd = kernel.data
    for j in range(k):
        out += np.einsum("oc,bcl->bol", kd[:, :, j], padded[:, :, j:j + length])

    def backward_fn(g):
        gb = g[None] if squeeze else g
        gk = np.empty_like(kd)
        gpad = np.zeros_like(padded)
        for j in range(k):
            gk[:, :, j] = np.einsum("bot,bct->oc", gb, padded[:, :, j:j + length])
            gpad[:, :, j:j + length] += np.einsum("oc,bol->bcl", kd[:, :, j], gb)
        gx = gpad[:, :, k - 1:]
        if squeeze:
            gx = gx[0]
        return gx, gk

    return Tensor._result(out[0] if squeeze else out, (x, kernel), backward_fn)
