"""Central-difference gradient checking.

The numeric side only ever calls the forward function, so it stays an
independent oracle for whatever backward pass produced the analytic grads.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn, tensors, step: float = 1e-5) -> list:
    """d fn / d tensor for each tensor, by central differences.

    fn takes no arguments and must read the tensors' current .data; it
    returns a float. Every coordinate of every tensor is perturbed.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            f_plus = fn()
            flat[i] = keep - step
            f_minus = fn()
            flat[i] = keep
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build_loss, tensors, step: float = 1e-5, floor: float = 1e-6) -> float:
    """Run backward once, then compare against central differences.

    build_loss() must construct a fresh scalar-loss Tensor from the current
    tensor data each call. Returns the max relative error over all checked
    tensors.
    """
    loss = build_loss()
    for t in tensors:
        t.grad = None
    loss.backward(leaves=tensors)
    analytic = [t.grad.copy() for t in tensors]
    numeric = numerical_gradient(lambda: build_loss().item(), tensors, step=step)
    return max(relative_error(a, n, floor) for a, n in zip(analytic, numeric))
