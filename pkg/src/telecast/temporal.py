"""Temporal gate: multi-branch causal convolutions over the ocean-index lag
matrix, pooled and projected to a per-channel tanh gate for the backbone's
embedded tokens.

Branches follow the multi-scale recipe: parallel single convolutions of
lengths 1, 3, 4 and 7 plus one stacked 7-3-4 pipeline whose receptive field
of 12 lags spans a full annual cycle of monthly indices.
"""

from __future__ import annotations

import numpy as np

from .nn import Linear, Module, ModuleList
from .optim import truncated_normal
from .rng import RngStream
from .tensor import ShapeError, Tensor, concat, conv_lag

DEFAULT_BRANCHES: tuple[tuple[int, ...], ...] = ((1,), (3,), (4,), (7,), (7, 3, 4))
GATE_POOL_LAGS = 4


def receptive_field(kernel_sizes) -> int:
    """Number of trailing lags one output position of a conv stack can see."""
    sizes = tuple(kernel_sizes)
    if not sizes:
        raise ValueError("a branch needs at least one kernel")
    return 1 + sum(k - 1 for k in sizes)


class ConvBranch(Module):
    """Stack of causal lag convolutions with gelu between (not after) layers."""

    def __init__(self, kernel_sizes, in_channels: int, width: int, rng: RngStream):
        super().__init__()
        self.kernel_sizes = tuple(kernel_sizes)
        self.width = width
        kernels = []
        biases = []
        chans = in_channels
        for i, k in enumerate(self.kernel_sizes):
            kernels.append(Tensor(truncated_normal((width, chans, k), rng.split(f"k{i}")),
                                  requires_grad=True))
            biases.append(Tensor(np.zeros(width), requires_grad=True))
            chans = width
        self.kernels = _TensorList(kernels)
        self.biases = _TensorList(biases)

    def forward(self, oci: Tensor) -> Tensor:
        out = oci
        last = len(self.kernel_sizes) - 1
        for i, _ in enumerate(self.kernel_sizes):
            out = conv_lag(out, self.kernels[i])
            bias = self.biases[i]
            out = out + bias.reshape((self.width, 1))
            if i != last:
                out = out.gelu()
        return out


class _TensorList(Module):
    def __init__(self, tensors):
        super().__init__()
        self._items = list(tensors)
        for i, t in enumerate(self._items):
            setattr(self, str(i), t)

    def __getitem__(self, idx):
        return self._items[idx]


class OciGate(Module):
    """Maps a (n_indices, n_lags) lag matrix to a gate vector in (-1, 1)."""

    def __init__(self, n_indices: int, n_lags: int, embed_dim: int, rng: RngStream,
                 branches=DEFAULT_BRANCHES, width: int = 8):
        super().__init__()
        max_rf = max(receptive_field(b) for b in branches)
        if n_lags < max_rf:
            raise ShapeError(f"lag window {n_lags} is shorter than the largest "
                             f"receptive field {max_rf}")
        self.n_indices = n_indices
        self.n_lags = n_lags
        self.embed_dim = embed_dim
        self.branch_specs = tuple(tuple(b) for b in branches)
        self.branches = ModuleList(
            ConvBranch(spec, n_indices, width, rng.split(f"branch{i}"))
            for i, spec in enumerate(self.branch_specs))
        self.feature_dim = width * len(self.branch_specs)
        # zero init keeps the gate exactly 0 at the start of adaptation
        self.proj = Linear(self.feature_dim, embed_dim, rng=None)

    def features(self, oci: Tensor) -> Tensor:
        """Concatenated branch outputs, shape (..., feature_dim, n_lags)."""
        outs = [branch(oci) for branch in self.branches]
        return concat(outs, axis=-2)

    def forward(self, oci: Tensor) -> Tensor:
        feats = self.features(oci)
        pool = min(GATE_POOL_LAGS, self.n_lags)
        recent = feats[..., self.n_lags - pool:].mean(axis=-1)
        return self.proj(recent).tanh()


def apply_gate(tokens: Tensor, gate: Tensor, mode: str = "residual") -> Tensor:
    """Scale token channels by the gate.

    residual mode multiplies by (1 + g) so a zero gate is the identity;
    multiplicative mode multiplies by g directly.
    """
    if tokens.shape[-1] != gate.shape[-1]:
        raise ShapeError(f"gate dim {gate.shape[-1]} does not match "
                         f"token channels {tokens.shape[-1]}")
    if gate.ndim > 1:
        # one gate vector per leading sample, broadcast over token axes
        g = gate.reshape((gate.shape[0],) + (1,) * (tokens.ndim - 2) + (gate.shape[-1],))
    else:
        g = gate
    if mode == "residual":
        return tokens * (g + 1.0)
    if mode == "multiplicative":
        return tokens * g
    raise ValueError(f"unknown gate mode {mode!r}")
