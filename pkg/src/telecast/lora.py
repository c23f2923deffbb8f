"""Low-rank adaptation of linear layers.

A wrapped layer computes  y = x @ W + b + (alpha/r) * dropout(x) @ down @ up
with W and b frozen, `down` Gaussian and `up` zero at init so the wrapped
model reproduces the base model exactly until training moves `up`.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field

import numpy as np

from .nn import Linear, Module
from .rng import RngStream
from .tensor import Tensor


class LoraError(RuntimeError):
    pass


class LoraLinear(Module):
    def __init__(self, base: Linear, rank: int = 32, alpha: float = 16.0,
                 dropout_p: float = 0.1, rng: RngStream | None = None):
        super().__init__()
        d_in, d_out = base.in_features, base.out_features
        if not 0 < rank < min(d_in, d_out):
            raise LoraError(f"rank {rank} must satisfy 0 < r < min({d_in}, {d_out})")
        self.base = base
        self.rank = rank
        self.alpha = float(alpha)
        self.dropout_p = float(dropout_p)
        self.scale = self.alpha / self.rank
        init = rng.normal((d_in, rank), 0.0, 1.0 / np.sqrt(rank)) if rng is not None \
            else np.zeros((d_in, rank))
        self.down = Tensor(init, requires_grad=True)
        self.up = Tensor(np.zeros((rank, d_out)), requires_grad=True)
        self.merged = False
        self.dropout_rng: RngStream | None = None
        self._stashed_weight: np.ndarray | None = None
        base.weight.requires_grad = False
        if base.bias is not None:
            base.bias.requires_grad = False

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: Tensor) -> Tensor:
        y = self.base(x)
        if self.merged:
            return y
        delta_in = x.dropout(self.dropout_p, self.training, self.dropout_rng)
        delta = (delta_in @ self.down) @ self.up
        return y + delta * self.scale

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.down.data @ self.up.data)

    def merge(self) -> None:
        """Fold the low-rank delta into the base weight (inference form)."""
        if self.merged:
            raise LoraError("layer is already merged")
        self._stashed_weight = self.base.weight.data.copy()
        self.base.weight.data = self.base.weight.data + self.delta_weight()
        self.merged = True

    def unmerge(self) -> None:
        """Restore the exact pre-merge base weight."""
        if not self.merged:
            raise LoraError("layer is not merged")
        self.base.weight.data = self._stashed_weight
        self._stashed_weight = None
        self.merged = False


@dataclass
class ParamAccount:
    total_params: int
    trainable_params: int
    groups: dict = field(default_factory=dict)   # name -> (total, trainable)

    def trainable_fraction(self) -> float:
        if self.total_params == 0:
            raise ZeroDivisionError("account has no parameters")
        return self.trainable_params / self.total_params

    def group_fractions(self) -> dict:
        return {name: (tr / tot if tot else 0.0)
                for name, (tot, tr) in sorted(self.groups.items())}


def account_parameters(model: Module, group_of=None) -> ParamAccount:
    """Tally totals and trainables, optionally bucketed by group_of(name)."""
    total = trainable = 0
    groups: dict[str, list[int]] = {}
    for name, p in model.named_parameters():
        n = p.size
        total += n
        t = n if p.requires_grad else 0
        trainable += t
        if group_of is not None:
            g = groups.setdefault(group_of(name), [0, 0])
            g[0] += n
            g[1] += t
    return ParamAccount(total_params=total, trainable_params=trainable,
                        groups={k: tuple(v) for k, v in sorted(groups.items())})


def find_linear_layers(model: Module) -> dict:
    return {name: mod for name, mod in model.named_modules()
            if isinstance(mod, Linear) and not isinstance(mod, LoraLinear)}


def inject_lora(model: Module, target_patterns, rank: int, alpha: float,
                dropout_p: float, rng: RngStream) -> list:
    """Wrap every Linear whose name matches a pattern; returns wrapped names.

    Matching uses shell-style wildcards against dotted module paths. A
    pattern that matches nothing is a configuration error.
    """
    linears = find_linear_layers(model)
    matched: dict[str, Linear] = {}
    for pattern in target_patterns:
        hits = fnmatch.filter(linears.keys(), pattern)
        if not hits:
            raise LoraError(f"pattern {pattern!r} matched no linear layer; "
                            f"available: {sorted(linears)}")
        for h in hits:
            matched[h] = linears[h]

    parents = dict(model.named_modules())
    wrapped = []
    for name in sorted(matched):
        parent_name, _, child = name.rpartition(".")
        parent = parents[parent_name] if parent_name else model
        layer = LoraLinear(matched[name], rank=rank, alpha=alpha,
                           dropout_p=dropout_p, rng=rng.split(name))
        parent.replace_child(child, layer)
        wrapped.append(name)
    return wrapped


def lora_modules(model: Module) -> dict:
    return {name: mod for name, mod in model.named_modules()
            if isinstance(mod, LoraLinear)}


def merge_all(model: Module) -> None:
    for mod in lora_modules(model).values():
        mod.merge()


def unmerge_all(model: Module) -> None:
    for mod in lora_modules(model).values():
        mod.unmerge()
