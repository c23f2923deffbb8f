"""Small module system: parameter registration, stable hierarchical names,
trainable flags, and the basic layers shared by the backbone and the
temporal gate."""

from __future__ import annotations

import numpy as np

from .optim import truncated_normal
from .rng import RngStream
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        self.training = False

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def train(self, flag: bool = True):
        self.training = flag
        for child in self._children.values():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self, flag: bool = True):
        """Mark every parameter in the subtree frozen (or trainable)."""
        for _, p in self.named_parameters():
            p.requires_grad = not flag
        return self

    def replace_child(self, name: str, module: "Module") -> None:
        if name not in self._children:
            raise KeyError(f"no child module named {name!r}")
        setattr(self, name, module)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        idx = len(self._items)
        self._items.append(module)
        setattr(self, str(idx), module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


class Linear(Module):
    """y = x @ weight + bias, weight stored (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: RngStream | None = None,
                 bias: bool = True, init_std: float = 0.02):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            w = np.zeros((in_features, out_features))
        else:
            w = truncated_normal((in_features, out_features), rng, std=init_std)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return x.layer_norm(self.eps) * self.gamma + self.beta
