from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Parameter container with deterministic, insertion-ordered naming."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, np.asarray(value, dtype=np.float64))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        *path, leaf = dotted.split(".")
        mod = self
        for part in path:
            mod = mod._modules[part]
        if leaf not in mod._buffers:
            raise KeyError(dotted)
        object.__setattr__(mod, leaf, np.array(value, dtype=np.float64))

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._modules)), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return self._modules[str(i % len(self._modules) if i < 0 else i)]


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = np.sqrt(1.0 / n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_out, n_in)), requires_grad=True)
        if bias:
            self.bias = Tensor(rng.uniform(-bound, bound, size=(n_out,)), requires_grad=True)
        else:
            self.bias = None

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        x = ag.as_tensor(x)
        ag.check_finite(x, "linear layer")
        return ag.linear(x, self.weight, self.bias)


def linear_forward(x: Tensor, layer: Linear) -> Tensor:
    return layer(x)


class BatchNorm(Module):
    """Feature normalization over the row axis with running statistics."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.scale = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(dim))
        self.register_buffer("running_var", np.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        if n < 1:
            raise ag.ShapeError("feature normalization needs at least one row")
        # a single row has no batch statistics; fall back to the running ones
        if self.training and n > 1:
            mu = x.data.mean(axis=0)
            var = x.data.var(axis=0)
            m = self.momentum
            object.__setattr__(self, "running_mean", (1 - m) * self.running_mean + m * mu)
            object.__setattr__(self, "running_var",
                               (1 - m) * self.running_var + m * var * n / (n - 1))
            return ag.batch_norm(x, self.scale, self.shift, None, None, self.eps)
        return ag.batch_norm(x, self.scale, self.shift, self.running_mean, self.running_var, self.eps)


def feature_normalize(x: Tensor, norm: BatchNorm) -> Tensor:
    return norm(x)


class MLP(Module):
    """Linear layers with optional normalization and ReLU between them.

    The final layer is left linear. Layers followed by normalization carry
    no bias, since the normalization would cancel it.
    """

    def __init__(self, dims: list[int], rng: np.random.Generator, norm: bool = True,
                 final_relu: bool = False):
        super().__init__()
        self.final_relu = final_relu
        last = len(dims) - 2
        self.layers = ModuleList(Linear(a, b, rng, bias=not norm or k == last)
                                 for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])))
        self.norms = ModuleList(BatchNorm(d) for d in dims[1:-1]) if norm else None

    def forward(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                if self.norms is not None:
                    x = self.norms[i](x)
                x = ag.relu(x)
            elif self.final_relu:
                x = ag.relu(x)
        return x
