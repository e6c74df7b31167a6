"""Parameter containers and the layer modules built on :mod:`.functional`."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor, require


class Parameter(Tensor):
    """A trainable leaf tensor. Its name is assigned by the owning module tree."""

    __slots__ = ("name",)

    def __init__(self, data, requires_grad: bool = True, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        super().__init__(arr, requires_grad=requires_grad)
        self.name = name


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, slope: float = math.sqrt(5.0)) -> np.ndarray:
    """Fan-in Kaiming-uniform; the default leaky slope sqrt(5) gives the bound ``1 / sqrt(fan_in)``."""
    bound = math.sqrt(6.0 / ((1.0 + slope * slope) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


def _walk_sequence(items, name: str):
    for i, item in enumerate(items):
        if isinstance(item, Module):
            yield from item.named_parameters(f"{name}.{i}.")
        elif isinstance(item, Parameter):
            yield f"{name}.{i}", item
        elif isinstance(item, (list, tuple)):
            yield from _walk_sequence(item, f"{name}.{i}")


class Module:
    """Minimal module tree: parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                yield from _walk_sequence(value, name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            require(not missing and not extra, f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name in own:
                p = own[name]
                require(p.shape == arr.shape, f"shape mismatch for {name}: {p.shape} vs {arr.shape}")
                p.data = np.array(arr, dtype=p.dtype)

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def set_requires_grad(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, din: int, dout: int, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(kaiming_uniform(rng, (dout, din), din))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


def pick_groups(channels: int, preferred: int = 8) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-5):
        self.groups = groups if groups is not None else pick_groups(channels)
        require(channels % self.groups == 0, f"GroupNorm: {channels} channels not divisible by {self.groups}")
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class Attention(Module):
    """Multi-head attention; ``context=None`` attends over the query itself."""

    def __init__(self, dim: int, context_dim: int | None = None, heads: int = 4,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        cdim = context_dim if context_dim is not None else dim
        self.heads = heads
        self.wq = Parameter(kaiming_uniform(rng, (dim, dim), dim))
        self.wk = Parameter(kaiming_uniform(rng, (dim, cdim), cdim))
        self.wv = Parameter(kaiming_uniform(rng, (dim, cdim), cdim))
        self.wo = Parameter(kaiming_uniform(rng, (dim, dim), dim))
        self.bo = Parameter(np.zeros(dim))

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        ctx = x if context is None else context
        return F.attention(x, ctx, self.heads, self.wq, self.wk, self.wv, self.wo, self.bo)
