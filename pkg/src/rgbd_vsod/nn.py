"""Tiny module system: parameter registry, convolution and linear layers."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Base class. Any :class:`Tensor` attribute is a parameter.

    Submodules may be stored directly or inside lists/tuples/dicts.
    Parameters reachable through more than one path are reported once,
    under the first name encountered.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Tensor, Module)):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, (Tensor, Module)):
                        yield f"{name}.{k}", v

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Tensor]]:
        seen = set() if _seen is None else _seen
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield full, value
            elif id(value) not in seen:
                seen.add(id(value))
                yield from value.named_parameters(full + ".", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def modules(self, _seen: set | None = None) -> Iterator["Module"]:
        seen = set() if _seen is None else _seen
        if id(self) in seen:
            return
        seen.add(id(self))
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules(seen)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        ps = self.trainable_parameters() if trainable_only else self.parameters()
        return int(np.sum([p.size for p in ps])) if ps else 0


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    bound = gain * math.sqrt(3.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, dilation: int = 1, groups: int = 1, bias: bool = True,
                 gain: float = 1.0):
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k // 2) if padding is None else padding
        self.groups = groups
        fan_in = cin // groups * k * k
        self.weight = uniform_init(rng, (cout, cin // groups, k, k), fan_in, gain)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                        dilation=self.dilation, groups=self.groups)


class Linear(Module):
    """Channel-first linear map on tokens: ``N x k x L -> N x d x L``."""

    def __init__(self, k: int, d: int, rng: np.random.Generator, bias: bool = True, gain: float = 1.0):
        self.weight = uniform_init(rng, (d, k), k, gain)
        self.bias = Tensor(np.zeros((d, 1)), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = F.matmul(self.weight, x)
        return out + self.bias if self.bias is not None else out


class ChannelNorm(Module):
    """Layer norm over the channel axis of ``N x C x ...`` tensors."""

    def __init__(self, channels: int, spatial_dims: int = 2):
        shape = (channels,) + (1,) * spatial_dims
        self.weight = Tensor(np.ones(shape), requires_grad=True)
        self.bias = Tensor(np.zeros(shape), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, axis=1, weight=self.weight, bias=self.bias)
