"""Parameter containers and the few layers the backbones need."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, batchnorm, conv2d, matmul, reshape

__all__ = ["Parameter", "Module", "Conv2d", "Linear", "BatchNorm"]


class Parameter(Tensor):
    """A trainable leaf. ``decay`` marks whether weight decay applies to it."""

    def __init__(self, data, decay: bool = True, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.decay = decay


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{key}.{i}", item
            elif isinstance(value, (Module, Parameter)):
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, np.ndarray):
                yield f"{prefix}{key}", value
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dilation=1, bias=False):
        a, b = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, a, b), cin * a * b))
        self.bias = Parameter(np.zeros(cout), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, self.stride, self.dilation, self.padding)
        if self.bias is not None:
            out = out + reshape(self.bias, (1, -1, 1, 1))
        return out


class Linear(Module):
    """``y = x @ W.T + b`` with ``W`` stored as [out, in]."""

    def __init__(self, fan_in: int, fan_out: int, rng, bias: bool = True):
        self.weight = Parameter(fan_in_uniform(rng, (fan_out, fan_in), fan_in))
        self.bias = Parameter(fan_in_uniform(rng, (fan_out,), fan_in), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight.transpose())
        if self.bias is not None:
            out = out + self.bias
        return out


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels), decay=False)
        self.beta = Parameter(np.zeros(channels), decay=False)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )
