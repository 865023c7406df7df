"""Parameter containers: a minimal module system plus conv, batch-norm and linear layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Base class; parameters are Tensor attributes, children are Module attributes or lists."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            if key.startswith("buf_") and isinstance(val, np.ndarray):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for key, val in list(vars(m).items()):
                if key.startswith("buf_") and isinstance(val, np.ndarray):
                    setattr(m, key, val.astype(dtype))
        return self


def init_weight(rng: np.random.Generator, shape, fan_in: int, fan_out: int, scheme: str) -> np.ndarray:
    if scheme == "kaiming":
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    elif scheme == "xavier":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return w.astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=(1, 1), rng=None, init="kaiming", name=""):
        kh, kw = kernel
        self.stride = tuple(stride)
        self.padding = (kh // 2, kw // 2)
        self.weight = Tensor(
            init_weight(rng, (kh, kw, cin, cout), kh * kw * cin, kh * kw * cout, init),
            requires_grad=True,
            name=name,
        )

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.buf_mean = np.zeros(channels, np.float32)
        self.buf_var = np.ones(channels, np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.buf_mean, self.buf_var, self.training)


class Identity(Module):
    def __call__(self, x):
        return x


class Linear(Module):
    """y = x W + b with W stored in x rows -> out columns layout (in x out)."""

    def __init__(self, fan_in, fan_out, rng, init="kaiming", bias=True):
        self.weight = Tensor(init_weight(rng, (fan_in, fan_out), fan_in, fan_out, init), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y
