"""Minimal module/parameter containers and initializers."""
from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def kaiming_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def zeros(rng: np.random.Generator, shape) -> np.ndarray:
    return np.zeros(shape)


class Module:
    """Base class: attributes that are Parameters, Modules, or lists of Modules
    are discovered automatically, in definition order."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen or id(p) in seen:
                raise ValueError(f"duplicate parameter {name!r}")
            seen.update((name, id(p)))
            p.name = name

    def reset_parameters(self, seed: int) -> None:
        """Initialize every parameter from an RNG keyed on (seed, parameter name).

        Keying by name means adding or removing a block never changes the
        initial values of the others.
        """
        self.assign_names()
        for name, p in self.named_parameters():
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            init = p.initializer or zeros
            p.data[...] = init(rng, p.shape)
            p.momentum_buffer[...] = 0.0
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, init=kaiming_normal, bias: bool = True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter((out_ch, in_ch, k, k), init)
        self.bias = Parameter((out_ch,), zeros) if bias else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)
