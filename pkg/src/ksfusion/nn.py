"""Parameter containers and the two layer types the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def lecun_normal(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


class Module:
    """Holds parameters as attributes; nested modules and lists are walked in definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ad.DimensionError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data[...] = value

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """Affine map over the last axis; weight is stored as in_features x out_features."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        w = np.zeros((in_features, out_features)) if zero else lecun_normal(rng, in_features, (in_features, out_features))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ad.DimensionError(f"Linear expects {self.in_features} input features, got {x.shape[-1]}")
        return ad.linear(x, self.weight, self.bias)


class Conv3x3(Module):
    """Same-size 3x3 convolution on channels-last maps."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, zero: bool = False):
        shape = (3, 3, in_channels, out_channels)
        w = np.zeros(shape) if zero else lecun_normal(rng, 9 * in_channels, shape)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d_3x3(x, self.weight, self.bias)
