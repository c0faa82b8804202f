"""Parameter containers shared by every trainable component."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .autodiff import Tensor, parameter


class Module:
    """Attribute-order registry of parameters and child modules.

    Parameter names are dotted paths (``layers.0.attn_q``) and are stable across
    runs, which checkpoints and the optimizer rely on.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def init_normal(rng: np.random.Generator, shape, std: float, name: str | None = None) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape), name=name)


def init_zeros(shape, name: str | None = None) -> Tensor:
    return parameter(np.zeros(shape), name=name)


def init_ones(shape, name: str | None = None) -> Tensor:
    return parameter(np.ones(shape), name=name)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), name=name)
