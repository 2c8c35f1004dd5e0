"""Parameter containers: a Module base with parameter discovery, plus Linear and MLP."""

from __future__ import annotations

import copy
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Tensor


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


class Module:
    """Anything owning tensors.  Trainable tensors are found by walking attributes."""

    def parameters(self) -> list[Tensor]:
        seen: set[int] = set()
        out: list[Tensor] = []
        for p in self._walk(set()):
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def _walk(self, visited: set) -> Iterator[Tensor]:
        if id(self) in visited:
            return
        visited.add(id(self))
        for value in vars(self).values():
            yield from _walk_value(value, visited)

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(params) != len(arrays):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.shape != np.shape(a):
                raise ValueError(f"shape mismatch {p.shape} vs {np.shape(a)}")
            p.data[...] = a

    def copy_from(self, other: "Module") -> None:
        self.load_state(other.state())

    def clone(self):
        return copy.deepcopy(self)


def _walk_value(value, visited) -> Iterator[Tensor]:
    if isinstance(value, Tensor):
        if value.requires_grad and value.is_leaf:
            yield value
    elif isinstance(value, Module):
        yield from value._walk(visited)
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _walk_value(v, visited)
    elif isinstance(value, dict):
        for v in value.values():
            yield from _walk_value(v, visited)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng=None, bias: bool = True):
        rng = _rng(rng)
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)).astype(DTYPE), requires_grad=True)
        self.bias = (
            Tensor(rng.uniform(-bound, bound, (n_out,)).astype(DTYPE), requires_grad=True) if bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


_ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu}


class MLP(Module):
    def __init__(self, sizes: Sequence[int], activation: str = "tanh", rng=None, out_scale: Optional[float] = None):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        rng = _rng(rng)
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        if out_scale is not None:
            self.layers[-1].weight.data *= DTYPE(out_scale)
            if self.layers[-1].bias is not None:
                self.layers[-1].bias.data[...] = 0.0
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            x = act(layer(x))
        return self.layers[-1](x)
