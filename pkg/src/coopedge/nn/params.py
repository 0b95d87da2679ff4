"""Named parameter storage and dense layers."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .tensor import Tensor, linear, relu


class ParamStore:
    """Named parameter tensors, iterated in sorted-name order.

    Each parameter's gradient accumulator is its ``Tensor.grad``; :meth:`grads`
    materializes zero buffers for parameters the last backward pass did not reach.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self._params if n.startswith(prefix))

    def items(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self.names(prefix):
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {
            n: t.grad if t.grad is not None else np.zeros_like(t.data)
            for n, t in self.items(prefix)
        }

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self._params) - set(state)
        unknown = set(state) - set(self._params)
        if strict and (missing or unknown):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for name, value in state.items():
            if name not in self._params:
                continue
            t = self._params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != t.shape:
                raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
            t.data = value.copy()

    def freeze(self, prefix: str) -> None:
        for _, t in self.items(prefix):
            t.requires_grad = False


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class Linear:
    def __init__(self, store: ParamStore, prefix: str, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = store.add(f"{prefix}/W", glorot_uniform(rng, out_dim, in_dim))
        self.bias = store.add(f"{prefix}/b", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class MLP:
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, store: ParamStore, prefix: str, sizes: Sequence[int], rng: np.random.Generator):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.prefix = prefix
        self.sizes = tuple(int(s) for s in sizes)
        self.layers = [
            Linear(store, f"{prefix}/l{i}", a, b, rng)
            for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:]))
        ]

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def last(self) -> Linear:
        return self.layers[-1]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)
