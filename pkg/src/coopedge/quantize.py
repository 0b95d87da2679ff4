"""Uniform quantizer with a clipped straight-through gradient, bit accounting and wire packing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn.tensor import Tensor, record


@dataclass(frozen=True)
class QuantizerSpec:
    n: int  # bits per dimension
    d: int  # dimensions

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError(f"quantizer needs n >= 1 and d >= 1, got n={self.n}, d={self.d}")

    @property
    def num_levels(self) -> int:
        return 2**self.n

    @property
    def levels(self) -> np.ndarray:
        return level_values(self.n)

    @property
    def bit_cost(self) -> int:
        return bit_cost(self)


@dataclass
class QuantizedCode:
    indices: np.ndarray  # int64, shape [..., d]
    dequantized: np.ndarray  # float64, same shape
    n: int

    @property
    def d(self) -> int:
        return self.indices.shape[-1]

    @property
    def bit_cost(self) -> int:
        return self.n * self.d


def level_values(n: int) -> np.ndarray:
    count = 2**n
    return -1.0 + 2.0 * np.arange(count) / (count - 1)


def bit_cost(spec: QuantizerSpec) -> int:
    if spec.n < 1 or spec.d < 1:
        raise ValueError("bit cost needs n >= 1 and d >= 1")
    return spec.n * spec.d


def quantize_indices(v: np.ndarray, n: int) -> np.ndarray:
    """Nearest level index after clamping to [-1, 1]; exact ties go to the lower index."""
    top = 2**n - 1
    pos = (np.clip(v, -1.0, 1.0) + 1.0) * (top / 2.0)
    return np.clip(np.ceil(pos - 0.5), 0, top).astype(np.int64)


def dequantize(indices: np.ndarray, n: int) -> np.ndarray:
    return -1.0 + 2.0 * np.asarray(indices, dtype=np.float64) / (2**n - 1)


def quantize(v, spec: QuantizerSpec | int) -> QuantizedCode:
    n = spec.n if isinstance(spec, QuantizerSpec) else int(spec)
    data = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    idx = quantize_indices(data, n)
    return QuantizedCode(idx, dequantize(idx, n), n)


def quantize_backward(upstream_grad: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Clipped-identity surrogate: pass the gradient where |v| <= 1, zero elsewhere."""
    return np.where(np.abs(v) <= 1.0, upstream_grad, 0.0)


def quantize_ste(v: Tensor, n: int) -> tuple[Tensor, np.ndarray]:
    """Differentiable quantizer node: forward emits level values, backward is the STE.

    Returns the dequantized tensor and the integer indices.
    """
    idx = quantize_indices(v.data, n)
    out = record(dequantize(idx, n), (v,), lambda g: (quantize_backward(g, v.data),))
    return out, idx


def pack_bits(indices, n: int) -> bytes:
    """MSB-first concatenation of n-bit fields, zero-padded to a whole byte."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= 2**n):
        raise ValueError(f"index out of range for {n}-bit fields")
    if idx.size == 0:
        return b""
    shifts = np.arange(n - 1, -1, -1)
    bits = ((idx[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(bits).tobytes()


def unpack_bits(payload: bytes, n: int, d: int) -> np.ndarray:
    needed = (n * d + 7) // 8
    if len(payload) < needed:
        raise ValueError(f"truncated payload: need {needed} bytes, got {len(payload)}")
    if d == 0:
        return np.zeros(0, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(payload[:needed], dtype=np.uint8))[: n * d]
    weights = 1 << np.arange(n - 1, -1, -1)
    return (bits.reshape(d, n).astype(np.int64) * weights).sum(axis=1)
