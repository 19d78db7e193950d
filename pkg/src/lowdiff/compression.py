"""Gradient sparsification: top-k / random-k compress, decompress, accumulate."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .errors import DimensionError

INDEX_WIDTH = 4
VALUE_WIDTH = 8


@dataclass(frozen=True, eq=False)
class SparseGradient:
    """``(index, value)`` pairs over a dense vector of length ``dense_len``.

    Doubles as the payload of a differential checkpoint.
    """

    dense_len: int
    ratio: float
    indices: np.ndarray
    values: np.ndarray
    iteration: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        if self.dense_len < 1:
            raise DimensionError("dense_len must be positive")
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio {self.ratio} outside (0, 1]")
        if idx.ndim != 1 or val.shape != idx.shape:
            raise DimensionError("indices and values must be 1-D of equal length")
        if idx.size < 1:
            raise DimensionError("a sparse gradient keeps at least one entry")
        if idx[0] < 0 or idx[-1] >= self.dense_len:
            raise DimensionError("index out of range")
        if idx.size > 1 and not np.all(np.diff(idx) > 0):
            raise DimensionError("indices must be strictly ascending")

    @property
    def k(self) -> int:
        return int(self.indices.size)

    def nominal_bytes(self, index_width: int = INDEX_WIDTH, value_width: int = VALUE_WIDTH) -> int:
        return self.k * (index_width + value_width)

    def same_as(self, other: "SparseGradient") -> bool:
        return (
            self.dense_len == other.dense_len
            and self.iteration == other.iteration
            and np.array_equal(self.indices, other.indices)
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True)
class TopK:
    pass


@dataclass(frozen=True)
class RandomK:
    seed: int = 0


CompressorKind = Union[TopK, RandomK]


def keep_count(dense_len: int, ratio: float) -> int:
    """``max(1, floor(ratio * dense_len))``; the tiny slack absorbs products like 0.29*100."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside (0, 1]")
    return max(1, min(dense_len, int(math.floor(ratio * dense_len + 1e-9))))


def _topk_indices(x: np.ndarray, k: int) -> np.ndarray:
    if k == x.size:
        return np.arange(x.size)
    # primary key: larger magnitude first; secondary: lower index first
    order = np.lexsort((np.arange(x.size), -np.abs(x)))
    return np.sort(order[:k])


def compress(dense, ratio: float, kind: CompressorKind = TopK(), iteration: int = 0) -> SparseGradient:
    x = np.asarray(dense, dtype=np.float64).ravel()
    if x.size == 0:
        raise DimensionError("cannot compress an empty vector")
    k = keep_count(x.size, ratio)
    if isinstance(kind, TopK):
        idx = _topk_indices(x, k)
    elif isinstance(kind, RandomK):
        key = np.array([kind.seed & 0xFFFFFFFFFFFFFFFF, iteration & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        rng = np.random.Generator(np.random.Philox(key=key))
        idx = np.sort(rng.choice(x.size, size=k, replace=False))
    else:
        raise TypeError(f"unknown compressor {kind!r}")
    return SparseGradient(x.size, ratio, idx, x[idx].copy(), iteration)


def decompress(sg: SparseGradient) -> np.ndarray:
    out = np.zeros(sg.dense_len)
    out[sg.indices] = sg.values
    return out


def accumulate(a: SparseGradient, b: SparseGradient) -> SparseGradient:
    """Sum two sparse gradients on the union of their supports.

    Exact zeros produced by cancellation are kept, so the support is always
    the plain union.  The result carries ``b``'s iteration (the later one
    when folding a batch in order).
    """
    if a.dense_len != b.dense_len:
        raise DimensionError(f"dense lengths differ: {a.dense_len} vs {b.dense_len}")
    union = np.union1d(a.indices, b.indices)
    values = np.zeros(union.size)
    values[np.searchsorted(union, a.indices)] = a.values
    values[np.searchsorted(union, b.indices)] += b.values
    return SparseGradient(a.dense_len, union.size / a.dense_len, union, values, max(a.iteration, b.iteration))


def accumulate_all(grads: Iterable[SparseGradient]) -> SparseGradient:
    it = iter(grads)
    try:
        acc = next(it)
    except StopIteration:
        raise ValueError("nothing to accumulate") from None
    for g in it:
        acc = accumulate(acc, g)
    return acc
