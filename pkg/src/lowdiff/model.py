"""Synthetic data-parallel training workload and the Adam optimizer.

The workload is a layered linear least-squares problem split across
workers: worker ``w`` owns a design matrix ``A_w`` and targets ``b_w`` and
its local loss is ``0.5 * ||A_w x - b_w||^2``.  Gradients are exact and
cheap, which lets recovery be checked bit for bit.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .compression import SparseGradient
from .errors import DimensionError, NumericError


@dataclass(frozen=True, eq=False)
class ModelState:
    """Parameters plus Adam moments.  Treated as an immutable value."""

    params: np.ndarray
    moment1: np.ndarray
    moment2: np.ndarray
    step: int = 0

    def __post_init__(self):
        n = self.params.shape[0]
        if n < 1:
            raise DimensionError("model state must have at least one parameter")
        if self.moment1.shape != (n,) or self.moment2.shape != (n,):
            raise DimensionError("params and moments must share length")
        if self.step < 0:
            raise ValueError("step must be nonnegative")

    @classmethod
    def zeros(cls, size: int) -> "ModelState":
        z = np.zeros(size, dtype=np.float64)
        return cls(z, z.copy(), z.copy(), 0)

    @property
    def size(self) -> int:
        return int(self.params.shape[0])

    def copy(self) -> "ModelState":
        return ModelState(self.params.copy(), self.moment1.copy(), self.moment2.copy(), self.step)

    def flat(self) -> np.ndarray:
        """Concatenated ``[params, moment1, moment2]`` (length 3 * size)."""
        return np.concatenate([self.params, self.moment1, self.moment2])

    @classmethod
    def from_flat(cls, flat: np.ndarray, step: int) -> "ModelState":
        if flat.shape[0] % 3:
            raise DimensionError("flat state length must be a multiple of 3")
        n = flat.shape[0] // 3
        flat = np.asarray(flat, dtype=np.float64)
        return cls(flat[:n].copy(), flat[n:2 * n].copy(), flat[2 * n:].copy(), step)

    def canonical_bytes(self) -> bytes:
        le = np.dtype("<f8")
        return b"".join(
            [
                struct.pack("<QQ", self.size, self.step),
                self.params.astype(le, copy=False).tobytes(),
                self.moment1.astype(le, copy=False).tobytes(),
                self.moment2.astype(le, copy=False).tobytes(),
            ]
        )

    def digest(self) -> str:
        """SHA-256 hex digest of the canonical little-endian serialization."""
        return hashlib.sha256(self.canonical_bytes()).hexdigest()

    def bit_equal(self, other: "ModelState") -> bool:
        return self.step == other.step and self.canonical_bytes() == other.canonical_bytes()


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    bias_correction: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def adam_step(state: ModelState, grad: np.ndarray, cfg: AdamConfig) -> ModelState:
    """One Adam update.  Returns a new state; ``state`` is left untouched."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (state.size,):
        raise DimensionError(f"gradient length {grad.shape} != model size {state.size}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("gradient contains non-finite values")

    t = state.step + 1
    m = cfg.beta1 * state.moment1 + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.moment2 + (1.0 - cfg.beta2) * (grad * grad)
    if cfg.bias_correction:
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
    else:
        m_hat, v_hat = m, v
    params = state.params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return ModelState(params, m, v, t)


@dataclass(frozen=True)
class LayerGradient:
    layer_index: int
    values: np.ndarray
    iteration: int


def _philox(seed: int, worker: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, worker], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(eq=False)
class LayeredWorkload:
    """Per-worker least-squares data, split column-wise into layers.

    ``A_w`` and ``b_w`` come from a counter-based generator keyed by
    ``(seed, worker)``, so any worker's data can be rebuilt in isolation.
    Every iteration uses the worker's full local data.
    """

    layer_sizes: Sequence[int]
    design_matrix_seed: int = 0
    target_seed: int = 1
    num_workers: int = 1
    rows_per_worker: int = 16
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if not self.layer_sizes or any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.num_workers < 1 or self.rows_per_worker < 1:
            raise ValueError("num_workers and rows_per_worker must be positive")
        offsets = np.cumsum((0,) + self.layer_sizes)
        self._offsets = tuple(int(o) for o in offsets)

    @property
    def size(self) -> int:
        return self._offsets[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes)

    def layer_slice(self, layer: int) -> slice:
        return slice(self._offsets[layer], self._offsets[layer + 1])

    def data(self, worker: int) -> tuple[list[np.ndarray], np.ndarray]:
        """``(per-layer column blocks of A_w, b_w)``."""
        if not 0 <= worker < self.num_workers:
            raise DimensionError(f"worker {worker} outside [0, {self.num_workers})")
        hit = self._cache.get(worker)
        if hit is not None:
            return hit
        rows = self.rows_per_worker
        a = _philox(self.design_matrix_seed, worker).standard_normal((rows, self.size))
        a /= np.sqrt(rows)
        b = _philox(self.target_seed, worker).standard_normal(rows)
        blocks = [np.ascontiguousarray(a[:, self.layer_slice(i)]) for i in range(self.num_layers)]
        self._cache[worker] = (blocks, b)
        return blocks, b

    def residual(self, params: np.ndarray, worker: int) -> np.ndarray:
        blocks, b = self.data(worker)
        r = -b.copy()
        for i, blk in enumerate(blocks):
            r += blk @ params[self.layer_slice(i)]
        return r

    def loss(self, params: np.ndarray, worker: int) -> float:
        r = self.residual(np.asarray(params, dtype=np.float64), worker)
        return 0.5 * float(r @ r)

    def dense_gradient(self, params: np.ndarray, worker: int, iteration: int = 0) -> np.ndarray:
        grad = np.empty(self.size)
        for lg in backward_params(params, self, worker, iteration):
            grad[self.layer_slice(lg.layer_index)] = lg.values
        return grad


def backward_params(
    params: np.ndarray, workload: LayeredWorkload, worker: int, iteration: int
) -> Iterator[LayerGradient]:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (workload.size,):
        raise DimensionError(f"params length {params.shape} != workload size {workload.size}")
    blocks, _ = workload.data(worker)
    r = workload.residual(params, worker)
    for layer in reversed(range(workload.num_layers)):
        yield LayerGradient(layer, blocks[layer].T @ r, iteration)


def backward(
    state: ModelState, workload: LayeredWorkload, worker: int, iteration: int
) -> Iterator[LayerGradient]:
    """Yield the worker's layer gradients, last layer first."""
    return backward_params(state.params, workload, worker, iteration)


def assemble_layers(pieces: Sequence[LayerGradient], workload: LayeredWorkload) -> np.ndarray:
    """Reassemble a dense gradient from layer pieces in any arrival order."""
    grad = np.empty(workload.size)
    seen = set()
    for lg in pieces:
        if lg.layer_index in seen:
            raise DimensionError(f"duplicate layer {lg.layer_index}")
        seen.add(lg.layer_index)
        grad[workload.layer_slice(lg.layer_index)] = lg.values
    if len(seen) != workload.num_layers:
        missing = sorted(set(range(workload.num_layers)) - seen)
        raise DimensionError(f"missing layers {missing}")
    return grad


def sync_gradients(per_worker: Sequence[SparseGradient]) -> SparseGradient:
    """Allgather-then-average: mean over workers on the union of supports."""
    if not per_worker:
        raise ValueError("no gradients to synchronize")
    first = per_worker[0]
    for g in per_worker[1:]:
        if g.dense_len != first.dense_len:
            raise DimensionError("workers disagree on dense length")
        if g.iteration != first.iteration:
            raise ValueError("workers disagree on iteration")
    if len(per_worker) == 1:
        return first
    total = np.zeros(first.dense_len)
    for g in per_worker:
        np.add.at(total, g.indices, g.values)
    support = np.unique(np.concatenate([g.indices for g in per_worker]))
    values = total[support] / len(per_worker)
    return SparseGradient(
        dense_len=first.dense_len,
        ratio=len(support) / first.dense_len,
        indices=support.astype(np.int64),
        values=values,
        iteration=first.iteration,
    )
