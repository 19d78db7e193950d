"""Training producer and checkpointing consumer joined by a bounded reuse queue.

The trainer pushes each synchronized compressed gradient into the queue and
keeps going; it never waits on storage except when the queue is full.  The
checkpointer pulls gradients into a host-side buffer, groups ``batch_size``
of them, and writes each group in a single storage operation.
"""
from __future__ import annotations

import logging
import math
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from .compression import CompressorKind, SparseGradient, TopK, accumulate_all, compress, decompress
from .errors import PipelineError
from .model import AdamConfig, LayeredWorkload, ModelState, adam_step, sync_gradients
from .store import StorageBackend, batched_record, diff_record, full_record

log = logging.getLogger(__name__)


class ReuseQueue:
    """Bounded FIFO handing payload ownership from producer to consumer.

    Items are passed by reference; ``put`` blocks while ``capacity`` items
    are resident and ``get`` blocks while the queue is empty.  After
    ``close`` the consumer drains what is left and then receives ``None``.
    """

    def __init__(self, capacity: int = 16):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False
        self.producer_blocked = threading.Event()
        self.max_residency = 0
        self.max_resident_bytes = 0
        self._resident_bytes = 0

    @staticmethod
    def _nbytes(item) -> int:
        if isinstance(item, SparseGradient):
            return item.nominal_bytes()
        values = getattr(item, "values", None)
        return int(values.nbytes) if values is not None else 0

    def put(self, item, timeout: Optional[float] = None) -> None:
        with self._cond:
            while len(self._items) >= self.capacity and not self._closed:
                self.producer_blocked.set()
                if not self._cond.wait(timeout):
                    raise PipelineError("timed out waiting for queue space")
            self.producer_blocked.clear()
            if self._closed:
                raise PipelineError("reuse queue closed while training was still producing")
            self._items.append(item)
            self._resident_bytes += self._nbytes(item)
            self.max_residency = max(self.max_residency, len(self._items))
            self.max_resident_bytes = max(self.max_resident_bytes, self._resident_bytes)
            self._cond.notify_all()

    def get(self, timeout: Optional[float] = None):
        with self._cond:
            while not self._items and not self._closed:
                if not self._cond.wait(timeout):
                    raise PipelineError("timed out waiting for a gradient")
            if not self._items:
                return None
            item = self._items.popleft()
            self._resident_bytes -= self._nbytes(item)
            self._cond.notify_all()
            return item

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


class BatchMode(str, Enum):
    RECORD = "record"
    ACCUMULATE = "accumulate"


class TrainMode(str, Enum):
    LOWDIFF = "lowdiff"
    NAIVE_DC = "naive-dc"
    FULL_ONLY = "full-only"


@dataclass(frozen=True)
class PipelineConfig:
    full_interval: int = 50
    batch_size: int = 1
    batch_mode: BatchMode = BatchMode.RECORD
    queue_capacity: int = 16
    total_iterations: int = 100
    ratio: float = 0.01
    compressor: CompressorKind = TopK()
    mode: TrainMode = TrainMode.LOWDIFF
    async_full: bool = False

    def __post_init__(self):
        object.__setattr__(self, "batch_mode", BatchMode(self.batch_mode))
        object.__setattr__(self, "mode", TrainMode(self.mode))
        if self.full_interval < 1:
            raise ValueError("full_interval must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.batch_size > self.full_interval:
            raise ValueError("batch_size must not exceed full_interval")
        if self.queue_capacity < 1 or self.total_iterations < 0:
            raise ValueError("queue_capacity must be positive and total_iterations nonnegative")


@dataclass
class TrainingProgress:
    completed: int = 0


@dataclass
class TrainingResult:
    state: ModelState
    digests: dict[int, str]
    fulls: list[str]
    seconds: float


def training_step(
    state: ModelState,
    workload: LayeredWorkload,
    iteration: int,
    ratio: float,
    kind: CompressorKind,
    adam: AdamConfig,
) -> tuple[ModelState, SparseGradient]:
    """backward -> compress per worker -> sync -> decompress -> Adam."""
    local = [
        compress(workload.dense_gradient(state.params, w, iteration), ratio, kind, iteration)
        for w in range(workload.num_workers)
    ]
    synced = sync_gradients(local)
    return adam_step(state, decompress(synced), adam), synced


def run_training(
    workload: LayeredWorkload,
    cfg: PipelineConfig,
    adam: AdamConfig,
    queue: Optional[ReuseQueue],
    backend: Optional[StorageBackend] = None,
    initial_state: Optional[ModelState] = None,
    progress: Optional[TrainingProgress] = None,
    record_digests: bool = True,
    write_base_full: bool = True,
) -> TrainingResult:
    """Producer side.  Full checkpoints hold the post-update state at every
    multiple of ``full_interval``; a base full at the starting iteration
    anchors the first chain."""
    state = initial_state if initial_state is not None else ModelState.zeros(workload.size)
    progress = progress or TrainingProgress()
    digests: dict[int, str] = {}
    fulls: list[str] = []
    pending = []
    pool = ThreadPoolExecutor(max_workers=1) if cfg.async_full else None
    uses_queue = cfg.mode != TrainMode.FULL_ONLY
    if uses_queue and queue is None:
        raise PipelineError(f"mode {cfg.mode.value} needs a reuse queue")

    def save_full(st: ModelState):
        if backend is None:
            return
        rec = full_record(st)
        if pool is None:
            fulls.append(backend.write(rec)[0])
        else:
            fulls.append(rec.object_id)
            pending.append(pool.submit(backend.write, rec))

    t0 = time.perf_counter()
    start = state.step
    if record_digests:
        digests[start] = state.digest()
    try:
        if write_base_full:
            save_full(state)
        for t in range(start + 1, start + cfg.total_iterations + 1):
            new_state, synced = training_step(state, workload, t, cfg.ratio, cfg.compressor, adam)
            if cfg.mode == TrainMode.LOWDIFF:
                queue.put(synced)
            elif cfg.mode == TrainMode.NAIVE_DC:
                delta = new_state.flat() - state.flat()
                queue.put(compress(delta, cfg.ratio, cfg.compressor, t))
            state = new_state
            progress.completed += 1
            if record_digests:
                digests[t] = state.digest()
            if t % cfg.full_interval == 0:
                save_full(state)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    for fut in pending:
        fut.result()
    return TrainingResult(state, digests, fulls, time.perf_counter() - t0)


@dataclass
class ChainSummary:
    """What the checkpointing side persisted."""

    n_diffs: int = 0
    n_fulls: int = 0
    batch_size: int = 1
    diff_writes: int = 0
    bytes_written: int = 0
    last_persisted_iteration: Optional[int] = None
    records: list[str] = field(default_factory=list)
    seconds: float = 0.0


def io_op_count(summary: ChainSummary) -> int:
    """Storage write calls: one per batch of ``batch_size`` diffs plus one per full."""
    return math.ceil(summary.n_diffs / summary.batch_size) + summary.n_fulls


def run_checkpointer(queue: ReuseQueue, cfg: PipelineConfig, backend: StorageBackend) -> ChainSummary:
    """Consumer side: offload, batch, write.

    A batch is flushed when it reaches ``batch_size`` gradients or when it
    ends on a full-checkpoint boundary, so every chain begins right after a
    full checkpoint.  Whatever is buffered at shutdown is written too.
    """
    summary = ChainSummary(batch_size=cfg.batch_size)
    buffer: list[SparseGradient] = []
    t0 = time.perf_counter()

    def flush():
        if not buffer:
            return
        if cfg.batch_size == 1:
            rec = diff_record(buffer[0])
        elif cfg.batch_mode == BatchMode.ACCUMULATE and len(buffer) > 1:
            rec = batched_record([accumulate_all(buffer)], covered=(buffer[0].iteration, buffer[-1].iteration))
        else:
            rec = batched_record(buffer)
        oid, nbytes = backend.write(rec)
        summary.records.append(oid)
        summary.diff_writes += 1
        summary.bytes_written += nbytes
        summary.n_diffs += len(buffer)
        summary.last_persisted_iteration = buffer[-1].iteration
        buffer.clear()

    last = None
    while True:
        g = queue.get()
        if g is None:
            break
        if last is not None and g.iteration != last + 1:
            raise PipelineError(f"gradient for iteration {g.iteration} arrived after {last}")
        last = g.iteration
        buffer.append(g)  # offload: the queue slot is already released
        if len(buffer) >= cfg.batch_size or g.iteration % cfg.full_interval == 0:
            flush()
    flush()
    summary.seconds = time.perf_counter() - t0
    return summary


@dataclass
class PipelineResult:
    training: TrainingResult
    chain: ChainSummary
    max_queue_residency: int
    max_queue_bytes: int

    @property
    def state(self) -> ModelState:
        return self.training.state

    def manifest(self, cfg: PipelineConfig) -> dict:
        """Deterministic run facts (no timings, no scheduling-dependent values)."""
        return {
            "mode": cfg.mode.value,
            "iterations": cfg.total_iterations,
            "full_interval": cfg.full_interval,
            "batch_size": cfg.batch_size,
            "batch_mode": cfg.batch_mode.value,
            "ratio": repr(cfg.ratio),
            "fulls_written": self.chain.n_fulls,
            "diffs_written": self.chain.n_diffs,
            "diff_writes": self.chain.diff_writes,
            "io_ops": self.chain.diff_writes + self.chain.n_fulls,
            "io_ops_formula": io_op_count(self.chain),
            "queue_capacity": cfg.queue_capacity,
            "final_iteration": self.state.step,
            "final_digest": self.state.digest(),
        }

    def runtime_stats(self) -> dict:
        return {
            "max_queue_residency": self.max_queue_residency,
            "max_queue_bytes": self.max_queue_bytes,
            "training_seconds": f"{self.training.seconds:.6f}",
            "checkpointing_seconds": f"{self.chain.seconds:.6f}",
        }


def run_pipeline(
    workload: LayeredWorkload,
    cfg: PipelineConfig,
    adam: AdamConfig,
    backend: StorageBackend,
    initial_state: Optional[ModelState] = None,
    record_digests: bool = True,
) -> PipelineResult:
    """Run trainer and checkpointer as two threads sharing one reuse queue."""
    queue = ReuseQueue(cfg.queue_capacity)
    box: dict = {}

    def consume():
        try:
            box["chain"] = run_checkpointer(queue, cfg, backend)
        except BaseException as exc:  # surfaced in the caller's thread
            box["error"] = exc
            queue.close()

    consumer = threading.Thread(target=consume, name="checkpointer", daemon=True)
    consumer.start()
    try:
        training = run_training(workload, cfg, adam, queue, backend, initial_state, record_digests=record_digests)
    except PipelineError:
        consumer.join()
        if "error" in box:
            raise box["error"]
        raise
    finally:
        queue.close()
    consumer.join()
    if "error" in box:
        raise box["error"]
    chain = box["chain"]
    chain.n_fulls = len(training.fulls)
    return PipelineResult(training, chain, queue.max_residency, queue.max_resident_bytes)


def write_kv(path: Path, items: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def read_kv(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise ValueError(f"malformed line {line!r}")
        out[k.strip()] = v.strip()
    return out
