"""Uncompressed variant: layer-wise gradient reuse into a host-side replica.

Training synchronizes each layer's gradient as soon as backward produces it
and hands the synchronized piece to the replica updater without copying.
The updater snapshots pieces on a small pool, waits until an iteration is
complete, and applies the same Adam step to its own copy of the model.
Persistence writes immutable snapshots of the replica from a third thread,
so no differential records exist in this mode.
"""
from __future__ import annotations

import math
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import MissingCheckpointError, PipelineError
from .model import AdamConfig, LayerGradient, LayeredWorkload, ModelState, adam_step, backward
from .pipeline import ReuseQueue, TrainingProgress
from .store import Kind, StorageBackend, full_record


def sync_layer(pieces: list[np.ndarray]) -> np.ndarray:
    """Mean over workers, summed in worker order."""
    if len(pieces) == 1:
        return pieces[0]
    acc = pieces[0].copy()
    for p in pieces[1:]:
        acc += p
    return acc / len(pieces)


@dataclass
class PlusTrainingResult:
    state: ModelState
    digests: dict[int, str]
    seconds: float


def run_training_plus(
    workload: LayeredWorkload,
    adam: AdamConfig,
    queue: Optional[ReuseQueue],
    iterations: int,
    initial_state: Optional[ModelState] = None,
    pool_width: int = 4,
    shuffle_seed: Optional[int] = None,
    progress: Optional[TrainingProgress] = None,
    record_digests: bool = True,
) -> PlusTrainingResult:
    """Per layer, last layer first: dispatch a sync task and enqueue its
    result; then wait for every layer and take one Adam step.

    ``shuffle_seed`` permutes the enqueue order within each iteration to
    mimic a pool finishing out of order.
    """
    state = initial_state if initial_state is not None else ModelState.zeros(workload.size)
    progress = progress or TrainingProgress()
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    digests = {state.step: state.digest()} if record_digests else {}
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=pool_width) as pool:
        for t in range(state.step + 1, state.step + iterations + 1):
            per_layer: dict[int, list[np.ndarray]] = {}
            for w in range(workload.num_workers):
                for lg in backward(state, workload, w, t):
                    per_layer.setdefault(lg.layer_index, []).append(lg.values)
            order = list(reversed(range(workload.num_layers)))
            handles = {layer: pool.submit(sync_layer, per_layer[layer]) for layer in order}
            if rng is not None:
                order = [order[i] for i in rng.permutation(len(order))]
            synced = {}
            for layer in order:
                values = handles[layer].result()
                synced[layer] = values
                if queue is not None:
                    queue.put(LayerGradient(layer, values, t))
            grad = np.concatenate([synced[i] for i in range(workload.num_layers)])
            state = adam_step(state, grad, adam)
            progress.completed += 1
            if record_digests:
                digests[t] = state.digest()
    return PlusTrainingResult(state, digests, time.perf_counter() - t0)


class CpuReplica:
    """Host-memory mirror of the model, advanced with the training Adam math."""

    def __init__(self, initial: ModelState, workload: LayeredWorkload, adam: AdamConfig, snapshot_width: int = 2):
        self.state = initial.copy()
        self.workload = workload
        self.adam = adam
        self.snapshot_width = snapshot_width
        self.last_applied_iteration = initial.step
        self.poisoned = False
        self.history: dict[int, str] = {}
        self._staging: dict[int, dict[int, Future]] = {}

    def stage(self, lg: LayerGradient, pool: ThreadPoolExecutor) -> None:
        if lg.iteration <= self.last_applied_iteration:
            raise PipelineError(f"layer {lg.layer_index} for already applied iteration {lg.iteration}")
        slot = self._staging.setdefault(lg.iteration, {})
        if lg.layer_index in slot:
            raise PipelineError(f"duplicate layer {lg.layer_index} for iteration {lg.iteration}")
        slot[lg.layer_index] = pool.submit(np.array, lg.values, dtype=np.float64, copy=True)

    def drain(self, record_digest: bool = True) -> list[int]:
        """Apply every staged iteration that is complete, in order."""
        applied = []
        L = self.workload.num_layers
        while True:
            nxt = self.last_applied_iteration + 1
            slot = self._staging.get(nxt)
            if slot is None or len(slot) < L:
                return applied
            # iteration barrier: all snapshot tasks of this iteration finish first
            pieces = [slot[i].result() for i in range(L)]
            del self._staging[nxt]
            self.state = adam_step(self.state, np.concatenate(pieces), self.adam)
            self.last_applied_iteration = nxt
            if record_digest:
                self.history[nxt] = self.state.digest()
            applied.append(nxt)

    @property
    def incomplete(self) -> bool:
        return bool(self._staging)


@dataclass
class ReplicaResult:
    replica: CpuReplica
    persisted: list[str] = field(default_factory=list)
    seconds: float = 0.0


def choose_persist_interval(persist_seconds: float, iter_seconds: float) -> int:
    """Smallest interval (iterations) whose duration covers one persist."""
    if iter_seconds <= 0:
        raise ValueError("iter_seconds must be positive")
    return max(1, math.ceil(persist_seconds / iter_seconds - 1e-12))


def run_replica(
    queue: ReuseQueue,
    replica: CpuReplica,
    persist_interval: Optional[int],
    backend: Optional[StorageBackend],
    stop_after: Optional[int] = None,
    record_digests: bool = True,
) -> ReplicaResult:
    """Consume layer gradients, keep the replica current, persist snapshots.

    Snapshots at iteration boundaries are immutable states, so the
    persister never races the updater.  ``stop_after`` stops applying
    updates past that iteration (pieces are still drained from the queue),
    standing in for an updater that fell behind when training died.
    """
    result = ReplicaResult(replica)
    t0 = time.perf_counter()
    handoff = ReuseQueue(capacity=2)
    errors: list[BaseException] = []

    def persist():
        try:
            while True:
                snap = handoff.get()
                if snap is None:
                    return
                result.persisted.append(backend.write(full_record(snap))[0])
        except BaseException as exc:
            errors.append(exc)

    persister = None
    if persist_interval and backend is not None:
        persister = threading.Thread(target=persist, name="persister", daemon=True)
        persister.start()
    try:
        with ThreadPoolExecutor(max_workers=replica.snapshot_width) as pool:
            while True:
                lg = queue.get()
                if lg is None:
                    break
                if stop_after is not None and lg.iteration > stop_after:
                    continue
                replica.stage(lg, pool)
                for t in replica.drain(record_digests):
                    if persister is not None and t % persist_interval == 0:
                        handoff.put(replica.state)
    finally:
        handoff.close()
        if persister is not None:
            persister.join()
    if errors:
        raise errors[0]
    result.seconds = time.perf_counter() - t0
    return result


def recover_software(replica: CpuReplica, backend: Optional[StorageBackend] = None) -> ModelState:
    """Restore from the replica (no storage reads).  A poisoned or partially
    staged replica falls back to the latest persisted checkpoint."""
    if replica.poisoned:
        if backend is None:
            raise PipelineError("replica is unusable and no backend was given for fallback")
        return recover_hardware(backend)
    return replica.state.copy()


def latest_full_id(backend: StorageBackend) -> str:
    best = None
    for oid in backend.object_ids():
        h = backend.read_header(oid)
        if h.kind == Kind.FULL and (best is None or h.iteration > best[0]):
            best = (h.iteration, oid)
    if best is None:
        raise MissingCheckpointError(f"no persisted full checkpoint in {backend.root}")
    return best[1]


def recover_hardware(backend: StorageBackend) -> ModelState:
    return backend.read(latest_full_id(backend)).state


@dataclass
class PlusResult:
    training: PlusTrainingResult
    replica: ReplicaResult

    @property
    def state(self) -> ModelState:
        return self.training.state

    def manifest(self, iterations: int, persist_interval: Optional[int]) -> dict:
        return {
            "mode": "plus",
            "iterations": iterations,
            "persist_interval": persist_interval or 0,
            "fulls_written": len(self.replica.persisted),
            "diffs_written": 0,
            "io_ops": len(self.replica.persisted),
            "replica_iteration": self.replica.replica.last_applied_iteration,
            "final_iteration": self.state.step,
            "final_digest": self.state.digest(),
            "replica_digest": self.replica.replica.state.digest(),
        }


def run_plus(
    workload: LayeredWorkload,
    adam: AdamConfig,
    backend: Optional[StorageBackend],
    iterations: int,
    persist_interval: Optional[int] = 10,
    queue_capacity: int = 64,
    initial_state: Optional[ModelState] = None,
    shuffle_seed: Optional[int] = None,
    pool_width: int = 4,
    record_digests: bool = True,
) -> PlusResult:
    initial = initial_state if initial_state is not None else ModelState.zeros(workload.size)
    replica = CpuReplica(initial, workload, adam)
    queue = ReuseQueue(queue_capacity)
    box: dict = {}

    def consume():
        try:
            box["replica"] = run_replica(queue, replica, persist_interval, backend, record_digests=record_digests)
        except BaseException as exc:
            box["error"] = exc
            queue.close()

    consumer = threading.Thread(target=consume, name="replica", daemon=True)
    consumer.start()
    try:
        training = run_training_plus(
            workload, adam, queue, iterations, initial, pool_width, shuffle_seed, record_digests=record_digests
        )
    finally:
        queue.close()
        consumer.join()
    if "error" in box:
        raise box["error"]
    return PlusResult(training, box["replica"])
