"""Rebuild model state from a full checkpoint plus its differential chain.

Serial recovery loads the full state and replays one Adam step per stored
gradient.  Parallel recovery loads and decompresses the chain concurrently
and merges units in a balanced binary tree before touching the base state.

Two merge semantics exist.  ``PARALLEL_EXACT`` merges by ordered
concatenation of gradient lists, then replays every gradient, so it is
bit-identical to serial recovery.  ``PARALLEL_ACCUMULATED`` merges by summing
sparse gradients and applies one Adam step per surviving unit; it is an
approximation because Adam is stateful.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence, TypeVar


from .compression import SparseGradient, accumulate, accumulate_all, decompress
from .errors import ChainGapError, DimensionError
from .model import AdamConfig, ModelState, adam_step
from .store import Chain, StorageBackend, list_chain

T = TypeVar("T")


class RecoveryMode(str, Enum):
    SERIAL = "serial"
    PARALLEL_EXACT = "parallel-exact"
    PARALLEL_ACCUMULATED = "parallel-accumulated"


@dataclass(frozen=True)
class RecoveryPlan:
    backend: StorageBackend
    chain: Chain
    mode: RecoveryMode = RecoveryMode.SERIAL

    def __post_init__(self):
        expected = self.chain.base.header.iteration + 1
        for e in self.chain.diffs:
            lo, hi = e.header.covered
            if lo != expected:
                raise ChainGapError(f"plan expects iteration {expected}, unit {e.object_id} starts at {lo}")
            expected = hi + 1

    @property
    def base_iteration(self) -> int:
        return self.chain.base.header.iteration

    @property
    def target_iteration(self) -> int:
        return self.chain.end_iteration

    @property
    def n_units(self) -> int:
        return len(self.chain.diffs)


def plan_recovery(backend: StorageBackend, up_to_iteration: int, mode=RecoveryMode.SERIAL) -> RecoveryPlan:
    return RecoveryPlan(backend, list_chain(backend, up_to_iteration), RecoveryMode(mode))


def apply_gradient(state: ModelState, g: SparseGradient, adam: AdamConfig) -> ModelState:
    """Merge one differential into ``state``.

    A gradient over the parameters replays Adam.  A differential spanning
    the whole state (``3 * size`` entries, as naive differential
    checkpointing writes) is added to ``[params, moment1, moment2]``.
    """
    if g.dense_len == state.size:
        return adam_step(state, decompress(g), adam)
    if g.dense_len == 3 * state.size:
        return ModelState.from_flat(state.flat() + decompress(g), state.step + 1)
    raise DimensionError(f"differential of length {g.dense_len} does not fit a model of size {state.size}")


def recover_serial(plan: RecoveryPlan, adam: AdamConfig) -> ModelState:
    state = plan.backend.read(plan.chain.base.object_id).state
    for entry in plan.chain.diffs:
        for g in plan.backend.read(entry.object_id).gradients:
            state = apply_gradient(state, g, adam)
    return state


def merge_tree_depth(n: int) -> int:
    """Rounds of pairwise merging needed to fold ``n`` units: ``ceil(log2 n)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return (n - 1).bit_length()


def base_path_merges(n: int) -> int:
    """Merges touching the full checkpoint when the first differential is
    merged into it while the remaining ones are folded pairwise in
    parallel, followed by one final merge."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return min(n, 2)


def tree_merge(items: Sequence[T], merge: Callable[[T, T], T], pool: ThreadPoolExecutor) -> tuple[T, int]:
    """Fold ``items`` by merging adjacent pairs level by level.

    Returns the result and the number of levels.  Merge order depends only
    on position, never on task completion order.
    """
    level = list(items)
    if not level:
        raise ValueError("nothing to merge")
    rounds = 0
    while len(level) > 1:
        futures = [pool.submit(merge, level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        carry = [level[-1]] if len(level) % 2 else []
        level = [f.result() for f in futures] + carry
        rounds += 1
    return level[0], rounds


@dataclass(frozen=True)
class MergeStats:
    units: int
    tree_rounds: int
    base_merges: int
    adam_steps: int


def _replay(state: ModelState, grads: Sequence[SparseGradient], adam: AdamConfig) -> ModelState:
    for g in grads:
        state = apply_gradient(state, g, adam)
    return state


def parallel_recovery(plan: RecoveryPlan, adam: AdamConfig, workers: int = 4) -> tuple[ModelState, MergeStats]:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    mode = plan.mode if plan.mode != RecoveryMode.SERIAL else RecoveryMode.PARALLEL_EXACT
    backend = plan.backend
    with ThreadPoolExecutor(max_workers=workers) as pool:
        base_f = pool.submit(lambda: backend.read(plan.chain.base.object_id).state)
        unit_fs = [pool.submit(lambda oid=e.object_id: backend.read(oid).gradients) for e in plan.chain.diffs]
        units = [f.result() for f in unit_fs]
        base = base_f.result()
        n = len(units)
        if n == 0:
            return base, MergeStats(0, 0, 0, 0)

        if mode == RecoveryMode.PARALLEL_EXACT:
            merged, rounds = tree_merge(units, lambda a, b: list(a) + list(b), pool)
            state = _replay(base, merged, adam)
            return state, MergeStats(n, rounds, 1, len(merged))

        # summed units: the first one goes straight into the base while the
        # rest are folded in parallel, then one final merge
        summed = list(pool.map(accumulate_all, units))
        head = pool.submit(apply_gradient, base, summed[0], adam)
        rounds = 0
        rest = None
        if n > 1:
            rest, rounds = tree_merge(summed[1:], accumulate, pool)
        state = head.result()
        steps = 1
        if rest is not None:
            state = apply_gradient(state, rest, adam)
            steps += 1
        return state, MergeStats(n, rounds, base_path_merges(n), steps)


def recover_parallel(plan: RecoveryPlan, adam: AdamConfig, workers: int = 4) -> ModelState:
    return parallel_recovery(plan, adam, workers)[0]


def recover(backend: StorageBackend, up_to_iteration: int, adam: AdamConfig, mode=RecoveryMode.SERIAL, workers: int = 4) -> tuple[ModelState, int]:
    """Recover the latest reachable state at or before ``up_to_iteration``.

    Returns the state and the iteration it corresponds to.
    """
    plan = plan_recovery(backend, up_to_iteration, mode)
    if plan.mode == RecoveryMode.SERIAL:
        state = recover_serial(plan, adam)
    else:
        state = recover_parallel(plan, adam, workers)
    return state, plan.target_iteration
