"""Discrete-event failure injection for checkpointing policies.

A job needs ``T`` hours of productive training.  Failures arrive on the
wall clock with exponential inter-arrival times.  On each failure the job
rolls back to its last recoverable point, pays a recovery time, and redoes
the lost work.  All time is in hours; GPU-hours are wall hours times ``N``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .planner import SystemParams, optimal_config


class FailureKind(str, Enum):
    HARDWARE = "hardware"
    SOFTWARE = "software"


@dataclass(frozen=True)
class FailureEvent:
    time: float
    kind: FailureKind


@dataclass(frozen=True)
class FailureTrace:
    events: tuple[FailureEvent, ...]
    horizon: float
    seed: int

    def __post_init__(self):
        prev = -math.inf
        for e in self.events:
            if not (prev < e.time <= self.horizon):
                raise ValueError("failure times must be strictly increasing and within the horizon")
            prev = e.time


def generate_trace(mtbf: float, horizon: float, software_fraction: float = 0.5, seed: int = 0) -> FailureTrace:
    if mtbf <= 0 or horizon <= 0:
        raise ValueError("mtbf and horizon must be positive")
    if not 0.0 <= software_fraction <= 1.0:
        raise ValueError("software_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    events = []
    t = 0.0
    while True:
        t += rng.exponential(mtbf)
        if t > horizon:
            break
        kind = FailureKind.SOFTWARE if rng.random() < software_fraction else FailureKind.HARDWARE
        events.append(FailureEvent(t, kind))
    return FailureTrace(tuple(events), horizon, seed)


def cluster_mtbf(mtbf: float, gpus: int, convention: str = "cluster") -> float:
    """MTBF seen by the whole job.  ``convention="gpu"`` treats ``mtbf`` as
    per-GPU, so the cluster fails ``gpus`` times as often."""
    if convention == "cluster":
        return mtbf
    if convention == "gpu":
        return mtbf / gpus
    raise ValueError(f"unknown MTBF convention {convention!r}")


class PolicyKind(str, Enum):
    LOWDIFF = "lowdiff"
    LOWDIFF_PLUS = "lowdiff-plus"
    NAIVE_DC = "naive-dc"
    FULL_ONLY = "full-only"


@dataclass(frozen=True)
class PolicyModel:
    """Cadence, overhead and recovery cost of one checkpointing policy.

    ``batch_size=None`` means no differential chain: hardware recovery goes
    back to the last full checkpoint.  ``memory_interval`` enables an
    in-memory state that software failures (and hardware failures too, if
    ``memory_survives_hardware``) restore from in ``memory_restore_hours``.
    """

    name: str
    kind: PolicyKind
    full_interval: int
    batch_size: Optional[int]
    full_write_hours: float
    load_hours: float
    merge_hours: float = 0.0
    overhead_fraction: float = 0.0
    memory_interval: Optional[int] = None
    memory_restore_hours: float = 0.0
    memory_survives_hardware: bool = False

    def __post_init__(self):
        if self.full_interval < 1 or (self.batch_size is not None and self.batch_size < 1):
            raise ValueError("intervals must be >= 1")
        for name in ("full_write_hours", "load_hours", "merge_hours", "overhead_fraction", "memory_restore_hours"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def lowdiff_policy(p: SystemParams, full_interval: Optional[int] = None, batch_size: Optional[int] = None, overhead_fraction: float = 0.0) -> PolicyModel:
    """Full + batched-differential policy, defaulting to the closed-form optimum
    rounded so the full interval is a whole number of batches."""
    if full_interval is None or batch_size is None:
        fi, bs = optimal_config(p).iteration_space(p)
        batch_size = batch_size or max(1, round(bs))
        full_interval = full_interval or max(batch_size, round(fi / batch_size) * batch_size)
    return PolicyModel(
        "lowdiff", PolicyKind.LOWDIFF, int(full_interval), int(batch_size),
        full_write_hours=p.S / p.W, load_hours=p.R_F, merge_hours=p.R_D,
        overhead_fraction=overhead_fraction,
    )


@dataclass(frozen=True)
class FailureRecord:
    time: float
    kind: FailureKind
    progress_iterations: float
    rollback_iteration: float
    chain_length: int
    lost_hours: float
    recovery_hours: float


@dataclass
class SimReport:
    policy: str
    gpus: float
    productive_hours: float
    steady_hours: float
    recovery_hours: float
    lost_hours: float
    wall_clock_hours: float
    failures: list[FailureRecord] = field(default_factory=list)

    @property
    def wasted_hours(self) -> float:
        return math.fsum((self.steady_hours, self.recovery_hours, self.lost_hours))

    @property
    def total_hours(self) -> float:
        return self.productive_hours + self.wasted_hours

    @property
    def wasted_gpu_hours(self) -> float:
        return self.gpus * self.wasted_hours

    @property
    def effective_ratio(self) -> float:
        return self.productive_hours / self.total_hours

    @property
    def failure_count(self) -> int:
        return len(self.failures)


def simulate(policy: PolicyModel, params: SystemParams, trace: FailureTrace) -> SimReport:
    iter_h = params.iter_hours
    total_iters = max(1, round(params.T / iter_h))
    rate = iter_h * (1.0 + policy.overhead_fraction)  # wall hours per iteration of progress
    full = policy.full_interval

    events = list(trace.events)
    ei = 0
    w = 0.0
    p = 0.0
    last_full = 0
    compute = steady = recovery = lost = 0.0
    failures: list[FailureRecord] = []

    def next_failure() -> float:
        return events[ei].time if ei < len(events) else math.inf

    def handle_failure(kind: FailureKind):
        nonlocal p, w, ei, recovery, lost
        use_memory = policy.memory_interval is not None and (
            kind == FailureKind.SOFTWARE or policy.memory_survives_hardware
        )
        if use_memory:
            mi = policy.memory_interval
            r = math.floor(p / mi) * mi
            chain = 0
            rec_h = policy.memory_restore_hours
        elif policy.batch_size is not None:
            bs = policy.batch_size
            chain = int(math.floor((p - last_full) / bs))
            r = last_full + chain * bs
            rec_h = policy.load_hours + policy.merge_hours * chain
        else:
            r = last_full
            chain = 0
            rec_h = policy.load_hours
        lost_h = (p - r) * iter_h
        fail_time = w
        spent = 0.0
        # a failure during recovery restarts it
        while next_failure() < w + rec_h:
            spent += events[ei].time - w
            w = events[ei].time
            ei += 1
        spent += rec_h
        w += rec_h
        recovery += spent
        lost += lost_h
        failures.append(FailureRecord(fail_time, kind, p, r, chain, lost_h, spent))
        p = float(r)

    while p < total_iters:
        boundary = min((math.floor(p / full) + 1) * full, total_iters)
        dt = (boundary - p) * rate
        nf = next_failure()
        if nf < w + dt:
            adv = (nf - w) / rate
            compute += adv * iter_h
            steady += adv * iter_h * policy.overhead_fraction
            p += adv
            w = nf
            kind = events[ei].kind
            ei += 1
            handle_failure(kind)
            continue
        compute += (boundary - p) * iter_h
        steady += (boundary - p) * iter_h * policy.overhead_fraction
        w += dt
        p = float(boundary)
        if boundary >= total_iters:
            break
        nf = next_failure()
        if nf < w + policy.full_write_hours:
            steady += nf - w
            w = nf
            kind = events[ei].kind
            ei += 1
            handle_failure(kind)
            continue
        steady += policy.full_write_hours
        w += policy.full_write_hours
        last_full = int(boundary)

    return SimReport(policy.name, params.N, total_iters * iter_h, steady, recovery, lost, w, failures)


def expected_wasted(policy: PolicyModel, params: SystemParams) -> float:
    """Analytic wasted GPU-hours for a differential policy at its own cadence."""
    from .planner import wasted_time

    f = params.frequency_for_interval(policy.full_interval)
    b = params.batch_hours(policy.batch_size or policy.full_interval)
    return wasted_time(params, f, b)


# -- reference policy set -------------------------------------------------------------

def standard_policies(p: SystemParams) -> dict[str, PolicyModel]:
    """Illustrative parameterizations of the compared policies.

    Steady overheads are fractions of productive time: per-iteration
    compressed differentials are nearly free (3%); layer-wise uncompressed
    gradient offload costs more host bandwidth (9%); in-memory full
    snapshots every 4 iterations cost 12%; storage fulls every 10
    iterations cost 15%.  Naive differentials pay compression on the
    critical path (30%).
    """
    ld = lowdiff_policy(p, overhead_fraction=0.03)
    return {
        "lowdiff": ld,
        "lowdiff-plus": PolicyModel(
            "lowdiff-plus", PolicyKind.LOWDIFF_PLUS, full_interval=3, batch_size=None,
            full_write_hours=0.0, load_hours=p.R_F, overhead_fraction=0.09,
            memory_interval=1, memory_restore_hours=p.R_F / 12.0,
        ),
        "gemini-like": PolicyModel(
            "gemini-like", PolicyKind.FULL_ONLY, full_interval=4, batch_size=None,
            full_write_hours=0.0, load_hours=p.R_F, overhead_fraction=0.12,
            memory_interval=4, memory_restore_hours=p.R_F * 0.75, memory_survives_hardware=True,
        ),
        "checkfreq-like": PolicyModel(
            "checkfreq-like", PolicyKind.FULL_ONLY, full_interval=10, batch_size=None,
            full_write_hours=0.0, load_hours=p.R_F, overhead_fraction=0.15,
        ),
        "naive-dc": PolicyModel(
            "naive-dc", PolicyKind.NAIVE_DC, full_interval=ld.full_interval, batch_size=1,
            full_write_hours=p.S / p.W, load_hours=p.R_F, merge_hours=3.0 * p.R_D,
            overhead_fraction=0.30,
        ),
    }


def exp9_params(gpus: float = 8, mtbf: float = 0.3, T: float = 24.0) -> SystemParams:
    """Frequent-failure regime used for the policy ordering check."""
    return SystemParams(
        N=gpus, M=mtbf, W=3600.0, S=20.0, T=T,
        R_F=20.0 / 3600.0, R_D=0.5 / 3600.0, iter_time=1.0,
    )


def mean_report(policy: PolicyModel, params: SystemParams, seeds: Iterable[int], software_fraction: float = 0.5, horizon_factor: float = 3.0) -> dict:
    reps = []
    for s in seeds:
        trace = generate_trace(params.M, params.T * horizon_factor, software_fraction, s)
        reps.append(simulate(policy, params, trace))
    if not reps:
        raise ValueError("no seeds")
    return {
        "effective_ratio": float(np.mean([r.effective_ratio for r in reps])),
        "wasted_hours": float(np.mean([r.wasted_hours for r in reps])),
        "wasted_gpu_hours": float(np.mean([r.wasted_gpu_hours for r in reps])),
        "failures": float(np.mean([r.failure_count for r in reps])),
        "runs": len(reps),
    }


SWEEP_FIELDS = ("policy", "mtbf_h", "gpus", "seeds", "effective_ratio", "wasted_hours", "wasted_gpu_hours", "failures")


def sweep(
    policies: Sequence[str],
    base: SystemParams,
    mtbfs: Sequence[float],
    gpus: Sequence[int],
    seeds: int = 20,
    software_fraction: float = 0.5,
    convention: str = "cluster",
) -> list[dict]:
    """Mean effective ratio per (policy, MTBF, GPU count) cell."""
    rows = []
    for g in gpus:
        for m in mtbfs:
            params = replace(base, N=float(g), M=cluster_mtbf(m, g, convention))
            catalog = standard_policies(params)
            for name in policies:
                if name not in catalog:
                    raise ValueError(f"unknown policy {name!r}; choose from {', '.join(catalog)}")
                stats = mean_report(catalog[name], params, range(seeds), software_fraction)
                rows.append({
                    "policy": name,
                    "mtbf_h": m,
                    "gpus": g,
                    "seeds": seeds,
                    "effective_ratio": f"{stats['effective_ratio']:.6f}",
                    "wasted_hours": f"{stats['wasted_hours']:.6f}",
                    "wasted_gpu_hours": f"{stats['wasted_gpu_hours']:.6f}",
                    "failures": f"{stats['failures']:.3f}",
                })
    return rows


def rows_to_csv(rows: Sequence[dict], fieldnames: Sequence[str] = SWEEP_FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
