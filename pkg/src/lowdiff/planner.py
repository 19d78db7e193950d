"""Wasted-time cost model and closed-form tuning of (full frequency, batch size).

Units: ``f`` is full checkpoints per hour and ``b`` is the span of one
batched differential in hours, so ``1 / (f * b)`` counts batches per full
interval and every term of the model is in GPU-hours.  ``iter_time``
(seconds) converts to the iteration-space values a pipeline uses:
``full_interval = 3600 / (f * iter_time)`` and
``batch_size = b * 3600 / iter_time``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SystemParams:
    N: float  # GPUs
    M: float  # mean time between failures, hours
    W: float  # checkpoint write bandwidth, bytes/hour
    S: float  # full checkpoint size, bytes
    T: float  # total job runtime, hours
    R_F: float  # full checkpoint load time, hours
    R_D: float  # per-differential merge time, hours
    iter_time: float = 1.0  # seconds per iteration

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{f.name} must be a positive finite number, got {v!r}")

    @property
    def iter_hours(self) -> float:
        return self.iter_time / 3600.0

    def frequency_for_interval(self, full_interval: float) -> float:
        return 1.0 / (full_interval * self.iter_hours)

    def interval_for_frequency(self, f: float) -> float:
        return 1.0 / (f * self.iter_hours)

    def batch_hours(self, batch_iters: float) -> float:
        return batch_iters * self.iter_hours

    def batch_iters(self, b_hours: float) -> float:
        return b_hours / self.iter_hours


def wasted_time(p: SystemParams, f: float, b: float) -> float:
    """(N T / M) (b/2 + R_F + R_D/2 (1/(f b) - 1)) + N T S f / W."""
    if not (f > 0 and b > 0):
        raise ValueError("f and b must be positive")
    if f * b > 1.0 + 1e-12:
        raise ValueError(f"f*b = {f * b:.6g} > 1: fewer than one batch per full interval")
    failures = p.N * p.T / p.M
    recovery = b / 2.0 + p.R_F + (p.R_D / 2.0) * (1.0 / (f * b) - 1.0)
    steady = p.N * p.T * p.S * f / p.W
    return failures * recovery + steady


def wasted_time_partials(p: SystemParams, f: float, b: float) -> tuple[float, float]:
    """Analytic partial derivatives of :func:`wasted_time` in f and b."""
    k = p.N * p.T / p.M
    d_f = p.N * p.S * p.T / p.W - k * p.R_D / (2.0 * f * f * b)
    d_b = k * (0.5 - p.R_D / (2.0 * b * b * f))
    return d_f, d_b


@dataclass(frozen=True)
class OptimalConfig:
    f: float
    b: float
    f_feasible: float
    b_feasible: float
    clamped: bool
    residual_f: float  # |dW/df| relative to its largest term
    residual_b: float

    def iteration_space(self, p: SystemParams) -> tuple[float, float]:
        """``(full_interval, batch_size)`` in iterations for the feasible point."""
        return p.interval_for_frequency(self.f_feasible), p.batch_iters(self.b_feasible)


def optimal_config(p: SystemParams) -> OptimalConfig:
    f = (p.R_D * p.W ** 2 / (4.0 * p.S ** 2 * p.M ** 2)) ** (1.0 / 3.0)
    b = (2.0 * p.S * p.R_D * p.M / p.W) ** (1.0 / 3.0)
    d_f, d_b = wasted_time_partials(p, f, b)
    k = p.N * p.T / p.M
    res_f = abs(d_f) / (p.N * p.S * p.T / p.W)
    res_b = abs(d_b) / (k * 0.5)
    if f * b <= 1.0:
        return OptimalConfig(f, b, f, b, False, res_f, res_b)
    # best point on the boundary f*b = 1
    fc = math.sqrt(p.W / (2.0 * p.S * p.M))
    return OptimalConfig(f, b, fc, 1.0 / fc, True, res_f, res_b)


@dataclass(frozen=True)
class GridResult:
    f: float
    b: float
    value: float
    i: int
    j: int
    f_grid: np.ndarray
    b_grid: np.ndarray
    values: np.ndarray


def grid_search(
    p: SystemParams,
    f_range: tuple[float, float],
    b_range: tuple[float, float],
    resolution: int | tuple[int, int] = 400,
) -> GridResult:
    """Exhaustive argmin of the wasted time over a log-spaced grid.

    Cells violating ``f * b <= 1`` are excluded.
    """
    nf, nb = (resolution, resolution) if isinstance(resolution, int) else resolution
    if nf < 1 or nb < 1:
        raise ValueError("empty grid")
    f_grid = np.geomspace(f_range[0], f_range[1], nf) if nf > 1 else np.array([float(f_range[0])])
    b_grid = np.geomspace(b_range[0], b_range[1], nb) if nb > 1 else np.array([float(b_range[0])])
    F, B = np.meshgrid(f_grid, b_grid, indexing="ij")
    k = p.N * p.T / p.M
    vals = k * (B / 2.0 + p.R_F + (p.R_D / 2.0) * (1.0 / (F * B) - 1.0)) + p.N * p.T * p.S * F / p.W
    vals = np.where(F * B <= 1.0, vals, np.inf)
    if not np.isfinite(vals).any():
        raise ValueError("no feasible grid cell")
    i, j = np.unravel_index(int(np.argmin(vals)), vals.shape)
    return GridResult(float(f_grid[i]), float(b_grid[j]), float(vals[i, j]), int(i), int(j), f_grid, b_grid, vals)


def wasted_table(p: SystemParams, full_intervals: Sequence[int], batch_sizes: Sequence[int]) -> np.ndarray:
    """Wasted time normalized to its minimum, rows = full intervals (iterations),
    columns = batch sizes (iterations).  Infeasible cells are ``nan``."""
    table = np.full((len(full_intervals), len(batch_sizes)), np.nan)
    for r, fi in enumerate(full_intervals):
        f = p.frequency_for_interval(fi)
        for c, bs in enumerate(batch_sizes):
            b = p.batch_hours(bs)
            if f * b <= 1.0 + 1e-12:
                table[r, c] = wasted_time(p, f, b)
    return table / np.nanmin(table)


def table_csv(p: SystemParams, full_intervals: Sequence[int], batch_sizes: Sequence[int]) -> str:
    table = wasted_table(p, full_intervals, batch_sizes)
    lines = ["fcf\\bs," + ",".join(str(b) for b in batch_sizes)]
    for fi, row in zip(full_intervals, table):
        lines.append(f"{fi}," + ",".join("" if math.isnan(v) else f"{v:.3f}" for v in row))
    return "\n".join(lines) + "\n"


ADAPT_STEP = 1.25


def _step_toward(cur: float, target: float, factor: float) -> float:
    if cur < target:
        return min(cur * factor, target)
    if cur > target:
        return max(cur / factor, target)
    return cur


def adapt(current: tuple[float, float], observed: SystemParams, factor: float = ADAPT_STEP) -> tuple[float, float]:
    """Move ``(f, b)`` one bounded multiplicative step toward the optimum
    recomputed from ``observed``."""
    if factor <= 1.0:
        raise ValueError("step factor must exceed 1")
    opt = optimal_config(observed)
    f, b = current
    return _step_toward(f, opt.f_feasible, factor), _step_toward(b, opt.b_feasible, factor)


PARAM_KEYS = ("N", "M", "W", "S", "T", "R_F", "R_D", "iter_time")


def params_from_mapping(values: dict) -> SystemParams:
    missing = [k for k in PARAM_KEYS[:-1] if k not in values]
    if missing:
        raise ValueError(f"missing system parameters: {', '.join(missing)}")
    kw = {k: float(values[k]) for k in PARAM_KEYS if k in values}
    return SystemParams(**kw)
