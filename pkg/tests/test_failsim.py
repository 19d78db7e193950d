from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from lowdiff.failsim import (
    FailureEvent,
    FailureKind,
    FailureTrace,
    PolicyKind,
    PolicyModel,
    cluster_mtbf,
    exp9_params,
    expected_wasted,
    generate_trace,
    lowdiff_policy,
    mean_report,
    rows_to_csv,
    simulate,
    standard_policies,
    sweep,
)
from lowdiff.planner import SystemParams

P = SystemParams(N=8, M=1.0, W=3600, S=10, T=4, R_F=20 / 3600, R_D=0.5 / 3600, iter_time=1)


def test_poisson_count():
    tr = generate_trace(1.0, 1000.0, seed=3)
    assert abs(len(tr.events) - 1000) < 3 * math.sqrt(1000)


def test_trace_deterministic():
    assert generate_trace(0.5, 50, 0.5, 9) == generate_trace(0.5, 50, 0.5, 9)
    assert generate_trace(0.5, 50, 0.5, 9) != generate_trace(0.5, 50, 0.5, 10)


def test_software_fraction_zero():
    tr = generate_trace(0.2, 100, software_fraction=0.0, seed=1)
    assert tr.events and all(e.kind == FailureKind.HARDWARE for e in tr.events)


def test_trace_validation():
    with pytest.raises(ValueError):
        FailureTrace((FailureEvent(2.0, FailureKind.HARDWARE), FailureEvent(1.0, FailureKind.HARDWARE)), 5.0, 0)
    with pytest.raises(ValueError):
        generate_trace(0, 10)


def test_empty_trace_is_steady_only():
    pol = lowdiff_policy(P, overhead_fraction=0.03)
    r = simulate(pol, P, FailureTrace((), 10.0, 0))
    assert r.recovery_hours == 0 and r.lost_hours == 0 and r.failure_count == 0
    assert r.wasted_hours == r.steady_hours > 0
    assert r.effective_ratio == r.productive_hours / (r.productive_hours + r.steady_hours)
    assert r.wall_clock_hours == pytest.approx(r.total_hours, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_conservation(seed):
    for pol in standard_policies(P).values():
        r = simulate(pol, P, generate_trace(0.3, 30, 0.5, seed))
        assert r.productive_hours + r.wasted_hours == r.total_hours
        assert r.wall_clock_hours == pytest.approx(r.total_hours, rel=1e-9)
        assert 0 <= r.effective_ratio <= 1
        assert r.productive_hours == pytest.approx(P.T)


def test_lowdiff_loses_less_than_full_only():
    ld = PolicyModel("ld", PolicyKind.LOWDIFF, full_interval=100, batch_size=1, full_write_hours=0.0, load_hours=P.R_F, merge_hours=P.R_D)
    fo = PolicyModel("fo", PolicyKind.FULL_ONLY, full_interval=10, batch_size=None, full_write_hours=0.0, load_hours=P.R_F)
    for seed in range(10):
        tr = generate_trace(0.2, 20, 0.0, seed)
        a, b = simulate(ld, P, tr), simulate(fo, P, tr)
        assert a.lost_hours / max(1, a.failure_count) <= b.lost_hours / max(1, b.failure_count)


def test_rollback_to_last_batch():
    pol = PolicyModel("x", PolicyKind.LOWDIFF, full_interval=100, batch_size=4, full_write_hours=0.0, load_hours=0.01, merge_hours=0.001)
    hour = 3600.0
    tr = FailureTrace((FailureEvent(110.5 / hour, FailureKind.HARDWARE),), 1.0, 0)
    r = simulate(pol, replace(P, T=0.1), tr)
    rec = r.failures[0]
    assert rec.rollback_iteration == 108 and rec.chain_length == 2
    assert rec.recovery_hours == pytest.approx(0.01 + 2 * 0.001)
    assert rec.lost_hours == pytest.approx(2.5 / hour)


def test_failure_during_recovery_restarts_it():
    pol = PolicyModel("x", PolicyKind.FULL_ONLY, full_interval=10, batch_size=None, full_write_hours=0.0, load_hours=0.01)
    tr = FailureTrace((FailureEvent(0.005, FailureKind.HARDWARE), FailureEvent(0.01, FailureKind.HARDWARE)), 1.0, 0)
    r = simulate(pol, replace(P, T=0.05), tr)
    # the second failure lands 0.005 h into the first recovery
    assert r.failures[0].recovery_hours == pytest.approx(0.015)
    assert r.failure_count == 1


def test_software_failure_uses_replica():
    pol = standard_policies(P)["lowdiff-plus"]
    tr = FailureTrace((FailureEvent(0.01, FailureKind.SOFTWARE),), 1.0, 0)
    r = simulate(pol, replace(P, T=0.05), tr)
    assert r.failures[0].recovery_hours == pytest.approx(P.R_F / 12)
    assert r.failures[0].chain_length == 0


def test_huge_mtbf_approaches_steady_limit():
    for pol in standard_policies(P).values():
        r = mean_report(pol, replace(P, M=1e9), range(3))
        steady_per_hour = pol.overhead_fraction + pol.full_write_hours / (pol.full_interval * P.iter_hours)
        assert r["effective_ratio"] == pytest.approx(1 / (1 + steady_per_hour), rel=1e-3)


def test_more_gpus_lower_ratio_per_gpu_convention():
    base = replace(P, T=2)
    rows = sweep(["lowdiff"], base, [2.0], [1, 4, 16], seeds=10, convention="gpu")
    ratios = [float(r["effective_ratio"]) for r in rows]
    assert ratios[0] > ratios[1] > ratios[2]


def test_cluster_mtbf():
    assert cluster_mtbf(2.0, 8) == 2.0
    assert cluster_mtbf(2.0, 8, "gpu") == 0.25
    with pytest.raises(ValueError):
        cluster_mtbf(1, 1, "node")


def test_lowdiff_policy_rounds_to_whole_batches():
    p = SystemParams(N=8, M=1.0, W=3.24e13, S=5e9, T=24, R_F=30 / 3600, R_D=2 / 3600, iter_time=10)
    pol = lowdiff_policy(p)
    assert (pol.full_interval, pol.batch_size) == (20, 2)
    assert pol.full_interval % pol.batch_size == 0


def test_sim_close_to_analytic_single_mtbf():
    p = replace(P, T=20)
    pol = lowdiff_policy(p)
    sim = mean_report(pol, p, range(100), software_fraction=0.0)["wasted_gpu_hours"]
    assert sim == pytest.approx(expected_wasted(pol, p), rel=0.15)


def test_sweep_csv_deterministic():
    base = exp9_params(T=2)
    a = rows_to_csv(sweep(["lowdiff", "checkfreq-like"], base, [0.5], [8], seeds=3))
    b = rows_to_csv(sweep(["lowdiff", "checkfreq-like"], base, [0.5], [8], seeds=3))
    assert a == b
    assert a.splitlines()[0] == "policy,mtbf_h,gpus,seeds,effective_ratio,wasted_hours,wasted_gpu_hours,failures"
    with pytest.raises(ValueError):
        sweep(["nope"], base, [0.5], [8], seeds=1)


def test_policy_validation():
    with pytest.raises(ValueError):
        PolicyModel("x", PolicyKind.FULL_ONLY, 0, None, 0.0, 0.0)
    with pytest.raises(ValueError):
        PolicyModel("x", PolicyKind.FULL_ONLY, 1, None, -1.0, 0.0)
    assert np.isfinite(expected_wasted(lowdiff_policy(P), P))
