"""Acceptance criteria, one test per criterion.

The terminal summary prints a PASS/FAIL line for each (see conftest.py).
"""

import math
import random
import time

import pytest

from trainplan.chain import (ActionKind, ChainEvent, ChainState, EventKind,
                             ProtocolError, drive, events_from_trace, next_action,
                             resume_step, start)
from trainplan.layout import Code, ParallelLayout, derive_dp, derive_gas, validate
from trainplan.logs import LogRecord, PowerSample, compare, energy_per_token, throughput
from trainplan.machine import TBIT, NodeSet, allocation_bisection, total_gpus
from trainplan.resilience import (FailureModel, SimConfig, expected_goodput,
                                  geometric_grid, grid_optimal_interval, optimal_interval,
                                  simulate, sweep)
from trainplan.script import extract, render
from trainplan.training import ModelSpec, param_count

from test_training import shape_sum_oracle


class Timer:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.limit, f"took {self.elapsed:.2f}s, limit {self.limit}s"


def test_criterion_1_layout_arithmetic(layout):
    with Timer(1):
        assert derive_dp(2 * 4, 1, 1) == 8
        assert derive_gas(512, 4, 8) == 16
        lo = ParallelLayout.derive(2, 4, 1, 1, 4, 512)
        assert (lo.dp, lo.gas) == (8, 16)
        assert lo == layout


def test_criterion_2_constraint_checks(booster, model, layout):
    with Timer(1):
        bad_pp = ParallelLayout(1, 5, 1, 4, 128, 512, 2, 4)
        codes = {v.code for v in validate(bad_pp, model, booster)}
        assert Code.LAYERS_PP in codes

        wide_tp = ParallelLayout(8, 1, 1, 4, 128, 512, 2, 4)
        found = [v for v in validate(wide_tp, model, booster) if v.code is Code.TP_EXCEEDS_NODE]
        assert len(found) == 1 and found[0].severity == "warning"

        assert validate(layout, model, booster) == []


def test_criterion_3_parameter_count(model):
    with Timer(1):
        pc = param_count(model)
        _, block, total = shape_sum_oracle(model.num_layers, model.hidden_size, model.vocab_size)
        assert 8.0e8 <= pc.block <= 8.1e8
        assert 9.0e8 <= pc.total <= 9.2e8
        assert abs(pc.block - block) <= 1e-3 * block
        assert abs(pc.total - total) <= 1e-3 * total


def test_criterion_4_topology(booster):
    with Timer(1):
        assert total_gpus(booster) == 3744
        assert booster.num_cells == 20
        assert allocation_bisection(booster, NodeSet.first(48)) == 40 * TBIT
        assert allocation_bisection(booster, NodeSet.first(96)) == 4 * TBIT
        assert allocation_bisection(booster, NodeSet.first(936)) == 400 * TBIT


def test_criterion_5_renderer(plan):
    from hypothesis import given, settings, HealthCheck
    from strategies import plans

    t0 = time.perf_counter()
    lines = render(plan).split("\n")
    for expected in ("#SBATCH --nodes=2", "export NCCL_IB_TIMEOUT=50",
                     "export UCX_RC_TIMEOUT=4s", "export NCCL_IB_RETRY_CNT=10"):
        assert expected in lines
    assert extract(render(plan)) == plan

    seen = []

    @settings(max_examples=200, deadline=None, database=None, derandomize=True,
              suppress_health_check=list(HealthCheck))
    @given(plans())
    def round_trip(p):
        seen.append(p)
        assert extract(render(p)) == p

    round_trip()
    elapsed = time.perf_counter() - t0
    assert len(seen) >= 200
    assert elapsed < 5, f"took {elapsed:.2f}s"


def _check_invariants(state, events):
    """Drive one sequence and assert the three orchestrator invariants."""
    prev = state.current_step
    for ev in events:
        if state.phase.value == "halted":
            break
        try:
            new, action = next_action(state, ev)
        except ProtocolError:
            continue
        assert new.current_step >= prev
        prev = new.current_step
        if action.kind is ActionKind.SUBMIT_DEPENDENT:
            assert action.resume_step == resume_step(new.registry)
            assert action.resume_step <= new.current_step
        jobs = new.job_index
        assert len(new.dependencies) == jobs - 1
        assert list(new.dependencies) == [(j, j + 1) for j in range(1, jobs)]
        state = new
    return state


def _random_events(rng, n):
    kinds = list(EventKind)
    out = []
    for i in range(n):
        k = rng.choice(kinds)
        step = rng.randint(1, 300) if k is EventKind.STEP_PROGRESS else (
            rng.randint(0, 3000) if k is EventKind.CHECKPOINT_WRITTEN else 0)
        out.append(ChainEvent(k, step, float(i), valid=rng.random() < 0.8))
    return out


def test_criterion_6_orchestrator():
    with Timer(10):
        for seed in range(1000):
            rng = random.Random(seed)
            events = _random_events(rng, rng.randint(0, 500))
            state, _ = start(ChainState(target_steps=rng.randint(1, 5000),
                                        failure_budget=rng.randint(1, 5)))
            final = _check_invariants(state, events)
            again = _check_invariants(start(ChainState(final.target_steps,
                                                       failure_budget=final.failure_budget))[0],
                                      events)
            assert again == final

        # 60 h of work under a 24 h walltime: three chained jobs
        trace = []
        cfg = SimConfig(total_work=60 * 3600, checkpoint_interval=3600, checkpoint_cost=0.0,
                        walltime=24 * 3600)
        report = simulate(cfg, trace=trace)
        assert report.jobs == 3
        assert report.goodput == 1.0
        state = ChainState(target_steps=60 * 3600 // 60)
        transitions = list(drive(state, events_from_trace(trace, step_seconds=60)))
        final = transitions[-1].state
        assert all(t.error is None for t in transitions)
        assert final.phase.value == "halted"
        assert final.job_index == 3
        assert final.dependencies == ((1, 2), (2, 3))


def test_criterion_7_simulator_calibration():
    with Timer(60):
        exact = simulate(SimConfig(total_work=1e6, checkpoint_interval=3600, checkpoint_cost=0.0))
        assert exact.goodput == 1.0

        cost, mtbf = 60.0, 180_000.0
        grid = [1200.0, 2400.0, 3600.0, 6000.0, 10_000.0]
        assert all(i + cost <= 0.1 * mtbf for i in grid)
        for i in grid:
            row = sweep([i], cost, mtbf, total_work=20 * i, runs=10_000, seed=3)[0]
            assert row.in_regime
            assert abs(row.mean - row.analytic) <= 0.02 * row.analytic, row

        cost, mtbf = 300.0, 100_000.0
        center = optimal_interval(cost, mtbf)
        best, _ = grid_optimal_interval(cost, mtbf, total_work=40 * center,
                                        intervals=geometric_grid(center, 1.1, 6),
                                        runs=10_000, seed=7)
        assert abs(best - center) <= 0.2 * center


def _log(ms, n=20):
    return [LogRecord(i + 1, ms) for i in range(n)]


def test_criterion_8_analyzer(model, layout):
    with Timer(1):
        c = compare(_log(4000.0), _log(1000.0))
        assert c.reduction == 75.0
        assert compare(_log(10_000.0), _log(5000.0)).speedup == 2.0
        rate = throughput(_log(10_000.0), layout.global_batch, model.seq_len)
        assert rate == pytest.approx(104_857.6, rel=1e-9)


def test_criterion_9_energy():
    with Timer(1):
        samples = [PowerSample(float(t), 400.0) for t in range(101)]
        assert energy_per_token(samples, 10**6) == pytest.approx(0.04, rel=1e-12)
