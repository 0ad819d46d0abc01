"""Checkpoint/restart simulation of long training campaigns.

A run alternates compute segments of ``checkpoint_interval`` seconds with
checkpoint writes of ``checkpoint_cost`` seconds.  Failures arrive as a
Poisson process over the whole allocation; a failure throws away everything
since the last completed checkpoint (a checkpoint being written when the
failure hits is lost too), kills the job and the next job pays
``restart_cost`` before computing again.  Jobs are cut at ``walltime``: just
before the limit the job stops computing, writes one more checkpoint, and a
dependent job picks up from there.

Random streams are Philox keyed by ``(seed, run)``, so any run can be
reproduced on its own, in any order.  Failure arrival times do not depend on
the checkpoint settings, which makes sweeps over the interval use common
random numbers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .layout import ParallelLayout
from .training import ModelSpec, param_count

INF = math.inf
_MASK64 = (1 << 64) - 1


class DivergingRunWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FailureModel:
    mtbf: float = INF  # seconds, whole allocation; a user assumption, not a measurement
    distribution: str = "exponential"
    seed: int = 0

    def __post_init__(self):
        if not self.mtbf > 0:
            raise ValueError("mtbf must be positive")
        if self.distribution != "exponential":
            raise ValueError(f"unsupported failure distribution {self.distribution!r}")


@dataclass(frozen=True)
class SimConfig:
    total_work: float
    checkpoint_interval: float
    checkpoint_cost: float
    restart_cost: float = 0.0
    walltime: float = INF
    failure: FailureModel = FailureModel()

    def __post_init__(self):
        if self.total_work <= 0 or self.checkpoint_interval <= 0 or self.walltime <= 0:
            raise ValueError("total_work, checkpoint_interval and walltime must be positive")
        if self.checkpoint_cost < 0 or self.restart_cost < 0:
            raise ValueError("checkpoint_cost and restart_cost must be >= 0")
        if self.checkpoint_cost >= self.checkpoint_interval:
            raise ValueError("checkpoint_cost must be smaller than checkpoint_interval")


@dataclass(frozen=True)
class SimReport:
    wall_time: float
    useful_time: float
    failures: int
    checkpoints: int
    jobs: int
    completed: bool = True

    @property
    def goodput(self) -> float:
        return self.useful_time / self.wall_time if self.wall_time > 0 else 0.0


class TraceEvent(NamedTuple):
    kind: str
    time: float
    work: float  # committed (or, for step_progress, reached) useful seconds
    valid: bool = True


class GoodputEstimate(NamedTuple):
    value: float
    in_regime: bool

    def __float__(self):
        return float(self.value)


def run_rng(seed: int, run: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=((run & _MASK64) << 64) | (seed & _MASK64)))


def expected_goodput(interval: float, cost: float, mtbf: float) -> GoodputEstimate:
    """First-order useful fraction for periodic checkpointing.

    ``interval / (interval + cost) * (1 - (interval + cost) / (2 mtbf))``.
    The approximation is trusted while ``interval + cost <= 0.2 mtbf``.
    """
    if interval <= 0 or cost < 0 or mtbf <= 0:
        raise ValueError("need interval > 0, cost >= 0, mtbf > 0")
    if cost >= interval:
        raise ValueError("cost must be smaller than interval")
    period = interval + cost
    value = interval / period * (1 - period / (2 * mtbf))
    return GoodputEstimate(value, period <= 0.2 * mtbf)


def optimal_interval(cost: float, mtbf: float) -> float:
    if cost < 0 or mtbf <= 0:
        raise ValueError("need cost >= 0 and mtbf > 0")
    return math.sqrt(2 * cost * mtbf)


def checkpoint_cost_model(model: ModelSpec, layout: Optional[ParallelLayout],
                          storage_bandwidth: float) -> float:
    """Seconds to persist bf16 weights plus the fp32 Adam triple.

    The full checkpoint is written whatever the layout; ``layout`` is
    accepted for interface symmetry with the memory model.
    """
    if storage_bandwidth <= 0:
        raise ValueError("storage_bandwidth must be positive")
    p = param_count(model).total
    return (2 * p + 12 * p) / storage_bandwidth


def simulate(config: SimConfig, run: int = 0, trace: Optional[list] = None,
             max_segments: int = 1_000_000) -> SimReport:
    """Simulate one campaign.  Bitwise reproducible for fixed ``(seed, run)``."""
    rng = run_rng(config.failure.seed, run)
    mtbf = config.failure.mtbf
    interval = config.checkpoint_interval
    cost = config.checkpoint_cost
    restart = config.restart_cost
    walltime = config.walltime
    total = config.total_work

    hopeless = interval + cost >= 2 * mtbf
    if hopeless or walltime <= cost + restart:
        warnings.warn("configuration makes no expected progress; the run will be capped",
                      DivergingRunWarning, stacklevel=2)

    def draw(now):
        return now + rng.exponential(mtbf) if math.isfinite(mtbf) else INF

    def emit(kind, time, work, valid=True):
        if trace is not None:
            trace.append(TraceEvent(kind, time, work, valid))

    t = 0.0
    overhead = 0.0
    committed = 0.0
    next_fail = draw(0.0)
    failures = checkpoints = jobs = segments = 0
    needs_restart = False

    while committed < total:
        jobs += 1
        job_end = t + walltime
        deadline = job_end - cost
        emit("job_started", t, committed)
        failed = False

        if needs_restart:
            if next_fail < t + restart:
                overhead += next_fail - t
                t = next_fail
                failures += 1
                emit("hardware_failure", t, committed)
                next_fail = draw(t)
                continue
            t += restart
            overhead += restart
            needs_restart = False

        work = committed
        while True:
            segments += 1
            if segments > max_segments:
                warnings.warn(f"run capped after {max_segments} segments",
                              DivergingRunWarning, stacklevel=2)
                return SimReport(float(committed + overhead), float(committed), failures,
                                 checkpoints, jobs, completed=False)
            remaining = total - work
            seg = min(interval, remaining, deadline - t)
            if seg <= 0:
                break
            if next_fail < t + seg:
                overhead += (work - committed) + (next_fail - t)
                t = next_fail
                failed = True
                break
            t += seg
            work += seg
            emit("step_progress", t, work)
            if seg >= remaining:
                committed = total
                break
            imminent = t >= deadline
            if imminent:
                emit("walltime_imminent", t, work)
            if next_fail < t + cost:
                overhead += (work - committed) + (next_fail - t)
                t = next_fail
                failed = True
                break
            t += cost
            overhead += cost
            committed = work
            checkpoints += 1
            emit("checkpoint_written", t, work)
            if imminent or t >= deadline:
                break

        if failed:
            failures += 1
            emit("hardware_failure", t, committed)
            next_fail = draw(t)
            needs_restart = True
        elif committed < total:
            emit("job_completed", t, committed)

    return SimReport(float(total + overhead), float(total), failures, checkpoints, jobs)


class SweepRow(NamedTuple):
    interval: float
    analytic: float
    in_regime: bool
    mean: float
    std: float
    jobs: float
    failures: float


def sweep(intervals: Sequence[float], cost: float, mtbf: float, total_work: float,
          walltime: float = INF, restart_cost: float = 0.0, runs: int = 1000,
          seed: int = 0) -> list[SweepRow]:
    """Monte-Carlo goodput for each checkpoint interval, next to the analytic value."""
    rows = []
    for interval in intervals:
        cfg = SimConfig(total_work, interval, cost, restart_cost, walltime,
                        FailureModel(mtbf, seed=seed))
        reports = [simulate(cfg, run=r) for r in range(runs)]
        good = np.array([r.goodput for r in reports])
        est = expected_goodput(interval, cost, mtbf)
        rows.append(SweepRow(
            interval=float(interval),
            analytic=est.value,
            in_regime=est.in_regime,
            mean=float(good.mean()),
            std=float(good.std(ddof=1)) if runs > 1 else 0.0,
            jobs=float(np.mean([r.jobs for r in reports])),
            failures=float(np.mean([r.failures for r in reports])),
        ))
    return rows


def geometric_grid(center: float, ratio: float = 1.1, half_width: int = 6) -> list[float]:
    return [center * ratio**k for k in range(-half_width, half_width + 1)]


def grid_optimal_interval(cost: float, mtbf: float, total_work: float,
                          intervals: Sequence[float], runs: int = 1000,
                          seed: int = 0) -> tuple[float, list[SweepRow]]:
    """Interval with the best simulated mean goodput over ``intervals``."""
    rows = sweep(intervals, cost, mtbf, total_work, runs=runs, seed=seed)
    best = max(rows, key=lambda r: r.mean)
    return best.interval, rows
