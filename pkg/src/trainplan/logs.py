"""Training-log and power-sample analysis.

Log grammar, one iteration per line, fields separated by `` | ``::

    iter <u64> | elapsed_ms <f64> [| loss <f64>]

Power samples are CSV with a ``t_seconds,watts`` header.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

from .training import ModelSpec, param_count

DEFAULT_WARMUP = 3


class EmptyLogError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class LogRecord:
    iteration: int
    elapsed_ms: float
    loss: Optional[float] = None
    timestamp: Optional[float] = None


@dataclass(frozen=True)
class Diagnostic:
    line: int
    text: str
    reason: str

    def __str__(self):
        return f"line {self.line}: {self.reason}: {self.text!r}"


class PowerSample(NamedTuple):
    t: float
    watts: float


def _parse_line(text: str) -> LogRecord:
    fields = [f.strip() for f in text.split(" | ")]
    pairs = []
    for f in fields:
        parts = f.split()
        if len(parts) != 2:
            raise ValueError(f"bad field {f!r}")
        pairs.append(parts)
    keys = [k for k, _ in pairs]
    if keys not in (["iter", "elapsed_ms"], ["iter", "elapsed_ms", "loss"]):
        raise ValueError(f"unexpected fields {keys}")
    values = dict(pairs)
    iteration = values["iter"]
    if not iteration.isdigit():
        raise ValueError(f"iteration {iteration!r} is not an unsigned integer")
    elapsed = float(values["elapsed_ms"])
    if not elapsed > 0:
        raise ValueError("elapsed_ms must be positive")
    loss = float(values["loss"]) if "loss" in values else None
    return LogRecord(int(iteration), elapsed, loss)


def parse_log(lines: Iterable[str], diagnostics: Optional[list] = None) -> list[LogRecord]:
    """Parse iteration lines.

    Malformed lines and iterations that do not increase are skipped and, if
    ``diagnostics`` is given, reported there as :class:`Diagnostic` entries.
    Blank lines are ignored silently.
    """
    records: list[LogRecord] = []
    for lineno, raw in enumerate(lines, start=1):
        text = raw.rstrip("\r\n")
        if not text.strip():
            continue
        try:
            rec = _parse_line(text)
        except ValueError as exc:
            if diagnostics is not None:
                diagnostics.append(Diagnostic(lineno, text, f"malformed ({exc})"))
            continue
        if records and rec.iteration <= records[-1].iteration:
            if diagnostics is not None:
                diagnostics.append(Diagnostic(
                    lineno, text,
                    f"out of order (iteration {rec.iteration} after {records[-1].iteration})"))
            continue
        records.append(rec)
    if not records:
        raise EmptyLogError("no parseable iteration lines")
    return records


def parse_power(lines: Iterable[str]) -> list[PowerSample]:
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["t_seconds", "watts"]:
        raise ValueError("power CSV needs the header 't_seconds,watts'")
    samples = []
    for row in reader:
        s = PowerSample(float(row["t_seconds"]), float(row["watts"]))
        if s.watts < 0:
            raise ValueError(f"negative power at t={s.t}")
        if samples and s.t < samples[-1].t:
            raise ValueError(f"time goes backwards at t={s.t}")
        samples.append(s)
    return samples


def mean_elapsed_ms(records: Sequence[LogRecord], warmup: int = 0) -> float:
    steady = records[warmup:]
    if not steady:
        raise InsufficientDataError(
            f"{len(records)} records, all excluded as warmup ({warmup})")
    return statistics.fmean(r.elapsed_ms for r in steady)


def throughput(records: Sequence[LogRecord], global_batch: int, seq_len: int,
               warmup: int = DEFAULT_WARMUP) -> float:
    """Tokens per second over the post-warmup iterations."""
    return global_batch * seq_len / (mean_elapsed_ms(records, warmup) / 1000)


def flops_rate(records: Sequence[LogRecord], model: ModelSpec, global_batch: int,
               warmup: int = DEFAULT_WARMUP) -> float:
    """Model FLOP/s by the 6 * params * tokens rule (not hardware FLOPs)."""
    rate = throughput(records, global_batch, model.seq_len, warmup)
    return 6 * param_count(model).total * rate


class Comparison(NamedTuple):
    speedup: float  # mean_elapsed(a) / mean_elapsed(b)
    reduction: float  # percent iteration-time reduction going from a to b


def compare(run_a: Sequence[LogRecord], run_b: Sequence[LogRecord],
            warmup: int = 0) -> Comparison:
    if not run_a or not run_b:
        raise EmptyLogError("both runs need at least one record")
    a = mean_elapsed_ms(run_a, warmup)
    b = mean_elapsed_ms(run_b, warmup)
    return Comparison(a / b, (1 - b / a) * 100)


def energy_joules(samples: Sequence[PowerSample]) -> float:
    """Trapezoidal integral of power over time."""
    if len(samples) < 2:
        raise InsufficientDataError("need at least two power samples")
    return sum((b.t - a.t) * (a.watts + b.watts) / 2 for a, b in zip(samples, samples[1:]))


def energy_per_token(samples: Sequence[PowerSample], tokens: int) -> float:
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    return energy_joules(samples) / tokens


def scaling_efficiency(points: Sequence[tuple[int, float]]) -> list[tuple[int, float]]:
    """Throughput gain relative to the smallest node count, per node added."""
    if not points:
        raise InsufficientDataError("need at least one point")
    nodes = [n for n, _ in points]
    if len(set(nodes)) != len(nodes):
        raise ValueError("duplicate node counts")
    ordered = sorted(points)
    base_n, base_rate = ordered[0]
    return [(n, (rate / base_rate) / (n / base_n)) for n, rate in ordered]
