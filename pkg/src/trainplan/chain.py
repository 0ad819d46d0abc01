"""Chained-job orchestration as a pure state machine.

Jobs hit the scheduler walltime or die on hardware faults; each time, a
dependent job is queued that resumes from the newest valid checkpoint.
Scheduler errors and imminent walltime expiry trigger an immediate
checkpoint first.

The machine is clock-free: the driving harness raises ``walltime_imminent``
at walltime minus the exit duration.  ``step_progress`` carries the number of
steps completed since the previous report.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Optional


class Phase(str, enum.Enum):
    IDLE = "idle"
    SUBMITTED = "submitted"
    RUNNING = "running"
    CHECKPOINTING = "checkpointing"
    RESUBMITTING = "resubmitting"
    HALTED = "halted"


class EventKind(str, enum.Enum):
    JOB_STARTED = "job_started"
    STEP_PROGRESS = "step_progress"
    CHECKPOINT_WRITTEN = "checkpoint_written"
    WALLTIME_IMMINENT = "walltime_imminent"
    SCHEDULER_ERROR = "scheduler_error"
    HARDWARE_FAILURE = "hardware_failure"
    JOB_COMPLETED = "job_completed"


class ActionKind(str, enum.Enum):
    NONE = "none"
    SUBMIT = "submit"
    IMMEDIATE_CHECKPOINT = "immediate_checkpoint"
    SUBMIT_DEPENDENT = "submit_dependent"
    HALT = "halt"


class ProtocolError(ValueError):
    """An event that is illegal in the current phase."""


@dataclass(frozen=True)
class CheckpointRecord:
    step: int
    written_at: float = 0.0
    size_bytes: int = 0
    valid: bool = True


@dataclass(frozen=True)
class ChainEvent:
    kind: EventKind
    step: int = 0
    at: float = 0.0
    valid: bool = True
    size_bytes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        if self.kind is EventKind.STEP_PROGRESS and self.step < 1:
            raise ValueError("step_progress needs n >= 1")
        if self.step < 0:
            raise ValueError("event step must be >= 0")


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    resume_step: Optional[int] = None
    depends_on: Optional[int] = None

    def __str__(self):
        if self.kind is ActionKind.SUBMIT_DEPENDENT:
            return f"submit_dependent(resume_step={self.resume_step}, after=job{self.depends_on})"
        if self.kind is ActionKind.SUBMIT:
            return f"submit(resume_step={self.resume_step})"
        return self.kind.value


@dataclass(frozen=True)
class ChainState:
    target_steps: int
    phase: Phase = Phase.IDLE
    current_step: int = 0  # furthest step ever reached; never decreases
    position: int = 0  # step the live job is at; rewinds on resume
    job_index: int = 0
    registry: tuple = ()
    failures: int = 0
    stalled_failures: int = 0  # consecutive failures with no new checkpoint
    failure_budget: int = 3
    dependencies: tuple = ()  # (predecessor, successor) job-index pairs

    def __post_init__(self):
        if self.target_steps < 0:
            raise ValueError("target_steps must be >= 0")
        if not 0 <= self.current_step <= self.target_steps:
            raise ValueError("require 0 <= current_step <= target_steps")
        if self.failure_budget < 1:
            raise ValueError("failure_budget must be >= 1")


def latest_checkpoint(registry: Iterable[CheckpointRecord]) -> Optional[CheckpointRecord]:
    valid = [r for r in registry if r.valid]
    return max(valid, key=lambda r: r.step) if valid else None


def resume_step(registry) -> int:
    ckpt = latest_checkpoint(registry)
    return ckpt.step if ckpt else 0


def plan_chain(target_steps: int, steps_per_walltime: int) -> int:
    if steps_per_walltime < 1:
        raise ValueError("steps_per_walltime must be >= 1")
    return -(-target_steps // steps_per_walltime)


def start(state: ChainState) -> tuple[ChainState, Action]:
    """Submit the first job (or halt at once when there is nothing to do)."""
    if state.phase is not Phase.IDLE:
        raise ProtocolError(f"chain already started (phase {state.phase.value})")
    if state.current_step >= state.target_steps:
        return replace(state, phase=Phase.HALTED), Action(ActionKind.HALT)
    resume = resume_step(state.registry)
    new = replace(state, phase=Phase.SUBMITTED, job_index=1, position=resume)
    return new, Action(ActionKind.SUBMIT, resume_step=resume)


def _record(state: ChainState, event: ChainEvent) -> ChainState:
    if event.step > state.position:
        raise ProtocolError(
            f"checkpoint at step {event.step} is ahead of the job (step {state.position})"
        )
    before = latest_checkpoint(state.registry)
    rec = CheckpointRecord(event.step, event.at, event.size_bytes, event.valid)
    registry = tuple(r for r in state.registry if r.step != event.step) + (rec,)
    registry = tuple(sorted(registry, key=lambda r: r.step))
    stalled = state.stalled_failures
    if rec.valid and (before is None or rec.step > before.step):
        stalled = 0
    return replace(state, registry=registry, stalled_failures=stalled)


def _resubmit(state: ChainState, failed: bool) -> tuple[ChainState, Action]:
    failures = state.failures + failed
    stalled = state.stalled_failures + failed
    if failed and stalled >= state.failure_budget:
        return (replace(state, phase=Phase.HALTED, failures=failures,
                        stalled_failures=stalled), Action(ActionKind.HALT))
    resume = resume_step(state.registry)
    nxt = state.job_index + 1
    new = replace(
        state,
        phase=Phase.RESUBMITTING,
        job_index=nxt,
        position=resume,
        failures=failures,
        stalled_failures=stalled,
        dependencies=state.dependencies + ((state.job_index, nxt),),
    )
    return new, Action(ActionKind.SUBMIT_DEPENDENT, resume_step=resume,
                       depends_on=state.job_index)


_NONE = Action(ActionKind.NONE)


def next_action(state: ChainState, event: ChainEvent) -> tuple[ChainState, Action]:
    """Apply one event.  Raises ProtocolError (state untouched) if illegal."""
    phase, kind = state.phase, event.kind
    E = EventKind

    if phase in (Phase.IDLE, Phase.HALTED):
        raise ProtocolError(f"{kind.value} not allowed while {phase.value}")

    if phase in (Phase.SUBMITTED, Phase.RESUBMITTING):
        if kind is E.JOB_STARTED:
            return replace(state, phase=Phase.RUNNING), _NONE
        if kind in (E.HARDWARE_FAILURE, E.SCHEDULER_ERROR):
            # the job died before it started: nothing to checkpoint
            return _resubmit(state, failed=True)
        raise ProtocolError(f"{kind.value} not allowed while {phase.value}")

    # RUNNING or CHECKPOINTING
    if kind is E.JOB_STARTED:
        raise ProtocolError(f"job {state.job_index} already started")
    if kind is E.HARDWARE_FAILURE:
        return _resubmit(state, failed=True)
    if kind is E.JOB_COMPLETED:
        return _resubmit(state, failed=False)
    if kind is E.CHECKPOINT_WRITTEN:
        return replace(_record(state, event), phase=Phase.RUNNING), _NONE
    if kind in (E.WALLTIME_IMMINENT, E.SCHEDULER_ERROR):
        if phase is Phase.CHECKPOINTING:
            return state, _NONE
        return replace(state, phase=Phase.CHECKPOINTING), Action(ActionKind.IMMEDIATE_CHECKPOINT)
    if kind is E.STEP_PROGRESS:
        if phase is Phase.CHECKPOINTING:
            raise ProtocolError("step_progress while a checkpoint is being written")
        position = min(state.position + event.step, state.target_steps)
        current = max(state.current_step, position)
        new = replace(state, position=position, current_step=current)
        if current >= state.target_steps:
            return replace(new, phase=Phase.HALTED), Action(ActionKind.HALT)
        return new, _NONE
    raise ProtocolError(f"unhandled event {kind.value}")  # pragma: no cover


@dataclass
class Transition:
    event: Optional[ChainEvent]  # None for the initial submission
    action: Optional[Action]
    state: ChainState
    error: Optional[str] = None


def drive(state: ChainState, events: Iterable[ChainEvent],
          stop_on_error: bool = False) -> Iterator[Transition]:
    """Start the chain if needed, then feed it events until it halts.

    Illegal events are reported as transitions with ``error`` set and leave
    the state unchanged, unless ``stop_on_error`` re-raises them.
    """
    if state.phase is Phase.IDLE:
        state, action = start(state)
        yield Transition(None, action, state)
        if state.phase is Phase.HALTED:
            return
    for ev in events:
        try:
            state, action = next_action(state, ev)
        except ProtocolError as exc:
            if stop_on_error:
                raise
            yield Transition(ev, None, state, str(exc))
            continue
        yield Transition(ev, action, state)
        if state.phase is Phase.HALTED:
            return


def parse_events(lines: Iterable[str]) -> list[ChainEvent]:
    """Read ``kind step timestamp`` lines; ``#`` comments and blanks skipped."""
    out = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'kind step timestamp', got {raw!r}")
        kind, step, at = parts
        try:
            out.append(ChainEvent(EventKind(kind), int(step), float(at)))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def transitions_csv(transitions: Iterable[Transition]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["event", "action", "step", "job_index"])
    for t in transitions:
        action = f"error: {t.error}" if t.error else str(t.action)
        event = t.event.kind.value if t.event else "start"
        w.writerow([event, action, t.state.current_step, t.state.job_index])
    return buf.getvalue()


def events_from_trace(trace, step_seconds: float = 1.0) -> list[ChainEvent]:
    """Convert a resilience-simulator trace into chain events.

    Trace positions are in seconds of useful work; they become steps by
    dividing by ``step_seconds``.  Progress is emitted as deltas.
    """
    events = []
    pos = 0
    for item in trace:
        step = int(round(item.work / step_seconds))
        kind = EventKind(item.kind)
        if kind is EventKind.STEP_PROGRESS:
            if step > pos:
                events.append(ChainEvent(kind, step - pos, item.time))
            pos = step
            continue
        if kind is EventKind.JOB_STARTED:
            pos = step
        if kind is EventKind.CHECKPOINT_WRITTEN:
            events.append(ChainEvent(kind, step, item.time, valid=item.valid))
            continue
        events.append(ChainEvent(kind, 0, item.time))
    return events
