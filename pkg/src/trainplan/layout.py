"""3D-parallel layout arithmetic, validation, memory model and enumeration.

Per-GPU byte model (bf16 weights, fp32 main gradients, distributed Adam):

    weights      2 P / (tp pp)
    gradients    4 P / (tp pp)
    optimizer   12 P / (tp pp dp)
    activations (layers / pp) * seq * micro * hidden * 2

Activations count only layer-boundary tensors because activation
recomputation is on.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .machine import MachineSpec
from .training import ModelSpec, param_count


class LayoutError(ValueError):
    """Raised by the derivation helpers; carries the violation code."""

    def __init__(self, code: "Code", message: str):
        super().__init__(message)
        self.code = code


class Code(str, enum.Enum):
    NGPUS_INDIVISIBLE = "NGPUS_INDIVISIBLE"
    LAYERS_PP = "LAYERS_PP"
    TP_EXCEEDS_NODE = "TP_EXCEEDS_NODE"
    GLOBAL_INDIVISIBLE = "GLOBAL_INDIVISIBLE"
    MEMORY_EXCEEDED = "MEMORY_EXCEEDED"

    @property
    def severity(self) -> str:
        return "warning" if self is Code.TP_EXCEEDS_NODE else "error"


@dataclass(frozen=True)
class Violation:
    code: Code
    message: str

    @property
    def severity(self) -> str:
        return self.code.severity

    def __str__(self):
        return f"{self.severity.upper()} {self.code.value}: {self.message}"


@dataclass(frozen=True)
class ParallelLayout:
    tp: int
    pp: int
    dp: int
    micro_batch: int
    gas: int
    global_batch: int
    nodes: int
    gpus_per_node: int

    @property
    def ngpus(self) -> int:
        return self.nodes * self.gpus_per_node

    @classmethod
    def derive(cls, nodes: int, gpus_per_node: int, tp: int, pp: int,
               micro_batch: int, global_batch: int) -> "ParallelLayout":
        """Fill in dp and gas; raises LayoutError when they are not integral."""
        dp = derive_dp(nodes * gpus_per_node, tp, pp)
        gas = derive_gas(global_batch, micro_batch, dp)
        return cls(tp, pp, dp, micro_batch, gas, global_batch, nodes, gpus_per_node)


@dataclass(frozen=True)
class MemoryEstimate:
    weights: float
    gradients: float
    optimizer_states: float
    activations: float

    @property
    def total(self) -> float:
        return self.weights + self.gradients + self.optimizer_states + self.activations


def derive_dp(ngpus: int, tp: int, pp: int) -> int:
    if tp < 1 or pp < 1:
        raise ValueError("tp and pp must be >= 1")
    if ngpus % (tp * pp):
        raise LayoutError(
            Code.NGPUS_INDIVISIBLE,
            f"{ngpus} GPUs not divisible by TP_SIZE*PP_SIZE = {tp * pp}",
        )
    return ngpus // (tp * pp)


def derive_gas(global_batch: int, micro_batch: int, dp: int) -> int:
    if micro_batch < 1 or dp < 1:
        raise ValueError("micro_batch and dp must be >= 1")
    if global_batch % (micro_batch * dp):
        raise LayoutError(
            Code.GLOBAL_INDIVISIBLE,
            f"GLOBAL_BATCH_SIZE {global_batch} has to be divisible by "
            f"MICRO_BATCH_SIZE*DP_SIZE = {micro_batch * dp}",
        )
    return global_batch // (micro_batch * dp)


def memory_estimate(layout: ParallelLayout, model: ModelSpec) -> MemoryEstimate:
    if layout.pp > model.num_layers:
        raise ValueError(
            f"PP_SIZE {layout.pp} exceeds NLAYERS {model.num_layers}"
        )
    p = param_count(model).total
    shard = layout.tp * layout.pp
    return MemoryEstimate(
        weights=2 * p / shard,
        gradients=4 * p / shard,
        optimizer_states=12 * p / (shard * layout.dp),
        activations=(model.num_layers / layout.pp)
        * model.seq_len * layout.micro_batch * model.hidden_size * 2,
    )


def validate(layout: ParallelLayout, model: ModelSpec,
             machine: MachineSpec) -> list[Violation]:
    """All constraint violations of ``layout``; an empty list means clean."""
    out: list[Violation] = []
    ngpus = layout.ngpus
    shard = layout.tp * layout.pp
    if ngpus % shard:
        out.append(Violation(
            Code.NGPUS_INDIVISIBLE,
            f"NGPUS={ngpus} not divisible by TP_SIZE*PP_SIZE={shard}"))
    elif shard * layout.dp != ngpus:
        out.append(Violation(
            Code.NGPUS_INDIVISIBLE,
            f"TP_SIZE*PP_SIZE*DP_SIZE={shard * layout.dp} != NGPUS={ngpus}"))

    if model.num_layers % layout.pp:
        out.append(Violation(
            Code.LAYERS_PP,
            f"NLAYERS={model.num_layers} must be a multiple of PP_SIZE={layout.pp}"))

    if layout.tp > layout.gpus_per_node:
        out.append(Violation(
            Code.TP_EXCEEDS_NODE,
            f"TP_SIZE={layout.tp} > GPUS_PER_NODE={layout.gpus_per_node}; "
            "tensor parallelism would cross node boundaries"))

    per_step = layout.micro_batch * layout.dp
    if layout.global_batch % per_step:
        out.append(Violation(
            Code.GLOBAL_INDIVISIBLE,
            f"GLOBAL_BATCH_SIZE={layout.global_batch} has to be divisible by "
            f"MICRO_BATCH_SIZE*DP_SIZE={per_step}"))
    elif per_step * layout.gas != layout.global_batch:
        out.append(Violation(
            Code.GLOBAL_INDIVISIBLE,
            f"MICRO_BATCH_SIZE*GAS*DP_SIZE={per_step * layout.gas} != "
            f"GLOBAL_BATCH_SIZE={layout.global_batch}"))

    if layout.pp <= model.num_layers:
        mem = memory_estimate(layout, model)
        if mem.total > machine.gpu_memory_bytes:
            out.append(Violation(
                Code.MEMORY_EXCEEDED,
                f"estimated {mem.total / 2**30:.2f} GiB per GPU exceeds "
                f"{machine.gpu_memory_bytes / 2**30:.2f} GiB"))
    return out


def has_errors(violations: Iterable[Violation]) -> bool:
    return any(v.severity == "error" for v in violations)


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def _layouts_for_tp(tp, model, machine, nodes, global_batch, micro_batch_candidates):
    ngpus = nodes * machine.gpus_per_node
    found = []
    for pp in divisors(ngpus // tp):
        dp = ngpus // (tp * pp)
        for micro in micro_batch_candidates:
            if global_batch % (micro * dp):
                continue
            layout = ParallelLayout(tp, pp, dp, micro, global_batch // (micro * dp),
                                    global_batch, nodes, machine.gpus_per_node)
            if validate(layout, model, machine):
                continue
            found.append((layout, memory_estimate(layout, model)))
    return found


def enumerate_layouts(model: ModelSpec, machine: MachineSpec, nodes: int,
                      global_batch: int, micro_batch_candidates: Sequence[int],
                      workers: Optional[int] = None):
    """All violation-free layouts for ``nodes`` nodes.

    Sorted by estimated per-GPU memory, then tp, pp and micro batch.  With
    ``workers`` the search is split by tp across threads; the merged result
    is identical to the sequential one.
    """
    if not 1 <= nodes <= machine.num_nodes:
        raise ValueError(f"nodes must be in [1, {machine.num_nodes}]")
    micros = sorted({int(m) for m in micro_batch_candidates})
    if any(m < 1 for m in micros):
        raise ValueError("micro batch candidates must be >= 1")
    tps = divisors(nodes * machine.gpus_per_node)
    args = (model, machine, nodes, global_batch, micros)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda tp: _layouts_for_tp(tp, *args), tps))
    else:
        parts = [_layouts_for_tp(tp, *args) for tp in tps]
    found = [item for part in parts for item in part]
    found.sort(key=lambda lm: (lm[1].total, lm[0].tp, lm[0].pp, lm[0].micro_batch))
    return found


def allreduce_time(nbytes: float, dp: int, bandwidth: float) -> float:
    """Ring all-reduce time in seconds for ``nbytes`` over ``dp`` ranks."""
    if dp < 1:
        raise ValueError("dp must be >= 1")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return 2 * (dp - 1) / dp * (8 * nbytes) / bandwidth


def example_layout() -> ParallelLayout:
    """Layout of the 2-node example script: pure data parallelism over 8 GPUs."""
    return ParallelLayout.derive(nodes=2, gpus_per_node=4, tp=1, pp=1,
                                 micro_batch=4, global_batch=512)
