"""Cluster hardware and DragonFly+ topology model.

Nodes are abstract, contiguous 0-based indices. Cells are consecutive blocks
of ``cell_size_nodes`` indices; the last cell may be partial.

Bandwidth model used by :func:`allocation_bisection`:

* inside one cell the fat tree is non-blocking, so every node gets the same
  share ``intra_cell_bisection / cell_size_nodes``;
* across cells the bipartition is cut at cell boundaries and every cell pair
  on opposite sides contributes the fixed pair capacity.  How the physical
  inter-cell links map to adapter ports is not known, so this pairwise-uniform
  model is an assumption and reports label it as such.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

TBIT = 1e12
GIB = 2**30

TOPOLOGY_ASSUMPTION = (
    "inter-cell bandwidth assumes uniform pairwise cell links, cut at cell boundaries"
)


@dataclass(frozen=True)
class MachineSpec:
    name: str
    num_nodes: int
    gpus_per_node: int
    gpu_memory_bytes: int
    cpu_cores_per_node: int
    cell_size_nodes: int
    intra_cell_bisection: float  # bits/s
    inter_cell_pair_bisection: float  # bits/s
    system_bisection: float  # bits/s

    def __post_init__(self):
        if self.num_nodes < 1 or self.gpus_per_node < 1 or self.cell_size_nodes < 1:
            raise ValueError("num_nodes, gpus_per_node and cell_size_nodes must be >= 1")
        if self.gpu_memory_bytes <= 0:
            raise ValueError("gpu_memory_bytes must be positive")
        if not self.intra_cell_bisection >= self.inter_cell_pair_bisection > 0:
            raise ValueError(
                "require intra_cell_bisection >= inter_cell_pair_bisection > 0"
            )

    @property
    def num_cells(self) -> int:
        return math.ceil(self.num_nodes / self.cell_size_nodes)

    @property
    def per_node_bandwidth(self) -> float:
        """Uniform per-node share of the intra-cell fat tree, in bits/s."""
        return self.intra_cell_bisection / self.cell_size_nodes


class NodeSet(tuple):
    """Ordered, duplicate-free set of node indices."""

    def __new__(cls, indices: Iterable[int] = ()):
        seen = set()
        out = []
        for i in indices:
            i = int(i)
            if i < 0:
                raise ValueError(f"negative node index {i}")
            if i in seen:
                raise ValueError(f"duplicate node index {i}")
            seen.add(i)
            out.append(i)
        return super().__new__(cls, sorted(out))

    @classmethod
    def first(cls, count: int, start: int = 0) -> "NodeSet":
        """The ``count`` contiguous nodes beginning at ``start``."""
        return cls(range(start, start + count))


def builtin_booster() -> MachineSpec:
    """JUWELS Booster: 936 nodes of 4x A100-40GB, 20 DragonFly+ cells of 48 nodes."""
    return MachineSpec(
        name="juwels-booster",
        num_nodes=936,
        gpus_per_node=4,
        gpu_memory_bytes=40 * GIB,
        cpu_cores_per_node=48,
        cell_size_nodes=48,
        intra_cell_bisection=40 * TBIT,
        inter_cell_pair_bisection=4 * TBIT,
        system_bisection=400 * TBIT,
    )


def total_gpus(spec: MachineSpec) -> int:
    return spec.num_nodes * spec.gpus_per_node


def cell_of(spec: MachineSpec, node_index: int) -> int:
    if not 0 <= node_index < spec.num_nodes:
        raise IndexError(
            f"node index {node_index} out of range for {spec.num_nodes} nodes"
        )
    return node_index // spec.cell_size_nodes


def cell_occupancy(spec: MachineSpec, nodes: Iterable[int]) -> dict[int, int]:
    """Number of allocated nodes per occupied cell."""
    counts: dict[int, int] = {}
    for n in nodes:
        c = cell_of(spec, n)
        counts[c] = counts.get(c, 0) + 1
    return counts


def _balanced_cell_split(sizes: list[int]) -> int:
    """Number of cells on the smaller-count side of the worst balanced cut.

    Cells are indivisible.  Among all cell subsets, keep those minimising the
    node-count imbalance; among those, the worst case is the split with the
    fewest crossing cell pairs ``k * (m - k)``.
    """
    m = len(sizes)
    total = sum(sizes)
    # reachable[k] = set of node sums achievable with exactly k cells
    reachable: list[set[int]] = [set() for _ in range(m + 1)]
    reachable[0].add(0)
    for s in sizes:
        for k in range(m - 1, -1, -1):
            if reachable[k]:
                reachable[k + 1].update(x + s for x in reachable[k])
    best = None
    for k in range(1, m):
        for x in reachable[k]:
            key = (abs(total - 2 * x), k * (m - k))
            if best is None or key < best[0]:
                best = (key, k)
    assert best is not None
    return best[1]


def allocation_bisection(spec: MachineSpec, nodes: Iterable[int]) -> float:
    """Estimated bisection bandwidth (bits/s) of an allocation.

    A single-cell allocation gets the intra-cell figure scaled by the occupied
    fraction of the cell.  A multi-cell allocation is limited by the cell-pair
    links crossing the most balanced cell-level cut, and never exceeds what
    the allocated nodes could inject on their own.
    """
    nodes = NodeSet(nodes)
    if not nodes:
        raise ValueError("allocation must contain at least one node")
    occupancy = cell_occupancy(spec, nodes)
    n = len(nodes)
    injection = spec.per_node_bandwidth * n
    if len(occupancy) == 1:
        return spec.intra_cell_bisection * n / spec.cell_size_nodes
    m = len(occupancy)
    k = _balanced_cell_split(list(occupancy.values()))
    crossing = k * (m - k) * spec.inter_cell_pair_bisection
    return min(injection, crossing)
