import math

import pytest
from hypothesis import given, strategies as st

from trainplan.machine import (TBIT, MachineSpec, NodeSet, allocation_bisection,
                               cell_of, total_gpus)


def small_machine(nodes=10, cell=4, gpus=4):
    return MachineSpec("toy", nodes, gpus, 16 * 2**30, 8, cell, 8 * TBIT, 1 * TBIT, 2 * TBIT)


def test_booster_figures(booster):
    assert booster.num_nodes == 936
    assert booster.gpus_per_node == 4
    assert booster.cell_size_nodes == 48
    assert booster.num_cells == 20
    assert booster.gpu_memory_bytes == 40 * 2**30
    assert booster.cpu_cores_per_node == 48


@pytest.mark.parametrize("nodes,gpus,expected", [(936, 4, 936 * 4), (1, 4, 4), (2, 4, 8)])
def test_total_gpus(nodes, gpus, expected):
    assert total_gpus(small_machine(nodes=nodes, gpus=gpus)) == expected


def test_total_gpus_booster(booster):
    assert total_gpus(booster) == 3744


@pytest.mark.parametrize("node,cell", [(0, 0), (47, 0), (48, 1), (935, 19)])
def test_cell_of(booster, node, cell):
    assert cell_of(booster, node) == cell


@pytest.mark.parametrize("node", [-1, 936])
def test_cell_of_out_of_range(booster, node):
    with pytest.raises(IndexError):
        cell_of(booster, node)


def test_invalid_specs():
    with pytest.raises(ValueError):
        small_machine(nodes=0)
    with pytest.raises(ValueError):
        MachineSpec("x", 4, 4, 1, 1, 2, 1 * TBIT, 2 * TBIT, 1 * TBIT)


def test_nodeset_rejects_duplicates():
    with pytest.raises(ValueError):
        NodeSet([1, 2, 2])
    assert NodeSet([3, 1]) == (1, 3)


def test_bisection_one_full_cell(booster):
    assert allocation_bisection(booster, NodeSet.first(48)) == 40 * TBIT


def test_bisection_two_full_cells(booster):
    assert allocation_bisection(booster, NodeSet.first(96)) == 4 * TBIT


def test_bisection_whole_system(booster):
    bw = allocation_bisection(booster, range(936))
    assert bw == 400 * TBIT == booster.system_bisection


def test_bisection_partial_cell_scales_linearly(booster):
    assert allocation_bisection(booster, NodeSet.first(24)) == pytest.approx(20 * TBIT)


def test_bisection_empty(booster):
    with pytest.raises(ValueError):
        allocation_bisection(booster, [])


def brute_force_cell_cut(sizes):
    """Worst balanced cell-level cut by enumerating every subset."""
    m, total = len(sizes), sum(sizes)
    best = None
    for mask in range(1, 2**m - 1):
        chosen = [sizes[i] for i in range(m) if mask >> i & 1]
        k = len(chosen)
        key = (abs(total - 2 * sum(chosen)), k * (m - k))
        best = key if best is None or key < best else best
    return best[1]


@given(st.lists(st.integers(1, 4), min_size=2, max_size=6))
def test_cell_split_matches_enumeration(sizes):
    from trainplan.machine import _balanced_cell_split

    k = _balanced_cell_split(sizes)
    assert k * (len(sizes) - k) == brute_force_cell_cut(sizes)


@given(st.integers(0, 935), st.integers(0, 935))
def test_cell_of_monotone(a, b):
    from trainplan.machine import builtin_booster

    spec = builtin_booster()
    lo, hi = sorted((a, b))
    assert cell_of(spec, lo) <= cell_of(spec, hi)
    if lo // 48 == hi // 48:
        assert cell_of(spec, lo) == cell_of(spec, hi)


@given(st.integers(2, 48))
def test_single_cell_not_worse_than_split(n):
    from trainplan.machine import builtin_booster

    spec = builtin_booster()
    single = allocation_bisection(spec, NodeSet.first(n))
    # same count straddling the first cell boundary
    split = allocation_bisection(spec, NodeSet.first(n, start=48 - n // 2))
    assert single >= split


@given(st.integers(1, 200), st.integers(1, 8))
def test_total_gpus_linear(nodes, gpus):
    assert total_gpus(small_machine(nodes=nodes, gpus=gpus)) == nodes * gpus
    assert total_gpus(small_machine(nodes=2 * nodes, gpus=gpus)) == 2 * nodes * gpus


def test_cell_count_rounds_up():
    assert small_machine(nodes=10, cell=4).num_cells == math.ceil(10 / 4)
