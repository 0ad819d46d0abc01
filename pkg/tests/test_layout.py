import itertools

import pytest
from hypothesis import given, settings, strategies as st

from trainplan.layout import (Code, LayoutError, ParallelLayout, allreduce_time, derive_dp,
                              derive_gas, enumerate_layouts, has_errors, memory_estimate,
                              validate)
from trainplan.machine import builtin_booster
from trainplan.training import ModelSpec, param_count


def test_derive_errors():
    with pytest.raises(LayoutError) as e:
        derive_dp(8, 3, 1)
    assert e.value.code is Code.NGPUS_INDIVISIBLE
    with pytest.raises(LayoutError) as e:
        derive_gas(500, 4, 8)
    assert e.value.code is Code.GLOBAL_INDIVISIBLE


def test_example_memory(layout, model):
    mem = memory_estimate(layout, model)
    p = 908_662_784
    assert mem.weights == 2 * p
    assert mem.gradients == 4 * p
    assert mem.optimizer_states == 12 * p / 8
    assert mem.activations == 16 * 2048 * 4 * 2048 * 2
    assert mem.total / 2**30 == pytest.approx(6.85, abs=0.01)


def test_memory_single_gpu_fits_booster(model, booster):
    # 16 bytes per parameter on one GPU, about 16.9 GB: still under 40 GiB
    lo = ParallelLayout(1, 1, 1, 1, 512, 512, 1, 1)
    assert not any(v.code is Code.MEMORY_EXCEEDED for v in validate(lo, model, booster))


def test_memory_exceeded(booster):
    big = ModelSpec(32, 8192, 64, 2048, 50257)
    lo = ParallelLayout(1, 1, 1, 1, 512, 512, 1, 1)
    vs = validate(lo, big, booster)
    assert [v.code for v in vs] == [Code.MEMORY_EXCEEDED]
    assert has_errors(vs)
    assert str(vs[0]).startswith("ERROR MEMORY_EXCEEDED")


def test_pp_larger_than_layers(model):
    with pytest.raises(ValueError):
        memory_estimate(ParallelLayout(1, 32, 1, 1, 1, 1, 8, 4), model)


def test_global_batch_mismatch(model, booster):
    lo = ParallelLayout(1, 1, 8, 4, 15, 512, 2, 4)
    assert [v.code for v in validate(lo, model, booster)] == [Code.GLOBAL_INDIVISIBLE]


def test_tp_warning_is_not_an_error(booster):
    m = ModelSpec(16, 2048, 16, 2048, 50257)
    vs = validate(ParallelLayout(8, 1, 1, 4, 128, 512, 2, 4), m, booster)
    assert [v.code for v in vs] == [Code.TP_EXCEEDS_NODE]
    assert not has_errors(vs)


def brute_force(model, machine, nodes, global_batch, micros):
    """Every (tp, pp, dp, micro) with tp*pp*dp == ngpus, filtered by hand."""
    ngpus = nodes * machine.gpus_per_node
    out = set()
    for tp, pp, dp in itertools.product(range(1, ngpus + 1), repeat=3):
        if tp * pp * dp != ngpus or tp > machine.gpus_per_node:
            continue
        if model.num_layers % pp:
            continue
        for micro in micros:
            if global_batch % (micro * dp):
                continue
            p = param_count(model).total
            mem = (16 * p / (tp * pp) - 12 * p / (tp * pp) + 12 * p / (tp * pp * dp)
                   + model.num_layers / pp * model.seq_len * micro * model.hidden_size * 2)
            if mem <= machine.gpu_memory_bytes:
                out.add((tp, pp, dp, micro))
    return out


@pytest.mark.parametrize("nodes", [1, 2, 3, 4])
def test_enumeration_matches_brute_force(model, booster, nodes):
    got = enumerate_layouts(model, booster, nodes, 512, [1, 2, 4, 8])
    assert {(lo.tp, lo.pp, lo.dp, lo.micro_batch) for lo, _ in got} == \
        brute_force(model, booster, nodes, 512, [1, 2, 4, 8])


def test_enumeration_sorted_and_parallel_identical(model, booster):
    seq = enumerate_layouts(model, booster, 8, 1024, [1, 2, 4])
    par = enumerate_layouts(model, booster, 8, 1024, [1, 2, 4], workers=4)
    assert seq == par
    keys = [(m.total, lo.tp, lo.pp, lo.micro_batch) for lo, m in seq]
    assert keys == sorted(keys)


def test_enumeration_example(model, booster, layout):
    got = enumerate_layouts(model, booster, 2, 512, [1, 2, 4, 8])
    assert len(got) == 36  # frozen from brute_force above
    assert layout in [lo for lo, _ in got]


def test_enumeration_bad_input(model, booster):
    with pytest.raises(ValueError):
        enumerate_layouts(model, booster, 0, 512, [1])
    with pytest.raises(ValueError):
        enumerate_layouts(model, booster, 1, 512, [0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.sampled_from([64, 128, 256, 512]), st.sampled_from([4, 8, 16]))
def test_enumerated_layouts_are_consistent(nodes, global_batch, layers):
    booster = builtin_booster()
    model = ModelSpec(layers, 1024, 8, 1024, 32000)
    for lo, mem in enumerate_layouts(model, booster, nodes, global_batch, [1, 2, 4]):
        assert lo.tp * lo.pp * lo.dp == lo.ngpus == nodes * 4
        assert lo.micro_batch * lo.gas * lo.dp == global_batch
        assert layers % lo.pp == 0
        assert mem.total <= booster.gpu_memory_bytes
        assert validate(lo, model, booster) == []


@given(st.integers(1, 64).flatmap(
    lambda n: st.tuples(st.just(n), st.sampled_from([d for d in range(1, n + 1) if n % d == 0]))))
def test_dp_times_shard_is_ngpus(args):
    ngpus, shard = args
    assert derive_dp(ngpus, shard, 1) * shard == ngpus


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8))
def test_memory_monotone_in_parallelism(tp, pp, dp):
    model = ModelSpec(8 * 8, 1024, 8, 1024, 32000)
    base = memory_estimate(ParallelLayout(tp, pp, dp, 1, 1, dp, 1, 8), model).total
    assert memory_estimate(ParallelLayout(tp + 1, pp, dp, 1, 1, dp, 1, 8), model).total <= base
    assert memory_estimate(ParallelLayout(tp, pp + 1, dp, 1, 1, dp, 1, 8), model).total <= base
    assert memory_estimate(ParallelLayout(tp, pp, dp + 1, 1, 1, dp, 1, 8), model).total <= base


def test_allreduce_time():
    # 1 GB over 8 ranks at 100 Gbit/s: 2 * 7/8 * 8e9 / 1e11
    assert allreduce_time(1e9, 8, 1e11) == pytest.approx(0.14)
    assert allreduce_time(1e9, 1, 1e11) == 0
    with pytest.raises(ValueError):
        allreduce_time(1, 0, 1)
