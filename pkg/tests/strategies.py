"""Shared hypothesis strategies."""

from hypothesis import strategies as st

from trainplan.chain import ChainEvent, EventKind
from trainplan.layout import ParallelLayout
from trainplan.script import DataPaths, EnvProfile, ScriptPlan
from trainplan.training import ModelSpec, ScheduleSpec

SAFE = st.text("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-", min_size=1, max_size=16)
PATHISH = st.lists(SAFE, min_size=1, max_size=4).map("/".join)


@st.composite
def plans(draw):
    nodes = draw(st.integers(1, 64))
    gpn = 4
    tp = draw(st.sampled_from([1, 2, 4]))
    pp = draw(st.sampled_from([d for d in (1, 2, 4, 8) if (nodes * gpn) % (tp * d) == 0]))
    dp = nodes * gpn // (tp * pp)
    micro = draw(st.integers(1, 8))
    gas = draw(st.integers(1, 32))
    layout = ParallelLayout(tp, pp, dp, micro, gas, micro * gas * dp, nodes, gpn)

    heads = draw(st.sampled_from([1, 2, 4, 8, 16]))
    hidden = heads * draw(st.integers(1, 16)) * 8
    model = ModelSpec(pp * draw(st.integers(1, 4)), hidden, heads,
                      draw(st.sampled_from([128, 512, 2048])), draw(st.integers(100, 60000)))

    lr = draw(st.floats(1e-6, 1e-2, allow_nan=False))
    warmup = draw(st.integers(0, 10_000))
    schedule = ScheduleSpec(
        save_interval=draw(st.integers(1, 10_000)),
        log_interval=draw(st.integers(1, 1000)),
        eval_interval=draw(st.integers(1, 10_000)),
        train_samples=draw(st.integers(1, 10**9)),
        lr=lr,
        min_lr=lr * draw(st.floats(0.01, 1.0)),
        lr_decay_samples=warmup + draw(st.integers(1, 10**8)),
        lr_warmup_samples=warmup,
        walltime_limit=draw(st.integers(1, 48 * 3600)),
        exit_duration=draw(st.integers(1, 120)),
        train_tokens=draw(st.one_of(st.none(), st.integers(1, 10**12))),
    )
    env = EnvProfile(debug=draw(st.booleans())).with_overrides({
        "NCCL_IB_TIMEOUT": str(draw(st.integers(1, 100))),
        "NCCL_IB_RETRY_CNT": str(draw(st.integers(1, 20))),
    })
    return ScriptPlan(
        job_name=draw(SAFE), account=draw(SAFE), partition=draw(SAFE),
        layout=layout, model=model, schedule=schedule, env_profile=env,
        container_image=draw(SAFE) + ".sif",
        data_paths=DataPaths(draw(PATHISH), draw(PATHISH), draw(PATHISH),
                             draw(st.one_of(st.just(""), PATHISH))),
        load_checkpoints=draw(st.booleans()),
        master_port=draw(st.integers(1024, 65535)),
        cpus_per_task=draw(st.integers(1, 128)),
    )


_KINDS = list(EventKind)


@st.composite
def events(draw, max_size=500):
    out = []
    n = draw(st.integers(0, max_size))
    for i in range(n):
        kind = draw(st.sampled_from(_KINDS))
        if kind is EventKind.STEP_PROGRESS:
            step = draw(st.integers(1, 500))
        elif kind is EventKind.CHECKPOINT_WRITTEN:
            step = draw(st.integers(0, 5000))
        else:
            step = 0
        out.append(ChainEvent(kind, step, float(i), valid=draw(st.booleans())))
    return out
