"""Slurm job-script rendering for Megatron-LM runs, and the inverse parser.

The template follows the Booster example script section by section.  Each
section is a function returning its lines, so tests can target sections and
:func:`extract` can read the same grammar back.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from decimal import Decimal
from typing import Optional

from .layout import ParallelLayout, Violation, has_errors, validate
from .machine import MachineSpec, builtin_booster
from .training import ModelSpec, ScheduleSpec

ERROR_HANDLING = "error-handling"
TIMEOUT_MITIGATION = "timeout-mitigation"
INTERFACE_SELECTION = "interface-selection"
DEBUG = "debug"

TIMEOUT_VARS = ("NCCL_IB_TIMEOUT", "UCX_RC_TIMEOUT", "NCCL_IB_RETRY_CNT")

# general-purpose exports that precede the grouped ones
BASE_ENV = (
    ("HF_DATASETS_OFFLINE", "1"),
    ("TRANSFORMERS_OFFLINE", "1"),
    ("CUDA_DEVICE_MAX_CONNECTIONS", "1"),
)

DEFAULT_GROUPS = {
    ERROR_HANDLING: (("NCCL_ASYNC_ERROR_HANDLING", "1"),),
    TIMEOUT_MITIGATION: (
        ("NCCL_IB_TIMEOUT", "50"),
        ("UCX_RC_TIMEOUT", "4s"),
        ("NCCL_IB_RETRY_CNT", "10"),
    ),
    INTERFACE_SELECTION: (
        ("NCCL_SOCKET_IFNAME", "ib0"),
        ("GLOO_SOCKET_IFNAME", "ib0"),
    ),
    DEBUG: (
        ("CUDA_LAUNCH_BLOCKING", "1"),
        ("NCCL_DEBUG", "INFO"),
        ("NCCL_DEBUG_SUBSYS", "ALL"),
        ("TORCH_DISTRIBUTED_DEBUG", "INFO"),
    ),
}

GROUP_ORDER = (ERROR_HANDLING, TIMEOUT_MITIGATION, INTERFACE_SELECTION, DEBUG)
GROUP_COMMENTS = {
    ERROR_HANDLING: "# force crashing on nccl issues like hanging broadcast",
    TIMEOUT_MITIGATION: "# handle timeouts",
    INTERFACE_SELECTION: "# setting IB for out of band communication",
    DEBUG: "# For debugging",
}


@dataclass(frozen=True)
class EnvProfile:
    """Environment exports grouped by purpose; the debug group is opt-in."""

    groups: tuple = tuple((g, DEFAULT_GROUPS[g]) for g in GROUP_ORDER)
    debug: bool = False

    def __post_init__(self):
        names = [g for g, _ in self.groups]
        if names != list(GROUP_ORDER):
            raise ValueError(f"env groups must be exactly {GROUP_ORDER}, got {names}")
        timeout = tuple(k for k, _ in self.group(TIMEOUT_MITIGATION))
        if sorted(timeout) != sorted(TIMEOUT_VARS):
            raise ValueError(f"{TIMEOUT_MITIGATION} group must hold exactly {TIMEOUT_VARS}")

    def group(self, name: str) -> tuple:
        return dict(self.groups)[name]

    def variables(self) -> dict[str, str]:
        """Every variable the profile exports, in render order."""
        out = {}
        for g, pairs in self.groups:
            if g == DEBUG and not self.debug:
                continue
            out.update(pairs)
        return out

    def with_overrides(self, overrides: dict[str, str]) -> "EnvProfile":
        known = {k for _, pairs in self.groups for k, _ in pairs}
        unknown = set(overrides) - known
        if unknown:
            raise KeyError(f"unknown environment variables: {sorted(unknown)}")
        groups = tuple(
            (g, tuple((k, str(overrides.get(k, v))) for k, v in pairs))
            for g, pairs in self.groups
        )
        return replace(self, groups=groups)


def debug_profile() -> EnvProfile:
    return EnvProfile(debug=True)


@dataclass(frozen=True)
class DataPaths:
    vocab: str = "gpt2-vocab.json"
    merges: str = "gpt2-merges.txt"
    dataset: str = "oscar/oscar_text_document"
    output_root: str = ""


@dataclass(frozen=True)
class ScriptPlan:
    job_name: str
    account: str
    partition: str
    layout: ParallelLayout
    model: ModelSpec
    schedule: ScheduleSpec
    env_profile: EnvProfile = field(default_factory=EnvProfile)
    container_image: str = "ngc_torch.sif"
    data_paths: DataPaths = field(default_factory=DataPaths)
    load_checkpoints: bool = False
    master_port: int = 6000
    cpus_per_task: int = 48


class PlanRejected(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("plan has validation errors:\n" + "\n".join(map(str, violations)))


class ScriptParseError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


def format_walltime(seconds: int) -> str:
    h, rem = divmod(int(seconds), 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


def parse_walltime(text: str) -> int:
    parts = text.split(":")
    if len(parts) != 3 or not all(p.isdigit() for p in parts):
        raise ValueError(f"bad walltime {text!r}, expected HH:MM:SS")
    h, m, s = map(int, parts)
    return h * 3600 + m * 60 + s


def _fmt_float(x: float) -> str:
    # plain decimal notation, shortest round-tripping digits: 2.5e-05 -> 0.000025
    return format(Decimal(repr(float(x))), "f")


# --------------------------------------------------------------------------
# template sections


def _directives(p: ScriptPlan) -> list[str]:
    return [
        "#!/bin/bash",
        f"#SBATCH --job-name={p.job_name}",
        f"#SBATCH --account={p.account}",
        f"#SBATCH --partition={p.partition}",
        f"#SBATCH --nodes={p.layout.nodes}",
        f"#SBATCH --gres=gpu:{p.layout.gpus_per_node}",
        "#SBATCH --ntasks-per-node=1",
        f"#SBATCH --cpus-per-task={p.cpus_per_task}",
        f"#SBATCH --time={format_walltime(p.schedule.walltime_limit)}",
        "#SBATCH --threads-per-core=1",
        "",
        "# explicitly setting srun environment variable to inherit from SBATCH",
        "export SRUN_CPUS_PER_TASK=${SLURM_CPUS_PER_TASK}",
        "",
        "# Enable logging",
        "set -euo pipefail",
        "set -x",
        "",
        'echo "START TIME: $(date)"',
    ]


def _input_data(p: ScriptPlan) -> list[str]:
    d = p.data_paths
    return [
        "#### Input data ####",
        f"VOCAB_FILE={d.vocab}",
        f"MERGE_FILE={d.merges}",
        f"DATA_PATH={d.dataset}",
        "",
    ]


def _output_paths(p: ScriptPlan) -> list[str]:
    root = p.data_paths.output_root
    prefix = f"{root}/" if root else ""
    return [
        "#### Output paths ####",
        f'DATA_OUTPUT_PATH="{prefix}${{SLURM_JOB_ID}}_${{SLURM_JOB_NAME}}"',
        'CHECKPOINT_PATH="$DATA_OUTPUT_PATH"/checkpoints',
        'TENSORBOARD_PATH="$DATA_OUTPUT_PATH"/tensorboard',
        'CODECARBON_PATH="$DATA_OUTPUT_PATH"/codecarbon',
        'CACHE_DIR="$DATA_OUTPUT_PATH/.cache"',
        'LOGS_PATH="$DATA_OUTPUT_PATH"/logs',
        "TORCHELASTIC_ERROR_FILE=$LOGS_PATH/torch_dirtribute_error.txt",
        "",
        "mkdir -p $LOGS_PATH",
        "",
        "# copy this batch script into log directory for reproducibility",
        'if [ -e "$0" ]; then',
        '    cp -p "$0" "$LOGS_PATH/batch-${SLURM_JOB_NAME}-${SLURM_JOB_ID}.sh"',
        "fi",
        "",
    ]


def _environment(p: ScriptPlan) -> list[str]:
    env = p.env_profile
    lines = [
        "#### Environment variables ####",
        f"export LOAD_CHECKPOINTS={'true' if p.load_checkpoints else 'false'}",
    ]
    lines += [f"export {k}={v}" for k, v in BASE_ENV]
    lines += ["", "export CXX=g++", "export CC=gcc"]
    for g, pairs in env.groups:
        if g == DEBUG and not env.debug:
            continue
        lines.append(GROUP_COMMENTS[g])
        lines += [f"export {k}={v}" for k, v in pairs]
    lines.append("export LOGLEVEL=INFO")
    lines.append("")
    return lines


# host-convention specific; reproduced verbatim
_MASTER_ADDR_STANZA = [
    "##### Network parameters #####",
    "MASTER_ADDR=$(scontrol show hostnames $SLURM_JOB_NODELIST | head -n 1)",
    "# Allow communication over InfiniBand cells.",
    'MASTER_ADDR="${MASTER_ADDR}i"',
    "# Get IP for hostname.",
    "MASTER_ADDR=\"$(nslookup \"$MASTER_ADDR\" | grep -oP '(?<=Address: ).*')\"",
]


def _network(p: ScriptPlan) -> list[str]:
    return _MASTER_ADDR_STANZA + [
        f"MASTER_PORT={p.master_port}",
        "",
        "cd $MEGATRON_LM_REPO",
        "CLEAN_PREV_JIT_BUILD=0",
        "rm -f megatron/fused_kernels/build/lock",
        "((CLEAN_PREV_JIT_BUILD)) && rm -rf megatron/fused_kernels/{build,__pycache__}",
        "",
    ]


def _layout(p: ScriptPlan) -> list[str]:
    lo = p.layout
    return [
        "##### Parallel model layouting #####",
        f"GPUS_PER_NODE={lo.gpus_per_node}",
        "NNODES=$SLURM_JOB_NUM_NODES",
        f"PP_SIZE={lo.pp}  # NLAYERS must be a multiple of PP_SIZE here",
        f"TP_SIZE={lo.tp}  # TP_SIZE <= GPUS_PER_NODE (preferred)",
        f"DP_SIZE={lo.dp}  # NGPUS/(PP_SIZE * TP_SIZE)",
        "# Gradient accumulation steps, used here to compute a reasonable",
        "# global batch size, not given to training code.",
        f"GAS={lo.gas}",
        f"MICRO_BATCH_SIZE={lo.micro_batch}",
        f"GLOBAL_BATCH_SIZE={lo.global_batch}",
        "",
    ]


def _hyperparameters(p: ScriptPlan) -> list[str]:
    m, s = p.model, p.schedule
    lines = [
        "#### Hyperparameters ####",
        f"NLAYERS={m.num_layers}",
        f"NHIDDEN={m.hidden_size}",
        f"NHEADS={m.num_heads}",
        f"SEQ_LEN={m.seq_len}",
        f"VOCAB_SIZE={m.vocab_size}",
        "",
        f"SAVE_INTERVAL={s.save_interval}",
        f"LOG_INTERVAL={s.log_interval}",
        f"EVAL_INTERVAL={s.eval_interval}",
        "",
        f"TRAIN_SAMPLES={s.train_samples:_}",
    ]
    if s.train_tokens is not None:
        lines.append(f"TRAIN_TOKENS={s.train_tokens:_}")
    lines += [
        "",
        f"LR_DECAY_SAMPLES={s.lr_decay_samples:_}",
        f"LR_WARMUP_SAMPLES={s.lr_warmup_samples:_}",
        "",
        'OPTIMIZER_ARGS=" \\',
        "    --optimizer adam \\",
        "    --adam-beta1 0.9 \\",
        "    --adam-beta2 0.95 \\",
        "    --adam-eps 1e-8 \\",
        f"    --lr {_fmt_float(s.lr)} \\",
        f"    --min-lr {_fmt_float(s.min_lr)} \\",
        "    --lr-decay-style cosine \\",
        "    --lr-decay-samples $LR_DECAY_SAMPLES \\",
        "    --lr-warmup-samples $LR_WARMUP_SAMPLES \\",
        "    --clip-grad 1.0 \\",
        "    --weight-decay 1e-1 \\",
        "    --use-distributed-optimizer \\",
        '    "',
        "",
        'EXIT_OPTS=" \\',
        f"    --exit-duration-in-mins {s.exit_duration} \\",
        '    "',
        "",
        'GPT_ARGS=" \\',
        "    --num-layers $NLAYERS \\",
        "    --hidden-size $NHIDDEN \\",
        "    --num-attention-heads $NHEADS \\",
        "    --seq-length $SEQ_LEN \\",
        "    --max-position-embeddings $SEQ_LEN \\",
        "    --micro-batch-size $MICRO_BATCH_SIZE \\",
        "    --global-batch-size $GLOBAL_BATCH_SIZE \\",
        "    --train-samples $TRAIN_SAMPLES \\",
        "    --vocab-file $VOCAB_FILE \\",
        "    --merge-file $MERGE_FILE \\",
        "    --bf16 \\",
        "    --seed 42 \\",
        "    --recompute-activations \\",
        "    --init-method-std 0.0048 \\",
        "    --position-embedding-type rope \\",
        "    --use-flash-attn \\",
        "    --sequence-parallel \\",
        "    $OPTIMIZER_ARGS \\",
        "    $EXIT_OPTS \\",
        '    "',
        "",
        'OUTPUT_ARGS=" \\',
        "    --log-interval $LOG_INTERVAL \\",
        "    --save-interval $SAVE_INTERVAL \\",
        "    --eval-interval $EVAL_INTERVAL \\",
        "    --eval-iters 10 \\",
        "    --tensorboard-dir $TENSORBOARD_PATH \\",
        "    --tensorboard-queue-size 5 \\",
        "    --log-timers-to-tensorboard \\",
        "    --log-batch-size-to-tensorboard \\",
        "    --log-validation-ppl-to-tensorboard \\",
        '    "',
        "",
    ]
    return lines


def _launcher(p: ScriptPlan) -> list[str]:
    return [
        'export LAUNCHER="python -u -m torch.distributed.run \\',
        "    --nproc_per_node $GPUS_PER_NODE \\",
        "    --nnodes $NNODES \\",
        "    --rdzv_endpoint $MASTER_ADDR:$MASTER_PORT \\",
        "    --rdzv_backend c10d \\",
        "    --max_restarts 0 \\",
        "    --tee 3 \\",
        '    "',
        "",
        'export CMD=" \\',
        "    $(pwd)/pretrain_gpt.py \\",
        "    --tensor-model-parallel-size $TP_SIZE \\",
        "    --pipeline-model-parallel-size $PP_SIZE \\",
        "    $GPT_ARGS \\",
        "    $OUTPUT_ARGS \\",
        "    --save $CHECKPOINT_PATH \\",
        "    --data-path $DATA_PATH \\",
        "    --data-impl mmap \\",
        "    --split 949,50,1 \\",
        "    --distributed-backend nccl \\",
        '    "',
        "",
        'if [ "$LOAD_CHECKPOINTS" = true ] ; then',
        '    export CMD="$CMD\\',
        "        --load $CHECKPOINT_PATH \\",
        '        "',
        "fi",
        "echo $CMD",
        "",
    ]


def _execution(p: ScriptPlan) -> list[str]:
    return [
        f"SINGULARITY_FILE={p.container_image}",
        "",
        "(srun --jobid $SLURM_JOBID --cpu-bind=v --mpi=pmi2 \\",
        '    apptainer exec --bind="$MEGATRON_LM_REPO",data,"$DATA_OUTPUT_PATH" \\',
        '    --nv "$SINGULARITY_FILE" \\',
        '    bash -c "$LAUNCHER  $CMD" 2>&1 | tee -a "$LOGS_PATH"/main_log.txt) &',
        "wait",
        "",
        'echo "END TIME: $(date)"',
    ]


SECTIONS = (
    ("directives", _directives),
    ("input-data", _input_data),
    ("output-paths", _output_paths),
    ("environment", _environment),
    ("network", _network),
    ("layout", _layout),
    ("hyperparameters", _hyperparameters),
    ("launcher", _launcher),
    ("execution", _execution),
)


def render_sections(plan: ScriptPlan) -> dict[str, list[str]]:
    return {name: build(plan) for name, build in SECTIONS}


def render(plan: ScriptPlan, machine: Optional[MachineSpec] = None) -> str:
    """Render the job script; refuses plans whose layout has validation errors.

    The memory check runs against ``machine`` (the Booster by default).
    """
    violations = validate(plan.layout, plan.model, machine or builtin_booster())
    if has_errors(violations):
        raise PlanRejected(violations)
    lines = [line for _, build in SECTIONS for line in build(plan)]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# extraction

_SBATCH = re.compile(r"^#SBATCH --([a-z-]+)=(\S*)\s*$")
_ASSIGN = re.compile(r"^(?:export )?([A-Z][A-Z0-9_]*)=(\S*?)(?:\s+#.*)?$")
_ARG = re.compile(r"^\s+--([a-z-]+) (\S+) \\$")
_OUTPUT_PATH = re.compile(r'^"(?:(.*)/)?\$\{SLURM_JOB_ID\}_\$\{SLURM_JOB_NAME\}"$')


def _to_int(value: str, lineno: int, key: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ScriptParseError(lineno, f"{key}: expected an integer, got {value!r}") from None


def _to_float(value: str, lineno: int, key: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ScriptParseError(lineno, f"{key}: expected a number, got {value!r}") from None


def extract(script: str) -> ScriptPlan:
    """Parse a rendered job script back into a :class:`ScriptPlan`."""
    lines = script.split("\n")
    if not lines or lines[0].strip() != "#!/bin/bash":
        raise ScriptParseError(1, "missing '#!/bin/bash' header")

    sbatch: dict[str, tuple[str, int]] = {}
    assigns: dict[str, tuple[str, int]] = {}
    args: dict[str, tuple[str, int]] = {}
    exports: dict[str, str] = {}
    for i, line in enumerate(lines, start=1):
        if m := _SBATCH.match(line):
            sbatch[m.group(1)] = (m.group(2), i)
        elif m := _ASSIGN.match(line):
            key, value = m.group(1), m.group(2)
            assigns[key] = (value, i)
            if line.startswith("export "):
                exports[key] = value
        elif m := _ARG.match(line):
            args[m.group(1)] = (m.group(2), i)

    end = len(lines)

    def need(table, key):
        if key not in table:
            raise ScriptParseError(end, f"missing {key}")
        return table[key]

    def as_int(table, key):
        value, ln = need(table, key)
        return _to_int(value, ln, key)

    def as_float(table, key):
        value, ln = need(table, key)
        return _to_float(value, ln, key)

    walltime_text, wl = need(sbatch, "time")
    try:
        walltime = parse_walltime(walltime_text)
    except ValueError as exc:
        raise ScriptParseError(wl, str(exc)) from None
    gres, gl = need(sbatch, "gres")
    if not gres.startswith("gpu:"):
        raise ScriptParseError(gl, f"unexpected gres {gres!r}")
    gpus_per_node = _to_int(gres[4:], gl, "gres")
    if as_int(assigns, "GPUS_PER_NODE") != gpus_per_node:
        raise ScriptParseError(need(assigns, "GPUS_PER_NODE")[1],
                               "GPUS_PER_NODE disagrees with --gres")

    layout = ParallelLayout(
        tp=as_int(assigns, "TP_SIZE"),
        pp=as_int(assigns, "PP_SIZE"),
        dp=as_int(assigns, "DP_SIZE"),
        micro_batch=as_int(assigns, "MICRO_BATCH_SIZE"),
        gas=as_int(assigns, "GAS"),
        global_batch=as_int(assigns, "GLOBAL_BATCH_SIZE"),
        nodes=as_int(sbatch, "nodes"),
        gpus_per_node=gpus_per_node,
    )
    model = ModelSpec(
        num_layers=as_int(assigns, "NLAYERS"),
        hidden_size=as_int(assigns, "NHIDDEN"),
        num_heads=as_int(assigns, "NHEADS"),
        seq_len=as_int(assigns, "SEQ_LEN"),
        vocab_size=as_int(assigns, "VOCAB_SIZE"),
    )
    schedule = ScheduleSpec(
        save_interval=as_int(assigns, "SAVE_INTERVAL"),
        log_interval=as_int(assigns, "LOG_INTERVAL"),
        eval_interval=as_int(assigns, "EVAL_INTERVAL"),
        train_samples=as_int(assigns, "TRAIN_SAMPLES"),
        train_tokens=as_int(assigns, "TRAIN_TOKENS") if "TRAIN_TOKENS" in assigns else None,
        lr=as_float(args, "lr"),
        min_lr=as_float(args, "min-lr"),
        lr_decay_samples=as_int(assigns, "LR_DECAY_SAMPLES"),
        lr_warmup_samples=as_int(assigns, "LR_WARMUP_SAMPLES"),
        walltime_limit=walltime,
        exit_duration=as_int(args, "exit-duration-in-mins"),
    )

    known = {k for _, pairs in DEFAULT_GROUPS.items() for k, _ in pairs}
    debug_vars = {k for k, _ in DEFAULT_GROUPS[DEBUG]}
    overrides = {k: v for k, v in exports.items() if k in known}
    for k in known - debug_vars:
        if k not in overrides:
            raise ScriptParseError(end, f"missing export {k}")
    debug = any(k in exports for k in debug_vars)
    profile = EnvProfile(debug=debug).with_overrides(overrides)

    out_value, ol = need(assigns, "DATA_OUTPUT_PATH")
    m = _OUTPUT_PATH.match(out_value)
    if not m:
        raise ScriptParseError(ol, f"unexpected DATA_OUTPUT_PATH {out_value!r}")

    load, ll = need(assigns, "LOAD_CHECKPOINTS")
    if load not in ("true", "false"):
        raise ScriptParseError(ll, f"LOAD_CHECKPOINTS must be true or false, got {load!r}")

    return ScriptPlan(
        job_name=need(sbatch, "job-name")[0],
        account=need(sbatch, "account")[0],
        partition=need(sbatch, "partition")[0],
        layout=layout,
        model=model,
        schedule=schedule,
        env_profile=profile,
        container_image=need(assigns, "SINGULARITY_FILE")[0],
        data_paths=DataPaths(
            vocab=need(assigns, "VOCAB_FILE")[0],
            merges=need(assigns, "MERGE_FILE")[0],
            dataset=need(assigns, "DATA_PATH")[0],
            output_root=m.group(1) or "",
        ),
        load_checkpoints=load == "true",
        master_port=as_int(assigns, "MASTER_PORT"),
        cpus_per_task=as_int(sbatch, "cpus-per-task"),
    )


def example_plan() -> ScriptPlan:
    """The 2-node, 800M-parameter example run."""
    from .layout import example_layout
    from .training import example_model, example_schedule

    return ScriptPlan(
        job_name="800M_model",
        account="account",
        partition="booster",
        layout=example_layout(),
        model=example_model(),
        schedule=example_schedule(),
    )
