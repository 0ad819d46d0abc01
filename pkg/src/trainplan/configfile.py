"""Strict INI-style run configuration.

Sections and keys::

    [machine]   preset, name, num_nodes, gpus_per_node, gpu_memory (GiB),
                cpu_cores_per_node, cell_size_nodes, intra_cell_bisection,
                inter_cell_pair_bisection, system_bisection (Tbit/s)
    [model]     NLAYERS NHIDDEN NHEADS SEQ_LEN VOCAB_SIZE
    [schedule]  SAVE_INTERVAL LOG_INTERVAL EVAL_INTERVAL TRAIN_SAMPLES
                TRAIN_TOKENS LR MIN_LR LR_DECAY_SAMPLES LR_WARMUP_SAMPLES
                WALLTIME (HH:MM:SS) EXIT_DURATION_IN_MINS
    [layout]    NNODES GPUS_PER_NODE TP_SIZE PP_SIZE MICRO_BATCH_SIZE
                GLOBAL_BATCH_SIZE, optional DP_SIZE GAS
    [job]       JOB_NAME ACCOUNT PARTITION CPUS_PER_TASK MASTER_PORT
                LOAD_CHECKPOINTS
    [paths]     VOCAB_FILE MERGE_FILE DATA_PATH OUTPUT_ROOT SINGULARITY_FILE
    [env]       DEBUG, plus overrides of any exported variable

Anything left out falls back to the 2-node Booster example run.  Unknown
sections or keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .layout import ParallelLayout
from .machine import GIB, TBIT, MachineSpec, builtin_booster
from .script import DataPaths, EnvProfile, ScriptPlan, example_plan, parse_walltime
from .training import ModelSpec, ScheduleSpec


class ConfigError(ValueError):
    pass


MACHINE_KEYS = {
    "preset", "name", "num_nodes", "gpus_per_node", "gpu_memory", "cpu_cores_per_node",
    "cell_size_nodes", "intra_cell_bisection", "inter_cell_pair_bisection",
    "system_bisection",
}
MODEL_KEYS = {
    "NLAYERS": "num_layers", "NHIDDEN": "hidden_size", "NHEADS": "num_heads",
    "SEQ_LEN": "seq_len", "VOCAB_SIZE": "vocab_size",
}
SCHEDULE_KEYS = {
    "SAVE_INTERVAL": "save_interval", "LOG_INTERVAL": "log_interval",
    "EVAL_INTERVAL": "eval_interval", "TRAIN_SAMPLES": "train_samples",
    "TRAIN_TOKENS": "train_tokens", "LR": "lr", "MIN_LR": "min_lr",
    "LR_DECAY_SAMPLES": "lr_decay_samples", "LR_WARMUP_SAMPLES": "lr_warmup_samples",
    "WALLTIME": "walltime_limit", "EXIT_DURATION_IN_MINS": "exit_duration",
}
LAYOUT_KEYS = {
    "NNODES", "GPUS_PER_NODE", "TP_SIZE", "PP_SIZE", "DP_SIZE",
    "MICRO_BATCH_SIZE", "GLOBAL_BATCH_SIZE", "GAS",
}
JOB_KEYS = {
    "JOB_NAME": "job_name", "ACCOUNT": "account", "PARTITION": "partition",
    "CPUS_PER_TASK": "cpus_per_task", "MASTER_PORT": "master_port",
    "LOAD_CHECKPOINTS": "load_checkpoints",
}
PATH_KEYS = {
    "VOCAB_FILE": "vocab", "MERGE_FILE": "merges", "DATA_PATH": "dataset",
    "OUTPUT_ROOT": "output_root",
}
SECTIONS = ("machine", "model", "schedule", "layout", "job", "paths", "env")


@dataclass(frozen=True)
class RunConfig:
    machine: MachineSpec
    plan: ScriptPlan

    @property
    def model(self) -> ModelSpec:
        return self.plan.model

    @property
    def layout(self) -> ParallelLayout:
        return self.plan.layout

    @property
    def schedule(self) -> ScheduleSpec:
        return self.plan.schedule


def _int(section, key, value) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}") from None


def _float(section, key, value) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {value!r}") from None


def _bool(section, key, value) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key}: expected true/false, got {value!r}")


def _check_keys(section: str, items: dict, allowed) -> None:
    unknown = sorted(set(items) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")


def _machine(items: dict) -> MachineSpec:
    _check_keys("machine", items, MACHINE_KEYS)
    preset = items.pop("preset", "booster")
    if preset != "booster":
        raise ConfigError(f"[machine] unknown preset {preset!r}")
    spec = builtin_booster()
    kw = {}
    for key, value in items.items():
        if key == "name":
            kw[key] = value
        elif key == "gpu_memory":
            kw["gpu_memory_bytes"] = int(round(_float("machine", key, value) * GIB))
        elif key.endswith("bisection"):
            kw[key] = _float("machine", key, value) * TBIT
        else:
            kw[key] = _int("machine", key, value)
    try:
        return replace(spec, **kw)
    except ValueError as exc:
        raise ConfigError(f"[machine] {exc}") from None


def _layout(items: dict, base: ParallelLayout) -> ParallelLayout:
    _check_keys("layout", items, LAYOUT_KEYS)
    v = {k: _int("layout", k, x) for k, x in items.items()}
    nodes = v.get("NNODES", base.nodes)
    gpn = v.get("GPUS_PER_NODE", base.gpus_per_node)
    tp = v.get("TP_SIZE", base.tp)
    pp = v.get("PP_SIZE", base.pp)
    micro = v.get("MICRO_BATCH_SIZE", base.micro_batch)
    global_batch = v.get("GLOBAL_BATCH_SIZE", base.global_batch)
    if min(nodes, gpn, tp, pp, micro, global_batch) < 1:
        raise ConfigError("[layout] all sizes must be >= 1")
    # indivisible values are kept (floored) so validation can report them
    dp = v.get("DP_SIZE", max(1, nodes * gpn // (tp * pp)))
    gas = v.get("GAS", max(1, global_batch // (micro * dp)))
    return ParallelLayout(tp, pp, dp, micro, gas, global_batch, nodes, gpn)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None,
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")

    def section(name, upper=True):
        if not parser.has_section(name):
            return {}
        return {(k.upper() if upper else k.lower()): v for k, v in parser.items(name)}

    base = example_plan()
    machine = _machine(section("machine", upper=False))

    items = section("model")
    _check_keys("model", items, MODEL_KEYS)
    try:
        model = replace(base.model, **{MODEL_KEYS[k]: _int("model", k, x) for k, x in items.items()})
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None

    items = section("schedule")
    _check_keys("schedule", items, SCHEDULE_KEYS)
    kw = {}
    for k, x in items.items():
        if k in ("LR", "MIN_LR"):
            kw[SCHEDULE_KEYS[k]] = _float("schedule", k, x)
        elif k == "WALLTIME":
            try:
                kw["walltime_limit"] = parse_walltime(x.strip()) if ":" in x else int(x)
            except ValueError as exc:
                raise ConfigError(f"[schedule] WALLTIME: {exc}") from None
        else:
            kw[SCHEDULE_KEYS[k]] = _int("schedule", k, x)
    try:
        schedule = replace(base.schedule, **kw)
    except ValueError as exc:
        raise ConfigError(f"[schedule] {exc}") from None

    layout = _layout(section("layout"), base.layout)

    items = section("job")
    _check_keys("job", items, JOB_KEYS)
    job = {}
    for k, x in items.items():
        attr = JOB_KEYS[k]
        if attr in ("cpus_per_task", "master_port"):
            job[attr] = _int("job", k, x)
        elif attr == "load_checkpoints":
            job[attr] = _bool("job", k, x)
        else:
            job[attr] = x.strip()

    items = section("paths")
    _check_keys("paths", items, set(PATH_KEYS) | {"SINGULARITY_FILE"})
    container = items.pop("SINGULARITY_FILE", base.container_image).strip()
    paths = replace(DataPaths(), **{PATH_KEYS[k]: x.strip() for k, x in items.items()})

    items = section("env")
    debug = _bool("env", "DEBUG", items.pop("DEBUG")) if "DEBUG" in items else False
    try:
        env = EnvProfile(debug=debug).with_overrides({k: x.strip() for k, x in items.items()})
    except KeyError as exc:
        raise ConfigError(f"[env] {exc.args[0]}") from None

    plan = replace(base, layout=layout, model=model, schedule=schedule, env_profile=env,
                   container_image=container, data_paths=paths, **job)
    return RunConfig(machine=machine, plan=plan)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), source=str(path))


def dump_config(cfg: RunConfig) -> str:
    """Serialise ``cfg`` back to the INI form accepted by :func:`parse_config`."""
    p, m = cfg.plan, cfg.machine
    lines = ["[machine]"]
    for f in fields(MachineSpec):
        value = getattr(m, f.name)
        if f.name == "gpu_memory_bytes":
            lines.append(f"gpu_memory = {value / GIB!r}")
        elif f.name.endswith("bisection"):
            lines.append(f"{f.name} = {value / TBIT!r}")
        else:
            lines.append(f"{f.name} = {value}")
    lines.append("\n[model]")
    lines += [f"{k} = {getattr(p.model, a)}" for k, a in MODEL_KEYS.items()]
    lines.append("\n[schedule]")
    for k, a in SCHEDULE_KEYS.items():
        value = getattr(p.schedule, a)
        if value is not None:
            lines.append(f"{k} = {value!r}" if isinstance(value, float) else f"{k} = {value}")
    lo = p.layout
    lines += [
        "\n[layout]",
        f"NNODES = {lo.nodes}", f"GPUS_PER_NODE = {lo.gpus_per_node}",
        f"TP_SIZE = {lo.tp}", f"PP_SIZE = {lo.pp}", f"DP_SIZE = {lo.dp}",
        f"MICRO_BATCH_SIZE = {lo.micro_batch}", f"GAS = {lo.gas}",
        f"GLOBAL_BATCH_SIZE = {lo.global_batch}",
        "\n[job]",
    ]
    for k, a in JOB_KEYS.items():
        value = getattr(p, a)
        lines.append(f"{k} = {str(value).lower() if isinstance(value, bool) else value}")
    lines.append("\n[paths]")
    lines += [f"{k} = {getattr(p.data_paths, a)}" for k, a in PATH_KEYS.items()]
    lines.append(f"SINGULARITY_FILE = {p.container_image}")
    lines += ["\n[env]", f"DEBUG = {str(p.env_profile.debug).lower()}"]
    for g, pairs in p.env_profile.groups:
        lines += [f"{k} = {v}" for k, v in pairs]
    return "\n".join(lines) + "\n"
