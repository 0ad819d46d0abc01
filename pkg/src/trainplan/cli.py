"""Command-line entry point.

Exit status: 0 on success, 1 when validation finds errors, 2 on usage or
input parse errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import chain, logs, plots
from .configfile import ConfigError, RunConfig, load_config, parse_config
from .layout import (allreduce_time, enumerate_layouts, has_errors, memory_estimate,
                     validate)
from .machine import (GIB, TBIT, TOPOLOGY_ASSUMPTION, NodeSet, allocation_bisection,
                      total_gpus)
from .resilience import (INF, FailureModel, SimConfig, geometric_grid,
                         optimal_interval, simulate, sweep)
from .script import PlanRejected, render
from .training import param_count

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(path) -> RunConfig:
    if path is None:
        return parse_config("")
    return load_config(path)


def _read_lines(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p.read_text().splitlines()


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write(text: str, path, out):
    if path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    else:
        out.write(text)


def _gib(x: float) -> str:
    return f"{x / GIB:.2f}"


# -------------------------------------------------------------- machine-info

def cmd_machine_info(args, out) -> int:
    m = _config(args.config).machine
    print(f"machine            {m.name}", file=out)
    print(f"nodes              {m.num_nodes}", file=out)
    print(f"gpus per node      {m.gpus_per_node}", file=out)
    print(f"total gpus         {total_gpus(m)}", file=out)
    print(f"gpu memory         {_gib(m.gpu_memory_bytes)} GiB", file=out)
    print(f"cpu cores/node     {m.cpu_cores_per_node}", file=out)
    print(f"cells              {m.num_cells} x {m.cell_size_nodes} nodes", file=out)
    print(f"intra-cell bisect  {m.intra_cell_bisection / TBIT:g} Tbit/s", file=out)
    print(f"cell-pair bisect   {m.inter_cell_pair_bisection / TBIT:g} Tbit/s", file=out)
    print(f"system bisect      {m.system_bisection / TBIT:g} Tbit/s", file=out)
    if args.nodes:
        if not 1 <= args.nodes <= m.num_nodes:
            raise UsageError(f"--nodes must be in [1, {m.num_nodes}]")
        nodes = NodeSet.first(args.nodes, args.first_node)
        bw = allocation_bisection(m, nodes)
        print(f"allocation {args.nodes} nodes from {args.first_node}: "
              f"{bw / TBIT:g} Tbit/s bisection", file=out)
        print(f"note: {TOPOLOGY_ASSUMPTION}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------- plan

PLAN_FIELDS = ["tp", "pp", "dp", "micro_batch", "gas", "global_batch", "nodes",
               "gpus_per_node", "weights", "gradients", "optimizer_states",
               "activations", "total"]


def plan_csv(found) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLAN_FIELDS)
    for lo, mem in found:
        w.writerow([lo.tp, lo.pp, lo.dp, lo.micro_batch, lo.gas, lo.global_batch,
                    lo.nodes, lo.gpus_per_node,
                    *(round(getattr(mem, f)) for f in PLAN_FIELDS[8:])])
    return buf.getvalue()


def cmd_plan(args, out) -> int:
    cfg = _config(args.config)
    m, model, lo = cfg.machine, cfg.model, cfg.layout
    pc = param_count(model)
    print(f"model: {model.num_layers} layers, hidden {model.hidden_size}, "
          f"{model.num_heads} heads, seq {model.seq_len}, vocab {model.vocab_size}", file=out)
    print(f"parameters: embedding {pc.embedding:,}  blocks {pc.block:,}  total {pc.total:,}",
          file=out)
    print(f"layout tp={lo.tp} pp={lo.pp} dp={lo.dp} micro={lo.micro_batch} gas={lo.gas} "
          f"global={lo.global_batch} nodes={lo.nodes} gpus_per_node={lo.gpus_per_node}",
          file=out)
    violations = validate(lo, model, m)
    for v in violations:
        print(f"  {v}", file=out)
    if lo.pp <= model.num_layers:
        mem = memory_estimate(lo, model)
        print(f"per-GPU memory: weights {_gib(mem.weights)} + gradients {_gib(mem.gradients)} "
              f"+ optimizer {_gib(mem.optimizer_states)} + activations "
              f"{_gib(mem.activations)} = {_gib(mem.total)} GiB "
              f"(limit {_gib(m.gpu_memory_bytes)} GiB)", file=out)
        if lo.nodes <= m.num_nodes:
            alloc = allocation_bisection(m, NodeSet.first(lo.nodes))
            per_node = alloc / lo.nodes
            t = allreduce_time(mem.gradients, lo.dp, per_node)
            print(f"gradient all-reduce (ring, {per_node / 1e9:.0f} Gbit/s per node): "
                  f"{t:.3f} s per step", file=out)

    micros = args.micro_batches or [lo.micro_batch]
    nodes = args.nodes or lo.nodes
    if not 1 <= nodes <= m.num_nodes:
        raise UsageError(f"nodes must be in [1, {m.num_nodes}]")
    found = enumerate_layouts(model, m, nodes, lo.global_batch, micros)
    print(f"\n{len(found)} feasible layouts on {nodes} nodes "
          f"(global batch {lo.global_batch}, micro batches {micros}):", file=out)
    print(f"{'tp':>4} {'pp':>4} {'dp':>5} {'micro':>5} {'gas':>5} {'GiB/GPU':>9}", file=out)
    for layout, mem in found[: args.top]:
        print(f"{layout.tp:>4} {layout.pp:>4} {layout.dp:>5} {layout.micro_batch:>5} "
              f"{layout.gas:>5} {mem.total / GIB:>9.2f}", file=out)
    if len(found) > args.top:
        print(f"... {len(found) - args.top} more" + (" in the CSV" if args.csv else " (--csv lists all)"), file=out)
    if args.csv:
        _write(plan_csv(found), args.csv, out)
    if args.figures and found:
        plots.memory_breakdown(found, Path(args.figures) / "plan_memory.png",
                               limit_bytes=m.gpu_memory_bytes)
    return EXIT_INVALID if has_errors(violations) else EXIT_OK


# -------------------------------------------------------------------- render

def cmd_render(args, out) -> int:
    cfg = _config(args.config)
    plan = cfg.plan
    if args.profile == "debug":
        plan = replace(plan, env_profile=replace(plan.env_profile, debug=True))
    try:
        text = render(plan, cfg.machine)
    except PlanRejected as exc:
        for v in exc.violations:
            print(str(v), file=out)
        return EXIT_INVALID
    _write(text, args.output, out)
    return EXIT_OK


# --------------------------------------------------------------------- chain

def cmd_chain(args, out) -> int:
    if args.events:
        try:
            events = chain.parse_events(_read_lines(args.events))
        except ValueError as exc:
            raise UsageError(f"{args.events}: {exc}")
        if args.target_steps is None:
            raise UsageError("--target-steps is required with --events")
        target = args.target_steps
    else:
        cfg = _sim_config(args)
        trace = []
        simulate(cfg, run=args.run, trace=trace)
        events = chain.events_from_trace(trace, args.step_seconds)
        target = int(round(args.work / args.step_seconds))
    state = chain.ChainState(target_steps=target, failure_budget=args.failure_budget)
    transitions = list(chain.drive(state, events))
    _write(chain.transitions_csv(transitions), args.out, out)
    final = transitions[-1].state
    errors = [t for t in transitions if t.error]
    print(f"jobs={final.job_index} dependencies={len(final.dependencies)} "
          f"step={final.current_step}/{target} failures={final.failures} "
          f"phase={final.phase.value} protocol_errors={len(errors)}", file=sys.stderr)
    return EXIT_INVALID if errors else EXIT_OK


# ------------------------------------------------------------------ simulate

def _sim_config(args, interval=None) -> SimConfig:
    try:
        return SimConfig(
            total_work=args.work,
            checkpoint_interval=interval or args.interval[0],
            checkpoint_cost=args.cost,
            restart_cost=args.restart,
            walltime=args.walltime,
            failure=FailureModel(args.mtbf, seed=args.seed),
        )
    except ValueError as exc:
        raise UsageError(str(exc))


SWEEP_FIELDS = ["interval", "analytic_goodput", "simulated_mean", "stddev", "jobs", "failures"]


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for r in rows:
        w.writerow([f"{r.interval:.6g}", f"{r.analytic:.6f}", f"{r.mean:.6f}",
                    f"{r.std:.6f}", f"{r.jobs:.4f}", f"{r.failures:.4f}"])
    return buf.getvalue()


def cmd_simulate(args, out) -> int:
    opt = optimal_interval(args.cost, args.mtbf) if math.isfinite(args.mtbf) else None
    if args.interval:
        intervals = args.interval
    elif opt:
        intervals = [i for i in geometric_grid(opt, 1.25, 5) if i > args.cost]
    else:
        raise UsageError("--interval is required when --mtbf is infinite")
    for i in intervals:
        _sim_config(args, i)
    rows = sweep(intervals, args.cost, args.mtbf, args.work, walltime=args.walltime,
                 restart_cost=args.restart, runs=args.runs, seed=args.seed)
    _write(sweep_csv(rows), args.out, out)
    note = f"mtbf {args.mtbf:g} s is an assumed input"
    if opt:
        note += f"; first-order optimal interval {opt:.1f} s"
    out_of_regime = [r.interval for r in rows if not r.in_regime]
    if out_of_regime:
        note += f"; analytic model outside its regime for intervals {out_of_regime}"
    print(note, file=sys.stderr)
    if args.figures:
        plots.goodput_sweep(rows, Path(args.figures) / "goodput_sweep.png", opt)
    return EXIT_OK


# ------------------------------------------------------------------- analyze

def _load_log(path):
    diags = []
    try:
        records = logs.parse_log(_read_lines(path), diags)
    except logs.EmptyLogError as exc:
        raise UsageError(f"{path}: {exc}")
    return records, diags


def cmd_analyze(args, out) -> int:
    if not (args.log or args.power or args.scaling):
        raise UsageError("analyze needs --log, --power or --scaling")
    model = None
    if args.model_config:
        model = load_config(args.model_config).model
    seq_len = args.seq_len or (model.seq_len if model else None)
    rows = []
    records = other = None
    if args.log:
        records, diags = _load_log(args.log)
        for d in diags:
            print(f"{args.log}: {d}", file=sys.stderr)
        print(f"log {args.log}: {len(records)} iterations "
              f"({records[0].iteration}..{records[-1].iteration})", file=out)
        mean = logs.mean_elapsed_ms(records, args.warmup)
        print(f"mean elapsed (after {args.warmup} warmup): {mean:.3f} ms/iter", file=out)
        rows.append(("mean_elapsed_ms", mean))
        if args.global_batch and seq_len:
            tps = logs.throughput(records, args.global_batch, seq_len, args.warmup)
            print(f"throughput: {tps:.1f} tokens/s", file=out)
            rows.append(("tokens_per_s", tps))
            if model:
                fl = logs.flops_rate(records, model, args.global_batch, args.warmup)
                print(f"model FLOPs: {fl:.4g} FLOP/s (6 * params * tokens)", file=out)
                rows.append(("model_flops_per_s", fl))
    if args.compare:
        if records is None:
            raise UsageError("--compare needs --log")
        other, _ = _load_log(args.compare)
        c = logs.compare(records, other)
        back = logs.compare(other, records)
        print(f"compare {args.log} -> {args.compare}: speedup {c.speedup:.4f}x, "
              f"iteration time reduction {c.reduction:.2f}%", file=out)
        print(f"compare {args.compare} -> {args.log}: speedup {back.speedup:.4f}x, "
              f"iteration time reduction {back.reduction:.2f}%", file=out)
        rows += [("speedup", c.speedup), ("reduction_percent", c.reduction)]
    if args.power:
        try:
            samples = logs.parse_power(_read_lines(args.power))
        except ValueError as exc:
            raise UsageError(f"{args.power}: {exc}")
        energy = logs.energy_joules(samples)
        print(f"energy: {energy:.6g} J over {samples[-1].t - samples[0].t:g} s", file=out)
        rows.append(("energy_joules", energy))
        tokens = args.tokens
        if tokens is None and records is not None and args.global_batch and seq_len:
            tokens = len(records) * args.global_batch * seq_len
        if tokens:
            ept = logs.energy_per_token(samples, tokens)
            print(f"energy per token: {ept:.6g} J/token ({tokens} tokens)", file=out)
            rows.append(("joules_per_token", ept))
        if args.figures:
            plots.power_trace(samples, Path(args.figures) / "power.png")
    if args.scaling:
        points = []
        for line in _read_lines(args.scaling)[1:]:
            if line.strip():
                n, r = line.split(",")
                points.append((int(n), float(r)))
        for n, eff in logs.scaling_efficiency(points):
            print(f"scaling efficiency at {n} nodes: {eff:.4f}", file=out)
            rows.append((f"efficiency_{n}_nodes", eff))
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows((k, repr(float(v))) for k, v in rows)
        _write(buf.getvalue(), args.csv, out)
    if args.figures and records is not None:
        plots.iteration_times(records, Path(args.figures) / "iteration_times.png", other,
                              labels=(Path(args.log).name,
                                      Path(args.compare).name if args.compare else ""))
    return EXIT_OK


# -------------------------------------------------------------------- parser

def _add_sim_flags(p):
    p.add_argument("--cost", type=float, required=True, help="checkpoint write time [s]")
    p.add_argument("--mtbf", type=float, default=INF,
                   help="assumed mean time between failures of the allocation [s]")
    p.add_argument("--walltime", type=float, default=24 * 3600, help="job walltime [s]")
    p.add_argument("--work", type=float, required=True, help="useful compute needed [s]")
    p.add_argument("--restart", type=float, default=0.0, help="restart cost after a failure [s]")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trainplan",
        description="Plan, render, orchestrate and simulate distributed LLM training runs.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("machine-info", help="describe the machine and allocation bandwidth")
    p.add_argument("--config")
    p.add_argument("--nodes", type=int)
    p.add_argument("--first-node", type=int, default=0)
    p.set_defaults(func=cmd_machine_info)

    p = sub.add_parser("plan", help="validate the configured layout and enumerate alternatives")
    p.add_argument("--config")
    p.add_argument("--nodes", type=int)
    p.add_argument("--micro-batches", type=_int_list)
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--csv")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("render", help="write the Slurm job script")
    p.add_argument("--config")
    p.add_argument("-o", "--output")
    p.add_argument("--profile", choices=("default", "debug"), default="default")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("chain", help="run the chained-job state machine")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--events", help="event file, one 'kind step timestamp' per line")
    src.add_argument("--simulate", action="store_true", help="drive from the simulator")
    p.add_argument("--target-steps", type=int)
    p.add_argument("--failure-budget", type=int, default=3)
    p.add_argument("--out")
    p.add_argument("--interval", type=_float_list, default=[3600.0])
    p.add_argument("--cost", type=float, default=0.0)
    p.add_argument("--mtbf", type=float, default=INF)
    p.add_argument("--walltime", type=float, default=24 * 3600)
    p.add_argument("--work", type=float, default=60 * 3600)
    p.add_argument("--restart", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run", type=int, default=0)
    p.add_argument("--step-seconds", type=float, default=1.0)
    p.set_defaults(func=cmd_chain)

    p = sub.add_parser("simulate", help="goodput sweep over checkpoint intervals")
    p.add_argument("--interval", type=_float_list, help="comma-separated intervals [s]")
    _add_sim_flags(p)
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--out")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="throughput, comparison and energy from logs")
    p.add_argument("--log")
    p.add_argument("--compare")
    p.add_argument("--power")
    p.add_argument("--scaling", help="CSV 'nodes,tokens_per_s' with header")
    p.add_argument("--global-batch", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--model-config")
    p.add_argument("--tokens", type=int, help="tokens processed during the power window")
    p.add_argument("--warmup", type=int, default=logs.DEFAULT_WARMUP)
    p.add_argument("--csv")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_analyze)
    return parser


def run(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, out)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"trainplan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
