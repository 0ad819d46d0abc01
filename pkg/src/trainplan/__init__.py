"""Planning, rendering, orchestration and simulation for distributed LLM training runs."""

from .machine import MachineSpec, NodeSet, allocation_bisection, builtin_booster, cell_of, total_gpus
from .training import ModelSpec, ScheduleSpec, param_count, tokens_per_step
from .layout import (Code, MemoryEstimate, ParallelLayout, Violation, allreduce_time,
                     derive_dp, derive_gas, enumerate_layouts, memory_estimate, validate)
from .script import EnvProfile, ScriptPlan, extract, render
from .chain import ChainEvent, ChainState, latest_checkpoint, next_action, plan_chain
from .resilience import (FailureModel, SimConfig, SimReport, checkpoint_cost_model,
                         expected_goodput, optimal_interval, simulate)
from .logs import (LogRecord, PowerSample, compare, energy_per_token, flops_rate, parse_log,
                   scaling_efficiency, throughput)

__version__ = "0.1.0"
