"""Sharded mixed-precision optimizer-state offloading toolkit.

Plan where each subgroup of a rank's optimizer shard updates (host CPU or
the fast tier), simulate the resulting transfer/compute schedule on a
machine profile, and execute the numerics on emulated devices to prove
every schedule reproduces the plain sequential update bit for bit.
"""

from .catalog import PROFILES, get_profile, list_profiles
from .core import (
    FootprintReport,
    Precision,
    ShardedOptimizer,
    Subgroup,
    SystemProfile,
    downscale_rne,
    footprint,
    shard,
    upscale,
)
from .executor import (
    AdamHyper,
    EmulatedDevice,
    ExecMode,
    ExecutionResult,
    adam_step_subgroup,
    execute_plan,
    flush_gradients,
    sequential_oracle,
)
from .perfmodel import (
    ALL_CPU,
    StrideResult,
    estimate_update_time,
    k_real_value,
    optimal_stride,
    plan_stride_for,
)
from .scheduler import (
    Action,
    ActionKind,
    Device,
    InfeasibleConfigError,
    Lane,
    Placement,
    ScheduledAction,
    Stream,
    UpdatePlan,
    build_plan,
    next_on_gpu,
    prev_on_gpu,
    run_update,
    validate_schedule,
)
from .sim import (
    ApproachConfig,
    ApproachKind,
    GradFlushStrategy,
    IterationModel,
    IterationReport,
    SweepEntry,
    SweepResult,
    Timeline,
    compare_approaches,
    grad_flush_throughput,
    memory_trace,
    simulate_iteration,
    simulate_update_phase,
    sweep_stride,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_CPU",
    "Action",
    "ActionKind",
    "AdamHyper",
    "ApproachConfig",
    "ApproachKind",
    "Device",
    "EmulatedDevice",
    "ExecMode",
    "ExecutionResult",
    "FootprintReport",
    "GradFlushStrategy",
    "InfeasibleConfigError",
    "IterationModel",
    "IterationReport",
    "Lane",
    "PROFILES",
    "Placement",
    "Precision",
    "ScheduledAction",
    "ShardedOptimizer",
    "Stream",
    "StrideResult",
    "Subgroup",
    "SweepEntry",
    "SweepResult",
    "SystemProfile",
    "Timeline",
    "UpdatePlan",
    "adam_step_subgroup",
    "build_plan",
    "compare_approaches",
    "downscale_rne",
    "estimate_update_time",
    "execute_plan",
    "flush_gradients",
    "footprint",
    "get_profile",
    "grad_flush_throughput",
    "k_real_value",
    "list_profiles",
    "memory_trace",
    "next_on_gpu",
    "optimal_stride",
    "plan_stride_for",
    "prev_on_gpu",
    "run_update",
    "sequential_oracle",
    "shard",
    "simulate_iteration",
    "simulate_update_phase",
    "sweep_stride",
    "upscale",
    "validate_schedule",
]
