"""Closed-form placement model for the interleaved update phase.

The update phase walks the rank's subgroups in order.  With interleaving,
every cycle updates ``k`` subgroups on the CPU while one subgroup's float32
state round-trips to the fast tier and is updated there, so a cycle covers
``k + 1`` subgroups.  The CPU side of a cycle costs ``k`` updates plus the
matching half-precision downscales; the fast side costs a 3x-state prefetch,
the staggered flushes (which steady-state to half a state width per CPU
subgroup), and the fast update itself.  The two sides overlap, so a cycle
costs their max; the break-even ratio ``k_real`` equates them:

    k_real = (3/B + 1/U_g) / (1/U_c + 1/D_c - 1/(2B))

where B is the per-direction channel rate, U_g/U_c the fast/CPU update
rates and D_c the CPU downscale rate (all float32 params/s).  If the
denominator is <= 0 the CPU side can never become the bottleneck and the
whole shard should stay on the CPU (``ALL_CPU``).

Two conventions express interleaving.  The *analysis ratio* ``k`` above
counts CPU subgroups per fast-tier subgroup (cycle covers ``k + 1``
subgroups).  The *schedule stride* parameterises the slot predicate
``(i + 1) % stride == 0`` (cycle covers ``stride`` subgroups, i.e. a
realised ratio of ``stride - 1``).  ``plan_stride_for`` converts analysis
ratio -> stride and is used by the sweep and model-agreement tooling.  The
planner itself (``optimal_stride``) hands its chosen integer ``k``
directly to ``build_plan`` as the stride, which biases the realised
placement one slot fast-heavier than the analysis optimum; that is the
system's defined behaviour and the acceptance numbers assume it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import SystemProfile


class _AllCpuType:
    """Singleton sentinel: keep every subgroup's update on the CPU."""

    _instance: "_AllCpuType | None" = None

    def __new__(cls) -> "_AllCpuType":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ALL_CPU"

    def __deepcopy__(self, memo) -> "_AllCpuType":
        return self

    def __reduce__(self):
        return (_AllCpuType, ())


ALL_CPU = _AllCpuType()

Stride = "int | _AllCpuType"


@dataclass(frozen=True)
class StrideResult:
    """Outcome of the stride optimisation.

    ``k_real`` is the continuous break-even ratio (``inf`` when the CPU can
    never be the bottleneck); ``k`` is the chosen integer, or the
    ``ALL_CPU`` sentinel.  ``k`` is what ``build_plan`` consumes as its
    stride, so ``gpu_fraction`` — the fraction of subgroup slots the stride
    predicate sends to the fast tier — is ``1 / k`` (0 for ALL_CPU).
    """

    k_real: float
    k: "int | _AllCpuType"
    gpu_fraction: float


def k_real_value(profile: SystemProfile) -> float:
    """Continuous break-even CPU:fast ratio; ``inf`` if CPU never binds."""
    b = profile.channel_params_per_s
    numerator = 3.0 / b + 1.0 / profile.fast_update_params_per_s
    denominator = (
        1.0 / profile.cpu_update_params_per_s
        + 1.0 / profile.cpu_downscale_params_per_s
        - 1.0 / (2.0 * b)
    )
    if denominator <= 0.0:
        return math.inf
    return numerator / denominator


def plan_stride_for(k: "int | _AllCpuType") -> "int | _AllCpuType":
    """Schedule stride corresponding to a CPU:fast ratio of ``k``.

    A ratio of k CPU subgroups per fast subgroup means the fast tier takes
    every (k+1)-th slot of the subgroup walk.
    """
    if k is ALL_CPU:
        return ALL_CPU
    if not isinstance(k, int) or k < 1:
        raise ValueError(f"ratio k must be an int >= 1 or ALL_CPU, got {k!r}")
    return k + 1


def estimate_update_time(
    profile: SystemProfile,
    num_subgroups: int,
    subgroup_size: int,
    k: "int | _AllCpuType",
    static_residents: int = 0,
) -> float:
    """Closed-form update-phase time in seconds for a CPU:fast ratio ``k``.

    ``static_residents`` subgroups stay on the fast tier permanently and
    cost one fast update each; the remaining ``num_subgroups -
    static_residents`` dynamic subgroups run the interleaved pattern (or
    entirely on the CPU for ``ALL_CPU``).  The cycle count is real-valued:
    ragged tails are the simulator's business, this is the smooth model.
    """
    if num_subgroups < 0:
        raise ValueError("num_subgroups must be >= 0")
    if subgroup_size <= 0:
        raise ValueError("subgroup_size must be positive")
    if not 0 <= static_residents <= num_subgroups:
        raise ValueError("static_residents must be in [0, num_subgroups]")

    s = float(subgroup_size)
    b = profile.channel_params_per_s
    u_g = profile.fast_update_params_per_s
    u_c = profile.cpu_update_params_per_s
    d_c = profile.cpu_downscale_params_per_s
    dyn = num_subgroups - static_residents

    static_cost = static_residents * s / u_g
    if dyn == 0:
        return static_cost

    if k is ALL_CPU:
        # Fully serialized on the host: update, downscale, then ship the
        # refreshed half-width params back.  No overlap, no contention.
        per = s / u_c + s / d_c + s / (2.0 * b)
        return dyn * per + static_cost

    if not isinstance(k, int) or k < 1:
        raise ValueError(f"ratio k must be an int >= 1 or ALL_CPU, got {k!r}")

    cpu_block = k * (s / u_c + s / d_c) * profile.host_contention
    transfer_block = 3.0 * s / b + k * s / (2.0 * b) + s / u_g
    cycles = dyn / (k + 1.0)
    return cycles * max(cpu_block, transfer_block) + static_cost


def optimal_stride(
    profile: SystemProfile,
    num_subgroups: int = 100,
    subgroup_size: int = 100_000_000,
) -> StrideResult:
    """Pick the integer ratio minimising the closed-form estimate.

    The continuous optimum is ``k_real``; the discrete argmin is one of its
    two integer neighbours (the per-cycle cost is a max of one decreasing
    and one increasing affine function of k), clamped to >= 1.  The
    reference ``num_subgroups``/``subgroup_size`` only scale the estimate,
    they never change the argmin.
    """
    k_real = k_real_value(profile)
    if math.isinf(k_real):
        return StrideResult(k_real=k_real, k=ALL_CPU, gpu_fraction=0.0)

    lo = max(1, math.floor(k_real))
    hi = max(1, math.ceil(k_real))
    candidates = sorted({lo, hi})
    best = min(
        candidates,
        key=lambda c: estimate_update_time(profile, num_subgroups, subgroup_size, c),
    )
    return StrideResult(k_real=k_real, k=best, gpu_fraction=1.0 / best)
