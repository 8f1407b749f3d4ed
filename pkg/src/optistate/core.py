"""Core types for sharded mixed-precision optimizer state.

A rank owns a flat shard of the model's parameters.  The shard is cut into
fixed-size *subgroups*; each subgroup carries full-precision master params,
Adam momentum and variance (float32, 16 bytes/param all told), plus the
half-precision working copy of the params and the half-precision gradients
(2 bytes/param each).  Everything downstream — the placement planner, the
event simulator and the emulated executor — speaks in subgroups.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

# Per-parameter byte costs.  Optimizer state is float32 params + momentum +
# variance + a float32 gradient staging slot (4 x 4 bytes); the working
# model copy and the raw gradients are float16.
OPTIMIZER_BYTES_PER_PARAM = 16
MODEL16_BYTES_PER_PARAM = 2
GRADS16_BYTES_PER_PARAM = 2

# Dynamic fast-tier footprint of one in-flight subgroup: params + momentum
# + variance in float32 (the float32 gradient buffer is carved out of the
# transient activation region, not the optimizer budget).
SUBGROUP_STATE_BYTES_PER_PARAM = 12


class Precision(enum.Enum):
    FP16 = "fp16"
    FP32 = "fp32"

    @property
    def itemsize(self) -> int:
        return 2 if self is Precision.FP16 else 4


@dataclass(frozen=True)
class Subgroup:
    """A contiguous slice of a rank's parameter shard."""

    index: int
    start: int
    size: int

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise ValueError(f"subgroup size must be positive, got {self.size}")
        if self.start < 0:
            raise ValueError(f"subgroup start must be >= 0, got {self.start}")

    @property
    def stop(self) -> int:
        return self.start + self.size

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)

    def state_bytes(self) -> int:
        """Float32 optimizer state (p, m, v) moved when this subgroup swaps."""
        return SUBGROUP_STATE_BYTES_PER_PARAM * self.size


@dataclass(frozen=True)
class SystemProfile:
    """Measured/derived machine rates used by the planner and simulator.

    Rates whose name ends in ``_params_per_s`` count float32 parameters per
    second; ``_bytes_per_s`` rates count bytes on the half-precision side of
    a conversion or the wire side of a copy.  ``channel_params_per_s`` is the
    pinned-memory interconnect rate per direction (the two directions are
    independent full-duplex lanes).
    """

    name: str
    channel_params_per_s: float
    fast_update_params_per_s: float
    cpu_update_params_per_s: float
    cpu_downscale_params_per_s: float
    fast_convert_bytes_per_s: float
    host_convert_bytes_per_s: float
    host_alloc_bytes_per_s: float
    pageable_d2h_bytes_per_s: float
    pageable_h2d_bytes_per_s: float
    fast_capacity_bytes: int | None = None
    host_contention: float = 1.0
    caveat: str | None = None

    def __post_init__(self) -> None:
        for name in (
            "channel_params_per_s",
            "fast_update_params_per_s",
            "cpu_update_params_per_s",
            "cpu_downscale_params_per_s",
            "fast_convert_bytes_per_s",
            "host_convert_bytes_per_s",
            "host_alloc_bytes_per_s",
            "pageable_d2h_bytes_per_s",
            "pageable_h2d_bytes_per_s",
        ):
            value = getattr(self, name)
            if not (value > 0):
                raise ValueError(f"{name} must be positive, got {value}")
        if self.host_contention < 1.0:
            raise ValueError(
                f"host_contention must be >= 1.0, got {self.host_contention}"
            )
        if self.fast_capacity_bytes is not None and self.fast_capacity_bytes < 0:
            raise ValueError("fast_capacity_bytes must be >= 0 when set")


@dataclass(frozen=True)
class FootprintReport:
    """Exact byte accounting for one rank's shard (integers, no rounding)."""

    total_params: int
    subgroup_size: int
    num_subgroups: int
    optimizer32_bytes: int
    model16_bytes: int
    grads16_bytes: int
    per_subgroup_state_bytes: int

    @property
    def host_resident_bytes(self) -> int:
        """Optimizer state parked on the host when everything offloads."""
        return self.optimizer32_bytes

    @property
    def fast_resident_bytes(self) -> int:
        """Working state that stays on the fast tier regardless of placement."""
        return self.model16_bytes + self.grads16_bytes


def shard(total_params: int, num_ranks: int, subgroup_size: int) -> list[list[Subgroup]]:
    """Partition ``total_params`` across ranks, then cut each rank into subgroups.

    Every rank except possibly the last gets ``ceil(total_params/num_ranks)``
    params; the last gets the remainder.  Within a rank, subgroups are
    ``subgroup_size`` params each with one smaller trailing subgroup if the
    rank's share does not divide evenly.  Subgroup ``start`` offsets are local
    to the rank's flat shard.
    """
    if total_params <= 0:
        raise ValueError("total_params must be positive")
    if num_ranks <= 0:
        raise ValueError("num_ranks must be positive")
    if subgroup_size <= 0:
        raise ValueError("subgroup_size must be positive")

    per_rank = math.ceil(total_params / num_ranks)
    out: list[list[Subgroup]] = []
    remaining = total_params
    for _ in range(num_ranks):
        share = min(per_rank, remaining)
        remaining -= share
        groups: list[Subgroup] = []
        offset = 0
        index = 0
        while offset < share:
            size = min(subgroup_size, share - offset)
            groups.append(Subgroup(index=index, start=offset, size=size))
            offset += size
            index += 1
        out.append(groups)
    return out


def footprint(total_params: int, subgroup_size: int) -> FootprintReport:
    """Byte footprint of one rank's shard of ``total_params`` parameters."""
    if total_params <= 0:
        raise ValueError("total_params must be positive")
    if subgroup_size <= 0:
        raise ValueError("subgroup_size must be positive")
    return FootprintReport(
        total_params=total_params,
        subgroup_size=subgroup_size,
        num_subgroups=math.ceil(total_params / subgroup_size),
        optimizer32_bytes=OPTIMIZER_BYTES_PER_PARAM * total_params,
        model16_bytes=MODEL16_BYTES_PER_PARAM * total_params,
        grads16_bytes=GRADS16_BYTES_PER_PARAM * total_params,
        per_subgroup_state_bytes=SUBGROUP_STATE_BYTES_PER_PARAM * subgroup_size,
    )


def downscale_rne(x: np.ndarray) -> np.ndarray:
    """float32 -> float16 with IEEE round-to-nearest-even.

    Values beyond the float16 range become +/-inf (no saturation); subnormal
    results are exact per IEEE 754.  Input must be float32.
    """
    if x.dtype != np.float32:
        raise TypeError(f"downscale_rne expects float32, got {x.dtype}")
    return x.astype(np.float16)


def upscale(x: np.ndarray) -> np.ndarray:
    """float16 -> float32 (always exact)."""
    if x.dtype != np.float16:
        raise TypeError(f"upscale expects float16, got {x.dtype}")
    return x.astype(np.float32)


@dataclass
class ShardedOptimizer:
    """One rank's optimizer shard: flat state arrays plus the subgroup map.

    ``params32``/``momentum32``/``variance32`` are the master float32 state,
    ``model16`` the half-precision working copy of the params, ``grads16``
    the half-precision gradients for the current step.  ``step`` counts
    completed optimizer steps (bias correction uses ``step``).
    """

    subgroups: list[Subgroup]
    params32: np.ndarray
    momentum32: np.ndarray
    variance32: np.ndarray
    model16: np.ndarray
    grads16: np.ndarray
    step: int = 0
    _total: int = field(init=False, repr=False, default=0)

    def __post_init__(self) -> None:
        total = sum(g.size for g in self.subgroups)
        arrays = {
            "params32": (self.params32, np.float32),
            "momentum32": (self.momentum32, np.float32),
            "variance32": (self.variance32, np.float32),
            "model16": (self.model16, np.float16),
            "grads16": (self.grads16, np.float16),
        }
        for name, (arr, want) in arrays.items():
            if arr.dtype != want:
                raise TypeError(f"{name} must be {np.dtype(want)}, got {arr.dtype}")
            if arr.shape != (total,):
                raise ValueError(
                    f"{name} must be flat with {total} elements, got {arr.shape}"
                )
        self._total = total

    @property
    def total_params(self) -> int:
        return self._total

    @classmethod
    def initialize(
        cls, total_params: int, subgroup_size: int, seed: int = 0
    ) -> "ShardedOptimizer":
        """Synthetic but realistic state: params ~ N(0, 0.02), grads ~ N(0, 1).

        Momentum/variance start at plausible mid-training magnitudes so a
        single step exercises every term of the update.  ``model16`` starts
        coherent with ``params32``.
        """
        groups = shard(total_params, 1, subgroup_size)[0]
        rng = np.random.default_rng(seed)
        params = rng.normal(0.0, 0.02, total_params).astype(np.float32)
        momentum = rng.normal(0.0, 1e-3, total_params).astype(np.float32)
        variance = (rng.random(total_params).astype(np.float32) * np.float32(1e-4))
        grads = rng.normal(0.0, 1.0, total_params).astype(np.float32)
        return cls(
            subgroups=groups,
            params32=params,
            momentum32=momentum,
            variance32=variance,
            model16=params.astype(np.float16),
            grads16=grads.astype(np.float16),
        )

    def copy(self) -> "ShardedOptimizer":
        return ShardedOptimizer(
            subgroups=list(self.subgroups),
            params32=self.params32.copy(),
            momentum32=self.momentum32.copy(),
            variance32=self.variance32.copy(),
            model16=self.model16.copy(),
            grads16=self.grads16.copy(),
            step=self.step,
        )

    def state_equal(self, other: "ShardedOptimizer") -> bool:
        """Bitwise equality of all five state arrays (NaN-safe)."""
        return (
            self.params32.tobytes() == other.params32.tobytes()
            and self.momentum32.tobytes() == other.momentum32.tobytes()
            and self.variance32.tobytes() == other.variance32.tobytes()
            and self.model16.tobytes() == other.model16.tobytes()
            and self.grads16.tobytes() == other.grads16.tobytes()
        )
