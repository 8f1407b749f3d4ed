"""Numeric execution of update plans on emulated devices.

The executor runs the exact action stream a plan's schedule produces —
through the same engine the simulator uses, so its virtual timeline *is*
the simulator's — but every action also has a numeric effect on a
``ShardedOptimizer``: prefetches copy float32 state into an emulated
fast-tier staging store, updates run the fused Adam kernel (on staged
copies for swapped subgroups, in place for host/static ones), flushes and
downscales write results back.  ``sequential_oracle`` is the plain
reference loop; any plan, any stride, any placement must reproduce its
final state bit for bit.

Two clock modes: ``VIRTUAL`` fixes the timeline without waiting;
``THROTTLED`` additionally paces a replay of the timeline in wall time
(scaled), for watching schedules unfold in demos.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass

import numpy as np

from .core import (
    GRADS16_BYTES_PER_PARAM,
    ShardedOptimizer,
    SystemProfile,
    downscale_rne,
    upscale,
)
from .kernels import adam_step_arrays
from .scheduler import Action, ActionKind, UpdatePlan, run_update, validate_schedule
from .sim import (
    GradFlushStrategy,
    SimTarget,
    Timeline,
    _build_timeline,
    grad_flush_throughput,
)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("betas must be in [0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")


class ExecMode(str, enum.Enum):
    VIRTUAL = "virtual"
    THROTTLED = "throttled"


def _adam_on(
    p: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    g32: np.ndarray,
    hyper: AdamHyper,
    step: int,
) -> None:
    adam_step_arrays(
        p, m, v, g32, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps, step
    )


def adam_step_subgroup(
    optimizer: ShardedOptimizer,
    subgroup: int,
    hyper: AdamHyper,
    step: int | None = None,
) -> None:
    """Fused Adam on one subgroup's master state, in place.

    Gradients are upscaled from the resident fp16 copy.  Does not touch
    ``model16`` — refreshing the half-precision working copy is a separate
    (downscale) action, as in the plans.  ``step`` defaults to the next
    step (``optimizer.step + 1``); the caller owns the step bump.
    """
    sg = optimizer.subgroups[subgroup]
    sl = sg.slice
    g32 = upscale(optimizer.grads16[sl])
    _adam_on(
        optimizer.params32[sl],
        optimizer.momentum32[sl],
        optimizer.variance32[sl],
        g32,
        hyper,
        optimizer.step + 1 if step is None else step,
    )


def sequential_oracle(
    optimizer: ShardedOptimizer, hyper: AdamHyper
) -> ShardedOptimizer:
    """Reference update: every subgroup in order, no overlap, no devices.

    Mutates and returns ``optimizer``.  Upscale grads, Adam, refresh the
    half-precision params — exactly what any schedule must amount to.
    """
    step = optimizer.step + 1
    for sg in optimizer.subgroups:
        adam_step_subgroup(optimizer, sg.index, hyper, step)
        sl = sg.slice
        optimizer.model16[sl] = downscale_rne(optimizer.params32[sl])
    optimizer.step = step
    return optimizer


class EmulatedDevice:
    """Fast-tier staging store: float32 state pieces keyed by subgroup.

    Purely structural — double stages, incomplete triplets and leftover
    residents are bugs in the schedule, so they raise here.  Capacity in
    *time* is the engine's admission gate; this store only checks shape.
    """

    PIECES = ("m", "v", "p")

    def __init__(self) -> None:
        self.staging: dict[int, dict[str, np.ndarray]] = {}
        self.model16_valid: set[int] = set()

    def stage(self, subgroup: int, piece: str, data: np.ndarray) -> None:
        slot = self.staging.setdefault(subgroup, {})
        if piece in slot:
            raise AssertionError(
                f"subgroup {subgroup} piece {piece!r} staged twice"
            )
        slot[piece] = data

    def staged(self, subgroup: int, piece: str) -> np.ndarray:
        try:
            return self.staging[subgroup][piece]
        except KeyError:
            raise AssertionError(
                f"subgroup {subgroup} piece {piece!r} not resident on device"
            ) from None

    def require_triplet(self, subgroup: int) -> dict[str, np.ndarray]:
        slot = self.staging.get(subgroup, {})
        missing = [p for p in self.PIECES if p not in slot]
        if missing:
            raise AssertionError(
                f"fast update of subgroup {subgroup} with missing pieces {missing}"
            )
        return slot

    def unstage(self, subgroup: int, piece: str) -> np.ndarray:
        data = self.staged(subgroup, piece)
        slot = self.staging[subgroup]
        del slot[piece]
        if not slot:
            del self.staging[subgroup]
        return data

    def assert_drained(self) -> None:
        if self.staging:
            raise AssertionError(
                f"staging store not drained: subgroups {sorted(self.staging)}"
            )


class ExecutorTarget(SimTarget):
    """SimTarget durations plus the numeric effect of every action."""

    def __init__(
        self,
        profile: SystemProfile,
        plan: UpdatePlan,
        optimizer: ShardedOptimizer,
        hyper: AdamHyper,
        step: int,
    ) -> None:
        sizes = tuple(g.size for g in optimizer.subgroups)
        super().__init__(profile, plan, sizes)
        self.opt = optimizer
        self.hyper = hyper
        self.step = step
        self.device = EmulatedDevice()

    def apply(self, action: Action, start_ns: int, end_ns: int) -> None:
        opt = self.opt
        kind = action.kind
        if kind in (ActionKind.CPU_UPDATE, ActionKind.GPU_UPDATE):
            i = action.subgroup
            if kind is ActionKind.CPU_UPDATE or self.plan.is_static(i):
                # Host subgroups and static residents update their single
                # authoritative copy in place.
                adam_step_subgroup(opt, i, self.hyper, self.step)
            else:
                slot = self.device.require_triplet(i)
                g32 = upscale(opt.grads16[opt.subgroups[i].slice])
                _adam_on(slot["p"], slot["m"], slot["v"], g32, self.hyper, self.step)
            return
        sl = opt.subgroups[action.subgroup].slice if action.subgroup >= 0 else None
        if kind is ActionKind.PREFETCH_M:
            self.device.stage(action.subgroup, "m", opt.momentum32[sl].copy())
        elif kind is ActionKind.PREFETCH_V:
            self.device.stage(action.subgroup, "v", opt.variance32[sl].copy())
        elif kind is ActionKind.PREFETCH_P:
            self.device.stage(action.subgroup, "p", opt.params32[sl].copy())
        elif kind is ActionKind.FLUSH_OUT_M:
            opt.momentum32[sl] = self.device.unstage(action.subgroup, "m")
        elif kind is ActionKind.FLUSH_OUT_V:
            opt.variance32[sl] = self.device.unstage(action.subgroup, "v")
        elif kind is ActionKind.FLUSH_OUT_P:
            opt.params32[sl] = self.device.unstage(action.subgroup, "p")
        elif kind is ActionKind.FLUSH_OUT_MODEL16:
            if self.plan.is_static(action.subgroup):
                source = opt.params32[sl]
            else:
                # Emitted before FLUSH_OUT_P, so the updated params are
                # still staged on the device; convert from there.
                source = self.device.staged(action.subgroup, "p")
            opt.model16[sl] = downscale_rne(source)
            self.device.model16_valid.add(action.subgroup)
        elif kind is ActionKind.CPU_DOWNSCALE:
            for j in action.batch:
                slj = opt.subgroups[j].slice
                opt.model16[slj] = downscale_rne(opt.params32[slj])
        elif kind is ActionKind.H2D_PARAMS16:
            self.device.model16_valid.add(action.subgroup)
        else:  # pragma: no cover - plans never emit GRAD_FLUSH actions
            raise AssertionError(f"unexpected action kind {kind}")


@dataclass(frozen=True)
class ExecutionResult:
    optimizer: ShardedOptimizer
    timeline: Timeline
    step: int
    mode: ExecMode


def execute_plan(
    optimizer: ShardedOptimizer,
    plan: UpdatePlan,
    profile: SystemProfile,
    hyper: AdamHyper,
    mode: ExecMode = ExecMode.VIRTUAL,
    throttle_scale: float = 1e-3,
) -> ExecutionResult:
    """Run one optimizer step per the plan; mutate ``optimizer``.

    The timeline is identical to ``simulate_update_phase`` of the same
    plan/profile/sizes by construction (same engine, same durations).
    After the run, the staging store must be empty and every subgroup's
    half-precision params must equal the downscaled masters; both are
    asserted.
    """
    if plan.num_subgroups != len(optimizer.subgroups):
        raise ValueError(
            f"plan covers {plan.num_subgroups} subgroups, optimizer has "
            f"{len(optimizer.subgroups)}"
        )
    step = optimizer.step + 1
    target = ExecutorTarget(profile, plan, optimizer, hyper, step)
    events = run_update(plan, target)
    validate_schedule(plan, events, target)
    target.device.assert_drained()

    expected_valid = set(range(plan.num_subgroups))
    if target.device.model16_valid != expected_valid:
        missing = sorted(expected_valid - target.device.model16_valid)
        raise AssertionError(f"half-precision params never refreshed for {missing}")
    for sg in optimizer.subgroups:
        sl = sg.slice
        want = downscale_rne(optimizer.params32[sl])
        if want.tobytes() != optimizer.model16[sl].tobytes():
            raise AssertionError(
                f"model16 of subgroup {sg.index} incoherent with params32"
            )

    optimizer.step = step
    timeline = _build_timeline(plan, events, target.sizes)

    if mode is ExecMode.THROTTLED:
        _pace_replay(timeline, throttle_scale)

    return ExecutionResult(
        optimizer=optimizer, timeline=timeline, step=step, mode=mode
    )


def _pace_replay(timeline: Timeline, scale: float) -> None:
    """Sleep through the timeline at ``scale`` x virtual speed."""
    if scale <= 0:
        raise ValueError("throttle_scale must be positive")
    wall0 = time.perf_counter()
    for ev in sorted(timeline.events, key=lambda e: e.start_ns):
        due = wall0 + ev.start_ns * 1e-9 * scale
        delay = due - time.perf_counter()
        if delay > 0:
            time.sleep(delay)


@dataclass(frozen=True)
class GradFlushRecord:
    strategy: GradFlushStrategy
    payload_bytes: int
    chunk_bytes: int
    throughput_bytes_per_s: float
    cost_ns: int


def flush_gradients(
    optimizer: ShardedOptimizer,
    profile: SystemProfile,
    strategy: GradFlushStrategy,
    chunk_bytes: int = 1 << 22,
) -> tuple[np.ndarray, GradFlushRecord]:
    """Materialize float32 gradients on the host and price the transfer.

    The numeric result is the exact elementwise upscale of the fp16
    gradients — identical for every strategy and chunk size (fp16 to fp32
    is lossless).  The cost record prices the strategy's pipeline on the
    fp16-side payload.
    """
    if chunk_bytes < 2:
        raise ValueError("chunk_bytes must hold at least one fp16 element")
    grads16 = optimizer.grads16
    out = np.empty(grads16.shape[0], dtype=np.float32)
    elems = chunk_bytes // 2
    for lo in range(0, grads16.shape[0], elems):
        hi = min(lo + elems, grads16.shape[0])
        out[lo:hi] = upscale(grads16[lo:hi])

    payload = GRADS16_BYTES_PER_PARAM * grads16.shape[0]
    throughput = grad_flush_throughput(strategy, profile, payload)
    cost_ns = math.ceil(payload / throughput * 1e9)
    record = GradFlushRecord(
        strategy=strategy,
        payload_bytes=payload,
        chunk_bytes=chunk_bytes,
        throughput_bytes_per_s=throughput,
        cost_ns=cost_ns,
    )
    return out, record
