"""Update-phase planning and the shared scheduling engine.

``build_plan`` turns (num_subgroups, stride, static residency) into an
``UpdatePlan``: a device assignment plus a flat list of dependency-tagged
``Action``s in *emission order*.  ``run_update`` executes a plan against a
*target* (a duration/side-effect provider) with list scheduling:

* four exclusive lanes — CPU compute, fast compute, H2D channel, D2H
  channel — each serving its actions in emission order (FIFO),
* three state streams — param / momentum / variance — each with a single
  staging buffer set, so same-stream transfers are FIFO in emission order
  even when the direction alternates,
* explicit dependencies (an action starts only after all its deps end),
* a fast-tier capacity gate that defers opening a new in-flight subgroup
  window until enough previously opened windows have closed.

The same engine drives the pure-timing simulator and the numeric executor,
so their timelines agree by construction.

Interleaved plans follow the stride predicate ``(i + 1) % stride == 0``:
every stride-th subgroup slot runs on the fast tier, the rest on the CPU.
While a fast-tier subgroup's state is in flight, the CPU walks the
in-between subgroups; each CPU slot at the start of a cycle (``i % stride
== 0``) flushes the previous fast subgroup's state out and prefetches the
next one in.  CPU-updated params accumulate into a half-precision
downscale batch that drains at the next fast-tier slot.  Blocking plans
(the ``ALL_CPU`` stride, or any plan used as a serialized baseline) chain
every action on its predecessor instead.
"""

from __future__ import annotations

import bisect
import enum
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Protocol

from .perfmodel import ALL_CPU, _AllCpuType


class Device(enum.Enum):
    CPU = "cpu"
    FAST = "fast"


class Lane(str, enum.Enum):
    CPU_COMPUTE = "cpu_compute"
    FAST_COMPUTE = "fast_compute"
    H2D = "h2d"
    D2H = "d2h"


COMPUTE_LANES = (Lane.CPU_COMPUTE, Lane.FAST_COMPUTE)


class Stream(str, enum.Enum):
    PARAM = "param"
    MOMENTUM = "momentum"
    VARIANCE = "variance"


class ActionKind(str, enum.Enum):
    CPU_UPDATE = "cpu_update"
    GPU_UPDATE = "gpu_update"
    CPU_DOWNSCALE = "cpu_downscale"
    H2D_PARAMS16 = "h2d_params16"
    FLUSH_OUT_MODEL16 = "flush_out_model16"
    FLUSH_OUT_M = "flush_out_m"
    FLUSH_OUT_V = "flush_out_v"
    FLUSH_OUT_P = "flush_out_p"
    PREFETCH_M = "prefetch_m"
    PREFETCH_V = "prefetch_v"
    PREFETCH_P = "prefetch_p"
    GRAD_FLUSH = "grad_flush"


PREFETCH_KINDS = (ActionKind.PREFETCH_M, ActionKind.PREFETCH_V, ActionKind.PREFETCH_P)
FLUSH_STATE_KINDS = (
    ActionKind.FLUSH_OUT_M,
    ActionKind.FLUSH_OUT_V,
    ActionKind.FLUSH_OUT_P,
)


class Placement(str, enum.Enum):
    STATIC_FIRST = "static_first"
    STATIC_LAST = "static_last"


class InfeasibleConfigError(Exception):
    """The fast tier cannot hold even one in-flight subgroup window."""


@dataclass(frozen=True)
class Action:
    """One schedulable unit of the update phase.

    ``subgroup`` is -1 for batched actions (``CPU_DOWNSCALE``), which carry
    their member subgroups in ``batch``.  ``deps`` are action ids that must
    end before this action starts; ids are assigned in emission order.
    """

    id: int
    kind: ActionKind
    subgroup: int
    lane: Lane
    stream: Stream | None = None
    batch: tuple[int, ...] = ()
    deps: tuple[int, ...] = ()


@dataclass(frozen=True)
class ScheduledAction:
    action: Action
    start_ns: int
    end_ns: int
    bytes: int

    @property
    def duration_ns(self) -> int:
        return self.end_ns - self.start_ns


@dataclass(frozen=True)
class UpdatePlan:
    num_subgroups: int
    stride: "int | _AllCpuType"
    static_ratio: float
    placement: Placement
    static_set: frozenset[int]
    devices: tuple[Device, ...]
    dynamic_fast: tuple[int, ...]
    blocking: bool
    actions: tuple[Action, ...]

    @property
    def static_count(self) -> int:
        return len(self.static_set)

    def device_of(self, subgroup: int) -> Device:
        return self.devices[subgroup]

    def is_static(self, subgroup: int) -> bool:
        return subgroup in self.static_set


def prev_on_gpu(plan: UpdatePlan, subgroup: int) -> int | None:
    """Last dynamic fast-tier subgroup strictly before ``subgroup``."""
    pos = bisect.bisect_left(plan.dynamic_fast, subgroup)
    return plan.dynamic_fast[pos - 1] if pos > 0 else None


def next_on_gpu(plan: UpdatePlan, subgroup: int) -> int | None:
    """First dynamic fast-tier subgroup strictly after ``subgroup``."""
    pos = bisect.bisect_right(plan.dynamic_fast, subgroup)
    return plan.dynamic_fast[pos] if pos < len(plan.dynamic_fast) else None


def _static_indices(num_subgroups: int, static_ratio: float, placement: Placement):
    # Floor semantics: a ratio that does not cover a whole subgroup pins
    # nothing.  The epsilon absorbs one-ulp float noise on exact products.
    count = math.floor(static_ratio * num_subgroups + 1e-9)
    count = min(count, num_subgroups)
    if placement is Placement.STATIC_FIRST:
        return frozenset(range(count))
    return frozenset(range(num_subgroups - count, num_subgroups))


class _Emitter:
    def __init__(self) -> None:
        self.actions: list[Action] = []
        self.chain: bool = False  # blocking mode: dep-chain everything

    def emit(
        self,
        kind: ActionKind,
        subgroup: int,
        lane: Lane,
        stream: Stream | None = None,
        batch: tuple[int, ...] = (),
        deps: tuple[int, ...] = (),
    ) -> int:
        if self.chain and self.actions:
            prev = self.actions[-1].id
            if prev not in deps:
                deps = deps + (prev,)
        action = Action(
            id=len(self.actions),
            kind=kind,
            subgroup=subgroup,
            lane=lane,
            stream=stream,
            batch=batch,
            deps=deps,
        )
        self.actions.append(action)
        return action.id


def _emit_interleaved(
    num_subgroups: int,
    stride: int,
    devices: tuple[Device, ...],
    static_set: frozenset[int],
    dynamic_fast: tuple[int, ...],
) -> list[Action]:
    em = _Emitter()
    update_id: dict[int, int] = {}
    prefetch_ids: dict[int, tuple[int, int, int]] = {}
    conv_batch: list[int] = []
    pending_flush: int | None = None
    dyn_set = set(dynamic_fast)

    def emit_prefetch(sg: int) -> None:
        m = em.emit(ActionKind.PREFETCH_M, sg, Lane.H2D, Stream.MOMENTUM)
        v = em.emit(ActionKind.PREFETCH_V, sg, Lane.H2D, Stream.VARIANCE)
        p = em.emit(ActionKind.PREFETCH_P, sg, Lane.H2D, Stream.PARAM)
        prefetch_ids[sg] = (m, v, p)

    def emit_flush(sg: int) -> None:
        u = (update_id[sg],)
        em.emit(ActionKind.FLUSH_OUT_MODEL16, sg, Lane.FAST_COMPUTE, Stream.PARAM, deps=u)
        em.emit(ActionKind.FLUSH_OUT_M, sg, Lane.D2H, Stream.MOMENTUM, deps=u)
        em.emit(ActionKind.FLUSH_OUT_V, sg, Lane.D2H, Stream.VARIANCE, deps=u)
        em.emit(ActionKind.FLUSH_OUT_P, sg, Lane.D2H, Stream.PARAM, deps=u)

    def emit_conv_batch() -> None:
        nonlocal conv_batch
        if not conv_batch:
            return
        deps = tuple(update_id[j] for j in conv_batch)
        d = em.emit(
            ActionKind.CPU_DOWNSCALE,
            -1,
            Lane.CPU_COMPUTE,
            batch=tuple(conv_batch),
            deps=deps,
        )
        for j in conv_batch:
            em.emit(ActionKind.H2D_PARAMS16, j, Lane.H2D, Stream.PARAM, deps=(d,))
        conv_batch = []

    def next_dyn(i: int) -> int | None:
        pos = bisect.bisect_right(dynamic_fast, i)
        return dynamic_fast[pos] if pos < len(dynamic_fast) else None

    def trigger_between(i: int, nxt: int) -> bool:
        # Is there a CPU subgroup between i and nxt whose slot starts a
        # cycle?  If so, the flush/prefetch pair will be emitted there.
        for c in range(i + 1, nxt):
            if devices[c] is Device.CPU and c % stride == 0:
                return True
        return False

    for i in range(num_subgroups):
        if devices[i] is Device.FAST:
            emit_conv_batch()
            if i in dyn_set:
                if i not in prefetch_ids:
                    # No cycle-start CPU slot preceded this subgroup (all-fast
                    # plans, or statics occupying the leading slots): fetch now.
                    emit_prefetch(i)
                update_id[i] = em.emit(
                    ActionKind.GPU_UPDATE, i, Lane.FAST_COMPUTE, deps=prefetch_ids[i]
                )
                pending_flush = i
                nxt = next_dyn(i)
                if nxt is not None and not trigger_between(i, nxt):
                    # No CPU slot will pump the pipeline before the next
                    # fast subgroup; flush and prefetch back-to-back.
                    emit_flush(i)
                    pending_flush = None
                    if nxt not in prefetch_ids:
                        emit_prefetch(nxt)
            else:
                u = em.emit(ActionKind.GPU_UPDATE, i, Lane.FAST_COMPUTE)
                update_id[i] = u
                em.emit(
                    ActionKind.FLUSH_OUT_MODEL16, i, Lane.FAST_COMPUTE, Stream.PARAM, deps=(u,)
                )
            continue
        # CPU subgroup.
        if i % stride == 0:
            if pending_flush is not None:
                emit_flush(pending_flush)
                pending_flush = None
            nxt = next_dyn(i)
            if nxt is not None and nxt not in prefetch_ids:
                emit_prefetch(nxt)
        update_id[i] = em.emit(ActionKind.CPU_UPDATE, i, Lane.CPU_COMPUTE)
        conv_batch.append(i)

    if pending_flush is not None:
        emit_flush(pending_flush)
    emit_conv_batch()
    return em.actions


def _emit_blocking(
    num_subgroups: int,
    devices: tuple[Device, ...],
) -> list[Action]:
    em = _Emitter()
    em.chain = True
    for i in range(num_subgroups):
        if devices[i] is Device.FAST:
            u = em.emit(ActionKind.GPU_UPDATE, i, Lane.FAST_COMPUTE)
            em.emit(
                ActionKind.FLUSH_OUT_MODEL16, i, Lane.FAST_COMPUTE, Stream.PARAM, deps=(u,)
            )
        else:
            u = em.emit(ActionKind.CPU_UPDATE, i, Lane.CPU_COMPUTE)
            d = em.emit(
                ActionKind.CPU_DOWNSCALE, -1, Lane.CPU_COMPUTE, batch=(i,), deps=(u,)
            )
            em.emit(ActionKind.H2D_PARAMS16, i, Lane.H2D, Stream.PARAM, deps=(d,))
    return em.actions


def build_plan(
    num_subgroups: int,
    stride: "int | _AllCpuType",
    static_ratio: float = 0.0,
    placement: Placement = Placement.STATIC_LAST,
) -> UpdatePlan:
    """Assign devices and emit the action list for one update phase.

    ``stride`` is either ``ALL_CPU`` (serialized host-side baseline) or an
    int >= 1: every subgroup slot with ``(i + 1) % stride == 0`` runs on
    the fast tier (stride 1 puts every dynamic subgroup there).
    ``floor(static_ratio * num_subgroups)`` subgroups are pinned
    fast-tier-resident at the chosen end of the walk and never swap.
    """
    if num_subgroups < 0:
        raise ValueError("num_subgroups must be >= 0")
    if not 0.0 <= static_ratio <= 1.0:
        raise ValueError(f"static_ratio must be in [0, 1], got {static_ratio}")
    if stride is not ALL_CPU and (not isinstance(stride, int) or stride < 1):
        raise ValueError(f"stride must be an int >= 1 or ALL_CPU, got {stride!r}")

    static_set = _static_indices(num_subgroups, static_ratio, placement)
    blocking = stride is ALL_CPU
    if not blocking and num_subgroups > 0 and len(static_set) == num_subgroups:
        warnings.warn(
            "static_ratio pins every subgroup: the plan degenerates to "
            "all-static and the stride never applies",
            UserWarning,
            stacklevel=2,
        )

    devices = []
    for i in range(num_subgroups):
        if i in static_set:
            devices.append(Device.FAST)
        elif not blocking and (i + 1) % stride == 0:
            devices.append(Device.FAST)
        else:
            devices.append(Device.CPU)
    devices = tuple(devices)
    dynamic_fast = tuple(
        i
        for i in range(num_subgroups)
        if devices[i] is Device.FAST and i not in static_set
    )

    if blocking:
        actions = _emit_blocking(num_subgroups, devices)
    else:
        actions = _emit_interleaved(
            num_subgroups, stride, devices, static_set, dynamic_fast
        )

    return UpdatePlan(
        num_subgroups=num_subgroups,
        stride=stride,
        static_ratio=static_ratio,
        placement=placement,
        static_set=static_set,
        devices=devices,
        dynamic_fast=dynamic_fast,
        blocking=blocking,
        actions=tuple(actions),
    )


class UpdateTarget(Protocol):
    """Duration/side-effect provider consumed by ``run_update``."""

    fast_capacity_bytes: int | None

    def duration_ns(self, action: Action) -> int: ...

    def bytes_of(self, action: Action) -> int: ...

    def window_bytes(self, subgroup: int) -> int: ...

    def apply(self, action: Action, start_ns: int, end_ns: int) -> None: ...


def run_update(plan: UpdatePlan, target: UpdateTarget) -> tuple[ScheduledAction, ...]:
    """List-schedule the plan's actions against lanes, streams and deps.

    Actions are served strictly in emission order per lane and per stream;
    an action starts at the earliest instant satisfying its lane, its
    stream, its dependencies and (for window-opening prefetches) the fast
    tier's capacity gate.  ``target.apply`` is invoked once per action in
    emission order, after its interval is fixed.
    """
    capacity = target.fast_capacity_bytes
    if capacity is not None and plan.dynamic_fast:
        worst = max(target.window_bytes(sg) for sg in plan.dynamic_fast)
        if worst > capacity:
            raise InfeasibleConfigError(
                f"fast tier capacity {capacity} B cannot hold one in-flight "
                f"subgroup window of {worst} B"
            )

    lane_free: dict[Lane, int] = {lane: 0 for lane in Lane}
    stream_free: dict[Stream, int] = {stream: 0 for stream in Stream}
    end_of: dict[int, int] = {}
    dyn_set = set(plan.dynamic_fast)
    # Closed dynamic windows: (close_ns, bytes).  A window opens at its
    # PREFETCH_M start and closes at its FLUSH_OUT_P end; emission order
    # guarantees every previously opened window is closed (its flush
    # scheduled) before the next one opens.
    windows: list[tuple[int, int]] = []
    open_window_bytes = 0
    flush_p_pending: dict[int, int] = {}  # subgroup -> window open start

    scheduled: list[ScheduledAction] = []
    for action in plan.actions:
        start = 0
        for dep in action.deps:
            start = max(start, end_of[dep])
        start = max(start, lane_free[action.lane])
        if action.stream is not None:
            start = max(start, stream_free[action.stream])

        if (
            capacity is not None
            and action.kind is ActionKind.PREFETCH_M
            and action.subgroup in dyn_set
        ):
            need = target.window_bytes(action.subgroup)
            start = _admit(start, need, capacity, windows)
            flush_p_pending[action.subgroup] = start

        duration = target.duration_ns(action)
        end = start + duration
        end_of[action.id] = end
        lane_free[action.lane] = end
        if action.stream is not None:
            stream_free[action.stream] = end
        if action.kind is ActionKind.FLUSH_OUT_P and action.subgroup in flush_p_pending:
            del flush_p_pending[action.subgroup]
            windows.append((end, target.window_bytes(action.subgroup)))

        sched = ScheduledAction(
            action=action, start_ns=start, end_ns=end, bytes=target.bytes_of(action)
        )
        scheduled.append(sched)
        target.apply(action, start, end)

    return tuple(scheduled)


def _admit(start: int, need: int, capacity: int, windows: list[tuple[int, int]]) -> int:
    """Earliest t >= start at which open windows + ``need`` fit in capacity."""
    t = start
    # Candidate times: start itself, then each later window close.
    closes = sorted(c for c, _ in windows if c > start)
    for candidate in [start] + closes:
        t = candidate
        occupied = sum(b for c, b in windows if c > t)
        if occupied + need <= capacity:
            return t
    raise InfeasibleConfigError(
        f"capacity gate cannot admit a {need} B window within {capacity} B"
    )


def validate_schedule(
    plan: UpdatePlan, schedule: Iterable[ScheduledAction], target: UpdateTarget
) -> None:
    """Structural audit of a scheduled timeline; raises AssertionError.

    Checks lane exclusivity, per-stream FIFO, dependency ordering, the
    one-update-per-subgroup rule, transfer completeness for each placement
    class, the capacity budget and the two-windows pipelining bound.
    """
    events = list(schedule)
    by_id = {ev.action.id: ev for ev in events}

    last_in_lane: dict[Lane, ScheduledAction] = {}
    last_in_stream: dict[Stream, ScheduledAction] = {}
    for ev in events:
        assert 0 <= ev.start_ns <= ev.end_ns, f"bad interval on action {ev.action.id}"
        prev = last_in_lane.get(ev.action.lane)
        if prev is not None:
            assert ev.start_ns >= prev.end_ns, (
                f"lane {ev.action.lane.value} overlap: action {ev.action.id} "
                f"starts at {ev.start_ns} before {prev.action.id} ends {prev.end_ns}"
            )
        last_in_lane[ev.action.lane] = ev
        if ev.action.stream is not None:
            sprev = last_in_stream.get(ev.action.stream)
            if sprev is not None:
                assert ev.start_ns >= sprev.end_ns, (
                    f"stream {ev.action.stream.value} FIFO violated by "
                    f"action {ev.action.id}"
                )
            last_in_stream[ev.action.stream] = ev
        for dep in ev.action.deps:
            assert by_id[dep].end_ns <= ev.start_ns, (
                f"action {ev.action.id} starts before dep {dep} ends"
            )

    updates: dict[int, int] = {}
    kinds_by_sg: dict[int, list[ActionKind]] = {}
    downscaled: dict[int, int] = {}
    for ev in events:
        a = ev.action
        if a.kind in (ActionKind.CPU_UPDATE, ActionKind.GPU_UPDATE):
            updates[a.subgroup] = updates.get(a.subgroup, 0) + 1
        if a.kind is ActionKind.CPU_DOWNSCALE:
            for j in a.batch:
                downscaled[j] = downscaled.get(j, 0) + 1
        kinds_by_sg.setdefault(a.subgroup, []).append(a.kind)

    for i in range(plan.num_subgroups):
        assert updates.get(i, 0) == 1, f"subgroup {i} has {updates.get(i, 0)} updates"
        kinds = kinds_by_sg.get(i, [])
        if plan.devices[i] is Device.CPU:
            assert downscaled.get(i, 0) == 1, f"subgroup {i} missing downscale"
            assert kinds.count(ActionKind.H2D_PARAMS16) == 1, (
                f"subgroup {i} missing half-width params H2D"
            )
            assert not any(k in PREFETCH_KINDS for k in kinds), (
                f"CPU subgroup {i} has prefetch actions"
            )
        elif i in plan.static_set:
            assert kinds.count(ActionKind.FLUSH_OUT_MODEL16) == 1
            assert not any(
                k in PREFETCH_KINDS or k in FLUSH_STATE_KINDS for k in kinds
            ), f"static subgroup {i} moves optimizer state"
        else:
            for kind in PREFETCH_KINDS + FLUSH_STATE_KINDS:
                assert kinds.count(kind) == 1, (
                    f"dynamic fast subgroup {i} missing {kind.value}"
                )
            assert kinds.count(ActionKind.FLUSH_OUT_MODEL16) == 1

    # Windows: open at PREFETCH_M start, close at FLUSH_OUT_P end.
    opens: dict[int, int] = {}
    closes: dict[int, int] = {}
    for ev in events:
        if ev.action.kind is ActionKind.PREFETCH_M:
            opens[ev.action.subgroup] = ev.start_ns
        elif ev.action.kind is ActionKind.FLUSH_OUT_P:
            closes[ev.action.subgroup] = ev.end_ns
    intervals = []
    for sg, t0 in opens.items():
        t1 = closes.get(sg)
        assert t1 is not None and t1 > t0, f"window of subgroup {sg} never closes"
        intervals.append((t0, t1, target.window_bytes(sg)))
        ev_update = next(
            ev
            for ev in events
            if ev.action.kind is ActionKind.GPU_UPDATE and ev.action.subgroup == sg
        )
        assert t0 <= ev_update.start_ns and ev_update.end_ns <= t1, (
            f"fast update of subgroup {sg} escapes its residency window"
        )

    if intervals:
        edges = sorted({t for t0, t1, _ in intervals for t in (t0, t1)})
        capacity = target.fast_capacity_bytes
        for t in edges:
            live = [(t0, t1, b) for t0, t1, b in intervals if t0 <= t < t1]
            assert len(live) <= 2, (
                f"{len(live)} dynamic windows overlap at t={t}; pipelining "
                "bound is 2"
            )
            if capacity is not None:
                occupied = sum(b for _, _, b in live)
                assert occupied <= capacity, (
                    f"dynamic window occupancy {occupied} exceeds capacity "
                    f"{capacity} at t={t}"
                )
