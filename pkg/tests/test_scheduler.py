from __future__ import annotations

import dataclasses

import pytest

from optistate import (
    ALL_CPU,
    ActionKind,
    Device,
    InfeasibleConfigError,
    Lane,
    Placement,
    build_plan,
    next_on_gpu,
    prev_on_gpu,
    run_update,
    validate_schedule,
)


class UnitTarget:
    """Constant-duration target: enough to exercise the engine's ordering."""

    def __init__(self, capacity=None, window=12):
        self.fast_capacity_bytes = capacity
        self._window = window
        self.applied = []

    def duration_ns(self, action):
        return 10

    def bytes_of(self, action):
        return 0

    def window_bytes(self, subgroup):
        return self._window

    def apply(self, action, start_ns, end_ns):
        self.applied.append(action.id)


# ---------------------------------------------------------------------------
# Device assignment
# ---------------------------------------------------------------------------


def test_stride_predicate_every_other():
    plan = build_plan(8, 2)
    assert plan.dynamic_fast == (1, 3, 5, 7)
    assert [d is Device.FAST for d in plan.devices] == [
        False, True, False, True, False, True, False, True,
    ]


def test_stride_predicate_every_third():
    plan = build_plan(12, 3)
    assert plan.dynamic_fast == (2, 5, 8, 11)
    assert all(plan.devices[i] is Device.CPU for i in (0, 1, 3, 4, 6, 7, 9, 10))


def test_stride_one_is_all_fast():
    plan = build_plan(5, 1)
    assert plan.dynamic_fast == (0, 1, 2, 3, 4)
    assert all(d is Device.FAST for d in plan.devices)


def test_all_cpu_plan_has_no_fast_slots():
    plan = build_plan(6, ALL_CPU)
    assert plan.blocking
    assert plan.dynamic_fast == ()
    assert all(d is Device.CPU for d in plan.devices)


def test_static_first_overrides_predicate():
    plan = build_plan(8, 2, static_ratio=0.25, placement=Placement.STATIC_FIRST)
    assert plan.static_set == frozenset({0, 1})
    assert plan.dynamic_fast == (3, 5, 7)
    assert plan.device_of(0) is Device.FAST
    assert plan.is_static(1) and not plan.is_static(3)


def test_static_last_overrides_predicate():
    plan = build_plan(8, 2, static_ratio=0.25, placement=Placement.STATIC_LAST)
    assert plan.static_set == frozenset({6, 7})
    assert plan.dynamic_fast == (1, 3, 5)


def test_static_count_floors():
    assert build_plan(10, 2, static_ratio=0.3).static_count == 3
    assert build_plan(10, 2, static_ratio=0.25).static_count == 2
    # a ratio that covers no whole subgroup pins nothing
    assert build_plan(3, ALL_CPU, static_ratio=0.2).static_count == 0
    assert build_plan(7, 2, static_ratio=0.1).static_count == 0


def test_all_static_with_finite_stride_warns():
    with pytest.warns(UserWarning, match="all-static"):
        plan = build_plan(4, 2, static_ratio=1.0)
    assert plan.static_count == 4
    assert plan.dynamic_fast == ()


def test_blocking_hybrid_statics_stay_fast():
    plan = build_plan(6, ALL_CPU, static_ratio=0.5, placement=Placement.STATIC_FIRST)
    assert plan.static_set == frozenset({0, 1, 2})
    assert plan.dynamic_fast == ()
    gpu = [a for a in plan.actions if a.kind is ActionKind.GPU_UPDATE]
    assert sorted(a.subgroup for a in gpu) == [0, 1, 2]


def test_prev_next_on_gpu():
    plan = build_plan(12, 3)  # dynamic fast: 2, 5, 8, 11
    assert prev_on_gpu(plan, 2) is None
    assert prev_on_gpu(plan, 5) == 2
    assert prev_on_gpu(plan, 6) == 5
    assert next_on_gpu(plan, 6) == 8
    assert next_on_gpu(plan, 8) == 11
    assert next_on_gpu(plan, 11) is None


def test_build_plan_validation():
    with pytest.raises(ValueError):
        build_plan(-1, 2)
    with pytest.raises(ValueError):
        build_plan(4, 0)
    with pytest.raises(ValueError):
        build_plan(4, 2.5)
    with pytest.raises(ValueError):
        build_plan(4, 2, static_ratio=1.5)
    with pytest.raises(ValueError):
        build_plan(4, 2, static_ratio=-0.1)


# ---------------------------------------------------------------------------
# Emission structure
# ---------------------------------------------------------------------------


def test_action_ids_match_positions():
    plan = build_plan(9, 3, static_ratio=0.2)
    assert [a.id for a in plan.actions] == list(range(len(plan.actions)))


def test_schedule_valid_across_plan_grid():
    target = UnitTarget()
    for stride in (1, 2, 3, ALL_CPU):
        for ratio in (0.0, 0.25):
            for placement in Placement:
                for n in (1, 2, 5, 8, 12):
                    plan = build_plan(n, stride, ratio, placement)
                    sched = run_update(plan, target)
                    validate_schedule(plan, sched, target)
                    assert len(sched) == len(plan.actions)


def test_stride_one_pipelines_flush_then_prefetch():
    plan = build_plan(3, 1)
    kinds = [(a.kind, a.subgroup) for a in plan.actions]
    assert kinds == [
        (ActionKind.PREFETCH_M, 0),
        (ActionKind.PREFETCH_V, 0),
        (ActionKind.PREFETCH_P, 0),
        (ActionKind.GPU_UPDATE, 0),
        (ActionKind.FLUSH_OUT_MODEL16, 0),
        (ActionKind.FLUSH_OUT_M, 0),
        (ActionKind.FLUSH_OUT_V, 0),
        (ActionKind.FLUSH_OUT_P, 0),
        (ActionKind.PREFETCH_M, 1),
        (ActionKind.PREFETCH_V, 1),
        (ActionKind.PREFETCH_P, 1),
        (ActionKind.GPU_UPDATE, 1),
        (ActionKind.FLUSH_OUT_MODEL16, 1),
        (ActionKind.FLUSH_OUT_M, 1),
        (ActionKind.FLUSH_OUT_V, 1),
        (ActionKind.FLUSH_OUT_P, 1),
        (ActionKind.PREFETCH_M, 2),
        (ActionKind.PREFETCH_V, 2),
        (ActionKind.PREFETCH_P, 2),
        (ActionKind.GPU_UPDATE, 2),
        (ActionKind.FLUSH_OUT_MODEL16, 2),
        (ActionKind.FLUSH_OUT_M, 2),
        (ActionKind.FLUSH_OUT_V, 2),
        (ActionKind.FLUSH_OUT_P, 2),
    ]


def test_late_prefetch_when_statics_lead():
    # Statics occupy slots 0-2; the first dynamic fast subgroup (3) has no
    # cycle-start CPU slot before it, so its prefetch is emitted in place.
    plan = build_plan(8, 2, static_ratio=0.375, placement=Placement.STATIC_FIRST)
    assert plan.static_set == frozenset({0, 1, 2})
    assert plan.dynamic_fast[0] == 3
    kinds = [(a.kind, a.subgroup) for a in plan.actions[:10]]
    assert kinds[:6] == [
        (ActionKind.GPU_UPDATE, 0),
        (ActionKind.FLUSH_OUT_MODEL16, 0),
        (ActionKind.GPU_UPDATE, 1),
        (ActionKind.FLUSH_OUT_MODEL16, 1),
        (ActionKind.GPU_UPDATE, 2),
        (ActionKind.FLUSH_OUT_MODEL16, 2),
    ]
    assert kinds[6] == (ActionKind.PREFETCH_M, 3)
    target = UnitTarget()
    validate_schedule(plan, run_update(plan, target), target)


def test_cycle_start_cpu_slot_pumps_pipeline():
    # stride 3, N=10: fast slots 2, 5, 8; cycle-start CPU slots 0, 3, 6, 9.
    plan = build_plan(10, 3)
    seq = [(a.kind, a.subgroup) for a in plan.actions]
    # Slot 3 flushes subgroup 2 and prefetches subgroup 5 before updating 3.
    i_flush2 = seq.index((ActionKind.FLUSH_OUT_MODEL16, 2))
    i_pf5 = seq.index((ActionKind.PREFETCH_M, 5))
    i_cpu3 = seq.index((ActionKind.CPU_UPDATE, 3))
    i_gpu2 = seq.index((ActionKind.GPU_UPDATE, 2))
    assert i_gpu2 < i_flush2 < i_pf5 < i_cpu3


def test_downscale_batches_drain_at_fast_slots():
    plan = build_plan(10, 3)
    batches = [a.batch for a in plan.actions if a.kind is ActionKind.CPU_DOWNSCALE]
    assert batches == [(0, 1), (3, 4), (6, 7), (9,)]
    # each batch member gets its half-width params shipped back
    h2d = [a.subgroup for a in plan.actions if a.kind is ActionKind.H2D_PARAMS16]
    assert sorted(h2d) == [0, 1, 3, 4, 6, 7, 9]


def test_blocking_plan_is_fully_chained():
    plan = build_plan(4, ALL_CPU)
    for prev, action in zip(plan.actions, plan.actions[1:]):
        assert prev.id in action.deps
    target = UnitTarget()
    sched = run_update(plan, target)
    for prev, ev in zip(sched, sched[1:]):
        assert ev.start_ns == prev.end_ns  # strictly serialized
    validate_schedule(plan, sched, target)


def test_empty_plan():
    plan = build_plan(0, 2)
    assert plan.actions == ()
    target = UnitTarget()
    assert run_update(plan, target) == ()
    validate_schedule(plan, (), target)


# ---------------------------------------------------------------------------
# Engine behaviour
# ---------------------------------------------------------------------------


def test_run_update_is_deterministic():
    plan = build_plan(9, 2, static_ratio=0.25)
    a = run_update(plan, UnitTarget())
    b = run_update(plan, UnitTarget())
    assert a == b


def test_apply_called_once_per_action_in_emission_order():
    plan = build_plan(7, 2)
    target = UnitTarget()
    run_update(plan, target)
    assert target.applied == list(range(len(plan.actions)))


def test_capacity_gate_serializes_windows():
    plan = build_plan(8, 2)
    tight = UnitTarget(capacity=12, window=12)
    sched = run_update(plan, tight)
    validate_schedule(plan, sched, tight)
    opens = {
        ev.action.subgroup: ev.start_ns
        for ev in sched
        if ev.action.kind is ActionKind.PREFETCH_M
    }
    closes = {
        ev.action.subgroup: ev.end_ns
        for ev in sched
        if ev.action.kind is ActionKind.FLUSH_OUT_P
    }
    fast = list(plan.dynamic_fast)
    for a, b in zip(fast, fast[1:]):
        assert opens[b] >= closes[a], f"window {b} opened inside window {a}"

    roomy = UnitTarget(capacity=24, window=12)
    sched2 = run_update(plan, roomy)
    validate_schedule(plan, sched2, roomy)
    opens2 = {
        ev.action.subgroup: ev.start_ns
        for ev in sched2
        if ev.action.kind is ActionKind.PREFETCH_M
    }
    closes2 = {
        ev.action.subgroup: ev.end_ns
        for ev in sched2
        if ev.action.kind is ActionKind.FLUSH_OUT_P
    }
    overlapped = sum(
        1 for a, b in zip(fast, fast[1:]) if opens2[b] < closes2[a]
    )
    assert overlapped > 0  # with room for two windows, pipelining resumes
    end_tight = max(ev.end_ns for ev in sched)
    end_roomy = max(ev.end_ns for ev in sched2)
    assert end_tight > end_roomy


def test_capacity_below_one_window_is_infeasible():
    plan = build_plan(4, 2)
    with pytest.raises(InfeasibleConfigError):
        run_update(plan, UnitTarget(capacity=11, window=12))


def test_validator_catches_tampered_schedule():
    plan = build_plan(6, 2)
    target = UnitTarget()
    sched = list(run_update(plan, target))
    # Pull the second CPU-compute event back to overlap the first.
    cpu_ids = [
        i for i, ev in enumerate(sched) if ev.action.lane is Lane.CPU_COMPUTE
    ]
    victim = sched[cpu_ids[1]]
    sched[cpu_ids[1]] = dataclasses.replace(
        victim, start_ns=0, end_ns=victim.duration_ns
    )
    with pytest.raises(AssertionError):
        validate_schedule(plan, sched, target)
