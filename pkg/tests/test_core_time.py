import time

import pytest
from hypothesis import given, strategies as st

from cosim.core_time import (
    LOCAL_CYCLE,
    ClockViolation,
    IncompleteCycle,
    LatencyLedger,
    LatencyRecord,
    Leg,
    RealtimeClock,
    Scheduler,
    StepConfig,
    SyncedClock,
    decompose,
    propagation_bound,
    record_leg,
    seconds_to_us,
    split_cycles,
)


def test_scheduler_orders_by_time_then_priority_then_insertion():
    sched = Scheduler()
    seen = []
    sched.call_at(20, seen.append, "late")
    sched.call_at(10, seen.append, "b", priority=10)
    sched.call_at(10, seen.append, "a", priority=0)
    sched.call_at(10, seen.append, "c", priority=10)
    sched.run()
    assert seen == ["a", "b", "c", "late"]
    assert sched.now() == 20


def test_scheduler_rejects_past_and_negative():
    sched = Scheduler()
    sched.call_at(100, lambda: None)
    sched.run()
    with pytest.raises(ClockViolation):
        sched.call_at(50, lambda: None)
    with pytest.raises(ClockViolation):
        sched.call_later(-1, lambda: None)


def test_every_and_until():
    sched = Scheduler()
    ticks = []
    sched.every(1000, ticks.append, start_us=500)
    end = sched.run(until_us=4000)
    assert ticks == [500, 1500, 2500, 3500]
    assert end == 4000
    # remaining tick stays queued
    assert sched.pending() == 1


def test_stop_halts_run():
    sched = Scheduler()
    ticks = []

    def tick(now):
        ticks.append(now)
        if len(ticks) == 3:
            sched.stop()

    sched.every(10, tick)
    sched.run(until_us=1_000)
    assert ticks == [0, 10, 20]


def test_realtime_clock_monotonic():
    clock = RealtimeClock()
    reads = [clock.now() for _ in range(1000)]
    assert reads == sorted(reads)
    assert reads[0] >= 0
    assert clock.wall_time() is not None


def test_synced_clock_adopts_reference_and_never_goes_back():
    base = Scheduler()
    clock = SyncedClock(base)
    base.call_at(1_000, lambda: None)
    base.run()
    clock.sync(50_000)
    assert clock.now() == 50_000
    # a later sync pulling time backwards is held at the last read
    clock.sync(10_000)
    assert clock.now() == 50_000
    base.call_at(100_000, lambda: None)
    base.run()
    assert clock.now() == 10_000 + 99_000


def test_synced_clock_base_at():
    base = Scheduler()
    clock = SyncedClock(base)
    base.call_at(3_000, lambda: None)
    base.run()
    # reference was read at base time 1000
    clock.sync(7_000, base_at=1_000)
    assert clock.now() == 9_000


@pytest.mark.parametrize("ts_phasor,ts_emt,expected", [
    (1_000, 100, 2_100),
    (10_000, 100, 20_100),
    (1_000, 0, 2_000),
])
def test_propagation_bound(ts_phasor, ts_emt, expected):
    assert propagation_bound(ts_phasor, ts_emt) == expected


@given(st.integers(0, 10**7), st.integers(0, 10**6))
def test_propagation_bound_linear_in_phasor_step(a, b):
    assert propagation_bound(2 * a, b) - propagation_bound(a, b) == 2 * a


def test_propagation_bound_rejects_negative():
    with pytest.raises(ValueError):
        propagation_bound(-1, 100)


@pytest.mark.parametrize("kwargs", [
    {"ts_emt_us": 0},
    {"ts_emt_us": 1000, "ts_phasor_us": 1000},
    {"ts_emt_us": 300, "ts_phasor_us": 1000},
    {"mcs_interval_us": 301 * 1_000_000},
])
def test_step_config_invariants(kwargs):
    with pytest.raises(ValueError):
        StepConfig(**kwargs)


def test_step_config_defaults():
    cfg = StepConfig()
    assert (cfg.ts_emt_us, cfg.ts_phasor_us) == (100, 1_000)


def test_record_leg_examples():
    ledger = LatencyLedger()
    assert record_leg(ledger, Leg.IFACE_TO_MCS, 1000, 1020).latency == 20
    assert record_leg(ledger, "socket_oneway", 0, 20_000).latency == 20_000
    with pytest.raises(ClockViolation):
        record_leg(ledger, Leg.MCS_COMPUTE, 50, 40)
    assert len(ledger) == 2


def _cycle(durations, start=0):
    recs, t = [], start
    for leg, d in zip(LOCAL_CYCLE, durations):
        recs.append(LatencyRecord(leg, t, t + d))
        t += d
    return recs


def test_decompose_additive():
    legs = (5, 3, 7, 5)
    cycle = (Leg.RTS_TO_IFACE, Leg.IFACE_TO_MCS, Leg.MCS_TO_IFACE, Leg.IFACE_TO_RTS)
    recs, t = [], 0
    for leg, d in zip(cycle, legs):
        recs.append(LatencyRecord(leg, t, t + d))
        t += d
    br = decompose(recs, cycle)
    assert br.total == 20
    assert br.end_to_end == 20
    assert br.additive


def test_decompose_empty_and_duplicate():
    with pytest.raises(IncompleteCycle):
        decompose([])
    recs = _cycle([1] * 7)
    with pytest.raises(IncompleteCycle):
        decompose(recs + [recs[0]])


def test_decompose_gap_is_not_additive():
    recs = _cycle([10] * 7)
    recs[3] = LatencyRecord(Leg.MCS_COMPUTE, recs[3].send + 5, recs[3].recv)
    br = decompose(recs)
    assert br.total == 65
    assert br.end_to_end == 70
    assert not br.additive


def test_split_cycles_keeps_partial_runs():
    recs = _cycle([1] * 7) + _cycle([2] * 7, start=100)[:3] + _cycle([1] * 7, start=200)
    cycles = split_cycles(recs)
    assert [len(c) for c in cycles] == [7, 3, 7]


def test_ledger_csv_roundtrip(tmp_path):
    ledger = LatencyLedger()
    for rec in _cycle([200, 50, 1000, 10_000, 1000, 50, 200]):
        ledger.record_leg(rec.leg, rec.send, rec.recv)
    path = tmp_path / "latency.csv"
    ledger.to_csv(path)
    again = LatencyLedger.from_csv(path)
    assert again.records() == ledger.records()
    assert path.read_text().splitlines()[0] == "leg,send_us,recv_us,latency_us"


def test_ledger_sorted_by_recv():
    ledger = LatencyLedger()
    ledger.record_leg(Leg.SOCKET_ONEWAY, 0, 30)
    ledger.record_leg(Leg.SOCKET_ONEWAY, 0, 10)
    assert [r.recv for r in ledger.records()] == [10, 30]


def test_seconds_to_us_rounds():
    assert seconds_to_us(0.0175) == 17_500
    assert seconds_to_us(1e-7) == 0


def test_realtime_sleep_until():
    clock = RealtimeClock()
    t0 = time.monotonic()
    clock.sleep_until(clock.now() + 20_000)
    assert time.monotonic() - t0 >= 0.019
