import csv
import json
import time

import numpy as np
import pytest

from cosim.bridge import (
    LOG_COLUMNS,
    Bridge,
    BridgeConfig,
    BridgeLog,
    LegDelays,
    VirtualBridgeRunner,
    connect_bridge,
    parse_endpoint,
    replay_log,
    signal_map,
)
from cosim.core_time import LatencyLedger, RealtimeClock, Scheduler
from cosim.federates import RTS_MEASUREMENTS, McsConfig, McsServer, RtsConfig, RtsEmulator
from cosim.modbus import DirectTransport, ModbusClient, ModbusError, ModbusServer, ModbusTimeout, registers_to_f32
from cosim.scenarios import parse_config, run_scenario
from cosim.signals import TimestampedSample
from cosim.transport import Frame, FrameKind, LatencyModel, LoopbackLink

DOWN_CYCLE_US = 1_000 + 50 + 200  # link, interface processing, Modbus write


def read_log(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    assert tuple(rows[0]) == LOG_COLUMNS
    return [dict(zip(LOG_COLUMNS, r)) for r in rows[1:]]


def read_dispositions(log_path):
    path = BridgeLog.disposition_path(log_path)
    return [json.loads(line) for line in path.read_text().splitlines()]


def seq_gaps(rows, direction):
    seqs = [int(r["seq"]) for r in rows if r["direction"] == direction]
    return sum(1 for a, b in zip(seqs, seqs[1:]) if b != a + 1) + (seqs[0] != 1 if seqs else 0)


def cmd_frame(values, seq=1, t=0, kind=FrameKind.COMMAND):
    samples = tuple(TimestampedSample(k, t, v) for k, v in values.items())
    return Frame(kind, seq, "mcs", t, samples)


class VirtualRig:
    """Bridge plus in-process Modbus server on one scheduler, no MCS federate."""

    def __init__(self, tmp_path, measurements=("p",), commands=("sp",), **cfg):
        self.sched = Scheduler()
        self.map = signal_map(measurements, commands, sim_time_signal=None)
        self.server = ModbusServer(self.map)
        self.config = BridgeConfig(measurements=list(measurements), commands=list(commands),
                                   log_path=str(tmp_path / "log.csv"), sim_time_signal=None, **cfg)
        self.client = ModbusClient(DirectTransport(self.server), self.config.bindings())
        self.link = LoopbackLink(self.sched, LatencyModel.fixed(0.001), seed=0)
        self.ledger = LatencyLedger()
        self.bridge = Bridge(self.config, self.client, self.link.a, self.sched, self.ledger)
        self.runner = VirtualBridgeRunner(self.bridge, self.sched, LegDelays())
        self.runner.start()


class Flaky:
    def __init__(self, errors):
        self.errors = list(errors)

    def read_values(self, names):
        exc = self.errors.pop(0) if self.errors else None
        if exc is not None:
            raise exc
        return {n: 1.0 for n in names}

    def close(self):
        pass


# -- write-through ------------------------------------------------------------

def test_setpoint_written_within_one_downstream_cycle(tmp_path):
    rig = VirtualRig(tmp_path)
    rig.link.b.send(cmd_frame({"sp": 0.8}))
    rig.sched.run(until_us=DOWN_CYCLE_US - 1)
    assert rig.map.get_value("sp") == 0.0
    rig.sched.run(until_us=DOWN_CYCLE_US)
    expected = registers_to_f32(rig.map.bindings["sp"].encode(0.8))
    assert rig.map.get_value("sp") == expected
    assert abs(expected - 0.8) < 1e-7
    rig.runner.finish()
    disp = read_dispositions(rig.config.log_path)
    assert [d["disposition"] for d in disp] == ["written"]


def test_last_value_in_frame_wins_and_all_are_logged(tmp_path):
    rig = VirtualRig(tmp_path, commands=("sp", "sq"))
    frame = Frame(FrameKind.COMMAND, 1, "mcs", 0, (
        TimestampedSample("sp", 0, 0.1), TimestampedSample("sq", 0, 0.2), TimestampedSample("sp", 0, 0.3)))
    rig.link.b.send(frame)
    rig.sched.run(until_us=10_000)
    rig.runner.finish()
    assert rig.map.get_value("sp") == pytest.approx(0.3, abs=1e-7)
    assert rig.map.get_value("sq") == pytest.approx(0.2, abs=1e-7)
    down = [r for r in read_log(rig.config.log_path) if r["direction"] == "down"]
    assert [r["signal_id"] for r in down] == ["sp", "sq", "sp"]
    assert len(read_dispositions(rig.config.log_path)) == 3


def test_unbound_and_non_command_are_dropped_with_reason(tmp_path):
    rig = VirtualRig(tmp_path)
    rig.link.b.send(cmd_frame({"nope": 1.0}))
    rig.link.b.send(cmd_frame({"sp": 1.0}, seq=2, kind=FrameKind.MEASUREMENT))
    rig.sched.run(until_us=10_000)
    rig.runner.finish()
    disp = read_dispositions(rig.config.log_path)
    assert [d["disposition"] for d in disp] == ["dropped", "dropped"]
    assert "not a bound command" in disp[0]["reason"]
    assert "not a command" in disp[1]["reason"]
    assert rig.bridge.stats.commands_dropped == 2
    assert rig.map.get_value("sp") == 0.0


def test_failed_write_is_dropped_not_silent(tmp_path):
    rig = VirtualRig(tmp_path)

    class Broken(Flaky):
        def write_signals(self, values):
            raise ModbusError("device busy")

    rig.bridge.modbus = Broken([])
    rig.link.b.send(cmd_frame({"sp": 0.8}))
    rig.sched.run(until_us=10_000)
    rig.runner.finish()
    [d] = read_dispositions(rig.config.log_path)
    assert d["disposition"] == "dropped"
    assert "device busy" in d["reason"]


def test_malformed_frame_recorded(tmp_path):
    rig = VirtualRig(tmp_path)
    rig.bridge.handle_malformed("bad magic")
    rig.runner.finish()
    [d] = read_dispositions(rig.config.log_path)
    assert d["seq"] is None and "bad magic" in d["reason"]
    assert rig.bridge.stats.malformed_frames == 1


# -- upstream -----------------------------------------------------------------

def test_poll_logs_and_forwards(tmp_path):
    rig = VirtualRig(tmp_path)
    rig.map.set_value("p", 1.25)
    got = []
    rig.link.b.listener = lambda frame, rx: got.append((rx, frame))
    rig.sched.run(until_us=2_500_000)
    rig.runner.finish()
    up = [r for r in read_log(rig.config.log_path) if r["direction"] == "up"]
    assert [int(r["sim_time_us"]) for r in up] == [0, 1_000_000, 2_000_000]
    assert all(float(r["value"]) == 1.25 for r in up)
    assert len(got) == 3
    assert all(f.kind is FrameKind.MEASUREMENT and f.values() == {"p": 1.25} for _, f in got)


def test_modbus_timeouts_skip_cycles(tmp_path):
    rig = VirtualRig(tmp_path)
    rig.bridge.modbus = Flaky([ModbusTimeout("slow"), None, ModbusError("boom"), ModbusTimeout("slow")])
    rig.sched.run(until_us=5_500_000)
    rig.runner.finish()
    s = rig.bridge.stats
    assert (s.polls, s.poll_timeouts, s.poll_errors) == (6, 2, 1)
    assert rig.bridge.log.seq["up"] == 3
    assert seq_gaps(read_log(rig.config.log_path), "up") == 0


def test_forward_skips_already_sent_snapshot(tmp_path):
    rig = VirtualRig(tmp_path, forward_period=0.25)
    got = []
    rig.link.b.listener = lambda frame, rx: got.append(frame)
    rig.sched.run(until_us=3_000_000)
    assert len(got) == 3
    assert rig.bridge.stats.forwards == 3


# -- log ----------------------------------------------------------------------

def test_log_sequence_and_clamp(tmp_path):
    log = BridgeLog(tmp_path / "b.csv")
    assert log.append("up", "p", 1.0, 100) == 1
    assert log.append("up", "p", 2.0, 50) == 2  # clamped to 100
    assert log.append("down", "sp", 3.0, 10) == 1
    log.close()
    rows = read_log(tmp_path / "b.csv")
    assert [int(r["sim_time_us"]) for r in rows] == [100, 100, 10]
    with pytest.raises(ValueError):
        log.append("up", "p", 1.0, 200)


def test_jsonl_mirror(tmp_path):
    log = BridgeLog(tmp_path / "b.csv", jsonl=True)
    log.append("up", "p", 1.5, 7)
    log.close()
    [rec] = [json.loads(x) for x in (tmp_path / "b.jsonl").read_text().splitlines()]
    assert rec["value"] == 1.5 and rec["seq"] == 1


def test_replay_three_series(tmp_path):
    log = BridgeLog(tmp_path / "b.csv")
    for k in range(4):
        log.append("up", "p", 1.0 + k, k * 1000)
        log.append("up", "q", -1.0 * k, k * 1000)
        log.append("down", "sp", 0.5 * k, k * 1000 + 500)
    log.close()
    series = replay_log(tmp_path / "b.csv")
    assert set(series) == {"p", "q", "sp"}
    np.testing.assert_array_equal(series["p"]["sim_time_us"], [0, 1000, 2000, 3000])
    np.testing.assert_array_equal(series["q"]["value"], [0.0, -1.0, -2.0, -3.0])
    assert series["sp"]["direction"] == "down"
    assert series.skipped == 0
    assert series.clock_source == "sim_time"


def test_replay_empty_log(tmp_path):
    BridgeLog(tmp_path / "b.csv", clock_source="local").close()
    series = replay_log(tmp_path / "b.csv")
    assert dict(series) == {}
    assert series.clock_source == "local"


def test_replay_skips_corrupt_lines(tmp_path):
    path = tmp_path / "b.csv"
    path.write_text(
        ",".join(LOG_COLUMNS) + "\n"
        ",0,up,p,1.0,1\n"
        ",x,up,p,1.0,2\n"
        ",1,sideways,p,1.0,3\n"
        ",2,up,p,nan,4\n"
        ",3,up,p\n"
        ",4,up,p,2.0,5\n"
    )
    series = replay_log(path)
    assert series.skipped == 4
    np.testing.assert_array_equal(series["p"]["value"], [1.0, 2.0])


# -- config -------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"measurements": ["p"], "poll_period": 0},
    {"measurements": ["p"], "forward_period": -1},
    {"measurements": []},
    {"measurements": ["p"], "commands": ["p"]},
])
def test_bridge_config_rejects(kwargs):
    with pytest.raises(ValueError):
        BridgeConfig(**kwargs)


def test_bridge_config_from_dict(tmp_path):
    cfg = BridgeConfig.from_dict({"measurements": ["p"], "commands": ["sp"], "poll_period": 0.5})
    assert cfg.forward_period == 0.5
    assert [b.signal_id for b in cfg.bindings()] == ["sim_time", "p", "sp"]
    with pytest.raises(ValueError, match="polling"):
        BridgeConfig.from_dict({"measurements": ["p"], "polling": 1})
    path = tmp_path / "b.json"
    path.write_text(json.dumps({"measurements": ["v"], "modbus_endpoint": "10.0.0.2:502"}))
    assert BridgeConfig.from_file(path).modbus_endpoint == "10.0.0.2:502"


def test_parse_endpoint():
    assert parse_endpoint("127.0.0.1:5020") == ("127.0.0.1", 5020)
    for bad in ("localhost", ":80", "host:port"):
        with pytest.raises(ValueError):
            parse_endpoint(bad)


# -- outage, virtual ----------------------------------------------------------

def _local_lg(tmp_path, name, **spec):
    cfg = parse_config({"scenario": "local_lg", "seed": 5, "duration_s": 400,
                        "local_lg": {"write_truth": False, **spec}})
    out = tmp_path / name
    manifest = run_scenario(cfg, out)
    return manifest["summary"], out


def test_virtual_outage_resilience(tmp_path):
    base, _ = _local_lg(tmp_path, "base")
    hit, out = _local_lg(tmp_path, "hit", outage={"start_s": 150, "duration_s": 30})
    assert hit["upstream_entries"] == base["upstream_entries"]
    assert hit["disconnects"] == 1 and hit["reconnects"] == 1
    rows = read_log(out / "bridge_log.csv")
    down = [r for r in rows if r["direction"] == "down"]
    assert any(int(r["sim_time_us"]) > 181_000_000 for r in down)
    assert not any(150_000_000 < int(r["sim_time_us"]) < 180_000_000 for r in down)
    # every received command has a disposition
    disp = {d["seq"]: d for d in read_dispositions(out / "bridge_log.csv")}
    assert {int(r["seq"]) for r in down} == set(disp)
    assert all(d["disposition"] in ("written", "dropped") for d in disp.values())
    # commands the MCS could not send are counted at the source
    assert hit["downstream_entries"] == 5 * (hit["mcs_dispatched"] - hit["mcs_send_failures"])
    assert seq_gaps(rows, "up") == 0 and seq_gaps(rows, "down") == 0


def test_short_soak_has_no_gaps(tmp_path):
    cfg = parse_config({"scenario": "local_lg", "seed": 1, "duration_s": 3600,
                        "local_lg": {"write_truth": False}})
    t0 = time.perf_counter()
    manifest = run_scenario(cfg, tmp_path)
    wall = time.perf_counter() - t0
    rows = read_log(tmp_path / "bridge_log.csv")
    assert seq_gaps(rows, "up") == 0 and seq_gaps(rows, "down") == 0
    s = manifest["summary"]
    assert s["complete_cycles"] == s["additive_cycles"] == 3600
    # a 24 h run must fit in 60 s, so one hour gets a proportional budget
    assert wall < 60 / 24


# -- realtime -----------------------------------------------------------------

class RealtimeRig:
    def __init__(self, tmp_path, poll=0.1):
        self.clock = RealtimeClock()
        self.ledger = LatencyLedger()
        rcfg = RtsConfig(group_p_w=(1e5, 2e5))
        self.rts = RtsEmulator(rcfg, self.clock, signal_map(RTS_MEASUREMENTS, rcfg.commands))
        host, port = self.rts.server.serve("127.0.0.1", 0)
        self.mcs = McsServer(McsConfig(rule="step_schedule", interval_us=int(poll * 1e6), n_groups=2,
                                       group_spacing_us=500_000), self.clock, ledger=self.ledger).start()
        mh, mp = self.mcs.address
        self.config = BridgeConfig(
            modbus_endpoint=f"{host}:{port}", mcs_endpoint=f"{mh}:{mp}", poll_period=poll,
            measurements=list(RTS_MEASUREMENTS), commands=rcfg.commands, log_path=str(tmp_path / "rt.csv"),
            reconnect_backoff=0.05, reconnect_backoff_max=0.2, modbus_timeout_ms=500,
        )
        self.bridge = connect_bridge(self.config, self.clock, self.ledger)

    def __enter__(self):
        self.bridge.start()
        return self

    def __exit__(self, *exc):
        self.bridge.stop()
        self.mcs.stop()
        self.rts.server.shutdown()


@pytest.mark.realtime
def test_realtime_outage_resumes(tmp_path):
    with RealtimeRig(tmp_path) as rig:
        time.sleep(1.0)
        t_drop = rig.clock.now()
        rig.mcs.drop(0.5)
        time.sleep(2.0)
    s = rig.bridge.stats
    assert s.disconnects >= 1 and s.reconnects >= 2  # initial dial plus recovery
    assert s.poll_timeouts == 0 and s.poll_errors == 0
    assert rig.bridge.log.seq["up"] == 4 * s.polls
    rows = read_log(rig.config.log_path)
    down = [r for r in rows if r["direction"] == "down"]
    assert any(int(r["sim_time_us"]) > t_drop + 600_000 for r in down)
    disp = {d["seq"] for d in read_dispositions(rig.config.log_path)}
    assert {int(r["seq"]) for r in down} == disp
    assert seq_gaps(rows, "up") == 0 and seq_gaps(rows, "down") == 0


@pytest.mark.realtime
def test_realtime_poll_cadence_survives_stalled_mcs(tmp_path):
    poll = 0.1
    with RealtimeRig(tmp_path, poll=poll) as rig:
        time.sleep(0.3)
        rig.mcs.stall_reads(1.5)
        time.sleep(2.0)
    times = np.asarray(rig.bridge.stats.poll_times)
    assert times.size >= 18
    spacing = np.diff(times) / 1e6
    assert np.max(np.abs(spacing - poll)) < poll / 10
    assert rig.bridge.stats.poll_timeouts == 0
