"""Event simulator: framing, delivery timing, metering, determinism."""

import csv

import numpy as np
import pytest

from dhdmm.simnet import (
    HEADER,
    SERVER_ID,
    SIGNATURE_BYTES,
    CostTable,
    DropEvent,
    Envelope,
    EventLoop,
    NetConfig,
    Party,
    RunMetrics,
    load_net_config,
    net_config_from_dict,
)


class TestEnvelope:
    def test_roundtrip_unsigned(self):
        env = Envelope(0x04, 3, SERVER_ID, b"hello shares")
        raw = env.to_bytes()
        assert len(raw) == HEADER.size + 12
        back = Envelope.from_bytes(raw, signed=False)
        assert back == env
        assert back.signature is None

    def test_roundtrip_signed(self):
        sig = bytes(range(64))
        env = Envelope(0x06, 9, 2, b"\x00" * 40, sig)
        back = Envelope.from_bytes(env.to_bytes(), signed=True)
        assert back.payload == b"\x00" * 40
        assert back.signature == sig

    def test_signed_part_excludes_signature(self):
        env = Envelope(0x01, 1, 2, b"abc", bytes(64))
        assert env.signed_part() == env.to_bytes()[:-SIGNATURE_BYTES]

    def test_bad_signature_size(self):
        with pytest.raises(ValueError):
            Envelope(0x01, 1, 2, b"", b"short").to_bytes()

    def test_truncated_frame(self):
        raw = Envelope(0x01, 1, 2, b"abcdef").to_bytes()
        with pytest.raises(ValueError):
            Envelope.from_bytes(raw[:-1], signed=False)
        with pytest.raises(ValueError):
            Envelope.from_bytes(raw + b"x", signed=False)
        with pytest.raises(ValueError):
            Envelope.from_bytes(raw[:3], signed=False)

    def test_signed_flag_mismatch(self):
        raw = Envelope(0x01, 1, 2, b"abcdef").to_bytes()
        with pytest.raises(ValueError):
            Envelope.from_bytes(raw, signed=True)


class TestNetConfig:
    def test_transfer_example_megabyte(self):
        # 10^6 bytes at 125000 bytes/s plus 100 ms of latency is 8.1 seconds
        net = NetConfig(client_up_bw=125000.0, latency=0.1)
        assert net.transfer_seconds(1, SERVER_ID, 10**6) == pytest.approx(8.0)
        assert net.latency + net.transfer_seconds(1, SERVER_ID, 10**6) == pytest.approx(8.1)

    def test_unlimited_is_free(self):
        net = NetConfig()
        assert net.transfer_seconds(1, SERVER_ID, 10**9) == 0.0
        assert net.latency == 0.0

    def test_zero_bytes_cost_nothing(self):
        net = NetConfig(client_up_bw=10.0, client_down_bw=10.0, server_bw=10.0)
        assert net.transfer_seconds(1, 2, 0) == 0.0

    def test_bottleneck_is_min_of_endpoint_caps(self):
        net = NetConfig(client_up_bw=100.0, client_down_bw=400.0, server_bw=200.0)
        # client -> server: min(up, server)
        assert net.transfer_seconds(1, SERVER_ID, 1000) == pytest.approx(10.0)
        # server -> client: min(server, down)
        assert net.transfer_seconds(SERVER_ID, 1, 1000) == pytest.approx(5.0)
        # client -> client: min(up, down)
        assert net.transfer_seconds(1, 2, 1000) == pytest.approx(10.0)

    def test_one_sided_cap(self):
        net = NetConfig(server_bw=500.0)
        assert net.transfer_seconds(1, SERVER_ID, 1000) == pytest.approx(2.0)
        assert net.transfer_seconds(1, 2, 1000) == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            NetConfig(client_up_bw=0.0)
        with pytest.raises(ValueError):
            NetConfig(server_bw=-1.0)
        with pytest.raises(ValueError):
            NetConfig(latency=-0.5)

    def test_dropout_phases(self):
        net = NetConfig(
            dropout_schedule=(DropEvent(3, 2, "masked"), DropEvent(7, 2, "unmask"))
        )
        assert net.dropout_phases() == {3: "masked", 7: "unmask"}

    def test_from_dict(self):
        net = net_config_from_dict(
            {
                "client_up_bw": 125000,
                "latency": 0.25,
                "dropout_schedule": [{"client": 4, "phase": "shares"}],
            }
        )
        assert net.client_up_bw == 125000
        assert net.client_down_bw is None
        assert net.latency == 0.25
        assert net.dropout_schedule == (DropEvent(4, 2, "shares"),)

    def test_load_json(self, tmp_path):
        path = tmp_path / "net.json"
        path.write_text('{"net": {"server_bw": 1000, "latency": 0.01}}')
        net = load_net_config(str(path))
        assert net.server_bw == 1000
        assert net.latency == 0.01

    def test_load_toml(self, tmp_path):
        path = tmp_path / "net.toml"
        path.write_text("[net]\nclient_up_bw = 2000.0\nlatency = 0.5\n")
        net = load_net_config(str(path))
        assert net.client_up_bw == 2000.0
        assert net.latency == 0.5

    def test_load_flat_dict(self, tmp_path):
        path = tmp_path / "flat.json"
        path.write_text('{"latency": 0.125}')
        assert load_net_config(str(path)).latency == 0.125


class TestCostTable:
    def test_lookup(self):
        table = CostTable()
        assert table.cost("flop", 1000) == pytest.approx(1e-6)
        assert table.cost("pubkey_op", 2) == pytest.approx(1e-4)

    def test_override(self):
        table = CostTable(gauss_sample=1e-3)
        assert table.cost("gauss_sample", 10) == pytest.approx(1e-2)

    def test_unknown_kind(self):
        with pytest.raises(AttributeError):
            CostTable().cost("quantum_op", 1)


class _Sink(Party):
    """Coordinator that records arrival times and stops at quiescence."""

    def __init__(self):
        super().__init__()
        self.id = SERVER_ID
        self.arrivals: list[tuple[float, int]] = []
        self._done = False

    def on_message(self, env: Envelope, now: float):
        self.arrivals.append((now, env.sender))
        return []

    def on_quiescence(self, now: float):
        self._done = True
        return []

    def finished(self) -> bool:
        return self._done


class _Shout(Party):
    """Client that fires one payload at the server on start."""

    def __init__(self, pid: int, payload: bytes, compute: float = 0.0):
        super().__init__()
        self.id = pid
        self.payload = payload
        self.compute = compute

    def on_start(self, now: float):
        if self.compute:
            self.charge("flop", self.compute / self.cost_table.flop)
        return [Envelope(0x01, self.id, SERVER_ID, self.payload)]

    def on_message(self, env: Envelope, now: float):
        return []


def _run_shout(net: NetConfig, payload: bytes, **kw):
    sink = _Sink()
    parties = {SERVER_ID: sink, 1: _Shout(1, payload, **kw)}
    loop = EventLoop(net, parties)
    metrics = loop.run()
    return sink, metrics


class TestEventLoop:
    def test_delivery_timestamp_includes_transfer_and_latency(self):
        # frame sized to exactly one megabyte so the arithmetic is visible
        payload = b"\x00" * (10**6 - HEADER.size)
        net = NetConfig(client_up_bw=125000.0, latency=0.1)
        sink, metrics = _run_shout(net, payload)
        assert sink.arrivals[0][0] == pytest.approx(8.1)
        assert metrics.total_sim_time == pytest.approx(8.1)
        assert metrics.bytes_sent[1] == 10**6
        assert metrics.bytes_received[SERVER_ID] == 10**6

    def test_unlimited_bandwidth_zero_latency_is_instant(self):
        sink, metrics = _run_shout(NetConfig(), b"payload")
        assert sink.arrivals[0][0] == 0.0
        assert metrics.total_sim_time == 0.0

    def test_latency_only(self):
        sink, _ = _run_shout(NetConfig(latency=0.25), b"")
        assert sink.arrivals[0][0] == pytest.approx(0.25)

    def test_compute_cost_delays_departure(self):
        # one simulated second of flops before the send
        sink, metrics = _run_shout(NetConfig(latency=0.5), b"x", compute=1.0)
        assert sink.arrivals[0][0] == pytest.approx(1.5)
        assert metrics.sim_compute[1] == pytest.approx(1.0)
        assert metrics.wall_compute[1] < 0.5

    def test_dead_receiver_discards(self):
        sink = _Sink()
        shout = _Shout(1, b"going nowhere")
        mute = _Shout(2, b"")
        mute.dead = True
        loop = EventLoop(NetConfig(), {SERVER_ID: sink, 1: shout, 2: mute}, record_messages=True)

        real_on_start = shout.on_start
        shout.on_start = lambda now: [Envelope(0x01, 1, 2, b"going nowhere")]
        metrics = loop.run()
        shout.on_start = real_on_start

        frame = HEADER.size + len(b"going nowhere")
        assert metrics.bytes_discarded == frame
        assert metrics.bytes_received[2] == 0
        dropped = [m for m in loop.message_log if m.time_delivered is None]
        assert len(dropped) == 1 and dropped[0].receiver == 2
        metrics.check_conservation()

    def test_unknown_receiver_rejected(self):
        sink = _Sink()
        shout = _Shout(1, b"")
        shout.on_start = lambda now: [Envelope(0x01, 1, 99, b"")]
        with pytest.raises(ValueError, match="unknown party"):
            EventLoop(NetConfig(), {SERVER_ID: sink, 1: shout}).run()

    def test_deadlock_detected(self):
        class _Stuck(Party):
            def __init__(self):
                super().__init__()
                self.id = SERVER_ID

            def on_message(self, env, now):
                return []

        with pytest.raises(RuntimeError, match="deadlock"):
            EventLoop(NetConfig(), {SERVER_ID: _Stuck()}).run()

    def test_tamper_hook_rewrites_frames(self):
        seen = []

        def tamper(idx, raw):
            seen.append(idx)
            if idx == 0:
                return raw + b"!!"
            return None

        sink = _Sink()
        sink.on_message_raw = lambda raw, now: []  # skip parsing the mangled frame
        _, metrics = (
            lambda loop: (None, loop.run())
        )(EventLoop(NetConfig(), {SERVER_ID: sink, 1: _Shout(1, b"abc")}, tamper=tamper))
        assert seen == [0]
        assert metrics.bytes_sent[1] == HEADER.size + 3 + 2

    def test_deterministic_message_log(self):
        def build():
            sink = _Sink()
            parties = {SERVER_ID: sink}
            for i in range(5):
                parties[i] = _Shout(i, bytes([i]) * (i + 1))
            loop = EventLoop(NetConfig(client_up_bw=100.0, latency=0.01), parties,
                             record_messages=True)
            loop.run()
            return [(m.time_sent, m.time_delivered, m.sender, m.nbytes) for m in loop.message_log]

        assert build() == build()

    def test_tie_break_order_by_sender_then_seq(self):
        sink = _Sink()
        parties = {SERVER_ID: sink, 3: _Shout(3, b"c"), 1: _Shout(1, b"a"), 2: _Shout(2, b"b")}
        EventLoop(NetConfig(), parties).run()
        assert [s for _, s in sink.arrivals] == [1, 2, 3]


class TestRunMetrics:
    def test_conservation_violation_raises(self):
        m = RunMetrics([SERVER_ID, 0])
        m.bytes_sent[0] = 10
        with pytest.raises(AssertionError, match="conservation"):
            m.check_conservation()
        m.bytes_discarded = 4
        m.bytes_received[SERVER_ID] = 6
        m.check_conservation()

    def test_to_dict_shape(self):
        m = RunMetrics([SERVER_ID, 0, 1])
        m.bytes_sent[0] = 5
        m.bytes_sent[1] = 7
        m.round_timestamps["agg.keys"] = 0.5
        d = m.to_dict()
        assert d["client_bytes_sent"] == {"total": 12, "mean": 6.0, "max": 7}
        assert d["server"]["bytes_sent"] == 0
        assert d["round_timestamps"] == {"agg.keys": 0.5}

    def test_csv_roundtrip(self, tmp_path):
        m = RunMetrics([SERVER_ID, 0, 1])
        m.bytes_sent[1] = 42
        path = tmp_path / "metrics.csv"
        m.write_csv(str(path))
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert [r["party"] for r in rows] == ["0", "1", "server"]
        assert rows[1]["bytes_sent"] == "42"


class TestMonotonicity:
    """More latency never speeds a run up; more bandwidth never slows it."""

    @staticmethod
    def _total_time(net: NetConfig) -> float:
        from dhdmm.secagg import AggConfig, run_aggregation

        cfg = AggConfig(n=6, vector_len=4, seed=13)
        x = np.arange(24, dtype=np.uint64).reshape(6, 4)
        _, transcript = run_aggregation(x, cfg, net=net)
        return transcript.metrics.total_sim_time

    def test_latency_monotone(self):
        times = [self._total_time(NetConfig(latency=l)) for l in (0.0, 0.05, 0.2)]
        assert times[0] <= times[1] <= times[2]
        assert times[2] > times[0]

    def test_bandwidth_monotone(self):
        times = [
            self._total_time(NetConfig(client_up_bw=bw, server_bw=bw))
            for bw in (5e4, 5e5, None)
        ]
        assert times[0] >= times[1] >= times[2]
        assert times[0] > times[2]
