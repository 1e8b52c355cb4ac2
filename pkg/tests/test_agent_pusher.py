import threading
import time

import pytest

from odapipe import transport as tp
from odapipe.agent import AgentServer, CollectAgent, query_agent
from odapipe.clock import NS_PER_MS, NS_PER_S, EventScheduler, VirtualClock
from odapipe.core import Reading, SensorCache, SensorMeta, parse_topic
from odapipe.pusher import (CallbackPlugin, FileSourcePlugin, PlantSourcePlugin,
                            PluginError, Pusher, PusherConfig, parse_proc_text)
from odapipe.storage import Store, StoreConfig
from odapipe.transport import Batch, PublisherClient

T = parse_topic


def batch(topic, pairs):
    return Batch(runs=((topic, tuple(pairs)),))


class TestBrokerRouting:
    def test_batch_reaches_cache_store_and_subscriber(self, tmp_path):
        store = Store(StoreConfig(data_dir=str(tmp_path)), clock=VirtualClock(NS_PER_S))
        agent = CollectAgent(store=store, direct_store=True)
        got = []
        agent.subscribe("/a/#", lambda t, ts, vs: got.append((t, list(ts), list(vs))))
        pairs = tuple((i, i * 10) for i in range(1, 11))
        ack = agent.route_frame(batch("/a/b/s", pairs))
        assert ack.count == 10
        ts, _ = agent.cache.window_arrays("/a/b/s", 0, 100)
        assert len(ts) == 10
        store.flush()
        assert len(store.query("/a/b/s", 0, 100)) == 10
        assert got == [("/a/b/s", [p[0] for p in pairs], [p[1] for p in pairs])]

    def test_prefix_mismatch_not_delivered(self):
        agent = CollectAgent()
        got = []
        agent.subscribe("/deepest/cm/#", lambda t, ts, vs: got.append(t))
        agent.route_frame(batch("/deepest/esb/n1/gpu0/temp", ((1, 42),)))
        assert got == []

    def test_interleaved_publishers_monotone_cache(self):
        # oracle: single writer fed the merged interleaving in arrival order
        agent = CollectAgent()
        a = [(10, 1), (30, 3), (50, 5)]
        b = [(20, 2), (25, 9), (60, 6)]
        arrival = [a[0], b[0], a[1], b[1], a[2], b[2]]
        for ts, v in arrival:
            agent.route_frame(batch("/x/y/s", ((ts, v),)))
        oracle = SensorCache()
        t = T("/x/y/s")
        for ts, v in arrival:
            oracle.insert(Reading(t, ts, v))
        got = agent.cache.window_arrays("/x/y/s", 0, 100)
        expect = oracle.window_arrays("/x/y/s", 0, 100)
        assert got == expect
        assert got[0] == [10, 20, 30, 50, 60]  # 25 dropped as stale


class WireHarness:
    def __init__(self, tmp_path, queue_size=1024):
        self.store = Store(StoreConfig(data_dir=str(tmp_path / "store"),
                                       flush_interval_s=0.1))
        self.agent = CollectAgent(store=self.store, storage_queue_size=queue_size)
        self.server = AgentServer(self.agent).start()

    def stop(self):
        self.server.stop()


@pytest.fixture
def wire(tmp_path):
    h = WireHarness(tmp_path)
    yield h
    h.stop()


class TestWire:
    def test_publish_roundtrip_and_query(self, wire):
        client = PublisherClient(wire.server.address, node="/n/one")
        rs = [Reading(T("/n/one/s"), ts, ts * 2) for ts in (100, 200, 300)]
        assert client.publish(rs) == 3
        rows = query_agent(wire.server.address, "/n/one/#", 0, 10_000)
        assert rows == [("/n/one/s", 100, 200), ("/n/one/s", 200, 400),
                        ("/n/one/s", 300, 600)]
        client.close()

    def test_snapshot_returns_latest_only(self, wire):
        client = PublisherClient(wire.server.address)
        client.publish([Reading(T("/n/one/s"), ts, ts) for ts in (10, 20, 30)])
        rows = query_agent(wire.server.address, "/n/one/#", 0, 0, snapshot=True)
        assert rows == [("/n/one/s", 30, 30)]
        client.close()

    def test_live_subscription_streams_matching(self, wire):
        got = []
        done = threading.Event()
        import socket as _socket
        sock = _socket.create_connection(wire.server.address, timeout=5)
        sock.sendall(tp.encode_frame(tp.Subscribe(pattern="/n/#", mode=tp.SUB_LIVE)))
        kind, flags, payload = tp.read_frame(sock)
        assert tp.decode_payload(kind, flags, payload) == tp.Ack(of_kind=tp.SUBSCRIBE)

        def reader():
            kind, flags, payload = tp.read_frame(sock)
            for topic, ts, vs in tp.iter_batch_arrays(payload):
                got.append((topic, ts.tolist(), vs.tolist()))
            done.set()

        threading.Thread(target=reader, daemon=True).start()
        client = PublisherClient(wire.server.address)
        client.publish([Reading(T("/n/one/s"), 5, 50)])
        client.publish([Reading(T("/other/x/s"), 6, 60)])
        assert done.wait(5)
        assert got == [("/n/one/s", [5], [50])]
        client.close()
        sock.close()

    def test_buffered_redelivery_after_outage(self, tmp_path):
        # broker down while publishing; buffer is ample so nothing is lost
        h = WireHarness(tmp_path)
        addr = h.server.address
        h.stop()
        client = PublisherClient(addr, backoff_s=0.01, backoff_max_s=0.05)
        generated = [Reading(T("/n/one/s"), ts, ts) for ts in range(1, 21)]
        client.publish(generated[:10])
        time.sleep(0.05)
        store2 = Store(StoreConfig(data_dir=str(tmp_path / "store2")))
        agent2 = CollectAgent(store=store2, direct_store=True)
        server2 = AgentServer(agent2, host=addr[0], port=addr[1]).start()
        try:
            deadline = time.time() + 5
            sent = client.publish(generated[10:])
            while client._pending and time.time() < deadline:
                time.sleep(0.02)
                client.flush()
            rows = query_agent(addr, "/n/one/#", 0, 10_000)
            assert [r[1] for r in rows] == list(range(1, 21))  # order preserved, none lost
            assert client.dropped_readings == 0
        finally:
            client.close()
            server2.stop()

    def test_budget_overflow_drops_oldest_keeps_newest(self, tmp_path):
        h = WireHarness(tmp_path)
        addr = h.server.address
        h.stop()
        one_frame = len(tp.encode_frame(batch("/n/one/s", ((1, 1),))))
        client = PublisherClient(addr, buffer_budget=one_frame, backoff_s=0.01)
        for ts in range(1, 11):
            client.publish([Reading(T("/n/one/s"), ts, ts)])
        assert client.dropped_frames == 9
        assert client.dropped_readings == 9
        # the newest frame survives in the buffer
        survivor = tp.decode_frame(client._pending[0])
        assert survivor.runs[0][1] == ((10, 10),)
        client.close()

    def test_malformed_frame_drops_connection(self, wire):
        import socket as _socket
        sock = _socket.create_connection(wire.server.address, timeout=5)
        sock.sendall(b"\xde\xad\xbe\xef\x00\x00\x00\x00")
        deadline = time.time() + 5
        closed = False
        sock.settimeout(1.0)
        try:
            while time.time() < deadline:
                if sock.recv(4096) == b"":
                    closed = True
                    break
        except (_socket.timeout, ConnectionError):
            closed = True
        assert closed
        sock.close()


class TestPusher:
    def make_pusher(self, clock, publish):
        cfg = PusherConfig(node_prefix=T("/dc1/cm/n01"))
        return Pusher(cfg, clock=clock, publish=publish)

    def test_plugins_fire_on_interval(self):
        clock = VirtualClock()
        sched = EventScheduler(clock)
        wire = []
        p = self.make_pusher(clock, wire.extend)
        for name in ("alpha", "beta"):
            meta = SensorMeta(T(f"/dc1/cm/n01/{name}/v"), 10_000)
            p.add_plugin(CallbackPlugin(name, [(meta, lambda now: 7)], interval_ms=10_000))
        p.schedule(sched)
        sched.run_until(clock.now_ns() + 60 * NS_PER_S)
        per_sensor = {}
        for r in wire:
            per_sensor[str(r.topic)] = per_sensor.get(str(r.topic), 0) + 1
        assert set(per_sensor.values()) == {6}
        assert len(per_sensor) == 2

    def test_local_only_cached_but_not_published(self):
        clock = VirtualClock()
        sched = EventScheduler(clock)
        wire = []
        p = self.make_pusher(clock, wire.extend)
        local = SensorMeta(T("/dc1/cm/n01/raw/ctr"), 10_000, local_only=True)
        shared = SensorMeta(T("/dc1/cm/n01/derived/rate"), 10_000)
        p.add_plugin(CallbackPlugin("mix", [(local, lambda n: 1), (shared, lambda n: 2)],
                                    interval_ms=10_000))
        p.schedule(sched)
        sched.run_until(clock.now_ns() + 30 * NS_PER_S)
        assert all(str(r.topic) == "/dc1/cm/n01/derived/rate" for r in wire)
        assert len(p.cache.window("/dc1/cm/n01/raw/ctr", 0, 2**63 - 1)) == 3

    def test_five_consecutive_failures_emit_health_event(self):
        clock = VirtualClock()
        sched = EventScheduler(clock)
        p = self.make_pusher(clock, lambda rs: None)

        class FaultyPlugin(CallbackPlugin):
            def sample(self, now_ns):
                raise PluginError("injected")

        meta = SensorMeta(T("/dc1/cm/n01/bad/v"), 10_000)
        p.add_plugin(FaultyPlugin("bad", [(meta, lambda n: 0)], interval_ms=10_000))
        p.schedule(sched)
        sched.run_until(clock.now_ns() + 40 * NS_PER_S)
        assert p.health == []
        sched.run_until(clock.now_ns() + 10 * NS_PER_S)
        assert len(p.health) == 1
        assert p.health[0].kind == "plugin-failure"
        sched.run_until(clock.now_ns() + 100 * NS_PER_S)
        assert len(p.health) == 1  # not re-emitted while still failing

    def test_sensor_outside_prefix_rejected(self):
        p = self.make_pusher(VirtualClock(), lambda rs: None)
        meta = SensorMeta(T("/elsewhere/n02/x"), 10_000)
        with pytest.raises(PluginError, match="outside node prefix"):
            p.add_plugin(CallbackPlugin("x", [(meta, lambda n: 0)]))


class TestProcParsing:
    def test_meminfo_kb_to_bytes(self):
        pairs, skipped = parse_proc_text("MemFree: 4096 kB\n", "meminfo", ["MemFree"])
        assert pairs == [("MemFree", 4096 * 1024)]
        assert skipped == 0

    def test_meminfo_bare_value_unscaled(self):
        pairs, _ = parse_proc_text("HugePages_Total: 16\n", "meminfo", ["HugePages_Total"])
        assert pairs == [("HugePages_Total", 16)]

    def test_stat_positional_fields(self):
        pairs, _ = parse_proc_text("cpu0 100 0 50 850\n", "stat",
                                   [("cpu0", "user"), ("cpu0", "system")])
        assert pairs == [("cpu0-user", 100), ("cpu0-system", 50)]

    def test_garbage_line_does_not_block_valid_ones(self):
        text = "??!garbage!!\nMemFree: 10 kB\n"
        pairs, skipped = parse_proc_text(text, "meminfo", ["MemFree"])
        assert pairs == [("MemFree", 10240)]
        assert skipped == 1

    def test_file_plugin_reads_and_scopes_topics(self, tmp_path):
        f = tmp_path / "meminfo"
        f.write_text("MemFree: 4096 kB\nMemTotal: 8192 kB\n")
        plug = FileSourcePlugin("mem", T("/dc1/cm/n01/mem"), str(f), "meminfo",
                                ["MemFree", "MemTotal"], interval_ms=10_000)
        rs = plug.sample(123)
        assert {str(r.topic): r.value for r in rs} == {
            "/dc1/cm/n01/mem/MemFree": 4194304,
            "/dc1/cm/n01/mem/MemTotal": 8388608,
        }

    def test_missing_file_is_plugin_failure(self):
        plug = FileSourcePlugin("mem", T("/dc1/cm/n01/mem"), "/no/such/file",
                                "meminfo", ["MemFree"])
        with pytest.raises(PluginError):
            plug.sample(1)


class FakePlantReader:
    def __init__(self):
        self.rows = [("/plant/rcu1/inlet-temp", 1, 38500),
                     ("/plant/rcu1/flow", 1, 12500),
                     ("/plant/rcu1/return-temp", 1, 43000),
                     ("/plant/rcu1/set-temp", 1, 40000)]

    def snapshot(self, pattern):
        return self.rows


class TestPlantPlugin:
    def test_milliunit_scaled_readings(self):
        plug = PlantSourcePlugin("plant", FakePlantReader(), "/plant/#",
                                 T("/plant/rcu1"), interval_ms=10_000)
        rs = plug.sample(99)
        vals = {str(r.topic): r.value for r in rs}
        assert vals["/plant/rcu1/inlet-temp"] == 38500  # 38.5 C
        assert vals["/plant/rcu1/flow"] == 12500        # 12.5 m3/h
        assert len(rs) == 4

    def test_endpoint_down_is_plugin_failure(self):
        class DownReader:
            def snapshot(self, pattern):
                raise ConnectionError("down")

        plug = PlantSourcePlugin("plant", DownReader(), "/plant/#", T("/plant/rcu1"))
        with pytest.raises(PluginError):
            plug.sample(1)
