import json
import os
import tempfile
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odapipe.clock import NS_PER_S, VirtualClock
from odapipe.core import Reading, parse_topic
from odapipe.storage import (QueryRange, SinkDescriptor, SinkRoutingError, Store,
                             StoreConfig, StorageFullError)

T = parse_topic


def make_store(tmp_path, **kw):
    clock = kw.pop("clock", VirtualClock(1000 * NS_PER_S))
    return Store(StoreConfig(data_dir=str(tmp_path / "data"), **kw), clock=clock)


def readings(topic, pairs):
    t = T(topic)
    return [Reading(t, ts, v) for ts, v in pairs]


class TestInsertQuery:
    def test_insert_flush_query_all(self, tmp_path):
        store = make_store(tmp_path)
        rs = readings("/a/b/s", [(i, i * 2) for i in range(1, 1001)])
        assert store.insert_batch(rs) == 1000
        store.flush()
        got = store.query("/a/b/s", 0, 10_000)
        assert [(r.timestamp, r.value) for r in got] == [(i, i * 2) for i in range(1, 1001)]

    def test_duplicate_timestamp_last_write_wins(self, tmp_path):
        store = make_store(tmp_path)
        n = store.insert_batch(readings("/a/b/s", [(5, 1), (5, 2)]))
        assert n == 2  # count counts both
        store.flush()
        got = store.query("/a/b/s", 0, 10)
        assert [(r.timestamp, r.value) for r in got] == [(5, 2)]

    def test_lww_across_flushes(self, tmp_path):
        store = make_store(tmp_path)
        store.insert_batch(readings("/a/b/s", [(5, 1)]))
        store.flush()
        store.insert_batch(readings("/a/b/s", [(5, 7)]))
        store.flush()
        assert [(r.timestamp, r.value) for r in store.query("/a/b/s", 0, 10)] == [(5, 7)]

    def test_query_unknown_topic_empty(self, tmp_path):
        store = make_store(tmp_path)
        assert store.query("/no/where", 0, 10) == []

    def test_pattern_query_merges_topic_streams(self, tmp_path):
        store = make_store(tmp_path)
        data = {
            "/x/t1/s": [(1, 10), (4, 40)],
            "/x/t2/s": [(2, 20)],
            "/x/t3/s": [(3, 30), (5, 50)],
        }
        for topic, pairs in data.items():
            store.insert_batch(readings(topic, pairs))
        store.flush()
        got = store.query(QueryRange("/x/#", 0, 100))
        # oracle: union of per-topic streams, (topic, ts) ordered
        expect = []
        for topic in sorted(data):
            expect.extend((topic, ts, v) for ts, v in sorted(data[topic]))
        assert [(str(r.topic), r.timestamp, r.value) for r in got] == expect

    def test_reopen_recovers_flushed_data(self, tmp_path):
        store = make_store(tmp_path)
        store.insert_batch(readings("/a/b/s", [(1, 1), (2, 2)]))
        store.flush()
        store.insert_batch(readings("/a/b/s", [(3, 3)]))  # unflushed
        path = store.dir
        del store
        reopened = Store(StoreConfig(data_dir=str(path)), clock=VirtualClock(1000 * NS_PER_S))
        got = reopened.query("/a/b/s", 0, 10)
        assert [(r.timestamp, r.value) for r in got] == [(1, 1), (2, 2)]

    def test_crash_leaves_checksummed_segments_readable(self, tmp_path):
        store = make_store(tmp_path)
        store.insert_batch(readings("/a/b/s", [(1, 1), (2, 2)]))
        store.flush()
        store.insert_batch(readings("/a/b/t", [(3, 3)]))
        store.flush()
        data_dir = store.dir
        del store
        # simulated crash mid-write: a torn tail on the last segment and a
        # stale tmp file must not block reopen
        segs = sorted(data_dir.glob("seg-*.seg"))
        with open(segs[-1], "r+b") as fh:
            fh.truncate(os.path.getsize(segs[-1]) - 7)
        (data_dir / "seg-000099.tmp").write_bytes(b"partial garbage")
        reopened = Store(StoreConfig(data_dir=str(data_dir)), clock=VirtualClock(1000 * NS_PER_S))
        got = reopened.query("/a/b/s", 0, 10)
        assert [(r.timestamp, r.value) for r in got] == [(1, 1), (2, 2)]
        assert not list(data_dir.glob("*.tmp"))

    def test_corrupt_block_dropped_and_counted(self, tmp_path):
        store = make_store(tmp_path)
        store.insert_batch(readings("/a/b/s", [(1, 1), (2, 2), (3, 3)]))
        store.flush()
        seg = sorted(store.dir.glob("seg-*.seg"))[0]
        data_dir = store.dir
        del store
        raw = bytearray(seg.read_bytes())
        raw[-1] ^= 0xFF  # flip one payload byte
        seg.write_bytes(bytes(raw))
        reopened = Store(StoreConfig(data_dir=str(data_dir)), clock=VirtualClock(1000 * NS_PER_S))
        assert reopened.corrupt_blocks == 1
        assert reopened.query("/a/b/s", 0, 10) == []

    def test_disk_write_failure_halts_ingest(self, tmp_path, monkeypatch):
        store = make_store(tmp_path)
        store.insert_batch(readings("/a/b/s", [(1, 1)]))
        monkeypatch.setattr("builtins.open", _raise_oserror)
        with pytest.raises(StorageFullError):
            store.flush()


def _raise_oserror(*a, **k):
    raise OSError(28, "No space left on device")


class TestTTL:
    def test_expired_reading_purged(self, tmp_path):
        clock = VirtualClock(1000 * NS_PER_S)
        store = make_store(tmp_path, clock=clock)
        store.set_ttl("/a/#", 60)
        now = clock.now_ns()
        store.insert_batch(readings("/a/b/s", [(now - 120 * NS_PER_S, 1), (now, 2)]))
        store.flush()
        purged = store.expire(now)
        assert purged == 1
        got = store.query("/a/b/s", 0, 2 * now)
        assert [r.value for r in got] == [2]

    def test_ttl_zero_keeps_forever(self, tmp_path):
        clock = VirtualClock(1000 * NS_PER_S)
        store = make_store(tmp_path, clock=clock)
        now = clock.now_ns()
        store.insert_batch(readings("/a/b/s", [(1, 1)]))
        store.flush()
        assert store.expire(now) == 0
        assert len(store.query("/a/b/s", 0, now)) == 1

    def test_mixed_ttl_only_matching_purged(self, tmp_path):
        clock = VirtualClock(1000 * NS_PER_S)
        store = make_store(tmp_path, clock=clock)
        store.set_ttl("/short/#", 60)
        now = clock.now_ns()
        old = now - 120 * NS_PER_S
        store.insert_batch(readings("/short/b/s", [(old, 1)]))
        store.insert_batch(readings("/long/b/s", [(old, 1)]))
        store.flush()
        # per-topic oracle: only /short topics lose the old reading
        assert store.expire(now) == 1
        assert store.query("/short/b/s", 0, 2 * now) == []
        assert [r.value for r in store.query("/long/b/s", 0, 2 * now)] == [1]

    def test_lazy_filter_on_query_before_compaction(self, tmp_path):
        clock = VirtualClock(1000 * NS_PER_S)
        store = make_store(tmp_path, clock=clock)
        store.set_ttl("/a/#", 60)
        now = clock.now_ns()
        store.insert_batch(readings("/a/b/s", [(now - 120 * NS_PER_S, 1), (now, 2)]))
        store.flush()
        got = store.query("/a/b/s", 0, 2 * now)  # no expire() call yet
        assert [r.value for r in got] == [2]

    def test_query_straddling_expired_region(self, tmp_path):
        clock = VirtualClock(10_000 * NS_PER_S)
        store = make_store(tmp_path, clock=clock)
        store.set_ttl("/a/#", 100)
        now = clock.now_ns()
        pairs = [(now - k * NS_PER_S, k) for k in range(200, 0, -20)]
        store.insert_batch(readings("/a/b/s", sorted(pairs)))
        store.flush()
        store.expire(now)
        got = store.query("/a/b/s", 0, 2 * now)
        cutoff = now - 100 * NS_PER_S
        expect = sorted(v for ts, v in pairs if ts >= cutoff)
        assert sorted(r.value for r in got) == expect


class TestSinks:
    def test_jsonl_sink_appends_objects(self, tmp_path):
        store = make_store(tmp_path)
        dest = tmp_path / "jobs.jsonl"
        store.register_sink(SinkDescriptor("jobs", "/jobs/#", "jsonl", str(dest)))
        store.write_sink("jobs", {"topic": "/jobs/agg/j1", "timestamp_ns": 5,
                                  "value": 0, "avg": 2.5})
        store.flush()
        lines = dest.read_text().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["avg"] == 2.5

    def test_csv_sink_header_once(self, tmp_path):
        store = make_store(tmp_path)
        dest = tmp_path / "out.csv"
        store.register_sink(SinkDescriptor("csv", "/a/#", "csv", str(dest)))
        store.write_sink("csv", Reading(T("/a/b/s"), 5, 12))
        store.write_sink("csv", Reading(T("/a/b/s"), 6, 13))
        store.flush()
        lines = dest.read_text().splitlines()
        assert lines[0] == "topic,timestamp_ns,value"
        assert lines[1:] == ["/a/b/s,5,12", "/a/b/s,6,13"]
        assert sum(1 for ln in lines if ln.startswith("topic,")) == 1

    def test_unmatched_topic_is_routing_error(self, tmp_path):
        store = make_store(tmp_path)
        store.register_sink(SinkDescriptor("jobs", "/jobs/#", "jsonl",
                                           str(tmp_path / "x.jsonl")))
        with pytest.raises(SinkRoutingError):
            store.write_sink("jobs", {"topic": "/other/b", "timestamp_ns": 1, "value": 0})

    def test_expiry_never_touches_sinks(self, tmp_path):
        clock = VirtualClock(1000 * NS_PER_S)
        store = make_store(tmp_path, clock=clock)
        store.set_ttl("/jobs/#", 1)
        dest = tmp_path / "jobs.jsonl"
        store.register_sink(SinkDescriptor("jobs", "/jobs/#", "jsonl", str(dest)))
        store.write_sink("jobs", {"topic": "/jobs/agg/j1", "timestamp_ns": 5, "value": 0})
        store.flush()
        before = dest.read_text()
        store.expire(clock.now_ns())
        assert dest.read_text() == before

    def test_month_of_job_records_stays_small(self, tmp_path):
        # a month's sink for 10 jobs (~4 h each), 27 metrics at 2-minute windows
        store = make_store(tmp_path)
        dest = tmp_path / "jobs.jsonl"
        store.register_sink(SinkDescriptor("jobs", "/jobs/#", "jsonl", str(dest)))
        base = 1_600_000_000 * NS_PER_S
        for job in range(10):
            for w in range(120):  # 4 h of 2-minute windows
                t0 = base + w * 120 * NS_PER_S
                for m in range(27):
                    rec = {"topic": f"/jobs/agg/j{job}",
                           "jobid": f"j{job}", "metric": f"m{m}",
                           "t0": t0, "t1": t0 + 120 * NS_PER_S,
                           **{f"d{i}": 41203 + 17 * i for i in range(11)},
                           "avg": 41288.5, "severity": 0.25, "completeness": 1.0}
                    store.write_sink("jobs", rec)
        store.flush()
        assert (1 << 20) < dest.stat().st_size < 10 * (1 << 20)


class TestRandomizedOracle:
    @given(st.lists(st.tuples(st.sampled_from(["/r/t1/s", "/r/t2/s", "/r/t3/s"]),
                              st.integers(1, 10_000), st.integers(-100, 100)),
                    max_size=150),
           st.integers(0, 10_000), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_query_equals_reference_map(self, rows, a, b):
        lo, hi = min(a, b), max(a, b)
        tmp = tempfile.mkdtemp(prefix="odapipe-store-")
        store = Store(StoreConfig(data_dir=tmp), clock=VirtualClock(NS_PER_S))
        reference: dict[str, dict[int, int]] = {}
        for i, (topic, ts, v) in enumerate(rows):
            store.insert_batch(readings(topic, [(ts, v)]))
            reference.setdefault(topic, {})[ts] = v
            if i % 37 == 17:
                store.flush()
        store.flush()
        for topic in ("/r/t1/s", "/r/t2/s", "/r/t3/s"):
            expect = sorted((ts, v) for ts, v in reference.get(topic, {}).items()
                            if lo <= ts <= hi)
            got = [(r.timestamp, r.value) for r in store.query(topic, lo, hi)]
            assert got == expect


class TestThroughputSmoke:
    def test_bulk_ingest_rate(self, tmp_path):
        store = make_store(tmp_path)
        n_topics, per_run = 100, 50
        runs = []
        for t in range(n_topics):
            ts = np.arange(1, per_run + 1, dtype=np.int64)
            vals = np.arange(per_run, dtype=np.int64)
            runs.append((f"/x/n{t:03d}/s", ts, vals))
        start = time.perf_counter()
        total = 0
        rounds = 60
        for i in range(rounds):
            for topic, ts, vals in runs:
                total += store.insert_run(topic, ts + i * per_run, vals)
        elapsed = time.perf_counter() - start
        rate = total / elapsed
        assert total == n_topics * per_run * rounds
        assert rate > 50_000, f"ingest too slow: {rate:.0f} readings/s"
