"""Time-series store with per-sensor TTL plus long-term sinks.

Layout on disk: numbered segment files, each written atomically
(tmp + rename) and never modified afterwards except by compaction.

Segment file format, little-endian:

    magic "ODPS" | version u16 | topic count u16
    topic table: per topic u16 length + UTF-8 text (ids by position)
    blocks: topic_id u16 | count u32 | t_min u64 | t_max u64 | crc32 u32
            | body: count rows of (i64, i64); row 0 is the absolute
              (timestamp, value), later rows are deltas to the previous row

The per-topic index is rebuilt on open by scanning segments; blocks whose
CRC32 does not match are dropped and counted, a torn tail truncates the
scan. Duplicate (topic, timestamp) pairs resolve last-write-wins.

Sinks are separate append-only CSV/JSONL files for data that must outlive
every TTL (job aggregates, smoothing output). Expiry never touches them.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Reading, Topic, parse_topic
from .transport import SubscriptionPattern, parse_pattern

logger = logging.getLogger(__name__)

_MAGIC = b"ODPS"
_VERSION = 1
_HDR = struct.Struct("<4sHH")
_BLOCK_HDR = struct.Struct("<HIQQI")
_ROW_BYTES = 16

NS_PER_S = 1_000_000_000


class StoreError(Exception):
    pass


class StorageFullError(StoreError):
    """Disk full or write failure: ingest halts rather than corrupting state."""


class SinkRoutingError(StoreError):
    """A record was written to a sink whose pattern does not accept it."""


@dataclass
class StoreConfig:
    data_dir: str
    default_ttl_s: int = 0          # 0 = keep forever
    flush_interval_s: float = 5.0
    segment_bytes: int = 8 << 20

    def __post_init__(self) -> None:
        if self.default_ttl_s < 0:
            raise ValueError("ttl must be >= 0")
        if self.segment_bytes < (1 << 20):
            raise ValueError("segment size must be at least 1 MiB")


@dataclass
class SinkDescriptor:
    """Long-term output channel; sink data is never expired."""

    name: str
    pattern: str
    fmt: str                         # "csv" or "jsonl"
    path: str

    def __post_init__(self) -> None:
        if self.fmt not in ("csv", "jsonl"):
            raise ValueError(f"unknown sink format {self.fmt!r}")


@dataclass
class QueryRange:
    pattern: str                     # exact topic or prefix pattern with '#'
    from_ts: int
    to_ts: int

    def __post_init__(self) -> None:
        if self.from_ts > self.to_ts:
            raise ValueError("query range out of order")


@dataclass
class _BlockRef:
    seg_id: int
    offset: int                      # file offset of the body
    count: int
    t_min: int
    t_max: int


class _Sink:
    def __init__(self, desc: SinkDescriptor):
        self.desc = desc
        self.pattern = parse_pattern(desc.pattern)
        Path(desc.path).parent.mkdir(parents=True, exist_ok=True)
        exists = os.path.exists(desc.path) and os.path.getsize(desc.path) > 0
        self.fh = open(desc.path, "a", encoding="utf-8")
        self.lock = threading.Lock()
        if desc.fmt == "csv" and not exists:
            self.fh.write("topic,timestamp_ns,value\n")

    def write(self, record: dict) -> None:
        with self.lock:
            if self.desc.fmt == "csv":
                self.fh.write(f"{record['topic']},{record['timestamp_ns']},{record['value']}\n")
            else:
                self.fh.write(json.dumps(record, separators=(",", ":")) + "\n")

    def flush(self) -> None:
        with self.lock:
            self.fh.flush()

    def close(self) -> None:
        with self.lock:
            self.fh.close()


class Store:
    """Embedded time-series store. One ingest writer, many readers."""

    def __init__(self, config: StoreConfig | str, clock=None):
        if isinstance(config, str):
            config = StoreConfig(data_dir=config)
        self.config = config
        self.clock = clock
        self.dir = Path(config.data_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        # memtable: per topic, list of (ts, value) int64 arrays in arrival order
        self._mem: dict[str, list[np.ndarray]] = {}
        self._mem_rows = 0
        self._index: dict[str, list[_BlockRef]] = {}
        self._segments: dict[int, Path] = {}
        self._ttl_rules: list[tuple[SubscriptionPattern, int]] = []
        self._ttl_cache: dict[str, int] = {}
        self._sinks: dict[str, _Sink] = {}
        self.corrupt_blocks = 0
        self._last_flush = self._now()
        self._reopen()

    # ------------------------------------------------------------- time/ttl --

    def _now(self) -> int:
        import time
        return self.clock.now_ns() if self.clock is not None else time.time_ns()

    def set_ttl(self, pattern: str, ttl_s: int) -> None:
        """Attach a TTL to every topic matching ``pattern`` (first rule wins)."""
        if ttl_s < 0:
            raise ValueError("ttl must be >= 0")
        with self._lock:
            self._ttl_rules.append((parse_pattern(pattern), ttl_s))
            self._ttl_cache.clear()

    def ttl_for(self, topic: str) -> int:
        ttl = self._ttl_cache.get(topic)
        if ttl is None:
            ttl = self.config.default_ttl_s
            for pat, t in self._ttl_rules:
                if pat.matches(topic):
                    ttl = t
                    break
            self._ttl_cache[topic] = ttl
        return ttl

    def _cutoff(self, topic: str, now: int) -> int:
        ttl = self.ttl_for(topic)
        return now - ttl * NS_PER_S if ttl > 0 else 0

    # --------------------------------------------------------------- ingest --

    def insert_batch(self, readings) -> int:
        """Insert readings; returns the accepted count (duplicates included)."""
        by_topic: dict[str, list[tuple[int, int]]] = {}
        n = 0
        for r in readings:
            by_topic.setdefault(str(r.topic), []).append((r.timestamp, r.value))
            n += 1
        with self._lock:
            for topic, pairs in by_topic.items():
                arr = np.array(pairs, dtype=np.int64).reshape(len(pairs), 2)
                self._mem.setdefault(topic, []).append(arr)
                self._mem_rows += len(pairs)
            self._maybe_flush_locked()
        return n

    def insert_run(self, topic: str, ts, values) -> int:
        """Bulk ingest path: parallel timestamp/value arrays for one topic."""
        ts = np.asarray(ts, dtype=np.int64)
        values = np.asarray(values, dtype=np.int64)
        if len(ts) == 0:
            return 0
        arr = np.column_stack((ts, values))
        with self._lock:
            self._mem.setdefault(topic, []).append(arr)
            self._mem_rows += len(ts)
            self._maybe_flush_locked()
        return len(ts)

    def _maybe_flush_locked(self) -> None:
        if self._mem_rows * _ROW_BYTES >= self.config.segment_bytes:
            self._flush_locked()

    def maybe_flush(self) -> None:
        """Flush when the configured interval has elapsed (writer-loop hook)."""
        now = self._now()
        with self._lock:
            if now - self._last_flush >= self.config.flush_interval_s * NS_PER_S:
                self._flush_locked()

    def flush(self) -> None:
        with self._lock:
            self._flush_locked()

    def _flush_locked(self) -> None:
        self._last_flush = self._now()
        for sink in self._sinks.values():
            sink.flush()
        if not self._mem_rows:
            return
        seg_id = max(self._segments, default=0) + 1
        mem, self._mem, self._mem_rows = self._mem, {}, 0
        rows = {topic: _merge_runs(runs) for topic, runs in mem.items()}
        try:
            path = self._write_segment(seg_id, rows)
        except OSError as e:
            self._mem = mem  # keep data; ingest halts by raising
            self._mem_rows = sum(len(a) for runs in mem.values() for a in runs)
            raise StorageFullError(f"cannot write segment: {e}") from e
        self._segments[seg_id] = path
        self._index_segment(seg_id, path)

    def _write_segment(self, seg_id: int, rows: dict[str, np.ndarray]) -> Path:
        topics = sorted(rows)
        parts = [_HDR.pack(_MAGIC, _VERSION, len(topics))]
        for t in topics:
            raw = t.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
        for tid, t in enumerate(topics):
            arr = rows[t]
            body = arr.copy()
            body[1:] -= arr[:-1]  # delta-encode rows after the first
            raw = body.tobytes()
            parts.append(_BLOCK_HDR.pack(tid, len(arr), int(arr[0, 0]), int(arr[-1, 0]),
                                         zlib.crc32(raw)))
            parts.append(raw)
        path = self.dir / f"seg-{seg_id:06d}.seg"
        tmp = self.dir / f"seg-{seg_id:06d}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(b"".join(parts))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        return path

    def _index_segment(self, seg_id: int, path: Path) -> None:
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as e:
            logger.warning("cannot read segment %s: %s", path, e)
            return
        try:
            magic, version, n_topics = _HDR.unpack_from(data, 0)
        except struct.error:
            logger.warning("segment %s: truncated header, skipped", path)
            return
        if magic != _MAGIC or version != _VERSION:
            logger.warning("segment %s: bad magic/version, skipped", path)
            return
        pos = _HDR.size
        topics = []
        try:
            for _ in range(n_topics):
                (ln,) = struct.unpack_from("<H", data, pos)
                pos += 2
                topics.append(data[pos:pos + ln].decode("utf-8"))
                pos += ln
        except (struct.error, UnicodeDecodeError):
            logger.warning("segment %s: truncated topic table, skipped", path)
            return
        while pos + _BLOCK_HDR.size <= len(data):
            tid, count, t_min, t_max, crc = _BLOCK_HDR.unpack_from(data, pos)
            body_off = pos + _BLOCK_HDR.size
            body_end = body_off + count * _ROW_BYTES
            if tid >= len(topics) or body_end > len(data):
                logger.warning("segment %s: torn tail at offset %d", path, pos)
                break
            if zlib.crc32(data[body_off:body_end]) != crc:
                self.corrupt_blocks += 1
                logger.warning("segment %s: CRC mismatch for %s, block dropped",
                               path, topics[tid])
            else:
                self._index.setdefault(topics[tid], []).append(
                    _BlockRef(seg_id, body_off, count, t_min, t_max))
            pos = body_end
        if pos != len(data):
            logger.warning("segment %s: %d trailing bytes ignored", path, len(data) - pos)

    def _reopen(self) -> None:
        for stale in sorted(self.dir.glob("seg-*.tmp")):
            stale.unlink()
        for path in sorted(self.dir.glob("seg-*.seg")):
            try:
                seg_id = int(path.stem.split("-")[1])
            except (IndexError, ValueError):
                continue
            self._segments[seg_id] = path
            self._index_segment(seg_id, path)
        for refs in self._index.values():
            refs.sort(key=lambda b: b.seg_id)

    # ---------------------------------------------------------------- query --

    def _read_block(self, ref: _BlockRef) -> np.ndarray | None:
        path = self._segments.get(ref.seg_id)
        if path is None:
            return None
        try:
            with open(path, "rb") as fh:
                fh.seek(ref.offset)
                raw = fh.read(ref.count * _ROW_BYTES)
        except OSError:
            return None
        if len(raw) != ref.count * _ROW_BYTES:
            return None
        body = np.frombuffer(raw, dtype=np.int64).reshape(ref.count, 2)
        return np.cumsum(body, axis=0)

    def query_arrays(self, topic: str, from_ts: int, to_ts: int,
                     apply_ttl: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """(timestamps, values) within range, ascending, TTL-filtered, LWW."""
        if from_ts > to_ts:
            raise ValueError("query range out of order")
        if apply_ttl:
            cutoff = self._cutoff(topic, self._now())
            from_ts = max(from_ts, cutoff)
            if from_ts > to_ts:
                return _EMPTY, _EMPTY
        with self._lock:
            refs = [r for r in self._index.get(topic, ())
                    if r.t_max >= from_ts and r.t_min <= to_ts]
            runs = list(self._mem.get(topic, ()))
        chunks = []
        for ref in refs:
            arr = self._read_block(ref)
            if arr is not None:
                chunks.append(arr)
        chunks.extend(runs)
        if not chunks:
            return _EMPTY, _EMPTY
        allrows = np.concatenate(chunks, axis=0) if len(chunks) > 1 else chunks[0]
        ts, values = allrows[:, 0], allrows[:, 1]
        mask = (ts >= from_ts) & (ts <= to_ts)
        ts, values = ts[mask], values[mask]
        if len(ts) == 0:
            return _EMPTY, _EMPTY
        order = np.argsort(ts, kind="stable")
        ts, values = ts[order], values[order]
        # last write wins on duplicate timestamps: keep final occurrence
        keep = np.empty(len(ts), dtype=bool)
        keep[:-1] = ts[1:] != ts[:-1]
        keep[-1] = True
        return ts[keep], values[keep]

    def query(self, rng: QueryRange | str, from_ts: int | None = None,
              to_ts: int | None = None) -> list[Reading]:
        """Readings matching a topic or prefix pattern, sorted (topic, ts)."""
        if isinstance(rng, QueryRange):
            pattern, from_ts, to_ts = rng.pattern, rng.from_ts, rng.to_ts
        else:
            pattern = rng
            if from_ts is None or to_ts is None:
                raise ValueError("from_ts and to_ts required")
        out: list[Reading] = []
        for topic in self._match_topics(pattern):
            ts, values = self.query_arrays(topic, from_ts, to_ts)
            if len(ts):
                t = parse_topic(topic)
                out.extend(Reading(t, int(a), int(b)) for a, b in zip(ts, values))
        return out

    def _match_topics(self, pattern: str) -> list[str]:
        if "#" not in pattern:
            return [pattern] if pattern in self.topics_set() else []
        pat = parse_pattern(pattern)
        return [t for t in self.topics() if pat.matches(t)]

    def topics(self) -> list[str]:
        return sorted(self.topics_set())

    def topics_set(self) -> set[str]:
        with self._lock:
            return set(self._index) | set(self._mem)

    # --------------------------------------------------------------- expiry --

    def expire(self, now_ts: int | None = None) -> int:
        """Compaction pass: physically remove readings past their TTL.

        Returns the purge count. Sink files are untouched by design.
        """
        now = self._now() if now_ts is None else now_ts
        purged = 0
        with self._lock:
            for topic in list(self._mem):
                cutoff = self._cutoff(topic, now)
                if cutoff <= 0:
                    continue
                kept_runs = []
                for arr in self._mem[topic]:
                    keep = arr[:, 0] >= cutoff
                    dropped = int((~keep).sum())
                    if dropped:
                        purged += dropped
                        arr = arr[keep]
                        self._mem_rows -= dropped
                    if len(arr):
                        kept_runs.append(arr)
                if kept_runs:
                    self._mem[topic] = kept_runs
                else:
                    del self._mem[topic]
            dirty_segments: set[int] = set()
            for topic, refs in self._index.items():
                cutoff = self._cutoff(topic, now)
                if cutoff <= 0:
                    continue
                for ref in refs:
                    if ref.t_min < cutoff:
                        dirty_segments.add(ref.seg_id)
            for seg_id in sorted(dirty_segments):
                purged += self._compact_segment(seg_id, now)
        return purged

    def _compact_segment(self, seg_id: int, now: int) -> int:
        """Rewrite one segment without its expired rows (same id, same order)."""
        rows: dict[str, np.ndarray] = {}
        purged = 0
        for topic, refs in self._index.items():
            cutoff = self._cutoff(topic, now)
            chunks = []
            for ref in refs:
                if ref.seg_id != seg_id:
                    continue
                arr = self._read_block(ref)
                if arr is None:
                    continue
                if cutoff > 0:
                    keep = arr[:, 0] >= cutoff
                    purged += int((~keep).sum())
                    arr = arr[keep]
                if len(arr):
                    chunks.append(arr)
            if chunks:
                rows[topic] = np.concatenate(chunks, axis=0)
        for refs in self._index.values():
            refs[:] = [r for r in refs if r.seg_id != seg_id]
        for topic in [t for t, refs in self._index.items() if not refs]:
            del self._index[topic]
        old_path = self._segments.pop(seg_id)
        if rows:
            path = self._write_segment(seg_id, rows)
            self._segments[seg_id] = path
            self._index_segment(seg_id, path)
            for refs in self._index.values():
                refs.sort(key=lambda b: b.seg_id)
        else:
            old_path.unlink(missing_ok=True)
        return purged

    # ---------------------------------------------------------------- sinks --

    def register_sink(self, desc: SinkDescriptor) -> None:
        with self._lock:
            if desc.name in self._sinks:
                raise StoreError(f"sink {desc.name!r} already registered")
            self._sinks[desc.name] = _Sink(desc)

    def write_sink(self, name: str, record: dict | Reading) -> None:
        """Append one record to a sink; topic must match the sink's pattern."""
        sink = self._sinks.get(name)
        if sink is None:
            raise StoreError(f"unknown sink {name!r}")
        if isinstance(record, Reading):
            record = {"topic": str(record.topic), "timestamp_ns": record.timestamp,
                      "value": record.value}
        topic = record.get("topic")
        if topic is None or not sink.pattern.matches(topic):
            raise SinkRoutingError(
                f"record topic {topic!r} does not match sink {name!r} "
                f"pattern {sink.desc.pattern!r}")
        sink.write(record)

    def sink_path(self, name: str) -> str:
        return self._sinks[name].desc.path

    # ----------------------------------------------------------------- misc --

    def close(self) -> None:
        with self._lock:
            self._flush_locked()
            for sink in self._sinks.values():
                sink.close()
            self._sinks.clear()


_EMPTY = np.empty(0, dtype=np.int64)


def _merge_runs(runs: list[np.ndarray]) -> np.ndarray:
    """Concatenate arrival-ordered runs into one ascending LWW-deduped array."""
    arr = np.concatenate(runs, axis=0) if len(runs) > 1 else runs[0]
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    keep = np.empty(len(arr), dtype=bool)
    keep[:-1] = arr[1:, 0] != arr[:-1, 0]
    keep[-1] = True
    return arr[keep]
