"""Topic addressing, readings and the per-sensor recent-readings cache.

Values are signed 64-bit integers in a fixed per-sensor unit scale
(temperatures in milli-degrees Celsius, so 73000 means 73.0 C). Integer
readings make the wire encoding exact and comparisons unit-safe.
"""

from __future__ import annotations

import threading
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field

MIN_DEPTH = 2
MAX_DEPTH = 8
MIN_RING_CAPACITY = 64


class TopicError(ValueError):
    """Raised for malformed topic strings; the message names the byte offset."""


@dataclass(frozen=True)
class Topic:
    """Hierarchical sensor address, canonical text form ``/a/b/c``."""

    labels: tuple[str, ...]

    def __str__(self) -> str:
        return "/" + "/".join(self.labels)

    @property
    def depth(self) -> int:
        return len(self.labels)

    def child(self, label: str) -> "Topic":
        return Topic(self.labels + (label,))

    def starts_with(self, prefix: tuple[str, ...]) -> bool:
        return self.labels[: len(prefix)] == prefix


def parse_topic(text: str) -> Topic:
    """Parse a canonical topic string, validating depth and label charset.

    ``format(parse(t)) == t`` holds for every canonical input.
    """
    if not text or text[0] != "/":
        raise TopicError("topic must begin with '/' at offset 0")
    labels: list[str] = []
    start = 1
    sep = 0  # offset of the '/' introducing the current label
    i = 1
    n = len(text)
    while i <= n:
        if i == n or text[i] == "/":
            if i == start:
                raise TopicError(f"empty label at offset {sep}")
            labels.append(text[start:i])
            sep = i
            start = i + 1
        elif text[i].isspace():
            raise TopicError(f"illegal character at offset {i}")
        i += 1
    if not MIN_DEPTH <= len(labels) <= MAX_DEPTH:
        raise TopicError(f"depth {len(labels)} out of range [2,8] at offset {n}")
    return Topic(tuple(labels))


def format_topic(topic: Topic) -> str:
    return str(topic)


@dataclass(frozen=True)
class Reading:
    """One timestamped sensor sample. Timestamp is ns since epoch, > 0."""

    topic: Topic
    timestamp: int
    value: int

    def __post_init__(self) -> None:
        if self.timestamp <= 0:
            raise ValueError("reading timestamp must be strictly positive")


@dataclass
class SensorMeta:
    """Declared properties of one sensor.

    ``local_only`` sensors never leave the node: they stay in the pusher's
    cache for in-band operators and are excluded from every wire frame.
    ``ttl_s`` of 0 means keep forever.
    """

    topic: Topic
    interval_ms: int
    ttl_s: int = 0
    local_only: bool = False
    unit: str = ""

    def __post_init__(self) -> None:
        if self.interval_ms <= 0:
            raise ValueError("sensor interval must be positive")
        if self.ttl_s < 0:
            raise ValueError("ttl must be >= 0")


class _Ring:
    """Recent readings of one topic: ascending timestamps, bounded length."""

    __slots__ = ("lock", "ts", "values", "capacity", "dropped")

    def __init__(self, capacity: int):
        self.lock = threading.Lock()
        self.ts: list[int] = []
        self.values: list[int] = []
        self.capacity = capacity
        self.dropped = 0

    def _evict(self) -> None:
        excess = len(self.ts) - self.capacity
        if excess > 0:
            del self.ts[:excess]
            del self.values[:excess]


class SensorCache:
    """Per-sensor ring of recent readings, the substrate for all operators.

    Many concurrent readers are fine; writes to distinct topics may also run
    concurrently. Per-topic timestamps are strictly increasing: stale or
    duplicate inserts are dropped and counted, never raised.
    """

    def __init__(self, default_capacity: int = MIN_RING_CAPACITY):
        self._rings: dict[str, _Ring] = {}
        self._meta: dict[str, SensorMeta] = {}
        self._lock = threading.Lock()
        self._default_capacity = max(MIN_RING_CAPACITY, default_capacity)
        self.dropped = 0

    def _ring(self, key: str) -> _Ring:
        ring = self._rings.get(key)
        if ring is None:
            with self._lock:
                ring = self._rings.get(key)
                if ring is None:
                    ring = _Ring(self._default_capacity)
                    self._rings[key] = ring
        return ring

    def reserve(self, topic: Topic | str, window_need: int) -> None:
        """Grow a topic's ring to hold at least twice ``window_need`` readings."""
        ring = self._ring(str(topic))
        with ring.lock:
            ring.capacity = max(ring.capacity, MIN_RING_CAPACITY, 2 * window_need)

    def declare(self, meta: SensorMeta) -> None:
        with self._lock:
            self._meta[str(meta.topic)] = meta

    def meta(self, topic: Topic | str) -> SensorMeta | None:
        return self._meta.get(str(topic))

    def insert(self, reading: Reading) -> bool:
        """Insert one reading; returns False when dropped as stale."""
        ring = self._ring(str(reading.topic))
        with ring.lock:
            if ring.ts and reading.timestamp <= ring.ts[-1]:
                ring.dropped += 1
                self.dropped += 1
                return False
            ring.ts.append(reading.timestamp)
            ring.values.append(reading.value)
            ring._evict()
        return True

    def insert_run(self, topic: str, ts: list[int], values: list[int]) -> int:
        """Bulk insert an ascending run for one topic; returns accepted count.

        The prefix at or below the current watermark is dropped in one cut,
        which keeps the wire ingest path O(log n) per run.
        """
        if not ts:
            return 0
        ring = self._ring(topic)
        with ring.lock:
            cut = 0
            if ring.ts:
                cut = bisect_right(ts, ring.ts[-1])
            if cut:
                ring.dropped += cut
                self.dropped += cut
            ring.ts.extend(ts[cut:])
            ring.values.extend(values[cut:])
            ring._evict()
        return len(ts) - cut

    def window(self, topic: Topic | str, from_ts: int, to_ts: int) -> list[Reading]:
        """All retained readings with ``from_ts <= t <= to_ts``, ascending.

        Unknown topics yield an empty list: sensors appear dynamically.
        """
        if from_ts > to_ts:
            raise ValueError("window bounds out of order")
        key = str(topic)
        ring = self._rings.get(key)
        if ring is None:
            return []
        t = topic if isinstance(topic, Topic) else parse_topic(key)
        with ring.lock:
            lo = bisect_left(ring.ts, from_ts)
            hi = bisect_right(ring.ts, to_ts)
            pairs = list(zip(ring.ts[lo:hi], ring.values[lo:hi]))
        return [Reading(t, ts_, v) for ts_, v in pairs]

    def window_arrays(self, topic: Topic | str, from_ts: int, to_ts: int) -> tuple[list[int], list[int]]:
        """Like :meth:`window` but returns (timestamps, values) lists."""
        ring = self._rings.get(str(topic))
        if ring is None:
            return [], []
        with ring.lock:
            lo = bisect_left(ring.ts, from_ts)
            hi = bisect_right(ring.ts, to_ts)
            return ring.ts[lo:hi], ring.values[lo:hi]

    def latest(self, topic: Topic | str) -> tuple[int, int] | None:
        """Most recent (timestamp, value) for a topic, or None."""
        ring = self._rings.get(str(topic))
        if ring is None:
            return None
        with ring.lock:
            if not ring.ts:
                return None
            return ring.ts[-1], ring.values[-1]

    def last_values(self, topic: Topic | str, count: int) -> tuple[list[int], list[int]]:
        """Up to ``count`` most recent (timestamps, values), ascending."""
        ring = self._rings.get(str(topic))
        if ring is None:
            return [], []
        with ring.lock:
            return ring.ts[-count:], ring.values[-count:]

    def topics(self) -> list[str]:
        with self._lock:
            return sorted(self._rings)

    def declared_topics(self) -> list[str]:
        with self._lock:
            return sorted(self._meta)
