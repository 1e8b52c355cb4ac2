"""Binary publish/subscribe wire protocol between pushers, agents and the plant.

Frame layout, all integers little-endian:

    magic 0xDA7A (2B) | kind (1B) | flags (1B) | payload length (4B) | payload

Payloads by kind:

    HELLO      node name (2B len + UTF-8)
    PUBLISH    topic (2B len + UTF-8), u64 timestamp, i64 value
    SUBSCRIBE  pattern (2B len + UTF-8), u64 from_ts, u64 to_ts, u8 mode
               mode 0 = live stream, 1 = window replay, 2 = latest snapshot
    BATCH      topic count (2B), then per topic: topic len (2B) + UTF-8 topic,
               reading count (4B), readings as (u64 timestamp, i64 value)
    PING/BYE   empty
    KNOB       topic (2B len + UTF-8), i64 value

Flags: 0x01 ACK (reply to the frame kind, payload u8 status + u32 count),
0x02 FIN (last frame of a window replay). Total frame size is capped at
1 MiB; anything malformed drops the connection.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .core import Reading, Topic, parse_topic

logger = logging.getLogger(__name__)

MAGIC = 0xDA7A
MAX_FRAME = 1 << 20
DEFAULT_PORT = 18830

HELLO, PUBLISH, SUBSCRIBE, BATCH, PING, BYE, KNOB = range(1, 8)
KIND_NAMES = {HELLO: "HELLO", PUBLISH: "PUBLISH", SUBSCRIBE: "SUBSCRIBE",
              BATCH: "BATCH", PING: "PING", BYE: "BYE", KNOB: "KNOB"}

FLAG_ACK = 0x01
FLAG_FIN = 0x02

SUB_LIVE, SUB_WINDOW, SUB_SNAPSHOT = 0, 1, 2

_HEADER = struct.Struct("<HBBI")
_READING = struct.Struct("<Qq")
READING_BYTES = _READING.size
_reading_dtype = np.dtype([("ts", "<u8"), ("value", "<i8")])


class ProtocolError(Exception):
    """Malformed or oversized frame; the connection carrying it is dropped."""


@dataclass(frozen=True)
class Hello:
    node: str
    flags: int = 0


@dataclass(frozen=True)
class Publish:
    topic: str
    timestamp: int
    value: int
    flags: int = 0


@dataclass(frozen=True)
class Subscribe:
    pattern: str
    from_ts: int = 0
    to_ts: int = 0
    mode: int = SUB_LIVE
    flags: int = 0


@dataclass(frozen=True)
class Batch:
    # runs: per topic an ascending tuple of (timestamp, value) pairs
    runs: tuple[tuple[str, tuple[tuple[int, int], ...]], ...]
    flags: int = 0


@dataclass(frozen=True)
class Ping:
    flags: int = 0


@dataclass(frozen=True)
class Bye:
    flags: int = 0


@dataclass(frozen=True)
class Knob:
    topic: str
    value: int
    flags: int = 0


@dataclass(frozen=True)
class Ack:
    """Reply frame: same kind as the request with the ACK flag set."""

    of_kind: int
    status: int = 0
    count: int = 0
    flags: int = FLAG_ACK


Frame = Hello | Publish | Subscribe | Batch | Ping | Bye | Knob | Ack

_KIND_OF = {Hello: HELLO, Publish: PUBLISH, Subscribe: SUBSCRIBE, Batch: BATCH,
            Ping: PING, Bye: BYE, Knob: KNOB}


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("string field too long")
    return struct.pack("<H", len(raw)) + raw


class _Cursor:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ProtocolError("unexpected end of frame")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def string(self) -> str:
        n = self.u16()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError(f"bad UTF-8 in string field: {e}") from None


def encode_frame(frame: Frame) -> bytes:
    """Serialize a frame; raises ProtocolError when the result exceeds 1 MiB."""
    if isinstance(frame, Ack):
        kind = frame.of_kind
        flags = frame.flags | FLAG_ACK
        payload = struct.pack("<BI", frame.status, frame.count)
    elif isinstance(frame, Hello):
        kind, flags, payload = HELLO, frame.flags, _pack_str(frame.node)
    elif isinstance(frame, Publish):
        kind, flags = PUBLISH, frame.flags
        payload = _pack_str(frame.topic) + _READING.pack(frame.timestamp, frame.value)
    elif isinstance(frame, Subscribe):
        kind, flags = SUBSCRIBE, frame.flags
        payload = (_pack_str(frame.pattern)
                   + struct.pack("<QQB", frame.from_ts, frame.to_ts, frame.mode))
    elif isinstance(frame, Batch):
        kind, flags = BATCH, frame.flags
        parts = [struct.pack("<H", len(frame.runs))]
        for topic, readings in frame.runs:
            parts.append(_pack_str(topic))
            parts.append(struct.pack("<I", len(readings)))
            prev = -1
            for ts, value in readings:
                if ts <= prev:
                    raise ProtocolError(f"batch readings for {topic} not ascending")
                prev = ts
                parts.append(_READING.pack(ts, value))
        payload = b"".join(parts)
    elif isinstance(frame, Ping):
        kind, flags, payload = PING, frame.flags, b""
    elif isinstance(frame, Bye):
        kind, flags, payload = BYE, frame.flags, b""
    elif isinstance(frame, Knob):
        kind, flags = KNOB, frame.flags
        payload = _pack_str(frame.topic) + struct.pack("<q", frame.value)
    else:
        raise ProtocolError(f"unknown frame type {type(frame).__name__}")
    total = _HEADER.size + len(payload)
    if total > MAX_FRAME:
        raise ProtocolError(f"frame of {total} bytes exceeds 1 MiB limit")
    return _HEADER.pack(MAGIC, kind, flags, len(payload)) + payload


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame from ``data``; trailing bytes are an error."""
    if len(data) < _HEADER.size:
        raise ProtocolError("unexpected end of frame header")
    magic, kind, flags, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:04X}")
    if _HEADER.size + length > MAX_FRAME:
        raise ProtocolError("declared payload exceeds 1 MiB limit")
    if len(data) != _HEADER.size + length:
        if len(data) < _HEADER.size + length:
            raise ProtocolError("unexpected end of frame payload")
        raise ProtocolError("length mismatch: trailing bytes after payload")
    return decode_payload(kind, flags, data[_HEADER.size:])


def decode_payload(kind: int, flags: int, payload: bytes) -> Frame:
    cur = _Cursor(payload)
    if flags & FLAG_ACK:
        if kind not in KIND_NAMES:
            raise ProtocolError(f"unknown frame kind {kind}")
        status, count = cur.u8(), cur.u32()
        frame: Frame = Ack(of_kind=kind, status=status, count=count, flags=flags)
    elif kind == HELLO:
        frame = Hello(node=cur.string(), flags=flags)
    elif kind == PUBLISH:
        frame = Publish(topic=cur.string(), timestamp=cur.u64(), value=cur.i64(), flags=flags)
    elif kind == SUBSCRIBE:
        frame = Subscribe(pattern=cur.string(), from_ts=cur.u64(), to_ts=cur.u64(),
                          mode=cur.u8(), flags=flags)
    elif kind == BATCH:
        n_topics = cur.u16()
        runs = []
        for _ in range(n_topics):
            topic = cur.string()
            count = cur.u32()
            raw = cur.take(count * READING_BYTES)
            readings = tuple(_READING.iter_unpack(raw))
            prev = -1
            for ts, _v in readings:
                if ts <= prev:
                    raise ProtocolError(f"batch readings for {topic} not ascending")
                prev = ts
            runs.append((topic, readings))
        frame = Batch(runs=tuple(runs), flags=flags)
    elif kind == PING:
        frame = Ping(flags=flags)
    elif kind == BYE:
        frame = Bye(flags=flags)
    elif kind == KNOB:
        frame = Knob(topic=cur.string(), value=cur.i64(), flags=flags)
    else:
        raise ProtocolError(f"unknown frame kind {kind}")
    if cur.pos != len(payload):
        raise ProtocolError("length mismatch: payload longer than frame content")
    return frame


def iter_batch_arrays(payload: bytes):
    """Fast path over a BATCH payload: yields (topic, ts array, value array).

    Used on the broker ingest path so per-reading work stays in numpy.
    Validates the same ascending-timestamp invariant as :func:`decode_payload`.
    """
    cur = _Cursor(payload)
    n_topics = cur.u16()
    for _ in range(n_topics):
        topic = cur.string()
        count = cur.u32()
        raw = cur.take(count * READING_BYTES)
        arr = np.frombuffer(raw, dtype=_reading_dtype)
        ts = arr["ts"]
        if count > 1 and not (ts[1:] > ts[:-1]).all():
            raise ProtocolError(f"batch readings for {topic} not ascending")
        yield topic, ts, arr["value"]
    if cur.pos != len(payload):
        raise ProtocolError("length mismatch: payload longer than frame content")


def batch_from_arrays(runs: list[tuple[str, np.ndarray, np.ndarray]], flags: int = 0) -> bytes:
    """Encode a BATCH frame straight from numpy arrays (publish fast path)."""
    parts = [struct.pack("<H", len(runs))]
    for topic, ts, values in runs:
        parts.append(_pack_str(topic))
        parts.append(struct.pack("<I", len(ts)))
        arr = np.empty(len(ts), dtype=_reading_dtype)
        arr["ts"] = ts
        arr["value"] = values
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    total = _HEADER.size + len(payload)
    if total > MAX_FRAME:
        raise ProtocolError(f"frame of {total} bytes exceeds 1 MiB limit")
    return _HEADER.pack(MAGIC, BATCH, flags, len(payload)) + payload


@dataclass(frozen=True)
class SubscriptionPattern:
    """Topic prefix with an optional trailing ``#`` wildcard.

    ``/a/b/#`` matches every topic below ``/a/b``; without the wildcard the
    pattern matches exactly one topic.
    """

    prefix: tuple[str, ...]
    wildcard: bool

    def __str__(self) -> str:
        base = "/" + "/".join(self.prefix)
        return base + "/#" if self.wildcard else base

    def matches(self, topic: Topic | str) -> bool:
        labels = topic.labels if isinstance(topic, Topic) else tuple(str(topic).split("/")[1:])
        if self.wildcard:
            return labels[: len(self.prefix)] == self.prefix
        return labels == self.prefix


def parse_pattern(text: str) -> SubscriptionPattern:
    """Parse a subscription pattern; '#' is only legal as the final label."""
    if not text or text[0] != "/":
        raise ProtocolError(f"pattern must begin with '/': {text!r}")
    wildcard = False
    body = text
    if text.endswith("/#"):
        wildcard = True
        body = text[: -2]
    if "#" in body:
        raise ProtocolError("'#' wildcard only allowed as the final label")
    labels = tuple(body.split("/")[1:])
    if not labels or any(not lab or "/" in lab or any(c.isspace() for c in lab) for lab in labels):
        raise ProtocolError(f"invalid pattern {text!r}")
    return SubscriptionPattern(prefix=labels, wildcard=wildcard)


def read_frame(sock: socket.socket) -> tuple[int, int, bytes]:
    """Read one frame off a socket; returns (kind, flags, payload).

    Raises ProtocolError on malformed input and ConnectionError on EOF.
    """
    header = _recv_exact(sock, _HEADER.size)
    magic, kind, flags, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:04X}")
    if _HEADER.size + length > MAX_FRAME:
        raise ProtocolError("declared payload exceeds 1 MiB limit")
    payload = _recv_exact(sock, length) if length else b""
    return kind, flags, payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ConnectionError("peer closed connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks) if len(chunks) != 1 else chunks[0]


class PublisherClient:
    """Pusher-side session: batches readings to the agent, buffering on outage.

    While disconnected, encoded frames queue up under ``buffer_budget`` bytes;
    overflow drops the oldest frames and counts them. Reconnects use
    exponential backoff. Not thread-safe: one publishing loop per client.
    """

    def __init__(self, address: tuple[str, int], node: str = "",
                 buffer_budget: int = 4 << 20, backoff_s: float = 0.05,
                 backoff_max_s: float = 2.0):
        self.address = address
        self.node = node
        self.buffer_budget = buffer_budget
        self.backoff_s = backoff_s
        self.backoff_max_s = backoff_max_s
        self._sock: socket.socket | None = None
        self._pending: list[bytes] = []
        self._pending_bytes = 0
        self.dropped_frames = 0
        self.dropped_readings = 0
        self._next_attempt = 0.0
        self._backoff = backoff_s

    # -- connection management -------------------------------------------------

    def _connect(self) -> bool:
        if self._sock is not None:
            return True
        if time.monotonic() < self._next_attempt:
            return False
        try:
            sock = socket.create_connection(self.address, timeout=5.0)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._send_raw(sock, encode_frame(Hello(node=self.node)))
            self._read_ack(sock)
            self._sock = sock
            self._backoff = self.backoff_s
            return True
        except OSError:
            self._next_attempt = time.monotonic() + self._backoff
            self._backoff = min(self._backoff * 2, self.backoff_max_s)
            return False

    def _disconnect(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    @staticmethod
    def _send_raw(sock: socket.socket, data: bytes) -> None:
        sock.sendall(data)

    @staticmethod
    def _read_ack(sock: socket.socket) -> Ack:
        kind, flags, payload = read_frame(sock)
        frame = decode_payload(kind, flags, payload)
        if not isinstance(frame, Ack):
            raise ProtocolError(f"expected ack, got {KIND_NAMES.get(kind, kind)}")
        return frame

    # -- publishing --------------------------------------------------------------

    def publish(self, readings: list[Reading]) -> int:
        """Group readings into BATCH frames and send them in timestamp order.

        Returns the number of readings handed to the broker in this call
        (buffered data is retried first). Acks mean the broker enqueued the
        data for storage, not that it is durable.
        """
        frames = self._build_frames(readings)
        for frame in frames:
            self._enqueue(frame)
        return self._drain()

    def publish_arrays(self, runs: list[tuple[str, np.ndarray, np.ndarray]]) -> int:
        self._enqueue(batch_from_arrays(runs))
        return self._drain()

    def _build_frames(self, readings: list[Reading]) -> list[bytes]:
        by_topic: dict[str, list[Reading]] = {}
        for r in readings:
            by_topic.setdefault(str(r.topic), []).append(r)
        frames = []
        runs: list[tuple[str, tuple]] = []
        size = _HEADER.size + 2
        for topic, rs in by_topic.items():
            rs.sort(key=lambda r: r.timestamp)
            pairs = tuple((r.timestamp, r.value) for r in rs)
            entry_size = 2 + len(topic.encode()) + 4 + len(pairs) * READING_BYTES
            if runs and size + entry_size > MAX_FRAME:
                frames.append(encode_frame(Batch(runs=tuple(runs))))
                runs, size = [], _HEADER.size + 2
            while entry_size + _HEADER.size + 2 > MAX_FRAME:
                # single huge topic run: split it across frames
                fit = (MAX_FRAME - _HEADER.size - 2 - 2 - len(topic.encode()) - 4) // READING_BYTES
                frames.append(encode_frame(Batch(runs=((topic, pairs[:fit]),))))
                pairs = pairs[fit:]
                entry_size = 2 + len(topic.encode()) + 4 + len(pairs) * READING_BYTES
            if pairs:
                runs.append((topic, pairs))
                size += entry_size
        if runs:
            frames.append(encode_frame(Batch(runs=tuple(runs))))
        return frames

    def _enqueue(self, frame: bytes) -> None:
        self._pending.append(frame)
        self._pending_bytes += len(frame)
        while self._pending_bytes > self.buffer_budget and len(self._pending) > 1:
            oldest = self._pending.pop(0)
            self._pending_bytes -= len(oldest)
            self.dropped_frames += 1
            self.dropped_readings += _count_batch_readings(oldest)

    def _drain(self) -> int:
        sent = 0
        while self._pending:
            if not self._connect():
                return sent
            frame = self._pending[0]
            try:
                self._send_raw(self._sock, frame)
                ack = self._read_ack(self._sock)
                if ack.status != 0:
                    raise ProtocolError(f"broker rejected frame with status {ack.status}")
                sent += ack.count
            except (OSError, ProtocolError) as e:
                logger.warning("publish to %s failed: %s", self.address, e)
                self._disconnect()
                continue
            self._pending.pop(0)
            self._pending_bytes -= len(frame)
        return sent

    def flush(self) -> int:
        return self._drain()

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._send_raw(self._sock, encode_frame(Bye()))
            except OSError:
                pass
        self._disconnect()


def _count_batch_readings(frame: bytes) -> int:
    try:
        decoded = decode_frame(frame)
    except ProtocolError:
        return 0
    if isinstance(decoded, Batch):
        return sum(len(rs) for _, rs in decoded.runs)
    return 1 if isinstance(decoded, Publish) else 0
