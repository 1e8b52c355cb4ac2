"""Collect agent: the broker between pushers, subscribers and the store.

Every reading arriving in a PUBLISH or BATCH frame is (a) inserted into the
agent's sensor cache, (b) appended to the storage ingest queue and (c)
delivered to each matching subscriber. The storage queue is bounded: when
it fills up, the routing call blocks, which propagates backpressure to the
publisher instead of dropping data.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading

import numpy as np

from . import transport as tp
from .core import SensorCache
from .framework import DataView

logger = logging.getLogger(__name__)


class CollectAgent:
    """Broker state shared by the in-process and TCP front ends."""

    def __init__(self, cache: SensorCache | None = None, store=None,
                 storage_queue_size: int = 1024, direct_store: bool = False):
        self.cache = cache or SensorCache()
        self.store = store
        self.direct_store = direct_store or store is None
        self._queue: queue.Queue = queue.Queue(maxsize=storage_queue_size)
        self._subs: list[tuple[int, tp.SubscriptionPattern, object]] = []
        self._subs_lock = threading.Lock()
        self._next_sub = 1
        self._writer: threading.Thread | None = None
        self._stop = threading.Event()
        self.routed_readings = 0
        self.view = DataView(self.cache, store)

    # --------------------------------------------------------------- pubsub --

    def subscribe(self, pattern: str | tp.SubscriptionPattern, deliver) -> int:
        """Register ``deliver(topic, ts_list, values_list)``; returns an id."""
        if isinstance(pattern, str):
            pattern = tp.parse_pattern(pattern)
        with self._subs_lock:
            sub_id = self._next_sub
            self._next_sub += 1
            self._subs.append((sub_id, pattern, deliver))
        return sub_id

    def unsubscribe(self, sub_id: int) -> None:
        with self._subs_lock:
            self._subs = [s for s in self._subs if s[0] != sub_id]

    def _deliver(self, topic: str, ts: list[int], values: list[int]) -> None:
        with self._subs_lock:
            subs = list(self._subs)
        for _, pattern, deliver in subs:
            if pattern.matches(topic):
                try:
                    deliver(topic, ts, values)
                except Exception:
                    logger.exception("subscriber delivery failed for %s", topic)

    # -------------------------------------------------------------- routing --

    def route_run(self, topic: str, ts: list[int], values: list[int]) -> int:
        """Route one ascending per-topic run through cache, storage and subs."""
        self.cache.insert_run(topic, ts, values)
        if self.store is not None:
            if self.direct_store:
                self.store.insert_run(topic, ts, values)
            else:
                self._queue.put((topic, ts, values))  # blocks when full
        self._deliver(topic, ts, values)
        self.routed_readings += len(ts)
        return len(ts)

    def ingest_batch_payload(self, payload: bytes) -> int:
        count = 0
        for topic, ts_arr, val_arr in tp.iter_batch_arrays(payload):
            count += self.route_run(topic, ts_arr.tolist(), val_arr.tolist())
        return count

    def route_frame(self, frame: tp.Frame) -> tp.Ack:
        """In-process front end: route one decoded frame, return its ack."""
        if isinstance(frame, tp.Batch):
            count = 0
            for topic, readings in frame.runs:
                ts = [r[0] for r in readings]
                values = [r[1] for r in readings]
                count += self.route_run(topic, ts, values)
            return tp.Ack(of_kind=tp.BATCH, status=0, count=count)
        if isinstance(frame, tp.Publish):
            self.route_run(frame.topic, [frame.timestamp], [frame.value])
            return tp.Ack(of_kind=tp.PUBLISH, status=0, count=1)
        if isinstance(frame, tp.Ping):
            return tp.Ack(of_kind=tp.PING)
        if isinstance(frame, tp.Hello):
            return tp.Ack(of_kind=tp.HELLO)
        return tp.Ack(of_kind=tp.BYE, status=1, count=0)

    # ------------------------------------------------------------- querying --

    def window_runs(self, pattern: str, from_ts: int, to_ts: int):
        """Cache-first window over every matching topic (store fallback)."""
        pat = tp.parse_pattern(pattern)
        runs = []
        for topic in self.view.topics():
            if not pat.matches(topic):
                continue
            ts, values = self.view.window_values(topic, from_ts, to_ts)
            if ts:
                runs.append((topic, ts, values))
        return runs

    def snapshot_runs(self, pattern: str):
        """Latest reading per matching topic."""
        pat = tp.parse_pattern(pattern)
        runs = []
        for topic in self.view.topics():
            if not pat.matches(topic):
                continue
            got = self.view.latest(topic)
            if got is not None:
                runs.append((topic, [got[0]], [got[1]]))
        return runs

    # -------------------------------------------------------------- storage --

    def start_storage_writer(self) -> None:
        if self.store is None or self.direct_store:
            return
        self._stop.clear()
        self._writer = threading.Thread(target=self._drain_storage, daemon=True,
                                        name="agent-storage-writer")
        self._writer.start()

    def _drain_storage(self) -> None:
        while not self._stop.is_set() or not self._queue.empty():
            try:
                topic, ts, values = self._queue.get(timeout=0.1)
            except queue.Empty:
                self.store.maybe_flush()
                continue
            try:
                self.store.insert_run(topic, ts, values)
            except Exception:
                logger.exception("storage insert failed")
            self.store.maybe_flush()

    def stop(self) -> None:
        self._stop.set()
        if self._writer is not None:
            self._writer.join(timeout=5)
            self._writer = None
        if self.store is not None:
            self.store.flush()


class AgentServer:
    """TCP front end speaking the wire protocol; one thread per session."""

    def __init__(self, agent: CollectAgent, host: str = "127.0.0.1",
                 port: int = 0):
        self.agent = agent
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(64)
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept, daemon=True,
                                               name="agent-accept")

    def start(self) -> "AgentServer":
        self.agent.start_storage_writer()
        self._accept_thread.start()
        return self

    def _accept(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._session, args=(conn,), daemon=True,
                             name=f"agent-session-{peer[1]}").start()

    def _session(self, conn: socket.socket) -> None:
        send_lock = threading.Lock()
        sub_ids: list[int] = []

        def send(data: bytes) -> None:
            with send_lock:
                conn.sendall(data)

        def live_deliver(topic: str, ts: list[int], values: list[int]) -> None:
            send(tp.batch_from_arrays([(topic, np.asarray(ts, dtype=np.int64),
                                        np.asarray(values, dtype=np.int64))]))

        try:
            while not self._stop.is_set():
                kind, flags, payload = tp.read_frame(conn)
                if kind == tp.BATCH:
                    count = self.agent.ingest_batch_payload(payload)
                    send(tp.encode_frame(tp.Ack(of_kind=tp.BATCH, count=count)))
                elif kind == tp.PUBLISH:
                    frame = tp.decode_payload(kind, flags, payload)
                    send(tp.encode_frame(self.agent.route_frame(frame)))
                elif kind == tp.SUBSCRIBE:
                    frame = tp.decode_payload(kind, flags, payload)
                    self._handle_subscribe(frame, send, live_deliver, sub_ids)
                elif kind in (tp.HELLO, tp.PING):
                    send(tp.encode_frame(tp.Ack(of_kind=kind)))
                elif kind == tp.BYE:
                    return
                else:
                    send(tp.encode_frame(tp.Ack(of_kind=kind, status=1)))
        except (tp.ProtocolError, ConnectionError, OSError) as e:
            if not isinstance(e, ConnectionError):
                logger.warning("session dropped: %s", e)
        finally:
            for sid in sub_ids:
                self.agent.unsubscribe(sid)
            try:
                conn.close()
            except OSError:
                pass

    def _handle_subscribe(self, frame: tp.Subscribe, send, live_deliver,
                          sub_ids: list[int]) -> None:
        if frame.mode == tp.SUB_LIVE:
            sub_ids.append(self.agent.subscribe(frame.pattern, live_deliver))
            send(tp.encode_frame(tp.Ack(of_kind=tp.SUBSCRIBE)))
            return
        if frame.mode == tp.SUB_WINDOW:
            runs = self.agent.window_runs(frame.pattern, frame.from_ts, frame.to_ts)
        else:
            runs = self.agent.snapshot_runs(frame.pattern)
        send(tp.encode_frame(tp.Ack(of_kind=tp.SUBSCRIBE)))
        total = sum(len(ts) for _, ts, _ in runs)
        for topic, ts, values in runs:
            # chunk conservatively below the 1 MiB frame cap
            step = 60_000
            for i in range(0, len(ts), step):
                send(tp.batch_from_arrays([(topic, np.asarray(ts[i:i + step], dtype=np.int64),
                                            np.asarray(values[i:i + step], dtype=np.int64))]))
        send(tp.encode_frame(tp.Batch(runs=(), flags=tp.FLAG_FIN)))

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self.agent.stop()


def query_agent(address: tuple[str, int], pattern: str, from_ts: int, to_ts: int,
                snapshot: bool = False, timeout: float = 10.0):
    """Client helper: window or snapshot query over the wire.

    Returns a list of (topic, timestamp, value) tuples sorted (topic, ts).
    """
    mode = tp.SUB_SNAPSHOT if snapshot else tp.SUB_WINDOW
    rows: list[tuple[str, int, int]] = []
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.sendall(tp.encode_frame(tp.Subscribe(pattern=pattern, from_ts=from_ts,
                                                  to_ts=to_ts, mode=mode)))
        kind, flags, payload = tp.read_frame(sock)
        frame = tp.decode_payload(kind, flags, payload)
        if not isinstance(frame, tp.Ack) or frame.status != 0:
            raise tp.ProtocolError("window query rejected")
        while True:
            kind, flags, payload = tp.read_frame(sock)
            if kind != tp.BATCH:
                raise tp.ProtocolError(f"unexpected {tp.KIND_NAMES.get(kind, kind)} in reply")
            for topic, ts_arr, val_arr in tp.iter_batch_arrays(payload):
                rows.extend(zip([topic] * len(ts_arr), ts_arr.tolist(), val_arr.tolist()))
            if flags & tp.FLAG_FIN:
                break
        sock.sendall(tp.encode_frame(tp.Bye()))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows
