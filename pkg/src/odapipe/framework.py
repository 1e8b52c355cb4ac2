"""Operator scheduling: periodic analytics units in pushers and agents.

Units run in-band (inside a pusher, against its local cache) or out-of-band
(inside a collect agent, with transparent store fallback for data that aged
out of the cache). The same unit code runs in either placement; only the
data view and output routing differ.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, field
from typing import Callable

from .clock import NS_PER_MS, PeriodicThread, WallClock
from .core import Reading, SensorCache, Topic

logger = logging.getLogger(__name__)

FAILURE_THRESHOLD = 3


@dataclass(frozen=True)
class HealthEvent:
    timestamp: int
    source: str
    kind: str
    message: str


class DataView:
    """Read access for operators: cache first, store fallback.

    When the requested window reaches further back than the cache retains,
    the missing prefix is fetched from the store. No deduplication is
    guaranteed at the seam; per-topic LWW on both sides keeps it benign.
    """

    def __init__(self, cache: SensorCache, store=None):
        self.cache = cache
        self.store = store

    def window_values(self, topic, from_ts: int, to_ts: int) -> tuple[list[int], list[int]]:
        ts, vals = self.cache.window_arrays(topic, from_ts, to_ts)
        if self.store is not None and (not ts or ts[0] > from_ts):
            upper = ts[0] - 1 if ts else to_ts
            if upper >= from_ts:
                sts, svals = self.store.query_arrays(str(topic), from_ts, upper)
                if len(sts):
                    ts = sts.tolist() + ts
                    vals = svals.tolist() + vals
        return ts, vals

    def latest(self, topic) -> tuple[int, int] | None:
        got = self.cache.latest(topic)
        if got is None and self.store is not None:
            sts, svals = self.store.query_arrays(str(topic), 0, 2**63 - 1)
            if len(sts):
                return int(sts[-1]), int(svals[-1])
        return got

    def last_values(self, topic, count: int) -> tuple[list[int], list[int]]:
        return self.cache.last_values(topic, count)

    def topics(self) -> list[str]:
        out = set(self.cache.topics())
        if self.store is not None:
            out |= self.store.topics_set()
        return sorted(out)


@dataclass
class OperatorUnit:
    """One periodic analytics unit resolved against concrete topics."""

    name: str
    kind: str
    inputs: list[str]
    outputs: list[str]
    interval_ms: int
    body: Callable  # body(view, now_ns) -> list[Reading]
    placement: str = "out-of-band"          # or "in-band"
    train: Callable | None = None            # train(view, now_ns) -> str summary
    # runtime state
    paused: bool = False
    runs: int = 0
    failures: int = 0
    consecutive_failures: int = 0
    skipped_overlaps: int = 0
    last_run_ns: int = 0
    _busy: threading.Lock = field(default_factory=threading.Lock, repr=False)


class UnitError(ValueError):
    pass


class OperatorHost:
    """Schedules operator units and routes their output readings.

    ``emit`` receives each unit's output readings; the pusher wires it to
    its cache + publish queue, the agent to its cache + store.
    """

    def __init__(self, view: DataView, emit: Callable, clock=None,
                 fail_threshold: int = FAILURE_THRESHOLD):
        self.view = view
        self.emit = emit
        self.clock = clock or WallClock()
        self.fail_threshold = fail_threshold
        self.units: dict[str, OperatorUnit] = {}
        self.health: list[HealthEvent] = []
        self.health_listeners: list[Callable[[HealthEvent], None]] = []
        self._threads: list[PeriodicThread] = []
        self._all_outputs: set[str] = set()

    # ------------------------------------------------------------- registry --

    def add_unit(self, unit: OperatorUnit) -> None:
        if unit.name in self.units:
            raise UnitError(f"duplicate unit name {unit.name!r}")
        clash = self._all_outputs.intersection(unit.outputs)
        if clash:
            raise UnitError(f"unit {unit.name!r}: outputs already claimed: {sorted(clash)}")
        if len(set(unit.outputs)) != len(unit.outputs):
            raise UnitError(f"unit {unit.name!r}: duplicate output topics")
        cycle = set(unit.outputs) & set(unit.inputs)
        if cycle:
            raise UnitError(f"unit {unit.name!r}: outputs feed its own inputs: {sorted(cycle)}")
        self.units[unit.name] = unit
        self._all_outputs.update(unit.outputs)

    def add_units(self, units: list[OperatorUnit]) -> None:
        """All-or-nothing: any invalid unit leaves the host unchanged."""
        added = []
        try:
            for u in units:
                self.add_unit(u)
                added.append(u)
        except UnitError:
            for u in added:
                del self.units[u.name]
                self._all_outputs.difference_update(u.outputs)
            raise

    # ------------------------------------------------------------ execution --

    def record_health(self, event: HealthEvent) -> None:
        self.health.append(event)
        for listener in self.health_listeners:
            try:
                listener(event)
            except Exception:
                logger.exception("health listener failed")

    def tick_unit(self, unit: OperatorUnit, now: int) -> None:
        if unit.paused:
            return
        if not unit._busy.acquire(blocking=False):
            unit.skipped_overlaps += 1
            return
        try:
            readings = unit.body(self.view, now)
        except Exception as e:
            unit.failures += 1
            unit.consecutive_failures += 1
            logger.warning("unit %s failed: %s", unit.name, e)
            if unit.consecutive_failures == self.fail_threshold:
                self.record_health(HealthEvent(now, unit.name, "operator-failure",
                                               f"{self.fail_threshold} consecutive failures: {e}"))
            return
        finally:
            unit._busy.release()
        unit.consecutive_failures = 0
        unit.runs += 1
        unit.last_run_ns = now
        if readings:
            self.emit(readings)

    def schedule(self, scheduler) -> None:
        """Register every unit on a virtual-time scheduler."""
        for unit in self.units.values():
            interval = unit.interval_ms * NS_PER_MS
            scheduler.every(interval, lambda now, u=unit: self.tick_unit(u, now))

    def start_live(self) -> None:
        for unit in self.units.values():
            t = PeriodicThread(f"op-{unit.name}", unit.interval_ms * NS_PER_MS,
                               lambda now, u=unit: self.tick_unit(u, now), clock=self.clock)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        for t in self._threads:
            t.stop()
        for t in self._threads:
            t.join(timeout=2)
        self._threads.clear()

    # -------------------------------------------------------------- control --

    def status_lines(self) -> list[str]:
        lines = []
        for name in sorted(self.units):
            u = self.units[name]
            state = "paused" if u.paused else "running"
            lines.append(f"{name} kind={u.kind} placement={u.placement} state={state} "
                         f"runs={u.runs} failures={u.failures} last_run={u.last_run_ns}")
        return lines

    def _unit(self, name: str) -> OperatorUnit:
        unit = self.units.get(name)
        if unit is None:
            raise UnitError(f"unknown unit {name!r}")
        return unit

    def pause(self, name: str) -> None:
        self._unit(name).paused = True

    def resume(self, name: str) -> None:
        self._unit(name).paused = False

    def retrain(self, name: str) -> str:
        unit = self._unit(name)
        if unit.train is None:
            raise UnitError(f"unit {name!r} has no train hook")
        return unit.train(self.view, self.clock.now_ns())


class ControlEndpoint:
    """Line-oriented control protocol on a local TCP socket.

    Commands: ``status``, ``retrain <unit>``, ``pause <unit>``,
    ``resume <unit>``. Replies end with ``ok`` or ``err <message>``.
    """

    def __init__(self, host_obj: OperatorHost, address: tuple[str, int] = ("127.0.0.1", 0)):
        self.host = host_obj
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind(address)
        self._sock.listen(8)
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True,
                                        name="control-endpoint")

    def start(self) -> "ControlEndpoint":
        self._thread.start()
        return self

    def _serve(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._session, args=(conn,), daemon=True).start()

    def _session(self, conn: socket.socket) -> None:
        with conn, conn.makefile("rw", encoding="utf-8", newline="\n") as fh:
            for line in fh:
                reply = self.handle_command(line.strip())
                fh.write(reply)
                fh.flush()

    def handle_command(self, line: str) -> str:
        parts = line.split()
        if not parts:
            return "err empty command\n"
        cmd, args = parts[0], parts[1:]
        try:
            if cmd == "status" and not args:
                return "".join(s + "\n" for s in self.host.status_lines()) + "ok\n"
            if cmd == "pause" and len(args) == 1:
                self.host.pause(args[0])
                return "ok\n"
            if cmd == "resume" and len(args) == 1:
                self.host.resume(args[0])
                return "ok\n"
            if cmd == "retrain" and len(args) == 1:
                summary = self.host.retrain(args[0])
                return f"{summary}\nok\n"
            return f"err unknown command {cmd!r}\n"
        except UnitError as e:
            return f"err {e}\n"

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass


def control_request(address: tuple[str, int], command: str, timeout: float = 5.0) -> list[str]:
    """Send one control command; returns the reply lines (incl. ok/err)."""
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.sendall((command.strip() + "\n").encode("utf-8"))
        sock.shutdown(socket.SHUT_WR)
        data = b""
        while True:
            chunk = sock.recv(4096)
            if not chunk:
                break
            data += chunk
    return data.decode("utf-8").splitlines()
