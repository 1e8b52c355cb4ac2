"""Wall and virtual clocks plus the schedulers that drive periodic work.

Every component takes a clock object instead of calling ``time`` directly,
so a full simulated day can run in seconds under a :class:`VirtualClock`
while the live daemons keep using :class:`WallClock`.
"""

from __future__ import annotations

import heapq
import logging
import threading
import time
from typing import Callable

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000

# Constant epoch for simulations; any strictly positive base works, a fixed
# one keeps scenario output byte-identical across machines.
SIM_EPOCH_NS = 1_600_000_000 * NS_PER_S


class WallClock:
    """Real time, for the live daemons."""

    virtual = False

    def now_ns(self) -> int:
        return time.time_ns()

    def sleep_until(self, t_ns: int) -> None:
        delta = t_ns - self.now_ns()
        if delta > 0:
            time.sleep(delta / NS_PER_S)


class VirtualClock:
    """Manually advanced clock. Time moves only via :meth:`advance_to`."""

    virtual = True

    def __init__(self, start_ns: int = SIM_EPOCH_NS):
        if start_ns <= 0:
            raise ValueError("clock must start at a strictly positive time")
        self._now = start_ns

    def now_ns(self) -> int:
        return self._now

    def advance_to(self, t_ns: int) -> None:
        if t_ns < self._now:
            raise ValueError(f"virtual time cannot move backwards ({t_ns} < {self._now})")
        self._now = t_ns

    def sleep_until(self, t_ns: int) -> None:
        if t_ns > self._now:
            self.advance_to(t_ns)


class EventScheduler:
    """Deterministic single-threaded scheduler over a virtual clock.

    Events due at the same instant fire in registration order, which is what
    keeps scenario replays byte-identical.
    """

    def __init__(self, clock: VirtualClock):
        self.clock = clock
        self._heap: list[tuple[int, int, Callable[[int], None]]] = []
        self._seq = 0

    def at(self, due_ns: int, fn: Callable[[int], None]) -> None:
        heapq.heappush(self._heap, (due_ns, self._seq, fn))
        self._seq += 1

    def every(self, interval_ns: int, fn: Callable[[int], None], first_ns: int | None = None) -> None:
        """Register ``fn(now_ns)`` to run periodically, first at ``first_ns``."""
        if interval_ns <= 0:
            raise ValueError("interval must be positive")
        due = self.clock.now_ns() + interval_ns if first_ns is None else first_ns

        def tick(now: int) -> None:
            fn(now)
            self.at(now + interval_ns, tick)

        self.at(due, tick)

    def run_until(self, end_ns: int) -> None:
        """Run all events due at or before ``end_ns``, advancing the clock."""
        while self._heap and self._heap[0][0] <= end_ns:
            due, _, fn = heapq.heappop(self._heap)
            if due > self.clock.now_ns():
                self.clock.advance_to(due)
            fn(due)
        if end_ns > self.clock.now_ns():
            self.clock.advance_to(end_ns)


class PeriodicThread(threading.Thread):
    """Fixed-interval task thread for live mode.

    Missed deadlines are skipped, never replayed in a burst: freshness beats
    completeness for monitoring work.
    """

    def __init__(self, name: str, interval_ns: int, fn: Callable[[int], None],
                 clock: WallClock | None = None):
        super().__init__(name=name, daemon=True)
        self.interval_ns = interval_ns
        self.fn = fn
        self.clock = clock or WallClock()
        self.missed = 0
        self._stop = threading.Event()

    def run(self) -> None:
        due = self.clock.now_ns() + self.interval_ns
        while not self._stop.is_set():
            now = self.clock.now_ns()
            if now < due:
                self._stop.wait((due - now) / NS_PER_S)
                if self._stop.is_set():
                    return
                now = self.clock.now_ns()
            try:
                self.fn(now)
            except Exception:
                logger.exception("periodic task %s failed", self.name)
            # Skip slots we are too late for instead of stacking them up.
            due += self.interval_ns
            if due < self.clock.now_ns():
                skipped = (self.clock.now_ns() - due) // self.interval_ns + 1
                self.missed += int(skipped)
                due += skipped * self.interval_ns

    def stop(self) -> None:
        self._stop.set()
