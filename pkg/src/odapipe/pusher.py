"""Per-node sampling daemon hosting sampler plugins and in-band operators.

Plugins declare their sensors up front and get polled on their interval.
Readings land in the node-local cache; everything not marked local_only is
queued for publication to the collect agent. Missed ticks are counted and
skipped, never replayed in a burst.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, field

from .clock import NS_PER_MS, PeriodicThread, WallClock
from .core import Reading, SensorCache, SensorMeta, Topic, parse_topic
from .framework import DataView, HealthEvent, OperatorHost
from .transport import PublisherClient

logger = logging.getLogger(__name__)

NODE_PREFIX_ENV = "ODAPIPE_NODE_PREFIX"
PLUGIN_FAILURE_THRESHOLD = 5

# canonical /proc/stat value columns after the line key
STAT_FIELDS = ("user", "nice", "system", "idle", "iowait", "irq", "softirq",
               "steal", "guest", "guest_nice")


class PluginError(Exception):
    pass


class SamplerPlugin:
    """Base sampler: declares sensors once, yields <=1 reading per sensor per tick."""

    name = "sampler"

    def __init__(self, interval_ms: int = 10_000):
        self.interval_ms = interval_ms

    def sensors(self) -> list[SensorMeta]:
        raise NotImplementedError

    def sample(self, now_ns: int) -> list[Reading]:
        raise NotImplementedError


class CallbackPlugin(SamplerPlugin):
    """Sampler over plain callables; the workhorse for tests and synthetics."""

    def __init__(self, name: str, sensors: list[tuple[SensorMeta, object]],
                 interval_ms: int = 10_000):
        super().__init__(interval_ms)
        self.name = name
        self._sensors = sensors

    def sensors(self) -> list[SensorMeta]:
        return [meta for meta, _ in self._sensors]

    def sample(self, now_ns: int) -> list[Reading]:
        out = []
        for meta, fn in self._sensors:
            out.append(Reading(meta.topic, now_ns, int(fn(now_ns))))
        return out


def parse_proc_text(text: str, kind: str, wanted) -> tuple[list[tuple[str, int]], int]:
    """Parse stat- or meminfo-style text into (label, value) pairs.

    ``kind`` is ``"meminfo"`` (lines ``Key: value [kB]``, kB scaled to bytes)
    or ``"stat"`` (space-separated counters after a line key; ``wanted`` maps
    are (line_key, field_name) pairs using the canonical stat field order).
    Unparsable lines are skipped and counted, never fatal.
    """
    out: list[tuple[str, int]] = []
    skipped = 0
    if kind == "meminfo":
        want = set(wanted)
        for line in text.splitlines():
            if ":" not in line:
                if line.strip():
                    skipped += 1
                continue
            key, rest = line.split(":", 1)
            key = key.strip()
            parts = rest.split()
            if key not in want:
                continue
            try:
                value = int(parts[0])
            except (IndexError, ValueError):
                skipped += 1
                continue
            if len(parts) > 1 and parts[1].lower() == "kb":
                value *= 1024
            out.append((key, value))
    elif kind == "stat":
        pairs = list(wanted)
        by_key: dict[str, list[str]] = {}
        for line in text.splitlines():
            parts = line.split()
            if len(parts) < 2:
                if line.strip():
                    skipped += 1
                continue
            by_key[parts[0]] = parts[1:]
        for line_key, field_name in pairs:
            cols = by_key.get(line_key)
            if cols is None:
                continue
            try:
                idx = STAT_FIELDS.index(field_name)
                out.append((f"{line_key}-{field_name}", int(cols[idx])))
            except (ValueError, IndexError):
                skipped += 1
    else:
        raise PluginError(f"unknown file-source kind {kind!r}")
    return out, skipped


class FileSourcePlugin(SamplerPlugin):
    """ProcFS-style sampler: raw counters from stat/meminfo-format files.

    Counters pass through unscaled (beyond the kB unit normalization);
    rates and ratios are derived later by operators.
    """

    def __init__(self, name: str, prefix: Topic, path: str, kind: str, wanted,
                 interval_ms: int = 10_000, local_only: bool = False):
        super().__init__(interval_ms)
        self.name = name
        self.prefix = prefix
        self.path = path
        self.kind = kind
        self.wanted = wanted
        self.local_only = local_only
        self.skipped_lines = 0
        if kind == "meminfo":
            labels = list(wanted)
        else:
            labels = [f"{k}-{f}" for k, f in wanted]
        self._metas = {label: SensorMeta(prefix.child(label), interval_ms,
                                         local_only=local_only) for label in labels}

    def sensors(self) -> list[SensorMeta]:
        return list(self._metas.values())

    def sample(self, now_ns: int) -> list[Reading]:
        try:
            with open(self.path, "r", encoding="utf-8", errors="replace") as fh:
                text = fh.read()
        except OSError as e:
            raise PluginError(f"cannot read {self.path}: {e}") from e
        pairs, skipped = parse_proc_text(text, self.kind, self.wanted)
        self.skipped_lines += skipped
        return [Reading(self._metas[label].topic, now_ns, value)
                for label, value in pairs if label in self._metas]


class PlantSourcePlugin(SamplerPlugin):
    """Samples the cooling-plant endpoint (inlet/return/flow/set temperature).

    ``reader`` exposes ``snapshot(pattern) -> list[(topic, ts, value)]``; the
    live implementation speaks the wire protocol, scenarios read in-process.
    """

    def __init__(self, name: str, reader, pattern: str, prefix: Topic,
                 interval_ms: int = 10_000):
        super().__init__(interval_ms)
        self.name = name
        self.reader = reader
        self.pattern = pattern
        self.prefix = prefix
        self._metas: dict[str, SensorMeta] = {}

    def sensors(self) -> list[SensorMeta]:
        return list(self._metas.values())

    def sample(self, now_ns: int) -> list[Reading]:
        try:
            rows = self.reader.snapshot(self.pattern)
        except Exception as e:
            raise PluginError(f"plant endpoint unreachable: {e}") from e
        out = []
        for topic, _ts, value in rows:
            if topic not in self._metas:
                self._metas[topic] = SensorMeta(parse_topic(topic), self.interval_ms)
            out.append(Reading(self._metas[topic].topic, now_ns, int(value)))
        return out


@dataclass
class PusherConfig:
    node_prefix: Topic
    agent_address: tuple[str, int] | None = None
    buffer_budget: int = 4 << 20
    failure_threshold: int = PLUGIN_FAILURE_THRESHOLD

    @staticmethod
    def resolve_prefix(default: str) -> Topic:
        return parse_topic(os.environ.get(NODE_PREFIX_ENV, default))


class Pusher:
    """Hosts sampler plugins plus in-band operator units for one node."""

    def __init__(self, config: PusherConfig, clock=None, publish=None,
                 cache: SensorCache | None = None):
        self.config = config
        self.clock = clock or WallClock()
        self.cache = cache or SensorCache()
        self.plugins: list[SamplerPlugin] = []
        self.health: list[HealthEvent] = []
        self._failures: dict[str, int] = {}
        self.missed_ticks = 0
        self._threads: list[PeriodicThread] = []
        self._publish = publish          # publish(list[Reading]); None = wire client
        self._client: PublisherClient | None = None
        if publish is None and config.agent_address is not None:
            self._client = PublisherClient(config.agent_address,
                                           node=str(config.node_prefix),
                                           buffer_budget=config.buffer_budget)
            self._publish = self._client.publish
        self.operators = OperatorHost(DataView(self.cache), emit=self.emit_readings,
                                      clock=self.clock)

    # -------------------------------------------------------------- plugins --

    def add_plugin(self, plugin: SamplerPlugin) -> None:
        for meta in plugin.sensors():
            if not meta.topic.starts_with(self.config.node_prefix.labels):
                raise PluginError(f"sensor {meta.topic} outside node prefix "
                                  f"{self.config.node_prefix}")
            self.cache.declare(meta)
        self.plugins.append(plugin)
        self._failures[plugin.name] = 0

    def tick_plugin(self, plugin: SamplerPlugin, now_ns: int) -> None:
        try:
            readings = plugin.sample(now_ns)
        except PluginError as e:
            self._failures[plugin.name] += 1
            count = self._failures[plugin.name]
            logger.warning("plugin %s failed (%d consecutive): %s", plugin.name, count, e)
            if count == self.config.failure_threshold:
                self.health.append(HealthEvent(now_ns, plugin.name, "plugin-failure",
                                               f"{count} consecutive failures: {e}"))
            return
        self._failures[plugin.name] = 0
        self.emit_readings(readings)

    def emit_readings(self, readings: list[Reading]) -> None:
        """Cache everything; queue non-local readings for the wire."""
        wire: list[Reading] = []
        for r in readings:
            self.cache.insert(r)
            meta = self.cache.meta(r.topic)
            if meta is None or not meta.local_only:
                wire.append(r)
        if wire and self._publish is not None:
            self._publish(wire)

    # ------------------------------------------------------------- lifecycle --

    def schedule(self, scheduler) -> None:
        for plugin in self.plugins:
            scheduler.every(plugin.interval_ms * NS_PER_MS,
                            lambda now, p=plugin: self.tick_plugin(p, now))
        self.operators.schedule(scheduler)

    def start_live(self) -> None:
        for plugin in self.plugins:
            t = PeriodicThread(f"plugin-{plugin.name}", plugin.interval_ms * NS_PER_MS,
                               lambda now, p=plugin: self.tick_plugin(p, now),
                               clock=self.clock)
            t.start()
            self._threads.append(t)
        self.operators.start_live()

    def stop(self) -> None:
        for t in self._threads:
            t.stop()
        for t in self._threads:
            t.join(timeout=2)
        self.missed_ticks += sum(t.missed for t in self._threads)
        self._threads.clear()
        self.operators.stop()
        if self._client is not None:
            self._client.flush()
            self._client.close()
