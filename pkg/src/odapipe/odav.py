"""Visualization-side operators: derived metrics, job aggregation, smoothing.

Derived metrics are small expressions over the most recent cached values of
their input sensors (RATE needs the last two). Job aggregation collapses a
metric's readings across all nodes of a job into deciles, average and a
severity score, routed to a long-term sink that no TTL ever touches.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field

from .core import Reading, Topic, parse_topic
from .framework import DataView, OperatorUnit

logger = logging.getLogger(__name__)

MAX_EXPR_DEPTH = 4
NS_PER_S = 1_000_000_000


class MetricError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


# ---------------------------------------------------------------------------
# derived-metric expressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricExpr:
    op: str                     # "sensor" | "rate" | "ratio" | "sum" | "scale"
    args: tuple = ()
    name: str = ""
    k: float = 1.0

    def depth(self) -> int:
        return 1 + max((a.depth() for a in self.args), default=0)

    def sensors(self) -> set[str]:
        if self.op == "sensor" or self.op == "rate":
            return {self.name}
        out: set[str] = set()
        for a in self.args:
            out |= a.sensors()
        return out


_FUNC_RE = re.compile(r"\s*(RATE|RATIO|SUM|SCALE)\s*\(", re.I)


def parse_metric_expr(text: str) -> MetricExpr:
    """Parse ``RATE(s)``, ``RATIO(a,b)``, ``SUM(s,...)``, ``SCALE(s,k)`` trees."""
    expr, pos = _parse_expr(text, 0)
    if text[pos:].strip():
        raise MetricError(f"trailing input after expression: {text[pos:]!r}")
    if expr.depth() > MAX_EXPR_DEPTH:
        raise MetricError(f"expression depth {expr.depth()} exceeds {MAX_EXPR_DEPTH}")
    return expr


def _parse_expr(text: str, pos: int) -> tuple[MetricExpr, int]:
    m = _FUNC_RE.match(text, pos)
    if m:
        func = m.group(1).upper()
        pos = m.end()
        args: list[MetricExpr] = []
        scale = 1.0
        while True:
            if func == "SCALE" and len(args) == 1:
                nxt = _scan_arg(text, pos)
                try:
                    scale = float(text[pos:nxt].strip())
                except ValueError:
                    raise MetricError(f"SCALE needs a numeric factor at offset {pos}")
                pos = nxt
            else:
                arg, pos = _parse_expr(text, pos)
                args.append(arg)
            pos = _skip_ws(text, pos)
            if pos >= len(text):
                raise MetricError("unclosed '(' in expression")
            if text[pos] == ",":
                pos += 1
                continue
            if text[pos] == ")":
                pos += 1
                break
            raise MetricError(f"expected ',' or ')' at offset {pos}")
        if func == "RATE":
            if len(args) != 1 or args[0].op != "sensor":
                raise MetricError("RATE takes exactly one sensor")
            return MetricExpr(op="rate", name=args[0].name), pos
        if func == "RATIO":
            if len(args) != 2:
                raise MetricError("RATIO takes exactly two arguments")
            return MetricExpr(op="ratio", args=tuple(args)), pos
        if func == "SUM":
            if not args:
                raise MetricError("SUM needs at least one argument")
            return MetricExpr(op="sum", args=tuple(args)), pos
        if len(args) != 1:
            raise MetricError("SCALE takes one expression and one factor")
        return MetricExpr(op="scale", args=(args[0],), k=scale), pos
    pos = _skip_ws(text, pos)
    end = _scan_arg(text, pos)
    name = text[pos:end].strip()
    if not name:
        raise MetricError(f"expected sensor name at offset {pos}")
    return MetricExpr(op="sensor", name=name), end


def _skip_ws(text: str, pos: int) -> int:
    while pos < len(text) and text[pos].isspace():
        pos += 1
    return pos


def _scan_arg(text: str, pos: int) -> int:
    depth = 0
    i = pos
    while i < len(text):
        c = text[i]
        if c == "(":
            depth += 1
        elif c == ")":
            if depth == 0:
                return i
            depth -= 1
        elif c == "," and depth == 0:
            return i
        i += 1
    return i


@dataclass
class DerivedMetricSpec:
    """One derived metric: expression, output topic, integer output scale."""

    name: str
    expr: MetricExpr
    out_topic: str
    scale: float = 1.0
    stats: dict = field(default_factory=lambda: {"wrap": 0, "div0": 0, "missing": 0})


def evaluate_expr(expr: MetricExpr, view: DataView, now: int,
                  stats: dict | None = None) -> float | None:
    """Most-recent-value evaluation; None means no output this tick."""
    if expr.op == "sensor":
        got = view.latest(expr.name)
        return None if got is None else float(got[1])
    if expr.op == "rate":
        ts, vals = view.last_values(expr.name, 2)
        if len(ts) < 2 or ts[1] == ts[0]:
            return None
        if vals[1] < vals[0]:
            # counter wrapped; guessing the wrap width is how bad data is born
            if stats is not None:
                stats["wrap"] += 1
            return None
        return (vals[1] - vals[0]) / ((ts[1] - ts[0]) / NS_PER_S)
    if expr.op == "ratio":
        a = evaluate_expr(expr.args[0], view, now, stats)
        b = evaluate_expr(expr.args[1], view, now, stats)
        if a is None or b is None:
            return None
        if b == 0:
            if stats is not None:
                stats["div0"] += 1
            return None
        return a / b
    if expr.op == "sum":
        present = [v for v in (evaluate_expr(a, view, now, stats) for a in expr.args)
                   if v is not None]
        return sum(present) if present else None
    if expr.op == "scale":
        v = evaluate_expr(expr.args[0], view, now, stats)
        return None if v is None else v * expr.k
    raise MetricError(f"unknown op {expr.op}")


def derive_metric(spec: DerivedMetricSpec, view: DataView, now: int) -> Reading | None:
    value = evaluate_expr(spec.expr, view, now, spec.stats)
    if value is None:
        spec.stats["missing"] += 1
        return None
    return Reading(parse_topic(spec.out_topic), now, round_half_up(value * spec.scale))


# ---------------------------------------------------------------------------
# deciles / severity / job aggregation
# ---------------------------------------------------------------------------

def deciles(values) -> list:
    """Nearest-rank quantiles: [min, d1..d9, max], 11 points.

    d_k = sorted[ceil(k*N/10) - 1]; no interpolation, so integer inputs give
    integer deciles and the result is oracle-checkable by brute force.
    """
    if len(values) == 0:
        raise MetricError("deciles of empty input")
    s = sorted(values)
    n = len(s)
    out = [s[0]]
    for k in range(1, 10):
        out.append(s[math.ceil(k * n / 10) - 1])
    out.append(s[-1])
    return out


@dataclass(frozen=True)
class SeveritySpec:
    """Linear badness ramp from threshold to saturation, aggregated by mean."""

    threshold: float
    saturation: float
    direction: str = "above"    # "above" = above-is-bad, "below" = below-is-bad

    def __post_init__(self) -> None:
        if self.saturation == self.threshold:
            raise ValueError("saturation must differ from threshold")
        if self.direction == "above" and self.saturation < self.threshold:
            raise ValueError("above-is-bad needs saturation above threshold")
        if self.direction == "below" and self.saturation > self.threshold:
            raise ValueError("below-is-bad needs saturation below threshold")
        if self.direction not in ("above", "below"):
            raise ValueError(f"unknown direction {self.direction!r}")


def severity(values, spec: SeveritySpec) -> float:
    """Mean of per-value clamp((v - threshold)/(saturation - threshold), 0, 1).

    The same expression covers both directions because saturation sits on
    the bad side of the threshold.
    """
    if len(values) == 0:
        raise MetricError("severity of empty input")
    span = spec.saturation - spec.threshold
    total = 0.0
    for v in values:
        s = (v - spec.threshold) / span
        total += 0.0 if s < 0 else (1.0 if s > 1 else s)
    return total / len(values)


@dataclass
class JobRecord:
    jobid: str
    nodes: list[str]            # node topics, e.g. /dc1/i01/n042
    start_ts: int
    end_ts: int = 0             # 0 = still running
    user: str = ""

    def __post_init__(self) -> None:
        if not self.nodes:
            raise ValueError("job node list must be non-empty")
        if self.end_ts and self.end_ts < self.start_ts:
            raise ValueError("job ends before it starts")

    def overlaps(self, t0: int, t1: int) -> bool:
        end = self.end_ts if self.end_ts else t1
        return self.start_ts < t1 and end > t0

    def to_json(self) -> str:
        return json.dumps({"jobid": self.jobid, "nodes": self.nodes,
                           "start_ts": self.start_ts, "end_ts": self.end_ts,
                           "user": self.user}, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "JobRecord":
        d = json.loads(line)
        return cls(jobid=str(d["jobid"]), nodes=list(d["nodes"]),
                   start_ts=int(d["start_ts"]), end_ts=int(d.get("end_ts", 0)),
                   user=str(d.get("user", "")))


@dataclass
class JobAggregate:
    jobid: str
    metric: str
    t0: int
    t1: int
    dec: list                   # 11 quantile points, d0=min .. d10=max
    avg: float
    severity: float
    completeness: float

    def to_record(self) -> dict:
        rec = {"topic": f"/jobs/agg/{self.jobid}", "jobid": self.jobid,
               "metric": self.metric, "t0": self.t0, "t1": self.t1}
        for i, d in enumerate(self.dec):
            rec[f"d{i}"] = d
        rec["avg"] = self.avg
        rec["severity"] = round(self.severity, 6)
        rec["completeness"] = round(self.completeness, 6)
        return rec


def aggregate_job(job: JobRecord, metric: str, window: tuple[int, int],
                  view: DataView, sev_spec: SeveritySpec) -> JobAggregate | None:
    """Deciles/average/severity of one metric across a job's nodes in [t0,t1).

    Values from all nodes are pooled unweighted. Nodes with no readings count
    against ``completeness`` instead of suppressing the aggregate.
    """
    t0, t1 = window
    if not job.overlaps(t0, t1):
        raise MetricError(f"job {job.jobid} does not overlap window")
    values: list[int] = []
    reporting = 0
    for node in job.nodes:
        _, vals = view.window_values(f"{node}/{metric}", t0, t1 - 1)
        if vals:
            reporting += 1
            values.extend(vals)
    if not values:
        return None
    completeness = reporting / len(job.nodes)
    if completeness < 0.5:
        logger.warning("job %s metric %s: only %d/%d nodes reporting",
                       job.jobid, metric, reporting, len(job.nodes))
    return JobAggregate(jobid=job.jobid, metric=metric, t0=t0, t1=t1,
                        dec=deciles(values), avg=sum(values) / len(values),
                        severity=severity(values, sev_spec),
                        completeness=completeness)


def assign_job_owner(job: JobRecord, islands=None) -> str:
    """Island owning the job: strict plurality of nodes, ties to lowest id.

    The island is the second topic label (``/system/island/node``).
    """
    counts: dict[str, int] = {}
    for node in job.nodes:
        labels = node.split("/")
        if len(labels) < 3:
            raise MetricError(f"node topic {node!r} has no island level")
        island = labels[2]
        counts[island] = counts.get(island, 0) + 1
    if islands is not None:
        counts = {i: c for i, c in counts.items() if i in set(islands)} or counts
    best = max(counts.values())
    return min(i for i, c in counts.items() if c == best)


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------

def smooth_series(view: DataView, topic: str, now: int, window_s: int,
                  label: str) -> list[Reading]:
    """avg/min/max of one topic over the trailing window, as new readings.

    Output topics suffix the final label: ``.../temp`` becomes
    ``.../temp.avg5m`` etc. Aggregates are computed from raw data, never
    from other aggregates.
    """
    ts, vals = view.window_values(topic, now - window_s * NS_PER_S + 1, now)
    if not vals:
        return []
    stats = {"avg": round_half_up(sum(vals) / len(vals)),
             "min": min(vals), "max": max(vals)}
    base = parse_topic(topic)
    out = []
    for stat, value in stats.items():
        derived = Topic(base.labels[:-1] + (f"{base.labels[-1]}.{stat}{label}",))
        out.append(Reading(derived, now, int(value)))
    return out


# ---------------------------------------------------------------------------
# JSONL job feed + operator factories
# ---------------------------------------------------------------------------

class JobWatcher:
    """Tails a JSONL job feed (the scheduler-adapter stand-in).

    Start records carry end_ts=0; a completion record replaces the entry.
    """

    def __init__(self, path: str):
        self.path = path
        self._offset = 0
        self.jobs: dict[str, JobRecord] = {}
        self.bad_lines = 0

    def poll(self) -> list[JobRecord]:
        if not os.path.exists(self.path):
            return []
        new: list[JobRecord] = []
        with open(self.path, "r", encoding="utf-8") as fh:
            fh.seek(self._offset)
            chunk = fh.read()
        if not chunk:
            return []
        lines = chunk.splitlines(keepends=True)
        consumed = 0
        for line in lines:
            if not line.endswith("\n"):
                break  # partial append; retry next poll
            consumed += len(line)
            line = line.strip()
            if not line:
                continue
            try:
                rec = JobRecord.from_json(line)
            except (ValueError, KeyError):
                self.bad_lines += 1
                continue
            self.jobs[rec.jobid] = rec
            new.append(rec)
        self._offset += consumed
        return new

    def active(self, t0: int, t1: int) -> list[JobRecord]:
        return [j for j in self.jobs.values() if j.overlaps(t0, t1)]


def make_derived_metrics_unit(name: str, specs: list[DerivedMetricSpec],
                              interval_ms: int = 120_000,
                              placement: str = "in-band") -> OperatorUnit:
    inputs = sorted({s for spec in specs for s in spec.expr.sensors()})
    outputs = [spec.out_topic for spec in specs]

    def body(view: DataView, now: int) -> list[Reading]:
        out = []
        for spec in specs:
            r = derive_metric(spec, view, now)
            if r is not None:
                out.append(r)
        return out

    return OperatorUnit(name=name, kind="derived-metrics", inputs=inputs,
                        outputs=outputs, interval_ms=interval_ms, body=body,
                        placement=placement)


def make_job_aggregator_unit(name: str, watcher: JobWatcher,
                             metrics: list[tuple[str, SeveritySpec]],
                             write_record, island: str | None = None,
                             interval_ms: int = 120_000) -> OperatorUnit:
    """Aggregates each metric for jobs owned by this agent's island.

    ``write_record(dict)`` routes finished aggregates to the long-term sink.
    With ``island=None`` every job is aggregated (single-agent deployments).
    """

    def body(view: DataView, now: int) -> list[Reading]:
        watcher.poll()
        interval_ns = interval_ms * 1_000_000
        t0, t1 = now - interval_ns, now
        for job in watcher.active(t0, t1):
            if island is not None and assign_job_owner(job) != island:
                continue
            for metric, sev_spec in metrics:
                agg = aggregate_job(job, metric, (t0, t1), view, sev_spec)
                if agg is not None:
                    write_record(agg.to_record())
        return []

    return OperatorUnit(name=name, kind="job-aggregator", inputs=["/jobs/feed"],
                        outputs=[], interval_ms=interval_ms, body=body)


def make_smoothing_unit(name: str, topics: list[str], window_s: int, label: str,
                        interval_ms: int | None = None) -> OperatorUnit:
    interval_ms = interval_ms or window_s * 1000

    def body(view: DataView, now: int) -> list[Reading]:
        out: list[Reading] = []
        for topic in topics:
            out.extend(smooth_series(view, topic, now, window_s, label))
        return out

    outputs = []
    for topic in topics:
        base = parse_topic(topic)
        for stat in ("avg", "min", "max"):
            outputs.append(str(Topic(base.labels[:-1] +
                                     (f"{base.labels[-1]}.{stat}{label}",))))
    return OperatorUnit(name=name, kind="smoothing", inputs=list(topics),
                        outputs=outputs, interval_ms=interval_ms, body=body)
