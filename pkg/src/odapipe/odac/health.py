"""Alert rules over live sensor values, with argv-style command actions.

A rule fires once when a sensor enters violation and again only after it
recovers and re-enters; a persisting violation never spams. Command actions
run without a shell; templates substitute {topic}, {value} and {threshold}.
"""

from __future__ import annotations

import logging
import subprocess
from dataclasses import dataclass, field

from ..framework import DataView, HealthEvent, OperatorUnit

logger = logging.getLogger(__name__)

_FORBIDDEN = set(";|&$`<>\n\"'\\")


def validate_command_template(argv: list[str]) -> list[str]:
    """Reject shell metacharacters; the command runs argv-style regardless."""
    for token in argv:
        stripped = token.replace("{topic}", "").replace("{value}", "") \
                        .replace("{threshold}", "")
        bad = _FORBIDDEN.intersection(stripped)
        if bad:
            raise ValueError(f"command token {token!r} contains forbidden "
                             f"characters {sorted(bad)}")
    return argv


@dataclass
class AlertRule:
    """Condition on the latest reading of each bound topic."""

    name: str
    topics: list[str]
    op: str                       # ">" or "<"
    threshold: int
    command: list[str] | None = None   # argv template; None = log only

    def __post_init__(self) -> None:
        if self.op not in (">", "<"):
            raise ValueError(f"unknown condition {self.op!r}")
        if not self.topics:
            raise ValueError(f"rule {self.name!r} bound to no topics")
        if self.command is not None:
            validate_command_template(self.command)

    def violated(self, value: int) -> bool:
        return value > self.threshold if self.op == ">" else value < self.threshold


def run_command(argv: list[str]) -> None:
    subprocess.run(argv, check=False, timeout=10)


class HealthChecker:
    """Evaluates alert rules each tick, deduplicating persisting violations."""

    def __init__(self, rules: list[AlertRule], record_health, runner=run_command):
        self.rules = rules
        self.record_health = record_health
        self.runner = runner
        self._active: set[tuple[str, str]] = set()
        self.action_failures = 0

    def check(self, view: DataView, now: int) -> list[HealthEvent]:
        events = []
        for rule in self.rules:
            for topic in rule.topics:
                got = view.latest(topic)
                key = (rule.name, topic)
                if got is None:
                    continue
                if rule.violated(got[1]):
                    if key in self._active:
                        continue
                    self._active.add(key)
                    event = HealthEvent(now, rule.name, "alert",
                                        f"{topic} value {got[1]} {rule.op} "
                                        f"{rule.threshold}")
                    events.append(event)
                    self.record_health(event)
                    if rule.command is not None:
                        argv = [tok.replace("{topic}", topic)
                                   .replace("{value}", str(got[1]))
                                   .replace("{threshold}", str(rule.threshold))
                                for tok in rule.command]
                        try:
                            self.runner(argv)
                        except Exception as e:
                            self.action_failures += 1
                            logger.warning("alert action for %s failed: %s",
                                           rule.name, e)
                else:
                    self._active.discard(key)
        return events


def make_health_checker_unit(name: str, checker: HealthChecker,
                             interval_ms: int = 60_000) -> OperatorUnit:
    inputs = sorted({t for rule in checker.rules for t in rule.topics})

    def body(view: DataView, now: int):
        checker.check(view, now)
        return []

    return OperatorUnit(name=name, kind="health-checker", inputs=inputs,
                        outputs=[], interval_ms=interval_ms, body=body)
