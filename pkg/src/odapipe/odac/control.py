"""Inlet-water set-temperature control from predicted component temperatures.

Each control tick counts the components whose predicted temperature exceeds
their hot threshold and nudges the set temperature proportionally to how far
that fraction sits from the allowed one:

    t_new = t + (t_max - t_min) * (p_allowed - p_hot)        [degrees C]

clamped to [t_min, t_max]. Any prediction at or past its critical threshold
drops the setting straight to t_min. The hot comparison is strict and the
critical one is not, which errs on the cooling side.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from ..core import Reading, parse_topic
from ..framework import DataView, HealthEvent, OperatorUnit

logger = logging.getLogger(__name__)

KNOB_FAILURE_THRESHOLD = 3


@dataclass(frozen=True)
class ControlPolicy:
    """Thresholds in milli-degrees, set-temperature band in degrees C."""

    t_hot: int                     # default per-component hot threshold (milli-C)
    t_crit: int                    # default critical threshold (milli-C)
    p_th: float                    # allowed hot fraction, in (0, 1)
    t_min_c: float
    t_max_c: float

    def __post_init__(self) -> None:
        if not (0 < self.p_th < 1):
            raise ValueError("allowed hot fraction must be in (0,1)")
        if self.t_hot >= self.t_crit:
            raise ValueError("hot threshold must sit below the critical one")
        if self.t_min_c >= self.t_max_c:
            raise ValueError("t_min must be below t_max")
        if min(self.t_hot, self.t_crit) <= 0 or self.t_min_c <= 0:
            raise ValueError("temperatures must be positive")


def update_set_temperature(policy: ControlPolicy, t_rcu_c: float, predictions,
                           hot_thresholds=None, crit_thresholds=None) -> float:
    """One feedback step; returns the new set temperature in degrees C.

    ``predictions`` are per-component milli-degrees. Per-component thresholds
    default to the policy values.
    """
    preds = list(predictions)
    if not preds:
        raise ValueError("no predictions available")
    n = len(preds)
    hots = list(hot_thresholds) if hot_thresholds is not None else [policy.t_hot] * n
    crits = list(crit_thresholds) if crit_thresholds is not None else [policy.t_crit] * n
    if len(hots) != n or len(crits) != n:
        raise ValueError("threshold lists must match predictions")
    if any(p >= c for p, c in zip(preds, crits)):
        return policy.t_min_c
    p_hot = sum(1 for p, h in zip(preds, hots) if p > h) / n
    t_new = t_rcu_c + (policy.t_max_c - policy.t_min_c) * (policy.p_th - p_hot)
    return min(policy.t_max_c, max(policy.t_min_c, t_new))


class KnobWriter:
    """Applies set-temperature writes to the plant and logs every change.

    ``backend(t_milli) -> bool`` performs the actual write (in-process plant
    call or a KNOB frame over the wire). Writes outside the policy band are
    rejected here, before anything reaches the plant.
    """

    def __init__(self, backend, policy: ControlPolicy):
        self.backend = backend
        self.policy = policy
        self.log: list[tuple[int, float, float]] = []    # (ts, old, new)
        self.failures = 0
        self._last: float | None = None

    def apply(self, now: int, t_rcu_c: float) -> bool:
        if not (self.policy.t_min_c <= t_rcu_c <= self.policy.t_max_c):
            raise ValueError(f"set temperature {t_rcu_c} outside "
                             f"[{self.policy.t_min_c}, {self.policy.t_max_c}]")
        ok = bool(self.backend(round(t_rcu_c * 1000)))
        if ok:
            self.log.append((now, self._last if self._last is not None else t_rcu_c,
                             t_rcu_c))
            self._last = t_rcu_c
        return ok


@dataclass
class ComponentBinding:
    """One cooled component: its prediction sensor, real sensor, thresholds."""

    pred_topic: str
    real_topic: str | None
    t_hot: int
    t_crit: int


@dataclass
class ControlState:
    t_rcu_c: float
    knob_failures: int = 0
    missing_ticks: int = 0
    trace: list = field(default_factory=list)   # (now, t_rcu, p_hot, critical)


def make_cooling_control_unit(name: str, policy: ControlPolicy,
                              components: list[ComponentBinding],
                              knob: KnobWriter, record_health,
                              out_topic: str | None = None,
                              interval_ms: int = 60_000,
                              initial_t_rcu: float | None = None) -> OperatorUnit:
    """Out-of-band controller unit for one rack cooling unit.

    Consumes the latest prediction per component from the agent's cache. The
    critical override also considers the latest real temperature when a real
    sensor is bound: a component already measured at or past critical must
    force t_min even if its prediction lags.
    """
    state = ControlState(t_rcu_c=initial_t_rcu if initial_t_rcu is not None
                         else policy.t_min_c)
    unit_inputs = sorted({c.pred_topic for c in components}
                         | {c.real_topic for c in components if c.real_topic})

    def body(view: DataView, now: int) -> list[Reading]:
        preds, hots, crits = [], [], []
        critical = False
        for comp in components:
            got = view.latest(comp.pred_topic)
            if got is None:
                continue
            pred = got[1]
            if comp.real_topic is not None:
                real = view.latest(comp.real_topic)
                if real is not None and real[1] >= comp.t_crit:
                    critical = True
            preds.append(pred)
            hots.append(comp.t_hot)
            crits.append(comp.t_crit)
        if not preds:
            state.missing_ticks += 1
            record_health(HealthEvent(now, name, "control-no-data",
                                      "no predictions available this tick"))
            return []
        if critical:
            t_new = policy.t_min_c
            p_hot = 1.0
        else:
            t_new = update_set_temperature(policy, state.t_rcu_c, preds, hots, crits)
            p_hot = sum(1 for p, h in zip(preds, hots) if p > h) / len(preds)
            critical = any(p >= c for p, c in zip(preds, crits))
        try:
            ok = knob.apply(now, t_new)
        except Exception as e:
            ok = False
            logger.warning("%s: knob write failed: %s", name, e)
        if ok:
            state.knob_failures = 0
            # Eq. right-hand side uses the last commanded value, which is
            # self-consistent under actuator lag.
            state.t_rcu_c = t_new
        else:
            state.knob_failures += 1
            if state.knob_failures == KNOB_FAILURE_THRESHOLD:
                record_health(HealthEvent(now, name, "knob-failure",
                                          f"{state.knob_failures} consecutive knob failures"))
        state.trace.append((now, state.t_rcu_c, p_hot, critical))
        if out_topic is not None and ok:
            return [Reading(parse_topic(out_topic), now, round(state.t_rcu_c * 1000))]
        return []

    unit = OperatorUnit(name=name, kind="cooling-control", inputs=unit_inputs,
                        outputs=[out_topic] if out_topic else [],
                        interval_ms=interval_ms, body=body)
    unit.control_state = state   # exposed for status and scenario recording
    return unit
