"""In-band pipeline units: window signatures and temperature prediction.

Per monitored component group (one CPU socket, one GPU), a signature unit
compresses the last W cached samples of its input sensors into 2B
coefficient sensors (local only), and a regressor unit turns those into one
published prediction of the maximum expected temperature over the horizon.
"""

from __future__ import annotations

import logging

import numpy as np

from ..core import Reading, SensorMeta, parse_topic
from ..framework import DataView, OperatorUnit
from ..odav import round_half_up
from .cs import CorrelationSmoother
from .forest import TemperatureForest

logger = logging.getLogger(__name__)

MILLI = 1000


def signature_topics(base: str, n_blocks: int) -> list[str]:
    out = []
    for k in range(n_blocks):
        out.append(f"{base}/sig-l{k:02d}")
        out.append(f"{base}/sig-t{k:02d}")
    return out


def build_window(view: DataView, sensors: list[str], width: int) -> tuple[np.ndarray, bool]:
    """Assemble the last ``width`` samples per sensor into a (W, D) matrix.

    Sensors with fewer cached samples repeat their most recent value into the
    gaps; a sensor with no data at all contributes NaN and taints the window
    (the transform maps NaN columns to mid-range downstream).
    """
    cols = []
    tainted = False
    for sensor in sensors:
        _, vals = view.last_values(sensor, width)
        if not vals:
            cols.append(np.full(width, np.nan))
            tainted = True
        elif len(vals) < width:
            pad = np.full(width - len(vals), float(vals[-1]))
            cols.append(np.concatenate([pad, np.asarray(vals, dtype=np.float64)]))
        else:
            cols.append(np.asarray(vals, dtype=np.float64))
    return np.column_stack(cols), tainted


def make_signature_unit(name: str, model: CorrelationSmoother, base: str,
                        sensors: list[str],
                        interval_ms: int = 60_000,
                        declare_meta=None) -> OperatorUnit:
    """Signature unit for one component group rooted at ``base``.

    ``sensors`` are the absolute input topics in the model's column order.
    Outputs are milli-scaled coefficient sensors under ``base`` and stay
    node-local.
    """
    outputs = signature_topics(base, model.n_blocks)
    if declare_meta is not None:
        for topic in outputs:
            declare_meta(SensorMeta(parse_topic(topic), interval_ms, local_only=True))
    stats = {"tainted": 0}

    def body(view: DataView, now: int) -> list[Reading]:
        window, tainted = build_window(view, sensors, model.window)
        if tainted:
            stats["tainted"] += 1
            nan_cols = np.isnan(window).any(axis=0)
            # absent sensors pin to mid-range after normalization
            mid = (model.lo_ + model.hi_) / 2.0
            window[:, nan_cols] = np.broadcast_to(mid, window.shape)[:, nan_cols]
        sig = model.transform(window)
        return [Reading(parse_topic(topic), now, round_half_up(v * MILLI))
                for topic, v in zip(outputs, sig)]

    unit = OperatorUnit(name=name, kind="signature", inputs=list(sensors),
                        outputs=outputs, interval_ms=interval_ms, body=body,
                        placement="in-band")
    unit.signature_stats = stats
    return unit


def make_regressor_unit(name: str, forest: TemperatureForest, base: str,
                        out_topic: str, n_blocks: int,
                        interval_ms: int = 60_000, declare_meta=None,
                        train=None) -> OperatorUnit:
    """Prediction unit reading the signature sensors under ``base``.

    Publishes one milli-degree prediction of the maximum expected component
    temperature over the model's horizon. Ticks with incomplete signatures
    are skipped and counted.
    """
    inputs = signature_topics(base, n_blocks)
    if declare_meta is not None:
        declare_meta(SensorMeta(parse_topic(out_topic), interval_ms, local_only=False))
    stats = {"skipped": 0}

    def body(view: DataView, now: int) -> list[Reading]:
        features = np.empty(len(inputs))
        for i, topic in enumerate(inputs):
            got = view.latest(topic)
            if got is None:
                stats["skipped"] += 1
                return []
            features[i] = got[1] / MILLI
        pred = forest.predict_milli(features)
        return [Reading(parse_topic(out_topic), now, pred)]

    unit = OperatorUnit(name=name, kind="regressor", inputs=inputs,
                        outputs=[out_topic], interval_ms=interval_ms, body=body,
                        placement="in-band", train=train)
    unit.regressor_stats = stats
    return unit
