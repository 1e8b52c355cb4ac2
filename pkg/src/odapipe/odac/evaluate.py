"""Prediction-quality evaluation: range-normalized RMSE, globally and per band."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class NrmseReport:
    nrmse: float
    bands: list[tuple[int, float, int]]   # (band lower edge, nrmse, population)

    def lines(self) -> list[str]:
        out = [f"global nrmse {self.nrmse:.4f}"]
        for lo, v, n in self.bands:
            out.append(f"band {lo} nrmse {v:.4f} n {n}")
        return out


def nrmse_eval(predictions, truths, band_width: int) -> NrmseReport:
    """RMSE normalized by the observed truth range, plus per-band breakdown.

    Samples are bucketed by truth value into ``band_width``-wide bands; each
    band's RMSE is normalized by the same global range, so bands compare
    directly. Empty bands are omitted.
    """
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("predictions and truths must be equal-length vectors")
    if len(p) < 2:
        raise ValueError("need at least 2 samples")
    if band_width <= 0:
        raise ValueError("band width must be positive")
    spread = float(t.max() - t.min())
    if spread == 0:
        raise ValueError("degenerate truths: all values equal")
    err = p - t
    global_nrmse = math.sqrt(float(np.mean(err * err))) / spread
    keys = np.floor_divide(t, band_width).astype(np.int64)
    bands = []
    for key in np.unique(keys):
        mask = keys == key
        rmse = math.sqrt(float(np.mean(err[mask] * err[mask])))
        bands.append((int(key * band_width), rmse / spread, int(mask.sum())))
    return NrmseReport(nrmse=global_nrmse, bands=bands)
