"""Correlation-ordered window compression into compact block signatures.

A fitted model carries per-sensor bounds and a correlation-chain ordering.
Transforming a window of W samples x D sensors yields 2B coefficients: the
ordered sensors are split into B contiguous groups and each group's
time series collapses to a (level, trend) pair, with level in [0, 1].
"""

from __future__ import annotations

import numpy as np

from .base import ParamsMixin, check_matrix, format_float

FORMAT_NAME = "odapipe-cs"
FORMAT_VERSION = 1


class CorrelationSmoother(ParamsMixin):
    """fit/transform estimator producing block signatures from sensor windows.

    Parameters
    ----------
    n_blocks : number of coefficient pairs B (output dimension is 2B)
    window : samples per transformed window W
    sensor_names : optional labels stored with the model file
    """

    def __init__(self, n_blocks: int = 20, window: int = 6, sensor_names=None):
        self.n_blocks = n_blocks
        self.window = window
        self.sensor_names = sensor_names
        self.lo_: np.ndarray | None = None
        self.hi_: np.ndarray | None = None
        self.order_: np.ndarray | None = None
        self.n_features_: int = 0

    # ------------------------------------------------------------------ fit --

    def fit(self, X, y=None) -> "CorrelationSmoother":
        """Learn bounds and the greedy correlation-chain ordering from history.

        X is the raw T x D history matrix. Constant sensors go to the end of
        the chain in input order; their bounds widen by one unit on each side
        so normalization stays defined.
        """
        X = check_matrix(X, "X")
        t, d = X.shape
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if d < self.n_blocks:
            raise ValueError(f"{d} sensors cannot fill {self.n_blocks} blocks")
        if self.sensor_names is not None and len(self.sensor_names) != d:
            raise ValueError("sensor_names length does not match data")
        lo = X.min(axis=0)
        hi = X.max(axis=0)
        constant = hi == lo
        if constant.all():
            raise ValueError("degenerate training data: every sensor is constant")
        lo = np.where(constant, lo - 1.0, lo)
        hi = np.where(constant, hi + 1.0, hi)
        self.order_ = np.array(self._chain_order(X, ~constant), dtype=np.int64)
        self.lo_, self.hi_ = lo, hi
        self.n_features_ = d
        return self

    @staticmethod
    def _chain_order(X: np.ndarray, active: np.ndarray) -> list[int]:
        """Greedy chain: start at the sensor with the highest mean |r| to all
        others, then repeatedly append the unvisited sensor most correlated
        with the current tail. Ties resolve to the lowest column index.
        """
        idx = np.flatnonzero(active)
        if len(idx) == 1:
            chain = [int(idx[0])]
        else:
            r = np.abs(np.corrcoef(X[:, idx].T))
            np.fill_diagonal(r, 0.0)
            mean_r = r.sum(axis=1) / (len(idx) - 1)
            chain_local = [int(np.argmax(mean_r))]
            remaining = set(range(len(idx))) - {chain_local[0]}
            while remaining:
                tail = chain_local[-1]
                cand = sorted(remaining)
                best = cand[int(np.argmax(r[tail, cand]))]
                chain_local.append(best)
                remaining.discard(best)
            chain = [int(idx[i]) for i in chain_local]
        chain.extend(int(i) for i in np.flatnonzero(~active))
        return chain

    # ------------------------------------------------------------ transform --

    @staticmethod
    def block_sizes(d: int, b: int) -> list[int]:
        """Contiguous group sizes differing by at most one, larger groups first."""
        base, rem = divmod(d, b)
        return [base + 1] * rem + [base] * (b - rem)

    def transform(self, X) -> np.ndarray:
        """(W, D) window -> (2B,) signature; (n, W, D) -> (n, 2B)."""
        self._check_fitted("order_")
        X = check_matrix(X, "X", allow_3d=True)
        if X.ndim == 2:
            return self._signature(X)
        return np.stack([self._signature(w) for w in X])

    def _signature(self, window: np.ndarray) -> np.ndarray:
        w, d = window.shape
        if d != self.n_features_:
            raise ValueError(f"window has {d} sensors, model has {self.n_features_}")
        if w != self.window:
            raise ValueError(f"window has {w} samples, model wants {self.window}")
        norm = np.clip((window - self.lo_) / (self.hi_ - self.lo_), 0.0, 1.0)
        ordered = norm[:, self.order_]
        sizes = self.block_sizes(d, self.n_blocks)
        out = np.empty(2 * self.n_blocks)
        if w > 1:
            x = np.linspace(0.0, 1.0, w)
            xc = x - x.mean()
            var_x = float(xc @ xc)
        start = 0
        for k, size in enumerate(sizes):
            series = ordered[:, start:start + size].mean(axis=1)
            start += size
            out[2 * k] = series.mean()
            if w > 1:
                # least-squares slope against time normalized to [0, 1]
                out[2 * k + 1] = float(xc @ (series - series.mean())) / var_x
            else:
                out[2 * k + 1] = 0.0
        return out

    def sliding_signatures(self, X, stride: int = 1) -> np.ndarray:
        """All length-W windows of a T x D history, transformed: (n, 2B)."""
        X = check_matrix(X, "X")
        t = X.shape[0]
        if t < self.window:
            raise ValueError("history shorter than one window")
        starts = range(0, t - self.window + 1, stride)
        return np.stack([self._signature(X[s:s + self.window]) for s in starts])

    # ------------------------------------------------------------------- io --

    def save(self, path: str) -> None:
        """Versioned text format: header then one line per sensor with its
        bounds and chain rank; byte-stable for identical training inputs."""
        self._check_fitted("order_")
        rank_of = np.empty(self.n_features_, dtype=np.int64)
        rank_of[self.order_] = np.arange(self.n_features_)
        names = self.sensor_names or [f"s{i}" for i in range(self.n_features_)]
        lines = [f"{FORMAT_NAME} {FORMAT_VERSION}",
                 f"blocks {self.n_blocks}",
                 f"window {self.window}"]
        for i in range(self.n_features_):
            lines.append(f"sensor {names[i]} {format_float(self.lo_[i])} "
                         f"{format_float(self.hi_[i])} {rank_of[i]}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "CorrelationSmoother":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        head = lines[0].split()
        if head[0] != FORMAT_NAME or int(head[1]) != FORMAT_VERSION:
            raise ValueError(f"{path}: not a {FORMAT_NAME} v{FORMAT_VERSION} file")
        b = int(lines[1].split()[1])
        w = int(lines[2].split()[1])
        names, lo, hi, rank = [], [], [], []
        for ln in lines[3:]:
            parts = ln.split()
            if parts[0] != "sensor" or len(parts) != 5:
                raise ValueError(f"{path}: bad sensor line {ln!r}")
            names.append(parts[1])
            lo.append(float(parts[2]))
            hi.append(float(parts[3]))
            rank.append(int(parts[4]))
        model = cls(n_blocks=b, window=w, sensor_names=names)
        model.lo_ = np.array(lo)
        model.hi_ = np.array(hi)
        model.n_features_ = len(names)
        order = np.empty(len(names), dtype=np.int64)
        order[np.array(rank, dtype=np.int64)] = np.arange(len(names))
        model.order_ = order
        return model
