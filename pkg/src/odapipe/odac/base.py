"""Estimator plumbing: sklearn-protocol parameters without the sklearn import.

The models here duck-type as scikit-learn estimators (fit/transform/predict
plus get_params/set_params), so they compose with Pipeline and clone() when
sklearn is around, while the daemons stay free of its import cost.
"""

from __future__ import annotations

import inspect

import numpy as np


class NotFittedError(RuntimeError):
    pass


class ParamsMixin:
    """get_params/set_params over the constructor signature, sklearn-style."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [p.name for p in sig.parameters.values()
                if p.name != "self" and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD)]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"invalid parameter {name!r} for {type(self).__name__}")
            setattr(self, name, value)
        return self

    def _check_fitted(self, attr: str) -> None:
        if getattr(self, attr, None) is None:
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")


def check_matrix(X, name: str = "X", allow_3d: bool = False) -> np.ndarray:
    """Validate numeric array input; returns a float64 ndarray."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.ndim == 3 and not allow_3d:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.ndim not in (2, 3):
        raise ValueError(f"{name} has unsupported shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_vector(y, n: int, name: str = "y") -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim != 1 or len(arr) != n:
        raise ValueError(f"{name} must be a vector of length {n}, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def format_float(x: float) -> str:
    """Shortest round-trip decimal text; keeps model files byte-stable."""
    return repr(float(x))
