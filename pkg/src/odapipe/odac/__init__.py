"""Predictive cooling control: signature transform, regressor, controller."""

from .cs import CorrelationSmoother
from .forest import TemperatureForest
from .control import ControlPolicy, update_set_temperature, KnobWriter
from .evaluate import NrmseReport, nrmse_eval
from .health import AlertRule, HealthChecker

__all__ = [
    "CorrelationSmoother", "TemperatureForest", "ControlPolicy",
    "update_set_temperature", "KnobWriter", "NrmseReport", "nrmse_eval",
    "AlertRule", "HealthChecker",
]
