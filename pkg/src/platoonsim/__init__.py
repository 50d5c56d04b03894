"""Deterministic multi-vehicle longitudinal MPC simulator.

ACC, CACC, and platooning controllers over a lossy V2V broadcast channel,
with post-run gap-error / speed-difference / string-stability metrics.
"""

from .engine import ScenarioConfig, SimTrace, config_from_dict, run
from .metrics import MetricsReport, build_report

__version__ = "0.1.0"

__all__ = [
    "MetricsReport",
    "ScenarioConfig",
    "SimTrace",
    "build_report",
    "config_from_dict",
    "run",
    "__version__",
]
