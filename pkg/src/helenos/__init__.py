"""Distributed transactional inbox benchmark harness."""

__version__ = "0.1.0"

from .config import ScenarioConfig, TaskType, load_scenario
from .driver import RunArtifacts, run_in_process, run_scenario
from .wire import Scheme

__all__ = [
    "RunArtifacts",
    "ScenarioConfig",
    "Scheme",
    "TaskType",
    "load_scenario",
    "run_in_process",
    "run_scenario",
    "__version__",
]
