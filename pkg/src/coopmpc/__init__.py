"""Receding-horizon control of cooperative object transport by mobile manipulators."""

__version__ = "0.1.0"

from .closed_loop import (  # noqa: E402
    PRESETS,
    InitialInfeasibleError,
    Scenario,
    ScenarioError,
    TrajectoryLog,
    monitor_convergence,
    monitor_value_function,
    run,
    scenario1,
    scenario2,
)
from .constraints import EllipsoidRegion, Workspace, sphere  # noqa: E402
from .coupled_dynamics import CoupledSystem, ObjectModel  # noqa: E402
from .io import ConfigError, load_scenario, write_artifacts  # noqa: E402
from .kernels import BACKEND  # noqa: E402
from .ocp import OcpConfig, SolveResult, build_ocp, solve  # noqa: E402
from .se3_kinematics import AgentModel, EulerAngles  # noqa: E402

__all__ = [
    "AgentModel", "BACKEND", "ConfigError", "CoupledSystem", "EllipsoidRegion", "EulerAngles",
    "InitialInfeasibleError", "ObjectModel", "OcpConfig", "PRESETS", "Scenario", "ScenarioError",
    "SolveResult", "TrajectoryLog", "Workspace", "build_ocp", "load_scenario", "monitor_convergence",
    "monitor_value_function", "run", "scenario1", "scenario2", "solve", "sphere", "write_artifacts",
    "__version__",
]
