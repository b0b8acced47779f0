"""Battery-backed load shaping: hide a household's demand pattern at minimal cost.

The package schedules the grid draw of a home battery so that the profile a
smart meter reports stays close to a per-tariff-period target while the
energy bill is kept in check, balancing the two with a single weight.
"""

from .kkt import KktReport, WaterfillView, check, recover_targets, waterfill_view
from .model import (
    BatterySpec,
    Duals,
    Instance,
    InvalidInstanceError,
    LoadProfile,
    Solution,
    SolveStatus,
    Tariff,
    TargetMode,
    ValidationIssue,
    best_targets,
    cost,
    feasible_request_interval,
    objective_value,
    privacy,
    soc_trajectory,
    validate,
    validation_issues,
)
from .oracle import BudgetExceeded, GridSpec, OracleResult, brute_force, refine
from .pipeline import solve_instance
from .presets import UnknownPreset, preset_battery, preset_tariff
from .qp import QpForm, build
from .solver import SolveResult, SolverSettings, polish, solve
from .sweep import CapacitySweepPoint, FrontierPoint, alpha_sweep, capacity_sweep

__version__ = "0.1.0"

__all__ = [
    "BatterySpec",
    "BudgetExceeded",
    "CapacitySweepPoint",
    "Duals",
    "FrontierPoint",
    "GridSpec",
    "Instance",
    "InvalidInstanceError",
    "KktReport",
    "LoadProfile",
    "OracleResult",
    "QpForm",
    "Solution",
    "SolveResult",
    "SolveStatus",
    "SolverSettings",
    "Tariff",
    "TargetMode",
    "UnknownPreset",
    "ValidationIssue",
    "WaterfillView",
    "alpha_sweep",
    "best_targets",
    "brute_force",
    "build",
    "capacity_sweep",
    "check",
    "cost",
    "feasible_request_interval",
    "objective_value",
    "polish",
    "preset_battery",
    "preset_tariff",
    "privacy",
    "recover_targets",
    "refine",
    "soc_trajectory",
    "solve",
    "solve_instance",
    "validate",
    "validation_issues",
    "waterfill_view",
    "__version__",
]
