"""Parameter sweeps: the privacy-cost frontier and battery-capacity scans."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .model import BatterySpec, Instance, SolveStatus, Solution
from .pipeline import solve_instance, warm_vectors
from .solver import SolverSettings

# Point status beyond the solver's own states.
UNVERIFIED = "unverified"  # solver claimed optimal but the optimality check failed
ERROR = "error"            # the solve raised; the sweep carries on


@dataclass(frozen=True)
class FrontierPoint:
    """One scalarization weight on the privacy-cost trade-off curve.

    status is "optimal" only when the solve converged and the independent
    optimality check passed; such points are the frontier proper, anything
    else is reported but excluded from monotonicity claims.
    """

    alpha: float
    privacy: float
    cost: float
    objective: float
    status: str
    note: Optional[str] = None


@dataclass(frozen=True)
class CapacitySweepPoint:
    """Optimum at one battery size, with peaks tied to half the capacity."""

    b_max: float
    peak_kw: float       # both charge and discharge peak
    privacy: float
    cost: float
    objective: float
    status: str
    note: Optional[str] = None


def _point_status(solution: Solution) -> str:
    if solution.status is SolveStatus.OPTIMAL and solution.kkt is not None and solution.kkt.verdict:
        return SolveStatus.OPTIMAL.value
    if solution.status is SolveStatus.OPTIMAL:
        return UNVERIFIED
    return solution.status.value


def alpha_sweep(
    instance: Instance,
    alphas: Sequence[float],
    settings: Optional[SolverSettings] = None,
    warm_start: bool = True,
) -> list[FrontierPoint]:
    """Solve the instance once per weight, warm-starting consecutive solves.

    ``alphas`` must be sorted and inside [0, 1]. A failing point is emitted
    with its error note instead of aborting the sweep; warm starts never
    change what a point converges to (each solve still meets the full
    tolerance on its own), only how fast.
    """
    alphas = [float(a) for a in alphas]
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValueError(f"alphas must lie in [0, 1], got {alphas}")
    if sorted(alphas) != alphas:
        raise ValueError("alphas must be sorted ascending")

    points: list[FrontierPoint] = []
    warm = None
    for a in alphas:
        point_instance = replace(instance, alpha=a)
        try:
            solution = solve_instance(point_instance, settings=settings, warm=warm)
        except Exception as exc:  # propagate per-point, keep sweeping
            points.append(
                FrontierPoint(a, float("nan"), float("nan"), float("nan"), ERROR, note=str(exc))
            )
            warm = None
            continue
        points.append(
            FrontierPoint(
                alpha=a,
                privacy=solution.privacy,
                cost=solution.cost,
                objective=solution.objective,
                status=_point_status(solution),
            )
        )
        if warm_start:
            warm = warm_vectors(point_instance, solution)
    return points


def capacity_sweep(
    instance: Instance,
    capacities: Sequence[float],
    alpha: float,
    settings: Optional[SolverSettings] = None,
    warm_start: bool = True,
) -> list[CapacitySweepPoint]:
    """Scan battery sizes with charge and discharge peaks set to half the capacity."""
    if any(c < 0 for c in capacities):
        raise ValueError(f"capacities must be >= 0, got {list(capacities)}")
    points: list[CapacitySweepPoint] = []
    warm = None
    for c in capacities:
        c = float(c)
        battery = BatterySpec(capacity_kwh=c, charge_peak_kw=c / 2.0, discharge_peak_kw=c / 2.0)
        point_instance = replace(instance, battery=battery, alpha=float(alpha))
        try:
            solution = solve_instance(point_instance, settings=settings, warm=warm)
        except Exception as exc:
            points.append(
                CapacitySweepPoint(
                    c, c / 2.0, float("nan"), float("nan"), float("nan"), ERROR, note=str(exc)
                )
            )
            warm = None
            continue
        points.append(
            CapacitySweepPoint(
                b_max=c,
                peak_kw=c / 2.0,
                privacy=solution.privacy,
                cost=solution.cost,
                objective=solution.objective,
                status=_point_status(solution),
            )
        )
        if warm_start:
            warm = warm_vectors(point_instance, solution)
    return points
