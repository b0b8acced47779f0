"""End-to-end solve: validate, assemble, dispatch, decode and verify.

Glues the layers together so callers hand in an Instance and get back a
fully populated Solution: output and targets, battery trajectory, privacy
and cost metrics, grouped multipliers and the optimality report.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np

from . import kkt as kkt_mod
from . import qp as qp_mod
from . import solver as solver_mod
from .model import (
    Duals,
    Instance,
    Solution,
    best_targets,
    cost,
    privacy,
    soc_trajectory,
    validate,
)
from .qp import (
    CHARGE_PEAK,
    DISCHARGE_PEAK,
    NO_DEFICIT,
    NO_OVERFLOW,
    OUTPUT_NONNEG,
    TARGET_NONNEG,
    TOTAL_ENERGY,
)

# KKT tolerance used for the attached verification report.
VERIFY_TOL = 1e-5


def _group_duals(qp: qp_mod.QpForm, vector: np.ndarray) -> Duals:
    def grab(family):
        sl = qp.slices.get(family)
        return None if sl is None else vector[sl].copy()

    return Duals(
        no_deficit=vector[qp.slices[NO_DEFICIT]].copy(),
        no_overflow=vector[qp.slices[NO_OVERFLOW]].copy(),
        charge_peak=vector[qp.slices[CHARGE_PEAK]].copy(),
        discharge_peak=vector[qp.slices[DISCHARGE_PEAK]].copy(),
        total_energy=float(vector[qp.slices[TOTAL_ENERGY]][0]),
        output_nonneg=grab(OUTPUT_NONNEG),
        target_nonneg=grab(TARGET_NONNEG),
    )


def solve_instance(
    instance: Instance,
    settings: Optional[solver_mod.SolverSettings] = None,
    warm: Optional[tuple[np.ndarray, np.ndarray]] = None,
    verify_tolerance: float = VERIFY_TOL,
) -> Solution:
    """Solve one instance and attach the independent optimality report.

    A battery that cannot move energy (zero capacity or zero peak, starting
    empty) short-circuits to the closed-form forced solution, leaving the
    output bit-identical to the demand. With alpha = 0 the targets do not
    enter the objective; the reported targets are the (clamped) period means
    of the returned output by convention.

    ``warm`` is an optional (z, duals) pair from a structurally identical
    instance, e.g. the previous point of a sweep.
    """
    validate(instance)
    qp = qp_mod.build(instance)
    if instance.battery.is_degenerate and instance.initial_soc_kwh == 0.0:
        result = solver_mod.forced_result(qp)
    else:
        result = solver_mod.solve(qp, settings=settings, initial=warm)

    output, w_vars = qp.decode(result.z)
    targets = qp.targets_full(w_vars)
    if instance.alpha == 0.0:
        targets = best_targets(output, instance)

    duals = _group_duals(qp, result.duals)
    trajectory = soc_trajectory(instance.load, output, instance.battery, instance.initial_soc_kwh)
    p = privacy(output, targets, instance.tariff)
    c = cost(output, instance.tariff, instance.load.slot_hours)
    solution = Solution(
        output_kw=output,
        targets_kw=targets,
        soc_kwh=trajectory.soc_kwh,
        privacy=p,
        cost=c,
        objective=instance.alpha * p + (1.0 - instance.alpha) * c,
        status=result.status,
        duals=duals,
        iterations=result.iterations,
        primal_residual=result.primal_residual,
        dual_residual=result.dual_residual,
    )
    report = kkt_mod.check(solution, instance, tolerance=verify_tolerance)
    return replace(solution, kkt=report)


def warm_vectors(instance: Instance, solution: Solution) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild the raw (z, duals) pair of a solution for warm-starting.

    Only valid across instances with identical structure (same slot count,
    periods, selling flag and target mode); sweeps over alpha or battery
    size qualify.
    """
    qp = qp_mod.build(instance)
    if qp.constant_target:
        w_vars = np.asarray(solution.targets_kw[:1], dtype=float)
    else:
        w_vars = np.asarray(solution.targets_kw, dtype=float)
    z = qp.encode(solution.output_kw, w_vars)
    duals = np.zeros(qp.n_rows)
    d = solution.duals
    if d is not None:
        duals[qp.slices[NO_DEFICIT]] = d.no_deficit
        duals[qp.slices[NO_OVERFLOW]] = d.no_overflow
        duals[qp.slices[CHARGE_PEAK]] = d.charge_peak
        duals[qp.slices[DISCHARGE_PEAK]] = d.discharge_peak
        duals[qp.slices[TOTAL_ENERGY]] = d.total_energy
        if d.output_nonneg is not None and OUTPUT_NONNEG in qp.slices:
            duals[qp.slices[OUTPUT_NONNEG]] = d.output_nonneg
        if d.target_nonneg is not None and TARGET_NONNEG in qp.slices:
            duals[qp.slices[TARGET_NONNEG]] = d.target_nonneg
    return z, duals
