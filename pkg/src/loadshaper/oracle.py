"""Brute-force reference optimizer for small instances.

Enumerates the output profile on a per-slot grid anchored at the demand (so
the do-nothing profile is always representable), carrying a frontier of
partial states level by level. Feasibility is exact: every partial state
tracks its battery level, the admissible draw interval is recomputed per
state, and the final slot is forced by the terminal energy balance instead
of being gridded. The target levels are never enumerated; for a fixed output
the optimal targets are the (clamped) period means, so the inner
minimization is closed-form.

This module exists to referee the solver on toy sizes, not to scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Instance, TargetMode

# Slack allowed when testing grid candidates against exact feasibility bounds.
EDGE_TOL = 1e-9


class BudgetExceeded(RuntimeError):
    """Enumeration would create more states than the configured budget."""


@dataclass(frozen=True)
class GridSpec:
    """Search discretization: step size in kW plus optional per-slot boxes.

    When ``boxes`` is None the boxes are derived from the reachable battery
    levels (a superset of feasibility; exact bounds are still enforced per
    state). ``budget`` caps the total number of partial states ever created.
    """

    step: float = 0.25
    boxes: Optional[np.ndarray] = None  # shape (N, 2): per-slot draw bounds
    budget: float = 1e8

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"step={self.step} must be > 0")


@dataclass(frozen=True)
class OracleResult:
    output_kw: np.ndarray
    targets_kw: np.ndarray
    objective: float
    bound: float        # optimality gap guarantee: true optimum >= objective - bound
    evaluations: int


def _reachable_boxes(instance: Instance) -> np.ndarray:
    """Per-slot draw bounds from cascading the reachable battery-level interval."""
    load, battery = instance.load, instance.battery
    delta = load.slot_hours
    cap = battery.capacity_kwh
    lo_soc, hi_soc = instance.initial_soc_kwh, instance.initial_soc_kwh
    boxes = np.empty((load.n_slots, 2))
    for t, x in enumerate(load.demand_kw):
        lo = x - min(hi_soc / delta, battery.discharge_peak_kw)
        if not instance.selling:
            lo = max(0.0, lo)
        hi = x + min(battery.charge_peak_kw, (cap - lo_soc) / delta)
        boxes[t] = (lo, hi)
        lo_soc = max(0.0, lo_soc + (lo - x) * delta)
        hi_soc = min(cap, hi_soc + (hi - x) * delta)
    return boxes


def _objectives(instance: Instance, sums: np.ndarray, sumsqs: np.ndarray) -> np.ndarray:
    """Objective of each complete state given per-period sums and square sums."""
    tariff = instance.tariff
    n = instance.load.n_slots
    delta = instance.load.slot_hours
    counts = tariff.slot_counts.astype(float)
    if instance.target_mode is TargetMode.CONSTANT:
        total = sums.sum(axis=1)
        w = total / n
        if not instance.selling:
            w = np.maximum(w, 0.0)
        privacy = (sumsqs.sum(axis=1) - 2.0 * w * total + n * w * w) / n
    else:
        w = sums / counts
        if not instance.selling:
            w = np.maximum(w, 0.0)
        privacy = (sumsqs - 2.0 * w * sums + counts * w * w).sum(axis=1) / n
    cost = delta * (sums @ tariff.prices) / n
    return instance.alpha * privacy + (1.0 - instance.alpha) * cost


def _lipschitz_bound(instance: Instance, boxes: np.ndarray, step: float) -> float:
    """Objective change bound for an L-inf perturbation of one grid step.

    The per-slot gradient magnitude is at most
    (2a * D + (1-a) * C_t * d) / N with D the diameter of the value range
    (targets are means of values in that range); summing over slots and
    multiplying by the step gives the reported gap guarantee.
    """
    lo = min(float(np.min(boxes[:, 0])), 0.0)
    hi = float(np.max(boxes[:, 1]))
    diameter = max(hi - lo, 0.0)
    tariff = instance.tariff
    delta = instance.load.slot_hours
    mean_price = float(np.mean(tariff.price_per_slot()))
    lipschitz = 2.0 * instance.alpha * diameter + (1.0 - instance.alpha) * delta * mean_price
    return max(lipschitz * step, 1e-8)


def brute_force(instance: Instance, grid: Optional[GridSpec] = None) -> OracleResult:
    """Exhaustively search the gridded feasible set for the best output.

    Raises
    ------
    BudgetExceeded
        When the instance is too large (more than 8 slots) or the frontier
        outgrows ``grid.budget`` states.
    ValueError
        When the supplied boxes leave no feasible grid profile.
    """
    grid = grid or GridSpec()
    load, battery, tariff = instance.load, instance.battery, instance.tariff
    n = load.n_slots
    if n > 8:
        raise BudgetExceeded(f"{n} slots exceed the enumeration guard of 8")
    delta = load.slot_hours
    cap = battery.capacity_kwh
    x = load.demand_kw
    period = tariff.period_of_slot()
    n_periods = tariff.n_periods
    boxes = grid.boxes if grid.boxes is not None else _reachable_boxes(instance)
    boxes = np.asarray(boxes, dtype=float)

    # Candidate grid per slot, anchored at the demand value.
    grids = []
    for t in range(n):
        lo, hi = boxes[t]
        k_lo = int(np.ceil((lo - x[t]) / grid.step - EDGE_TOL))
        k_hi = int(np.floor((hi - x[t]) / grid.step + EDGE_TOL))
        grids.append(x[t] + grid.step * np.arange(k_lo, k_hi + 1))

    soc = np.array([instance.initial_soc_kwh])
    sums = np.zeros((1, n_periods))
    sumsqs = np.zeros((1, n_periods))
    paths = np.empty((1, 0))
    evaluations = 1

    def admissible(soc_now: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        lo = x[t] - np.minimum(soc_now / delta, battery.discharge_peak_kw)
        if not instance.selling:
            lo = np.maximum(0.0, lo)
        hi = x[t] + np.minimum(battery.charge_peak_kw, (cap - soc_now) / delta)
        return np.maximum(lo, boxes[t, 0]), np.minimum(hi, boxes[t, 1])

    for t in range(n - 1):
        lo, hi = admissible(soc, t)
        g = grids[t]
        ok = (g[None, :] >= lo[:, None] - EDGE_TOL) & (g[None, :] <= hi[:, None] + EDGE_TOL)
        state_idx, grid_idx = np.nonzero(ok)
        values = g[grid_idx]
        # Interval endpoints join the grid candidates unless they coincide
        # with one (they capture binding peak/capacity values off the grid).
        extras_s = []
        extras_v = []
        for bound in (lo, hi):
            k = np.rint((bound - x[t]) / grid.step)
            on_grid = np.abs(x[t] + grid.step * k - bound) < 1e-12
            keep = np.flatnonzero(~on_grid & (hi - lo > -EDGE_TOL))
            extras_s.append(keep)
            extras_v.append(bound[keep])
        state_idx = np.concatenate([state_idx, *extras_s])
        values = np.concatenate([values, *extras_v])

        evaluations += int(state_idx.size)
        if evaluations > grid.budget:
            raise BudgetExceeded(f"{evaluations} states exceed budget {grid.budget:g}")
        if state_idx.size == 0:
            raise ValueError("search boxes exclude every feasible profile")

        soc = soc[state_idx] + (values - x[t]) * delta
        sums = sums[state_idx]
        sumsqs = sumsqs[state_idx]
        p = period[t]
        sums[:, p] += values
        sumsqs[:, p] += values * values
        paths = np.column_stack([paths[state_idx], values])

    # Last slot is forced by the terminal balance: the battery must end empty.
    t = n - 1
    forced = x[t] - soc / delta
    lo, hi = admissible(soc, t)
    feasible = (forced >= lo - EDGE_TOL) & (forced <= hi + EDGE_TOL)
    if not np.any(feasible):
        raise ValueError("search boxes exclude every feasible profile")
    forced = forced[feasible]
    sums = sums[feasible]
    sumsqs = sumsqs[feasible]
    paths = np.column_stack([paths[feasible], forced])
    p = period[t]
    sums[:, p] += forced
    sumsqs[:, p] += forced * forced
    evaluations += int(forced.size)

    objectives = _objectives(instance, sums, sumsqs)
    best = float(np.min(objectives))
    ties = np.flatnonzero(objectives == best)
    if ties.size > 1:
        order = np.lexsort(tuple(paths[ties, c] for c in reversed(range(n))))
        winner = ties[order[0]]
    else:
        winner = ties[0]

    y = paths[winner].copy()
    counts = tariff.slot_counts.astype(float)
    if instance.target_mode is TargetMode.CONSTANT:
        w = float(np.sum(sums[winner]) / n)
        if not instance.selling:
            w = max(w, 0.0)
        targets = np.full(n_periods, w)
    else:
        targets = sums[winner] / counts
        if not instance.selling:
            targets = np.maximum(targets, 0.0)
    bound = _lipschitz_bound(instance, boxes, grid.step)
    return OracleResult(
        output_kw=y,
        targets_kw=targets,
        objective=best,
        bound=bound,
        evaluations=evaluations,
    )


def refine(
    instance: Instance,
    coarse_step: float = 0.25,
    min_step: float = 2e-7,
    budget: float = 1e8,
    max_rounds: int = 60,
) -> OracleResult:
    """Sharpen the brute-force optimum by zooming the grid around the incumbent.

    After a global pass at ``coarse_step``, each round searches a box of a
    few steps around the best profile. The step halves whenever the best
    point is interior to its box and stays put when the box edge is hit (the
    incumbent then walks toward the optimum at a fixed resolution). Halving
    keeps every previous grid point representable, so the incumbent
    objective never increases.
    """
    result = brute_force(instance, GridSpec(step=coarse_step, budget=budget))
    step = coarse_step
    evaluations = result.evaluations
    rounds = 0
    while step > min_step and rounds < max_rounds:
        rounds += 1
        margin = 2.5 * step
        boxes = np.column_stack([result.output_kw - margin, result.output_kw + margin])
        trial = brute_force(instance, GridSpec(step=step, boxes=boxes, budget=budget))
        evaluations += trial.evaluations
        moved_to_edge = bool(
            np.any(np.abs(trial.output_kw - boxes[:, 0]) < step)
            | np.any(np.abs(trial.output_kw - boxes[:, 1]) < step)
        )
        if trial.objective < result.objective:
            result = trial
        if not moved_to_edge:
            step *= 0.5
    bound = _lipschitz_bound(
        instance,
        np.column_stack([result.output_kw - 2.5 * step, result.output_kw + 2.5 * step]),
        step,
    )
    return OracleResult(
        output_kw=result.output_kw,
        targets_kw=result.targets_kw,
        objective=result.objective,
        bound=bound,
        evaluations=evaluations,
    )
