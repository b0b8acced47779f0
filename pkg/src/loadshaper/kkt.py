"""First-order optimality verification and the water-filling view of a solution.

Everything here recomputes residuals from the instance data alone, without
touching the solver or the QP assembly, so it can act as an independent
referee: stationarity in the output and target variables, complementary
slackness per constraint family, multiplier signs, and raw feasibility.

The stationarity residual in slot t is

    2a(Y_t - W_i)/N + (1-a) C_i d/N + sum_{tau>=t} (lam2_tau d - lam1_tau)
        + lam3_t - lam4_t - lam5_t + nu

with a the privacy weight, d the slot duration, C_i the period price, and
lam1..lam5, nu the multipliers of the deficit, overflow, charge-peak,
discharge-peak, sign and energy-balance rows. In the target variable the
residual is -sum_{t in i} 2a(Y_t - W_i)/N - lam6_i. A point is optimal iff
all residual groups vanish.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import Duals, Instance, Solution, TargetMode, best_targets
from .qp import (
    CHARGE_PEAK,
    DISCHARGE_PEAK,
    NO_DEFICIT,
    NO_OVERFLOW,
    OUTPUT_NONNEG,
    TARGET_NONNEG,
)


@dataclass(frozen=True)
class KktReport:
    """Residual groups of the optimality system, all measured in absolute terms.

    complementarity maps each inequality family to max |multiplier * slack|;
    dual_sign is the magnitude of the worst negative inequality multiplier;
    primal_infeasibility is the largest constraint violation. The verdict is
    true iff every group is within tolerance. When the candidate carries no
    multipliers only primal feasibility is meaningful and the verdict is
    false (missing_duals marks this case).
    """

    stationarity_y: float
    stationarity_w: float
    complementarity: dict[str, float]
    dual_sign: float
    primal_infeasibility: float
    verdict: bool
    tolerance: float
    missing_duals: bool = False

    def as_dict(self) -> dict:
        return {
            "stationarity_y": self.stationarity_y,
            "stationarity_w": self.stationarity_w,
            "complementarity": dict(self.complementarity),
            "dual_sign": self.dual_sign,
            "primal_infeasibility": self.primal_infeasibility,
            "verdict": self.verdict,
            "tolerance": self.tolerance,
            "missing_duals": self.missing_duals,
        }


def _slacks(instance: Instance, output_kw: np.ndarray, targets: np.ndarray) -> dict[str, np.ndarray]:
    """Per-family slack (rhs minus row value); negative entries are violations."""
    load, battery = instance.load, instance.battery
    delta = load.slot_hours
    x = load.demand_kw
    soc = instance.initial_soc_kwh + np.cumsum((output_kw - x) * delta)
    out = {
        NO_DEFICIT: soc / delta,
        NO_OVERFLOW: battery.capacity_kwh - soc,
        CHARGE_PEAK: x + battery.charge_peak_kw - output_kw,
        DISCHARGE_PEAK: battery.discharge_peak_kw - x + output_kw,
    }
    if not instance.selling:
        out[OUTPUT_NONNEG] = output_kw.copy()
        if instance.target_mode is TargetMode.CONSTANT:
            out[TARGET_NONNEG] = targets[:1].copy()
        else:
            out[TARGET_NONNEG] = targets.copy()
    return out


def check(solution: Solution, instance: Instance, tolerance: float = 1e-5) -> KktReport:
    """Verify a candidate solution against the first-order optimality system.

    Parameters
    ----------
    solution:
        Candidate with output, targets and (optionally) multipliers.
    instance:
        The problem it claims to solve.
    tolerance:
        Absolute bound every residual group must meet for a true verdict.
    """
    load, tariff = instance.load, instance.tariff
    n = load.n_slots
    delta = load.slot_hours
    alpha = instance.alpha
    y = np.asarray(solution.output_kw, dtype=float)
    targets = np.asarray(solution.targets_kw, dtype=float)
    if y.shape[0] != n or targets.shape[0] != tariff.n_periods:
        raise ValueError(
            f"solution shapes {y.shape}/{targets.shape} do not match instance ({n} slots, {tariff.n_periods} periods)"
        )
    period = tariff.period_of_slot()
    slacks = _slacks(instance, y, targets)

    balance = abs(float(np.sum(y) - np.sum(load.demand_kw) + instance.initial_soc_kwh / delta))
    primal = max(
        max(float(np.max(-s, initial=0.0)) for s in slacks.values()),
        balance,
        0.0,
    )

    if solution.duals is None:
        nan = float("nan")
        return KktReport(
            stationarity_y=nan,
            stationarity_w=nan,
            complementarity={},
            dual_sign=nan,
            primal_infeasibility=primal,
            verdict=False,
            tolerance=tolerance,
            missing_duals=True,
        )

    d = solution.duals
    lam1 = np.asarray(d.no_deficit, dtype=float)
    lam2 = np.asarray(d.no_overflow, dtype=float)
    lam3 = np.asarray(d.charge_peak, dtype=float)
    lam4 = np.asarray(d.discharge_peak, dtype=float)
    lam5 = None if d.output_nonneg is None else np.asarray(d.output_nonneg, dtype=float)
    lam6 = None if d.target_nonneg is None else np.asarray(d.target_nonneg, dtype=float)
    nu = float(d.total_energy)

    grad = 2.0 * alpha * (y - targets[period]) / n
    grad += (1.0 - alpha) * tariff.price_per_slot() * delta / n
    grad += np.cumsum((lam2 * delta - lam1)[::-1])[::-1]
    grad += lam3 - lam4 + nu
    if lam5 is not None:
        grad -= lam5
    stationarity_y = float(np.max(np.abs(grad)))

    deviation = y - targets[period]
    if instance.target_mode is TargetMode.CONSTANT:
        sums = np.array([np.sum(deviation)])
    else:
        sums = np.add.reduceat(deviation, tariff.boundaries[:-1])
    grad_w = -2.0 * alpha * sums / n
    if lam6 is not None:
        grad_w = grad_w - lam6
    stationarity_w = float(np.max(np.abs(grad_w)))

    multipliers = {
        NO_DEFICIT: lam1,
        NO_OVERFLOW: lam2,
        CHARGE_PEAK: lam3,
        DISCHARGE_PEAK: lam4,
    }
    if lam5 is not None:
        multipliers[OUTPUT_NONNEG] = lam5
    if lam6 is not None:
        multipliers[TARGET_NONNEG] = lam6
    complementarity = {
        family: float(np.max(np.abs(lam * slacks[family]), initial=0.0))
        for family, lam in multipliers.items()
    }
    worst_negative = min(float(np.min(lam, initial=0.0)) for lam in multipliers.values())
    dual_sign = max(0.0, -worst_negative)

    groups = [stationarity_y, stationarity_w, dual_sign, primal]
    groups.extend(complementarity.values())
    verdict = all(g <= tolerance for g in groups)
    return KktReport(
        stationarity_y=stationarity_y,
        stationarity_w=stationarity_w,
        complementarity=complementarity,
        dual_sign=dual_sign,
        primal_infeasibility=primal,
        verdict=verdict,
        tolerance=tolerance,
    )


def recover_targets(output_kw, instance: Instance, duals: Optional[Duals] = None) -> np.ndarray:
    """Closed-form optimal targets for a fixed output, one entry per period.

    With selling the plain per-period mean is optimal; without selling the
    mean is shifted by the target-sign multiplier and clamped at zero, which
    collapses to the clamped mean whenever the multiplier is consistent. At
    alpha = 0 the target does not enter the objective and the (clamped)
    period means are returned by convention.
    """
    y = np.asarray(output_kw, dtype=float)
    if instance.alpha == 0.0:
        return best_targets(y, instance)
    tariff = instance.tariff
    n = instance.load.n_slots
    constant = instance.target_mode is TargetMode.CONSTANT
    if constant:
        counts = np.array([float(n)])
        means = np.array([float(np.mean(y))])
    else:
        counts = tariff.slot_counts.astype(float)
        means = np.add.reduceat(y, tariff.boundaries[:-1]) / counts
    if instance.selling:
        levels = means
    else:
        lam6 = np.zeros_like(means)
        if duals is not None and duals.target_nonneg is not None:
            lam6 = np.asarray(duals.target_nonneg, dtype=float)
        levels = np.maximum(0.0, n * lam6 / (2.0 * instance.alpha * counts) + means)
    if constant:
        return np.full(tariff.n_periods, levels[0])
    return levels


@dataclass(frozen=True)
class WaterfillSlot:
    slot: int                     # 1-based
    period: int                   # 1-based
    output_kw: float
    water_level: float
    active_tags: frozenset = field(default_factory=frozenset)


@dataclass(frozen=True)
class WaterfillView:
    """Per-slot water levels Y_t + (1-a) C_i / (2a) with the binding rows at each slot.

    Slots of one period with no active tag share a level at the optimum; the
    tags account for every deviation from that shared level.
    """

    slots: tuple
    price_offsets_kw: np.ndarray  # per-period offset added to the output

    def levels(self) -> np.ndarray:
        return np.array([s.water_level for s in self.slots])


def waterfill_view(solution: Solution, instance: Instance, tol: float = 1e-6) -> WaterfillView:
    """Expose the water-filling structure of a (verified) solution.

    Only defined for alpha > 0: the offset divides by the privacy weight.
    """
    if not instance.alpha > 0.0:
        raise ValueError("water levels are defined only for alpha > 0")
    tariff = instance.tariff
    y = np.asarray(solution.output_kw, dtype=float)
    targets = np.asarray(solution.targets_kw, dtype=float)
    period = tariff.period_of_slot()
    offsets = (1.0 - instance.alpha) * tariff.prices / (2.0 * instance.alpha)
    levels = y + offsets[period]
    slacks = _slacks(instance, y, targets)
    per_slot_families = [NO_DEFICIT, NO_OVERFLOW, CHARGE_PEAK, DISCHARGE_PEAK]
    if not instance.selling:
        per_slot_families.append(OUTPUT_NONNEG)
    slots = []
    for t in range(y.shape[0]):
        tags = frozenset(f for f in per_slot_families if slacks[f][t] <= tol)
        slots.append(
            WaterfillSlot(
                slot=t + 1,
                period=int(period[t]) + 1,
                output_kw=float(y[t]),
                water_level=float(levels[t]),
                active_tags=tags,
            )
        )
    return WaterfillView(slots=tuple(slots), price_offsets_kw=offsets)
