"""Domain types and scalar metrics for battery-backed load shaping.

A household draws ``output_kw`` from the grid while its appliances consume
``demand_kw``; the difference flows through a battery. Privacy is the mean
squared distance between the grid-visible output and a per-price-period
target level, cost is the time-of-use energy bill. Everything here is a
plain value object or a pure function.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Absolute feasibility tolerance for all constraint checks (kW / kWh).
FEASIBILITY_TOL = 1e-6


def _readonly(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


class TargetMode(str, enum.Enum):
    """Shape of the target the output load tries to imitate."""

    PIECEWISE = "piecewise"  # one level per price period
    CONSTANT = "constant"    # a single shared level for the whole horizon


class SolveStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class LoadProfile:
    """Household demand over a uniform slot grid.

    ``demand_kw[t]`` is the average power drawn by appliances during slot t;
    ``slot_hours`` is the slot duration, so slot energy is power * slot_hours.
    """

    demand_kw: np.ndarray
    slot_hours: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "demand_kw", _readonly(self.demand_kw))
        object.__setattr__(self, "slot_hours", float(self.slot_hours))

    @property
    def n_slots(self) -> int:
        return int(self.demand_kw.shape[0])

    @property
    def horizon_hours(self) -> float:
        return self.n_slots * self.slot_hours


@dataclass(frozen=True)
class Tariff:
    """Time-of-use tariff: contiguous periods of constant price.

    ``boundaries`` holds M+1 slot indices 0 = b_0 < b_1 < ... < b_M = N;
    period i (0-based) owns slots b_i .. b_{i+1}-1 and costs
    ``prices[i]`` currency units per kWh.
    """

    boundaries: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "boundaries", _readonly(self.boundaries, dtype=np.int64))
        object.__setattr__(self, "prices", _readonly(self.prices))

    @property
    def n_periods(self) -> int:
        return int(self.prices.shape[0])

    @property
    def slot_counts(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def period_of_slot(self) -> np.ndarray:
        """0-based period index for each slot, shape (N,)."""
        return np.repeat(np.arange(self.n_periods), self.slot_counts)

    def price_per_slot(self) -> np.ndarray:
        return self.prices[self.period_of_slot()]


@dataclass(frozen=True)
class BatterySpec:
    """Storage parameters: capacity (kWh) and sustained charge/discharge power (kW)."""

    capacity_kwh: float
    charge_peak_kw: float
    discharge_peak_kw: float

    def __post_init__(self):
        object.__setattr__(self, "capacity_kwh", float(self.capacity_kwh))
        object.__setattr__(self, "charge_peak_kw", float(self.charge_peak_kw))
        object.__setattr__(self, "discharge_peak_kw", float(self.discharge_peak_kw))

    @property
    def is_degenerate(self) -> bool:
        """True when the battery cannot move energy at all, forcing output == demand."""
        return (
            self.capacity_kwh == 0.0
            or self.charge_peak_kw == 0.0
            or self.discharge_peak_kw == 0.0
        )


@dataclass(frozen=True)
class Instance:
    """A complete problem statement: load, tariff, battery and objective knobs."""

    load: LoadProfile
    tariff: Tariff
    battery: BatterySpec
    alpha: float = 0.5
    selling: bool = False
    target_mode: TargetMode = TargetMode.PIECEWISE
    # Battery starts empty; kept configurable for multi-horizon stitching later.
    initial_soc_kwh: float = 0.0


@dataclass(frozen=True)
class Duals:
    """Lagrange multipliers grouped by constraint family, non-negative for inequalities.

    ``output_nonneg`` and ``target_nonneg`` are None when selling is allowed
    (those constraints are lifted). ``total_energy`` is the sign-free
    multiplier of the terminal energy-balance equality.
    """

    no_deficit: np.ndarray
    no_overflow: np.ndarray
    charge_peak: np.ndarray
    discharge_peak: np.ndarray
    total_energy: float
    output_nonneg: Optional[np.ndarray] = None
    target_nonneg: Optional[np.ndarray] = None

    def as_dict(self) -> dict:
        out = {
            "no_deficit": self.no_deficit,
            "no_overflow": self.no_overflow,
            "charge_peak": self.charge_peak,
            "discharge_peak": self.discharge_peak,
            "total_energy": self.total_energy,
        }
        if self.output_nonneg is not None:
            out["output_nonneg"] = self.output_nonneg
        if self.target_nonneg is not None:
            out["target_nonneg"] = self.target_nonneg
        return out


@dataclass(frozen=True)
class Solution:
    """Solver output: grid profile, per-period targets, battery path and metrics."""

    output_kw: np.ndarray
    targets_kw: np.ndarray          # one entry per price period (equal in constant mode)
    soc_kwh: np.ndarray
    privacy: float
    cost: float
    objective: float
    status: SolveStatus
    duals: Optional[Duals] = None
    kkt: Optional["KktReport"] = None  # filled by loadshaper.kkt.check
    iterations: int = 0
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    message: str
    index: Optional[int] = None  # 1-based slot / period where applicable

    def __str__(self) -> str:
        if self.index is None:
            return f"{self.code}: {self.message}"
        return f"{self.code}[{self.index}]: {self.message}"


class InvalidInstanceError(ValueError):
    """Raised when an instance violates its type invariants."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


def validation_issues(instance: Instance) -> list[ValidationIssue]:
    """Collect every violated invariant of an instance, with 1-based indices."""
    issues: list[ValidationIssue] = []
    load, tariff, battery = instance.load, instance.tariff, instance.battery

    if load.n_slots < 1:
        issues.append(ValidationIssue("EmptyProfile", "load must cover at least one slot"))
    if not load.slot_hours > 0:
        issues.append(ValidationIssue("BadSlotDuration", f"slot_hours={load.slot_hours} must be > 0"))
    for j in np.flatnonzero(load.demand_kw < 0):
        issues.append(
            ValidationIssue("NegativeDemand", f"demand_kw[t={j + 1}]={load.demand_kw[j]} < 0", int(j) + 1)
        )

    b = tariff.boundaries
    if b.shape[0] != tariff.n_periods + 1:
        issues.append(ValidationIssue("NonMonotoneBoundaries", "need one more boundary than prices"))
    else:
        if np.any(np.diff(b) <= 0):
            issues.append(ValidationIssue("NonMonotoneBoundaries", f"boundaries {b.tolist()} must strictly increase"))
        if b[0] != 0 or b[-1] != load.n_slots:
            issues.append(
                ValidationIssue(
                    "GridMisalignment",
                    f"boundaries must run from 0 to n_slots={load.n_slots}, got {b.tolist()}",
                )
            )
    for i in np.flatnonzero(tariff.prices <= 0):
        issues.append(
            ValidationIssue("NonPositivePrice", f"prices[period={i + 1}]={tariff.prices[i]} must be > 0", int(i) + 1)
        )

    for name, value in (
        ("capacity_kwh", battery.capacity_kwh),
        ("charge_peak_kw", battery.charge_peak_kw),
        ("discharge_peak_kw", battery.discharge_peak_kw),
    ):
        if value < 0:
            issues.append(ValidationIssue("NegativeBatteryField", f"battery.{name}={value} < 0"))

    if not 0.0 <= instance.alpha <= 1.0:
        issues.append(ValidationIssue("BadAlpha", f"alpha={instance.alpha} outside [0, 1]"))
    if not 0.0 <= instance.initial_soc_kwh <= battery.capacity_kwh:
        issues.append(
            ValidationIssue(
                "BadInitialSoc",
                f"initial_soc_kwh={instance.initial_soc_kwh} outside [0, {battery.capacity_kwh}]",
            )
        )
    return issues


def validate(instance: Instance) -> Instance:
    """Return the instance unchanged iff all invariants hold, else raise.

    Raises
    ------
    InvalidInstanceError
        Carries the full list of :class:`ValidationIssue` found.
    """
    issues = validation_issues(instance)
    if issues:
        raise InvalidInstanceError(issues)
    return instance


@dataclass(frozen=True)
class SocViolation:
    kind: str   # "underflow" | "overflow"
    slot: int   # 1-based

    def __str__(self) -> str:
        return f"{self.kind}(t={self.slot})"


@dataclass(frozen=True)
class SocTrajectory:
    soc_kwh: np.ndarray
    violations: tuple = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations


def soc_trajectory(
    load: LoadProfile,
    output_kw,
    battery: BatterySpec,
    initial_soc_kwh: float = 0.0,
    tol: float = FEASIBILITY_TOL,
) -> SocTrajectory:
    """Battery state of charge after each slot, plus bound violations.

    The battery absorbs the difference between grid draw and demand:
    soc[t] = soc[t-1] + (output[t] - demand[t]) * slot_hours, starting from
    ``initial_soc_kwh``. Any excursion below -tol or above capacity + tol is
    reported as an underflow/overflow at that (1-based) slot.
    """
    y = np.asarray(output_kw, dtype=float)
    if y.shape != load.demand_kw.shape:
        raise ValueError(f"output has shape {y.shape}, expected {load.demand_kw.shape}")
    soc = initial_soc_kwh + np.cumsum((y - load.demand_kw) * load.slot_hours)
    violations = []
    for j in np.flatnonzero(soc < -tol):
        violations.append(SocViolation("underflow", int(j) + 1))
    for j in np.flatnonzero(soc > battery.capacity_kwh + tol):
        violations.append(SocViolation("overflow", int(j) + 1))
    violations.sort(key=lambda v: v.slot)
    return SocTrajectory(soc_kwh=soc, violations=tuple(violations))


def feasible_request_interval(
    x_kw: float,
    soc_kwh: float,
    battery: BatterySpec,
    slot_hours: float = 1.0,
    selling: bool = False,
) -> tuple[float, float]:
    """Closed interval of grid draws available in one slot.

    Given current demand ``x_kw`` and battery level ``soc_kwh``, the draw can
    go below demand by at most the dischargeable power (battery content per
    slot, capped by the discharge peak) and above it by the chargeable power
    (remaining headroom per slot, capped by the charge peak). Without selling
    the lower end is clamped at zero.
    """
    dischargeable = min(soc_kwh / slot_hours, battery.discharge_peak_kw)
    chargeable = min(battery.charge_peak_kw, (battery.capacity_kwh - soc_kwh) / slot_hours)
    lo = x_kw - dischargeable
    if not selling:
        lo = max(0.0, lo)
    hi = x_kw + chargeable
    return lo, hi


def privacy(output_kw, targets_kw, tariff: Tariff) -> float:
    """Mean squared distance between the grid profile and its per-period target."""
    y = np.asarray(output_kw, dtype=float)
    w = np.asarray(targets_kw, dtype=float)[tariff.period_of_slot()]
    return float(np.mean((y - w) ** 2))


def cost(output_kw, tariff: Tariff, slot_hours: float = 1.0) -> float:
    """Average per-slot energy bill; negative when selling earns more than buying.

    Each slot is billed at its period price for the energy actually drawn
    (power * slot_hours); sold energy is credited at the same price
    (net metering).
    """
    y = np.asarray(output_kw, dtype=float)
    return float(np.mean(tariff.price_per_slot() * y * slot_hours))


def objective_value(instance: Instance, output_kw, targets_kw) -> float:
    """Scalarized objective: alpha * privacy + (1 - alpha) * cost."""
    p = privacy(output_kw, targets_kw, instance.tariff)
    c = cost(output_kw, instance.tariff, instance.load.slot_hours)
    return instance.alpha * p + (1.0 - instance.alpha) * c


def clamped_period_means(output_kw, tariff: Tariff, clamp: bool) -> np.ndarray:
    """Per-period means of the output, clamped at zero unless selling.

    This is the target choice that minimizes privacy leakage for a fixed
    output profile; with selling the plain mean is optimal, without selling
    the mean is clamped to stay non-negative.
    """
    y = np.asarray(output_kw, dtype=float)
    sums = np.add.reduceat(y, tariff.boundaries[:-1])
    means = sums / tariff.slot_counts
    if clamp:
        means = np.maximum(means, 0.0)
    return means


def best_targets(output_kw, instance: Instance) -> np.ndarray:
    """Privacy-optimal targets for a fixed output under the instance's mode."""
    clamp = not instance.selling
    if instance.target_mode is TargetMode.CONSTANT:
        mean = float(np.mean(np.asarray(output_kw, dtype=float)))
        if clamp:
            mean = max(0.0, mean)
        return np.full(instance.tariff.n_periods, mean)
    return clamped_period_means(output_kw, instance.tariff, clamp)
