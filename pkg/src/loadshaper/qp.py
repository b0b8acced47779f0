"""Assembly of a load-shaping instance into a standard-form convex QP.

Decision vector z = [Y_1..Y_N, W_1..W_K] stacks the grid draws and the
per-period target levels (K = number of periods, or 1 when the target is a
single shared constant). The objective is

    (1/N) * sum_t [ alpha * (Y_t - W_of(t))^2 + (1-alpha) * price_of(t) * Y_t * slot_hours ]

and the constraint rows encode, per slot: battery never below empty
(cumulative draws cover cumulative demand), never above capacity, charge and
discharge power peaks, non-negative grid draw (unless selling), non-negative
targets (unless selling), and the terminal balance that leaves the battery
empty.

Cumulative-sum rows are kept as dense-in-prefix rows instead of introducing
per-slot state variables; the multiplier stored for each row is exactly the
Lagrange multiplier of the written constraint function (battery-deficit rows
are in power units, battery-overflow rows carry the slot_hours factor).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Optional

import numpy as np
import scipy.sparse as sp

from .model import Instance, TargetMode

# Row family names, in the order their blocks appear in the stacked matrix.
NO_DEFICIT = "no_deficit"
NO_OVERFLOW = "no_overflow"
CHARGE_PEAK = "charge_peak"
DISCHARGE_PEAK = "discharge_peak"
OUTPUT_NONNEG = "output_nonneg"
TARGET_NONNEG = "target_nonneg"
TOTAL_ENERGY = "total_energy"

INEQUALITY_FAMILIES = (
    NO_DEFICIT,
    NO_OVERFLOW,
    CHARGE_PEAK,
    DISCHARGE_PEAK,
    OUTPUT_NONNEG,
    TARGET_NONNEG,
)


class Relation(str, enum.Enum):
    LE = "<="
    EQ = "=="


@dataclass(frozen=True)
class ConstraintTag:
    family: str
    index: Optional[int] = None  # 0-based slot/target index, None for the balance row

    def __str__(self) -> str:
        return self.family if self.index is None else f"{self.family}({self.index + 1})"


@dataclass(frozen=True)
class ConstraintRow:
    coeffs: dict[int, float]  # var index -> coefficient, sparse
    relation: Relation
    rhs: float
    tag: ConstraintTag

    def value(self, z: np.ndarray) -> float:
        return float(sum(c * z[j] for j, c in self.coeffs.items()))


class QpForm:
    """Standard-form QP plus the structural layout the solver exploits.

    The quadratic/linear parts and all constraint blocks have closed forms in
    terms of prefix sums, so matrix-vector products are O(N) and never need a
    materialized matrix; :meth:`constraint_matrix` and :meth:`rows` build
    explicit representations for inspection and tests.
    """

    def __init__(self, instance: Instance):
        self.instance = instance
        load, tariff = instance.load, instance.tariff
        self.n_slots = load.n_slots
        self.n_periods = tariff.n_periods
        self.slot_hours = load.slot_hours
        self.alpha = instance.alpha
        self.selling = instance.selling
        self.constant_target = instance.target_mode is TargetMode.CONSTANT
        self.n_targets = 1 if self.constant_target else self.n_periods
        self.n_vars = self.n_slots + self.n_targets

        self.period_of_slot = tariff.period_of_slot()
        # Target-variable index (0-based, within the W block) owning each slot.
        self.target_of_slot = (
            np.zeros(self.n_slots, dtype=np.int64) if self.constant_target else self.period_of_slot
        )
        self.slots_per_target = np.bincount(self.target_of_slot, minlength=self.n_targets).astype(float)

        n = self.n_slots
        demand = load.demand_kw
        self.demand_cumsum = np.cumsum(demand)
        delta = self.slot_hours
        b0 = instance.initial_soc_kwh
        cap = instance.battery.capacity_kwh

        # Linear objective coefficients (the quadratic part lives in quad_matvec).
        self.linear = np.zeros(self.n_vars)
        self.linear[:n] = (1.0 - self.alpha) * tariff.price_per_slot() * delta / n

        # Row layout: families stacked in a fixed order, equality row last.
        self.slices: dict[str, slice] = {}
        cursor = 0
        for family, count in self._family_counts():
            self.slices[family] = slice(cursor, cursor + count)
            cursor += count
        self.n_rows = cursor

        self.rhs = np.empty(self.n_rows)
        self.rhs[self.slices[NO_DEFICIT]] = b0 / delta - self.demand_cumsum
        self.rhs[self.slices[NO_OVERFLOW]] = (cap - b0) + delta * self.demand_cumsum
        self.rhs[self.slices[CHARGE_PEAK]] = demand + instance.battery.charge_peak_kw
        self.rhs[self.slices[DISCHARGE_PEAK]] = instance.battery.discharge_peak_kw - demand
        if not self.selling:
            self.rhs[self.slices[OUTPUT_NONNEG]] = 0.0
            self.rhs[self.slices[TARGET_NONNEG]] = 0.0
        self.rhs[self.slices[TOTAL_ENERGY]] = self.demand_cumsum[-1] - b0 / delta

        self.is_eq = np.zeros(self.n_rows, dtype=bool)
        self.is_eq[self.slices[TOTAL_ENERGY]] = True

    def _family_counts(self) -> list[tuple[str, int]]:
        counts = [
            (NO_DEFICIT, self.n_slots),
            (NO_OVERFLOW, self.n_slots),
            (CHARGE_PEAK, self.n_slots),
            (DISCHARGE_PEAK, self.n_slots),
        ]
        if not self.selling:
            counts.append((OUTPUT_NONNEG, self.n_slots))
            counts.append((TARGET_NONNEG, self.n_targets))
        counts.append((TOTAL_ENERGY, 1))
        return counts

    @property
    def families(self) -> list[str]:
        return list(self.slices)

    # ---- variable layout -------------------------------------------------

    def y_index(self, t: int) -> int:
        return t

    def w_index(self, i: int) -> int:
        return self.n_slots + (0 if self.constant_target else i)

    def encode(self, output_kw, target_vars) -> np.ndarray:
        z = np.empty(self.n_vars)
        z[: self.n_slots] = output_kw
        z[self.n_slots :] = target_vars
        return z

    def decode(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split z into (output_kw, target variables)."""
        return z[: self.n_slots].copy(), z[self.n_slots :].copy()

    def targets_full(self, target_vars: np.ndarray) -> np.ndarray:
        """Expand the target variables to one value per price period."""
        if self.constant_target:
            return np.full(self.n_periods, target_vars[0])
        return np.asarray(target_vars, dtype=float).copy()

    # ---- objective -------------------------------------------------------

    def quad_matvec(self, z: np.ndarray) -> np.ndarray:
        """Product of the quadratic-term matrix with z, in O(N)."""
        n = self.n_slots
        scale = 2.0 * self.alpha / n
        y = z[:n]
        w = z[n:]
        dev = y - w[self.target_of_slot]
        out = np.empty_like(z)
        out[:n] = scale * dev
        out[n:] = -scale * np.bincount(self.target_of_slot, weights=dev, minlength=self.n_targets)
        return out

    def objective_at(self, z: np.ndarray) -> float:
        """Objective value at any point: 0.5 z'Qz + q'z.

        Equals alpha * privacy + (1 - alpha) * cost for the decoded profile.
        """
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_vars,):
            raise ValueError(f"expected {self.n_vars} variables, got shape {z.shape}")
        return float(0.5 * z @ self.quad_matvec(z) + self.linear @ z)

    @cached_property
    def quadratic(self) -> sp.csc_matrix:
        """Materialized quadratic-term matrix (symmetric PSD)."""
        n, k = self.n_slots, self.n_targets
        scale = 2.0 * self.alpha / n
        rows = list(range(n)) + list(range(n)) + [n + j for j in self.target_of_slot] + list(range(n, n + k))
        cols = (
            list(range(n))
            + [n + j for j in self.target_of_slot]
            + list(range(n))
            + list(range(n, n + k))
        )
        data = (
            [scale] * n
            + [-scale] * n
            + [-scale] * n
            + [scale * c for c in self.slots_per_target]
        )
        return sp.coo_matrix((data, (rows, cols)), shape=(self.n_vars, self.n_vars)).tocsc()

    # ---- constraints -----------------------------------------------------

    def constraint_values(self, z: np.ndarray) -> np.ndarray:
        """Left-hand side of every constraint row at z, in O(N)."""
        n = self.n_slots
        y = z[:n]
        cum = np.cumsum(y)
        out = np.empty(self.n_rows)
        out[self.slices[NO_DEFICIT]] = -cum
        out[self.slices[NO_OVERFLOW]] = self.slot_hours * cum
        out[self.slices[CHARGE_PEAK]] = y
        out[self.slices[DISCHARGE_PEAK]] = -y
        if not self.selling:
            out[self.slices[OUTPUT_NONNEG]] = -y
            out[self.slices[TARGET_NONNEG]] = -z[n:]
        out[self.slices[TOTAL_ENERGY]] = cum[-1]
        return out

    def multiplier_pullback(self, row_values: np.ndarray) -> np.ndarray:
        """Transpose product: sum_k row_values[k] * row_k, in O(N)."""
        n = self.n_slots
        out = np.zeros(self.n_vars)
        suffix = lambda v: np.cumsum(v[::-1])[::-1]
        out[:n] -= suffix(row_values[self.slices[NO_DEFICIT]])
        out[:n] += self.slot_hours * suffix(row_values[self.slices[NO_OVERFLOW]])
        out[:n] += row_values[self.slices[CHARGE_PEAK]]
        out[:n] -= row_values[self.slices[DISCHARGE_PEAK]]
        if not self.selling:
            out[:n] -= row_values[self.slices[OUTPUT_NONNEG]]
            out[n:] -= row_values[self.slices[TARGET_NONNEG]]
        out[:n] += row_values[self.slices[TOTAL_ENERGY]][0]
        return out

    def violation(self, z: np.ndarray, values: Optional[np.ndarray] = None) -> float:
        """Largest constraint violation at z (0 when feasible)."""
        if values is None:
            values = self.constraint_values(z)
        resid = values - self.rhs
        worst_ineq = float(np.max(resid[~self.is_eq], initial=0.0))
        worst_eq = float(np.max(np.abs(resid[self.is_eq]), initial=0.0))
        return max(worst_ineq, worst_eq, 0.0)

    @cached_property
    def tags(self) -> list[ConstraintTag]:
        out: list[ConstraintTag] = []
        for family, sl in self.slices.items():
            count = sl.stop - sl.start
            if family == TOTAL_ENERGY:
                out.append(ConstraintTag(family))
            else:
                out.extend(ConstraintTag(family, i) for i in range(count))
        return out

    def rows(self) -> Iterator[ConstraintRow]:
        """Materialize every constraint row (test/inspection path)."""
        n = self.n_slots
        delta = self.slot_hours
        for k, tag in enumerate(self.tags):
            rel = Relation.EQ if self.is_eq[k] else Relation.LE
            t = tag.index
            if tag.family == NO_DEFICIT:
                coeffs = {j: -1.0 for j in range(t + 1)}
            elif tag.family == NO_OVERFLOW:
                coeffs = {j: delta for j in range(t + 1)}
            elif tag.family == CHARGE_PEAK:
                coeffs = {t: 1.0}
            elif tag.family in (DISCHARGE_PEAK, OUTPUT_NONNEG):
                coeffs = {t: -1.0}
            elif tag.family == TARGET_NONNEG:
                coeffs = {n + t: -1.0}
            else:  # TOTAL_ENERGY
                coeffs = {j: 1.0 for j in range(n)}
            yield ConstraintRow(coeffs, rel, float(self.rhs[k]), tag)

    @cached_property
    def constraint_matrix(self) -> sp.csr_matrix:
        """Materialized constraint matrix (test/inspection path)."""
        n = self.n_slots
        delta = self.slot_hours
        blocks = []
        prefix = sp.csr_matrix(np.tril(np.ones((n, n))))
        eye = sp.eye(n, format="csr")
        pad = lambda m: sp.hstack([m, sp.csr_matrix((m.shape[0], self.n_targets))], format="csr")
        blocks.append(pad(-prefix))
        blocks.append(pad(delta * prefix))
        blocks.append(pad(eye))
        blocks.append(pad(-eye))
        if not self.selling:
            blocks.append(pad(-eye))
            blocks.append(
                sp.hstack(
                    [sp.csr_matrix((self.n_targets, n)), -sp.eye(self.n_targets)], format="csr"
                )
            )
        blocks.append(pad(sp.csr_matrix(np.ones((1, n)))))
        return sp.vstack(blocks, format="csr")


def build(instance: Instance) -> QpForm:
    """Assemble a validated instance into its QP form."""
    return QpForm(instance)


def objective_at(qp: QpForm, z) -> float:
    """Module-level alias for :meth:`QpForm.objective_at`."""
    return qp.objective_at(np.asarray(z, dtype=float))
