"""Operator-splitting QP solver with equilibration, adaptive penalty and polish.

The algorithm is ADMM on the split

    minimize 0.5 z'Qz + q'z + I_C(v)   subject to  Az = v

where C is the box [l, u] built from the constraint rows (LE rows get
l = -inf, the equality row collapses to a point). Each iteration solves one
sparse linear system whose factorization is cached and redone only when the
penalty changes. The problem is Ruiz-equilibrated first; every reported
residual is measured on the original, unscaled data.

The iteration itself runs on an equivalent reformulation with one
state-of-charge variable per slot (see _Workspace), which keeps the matrix
sparse and its conditioning independent of the horizon length; the
multipliers handed back are exactly those of the original rows.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import SolveStatus, best_targets
from .qp import (
    CHARGE_PEAK,
    DISCHARGE_PEAK,
    NO_DEFICIT,
    NO_OVERFLOW,
    OUTPUT_NONNEG,
    TARGET_NONNEG,
    TOTAL_ENERGY,
    QpForm,
)

PREFIX_FAMILIES = (NO_DEFICIT, NO_OVERFLOW)  # rows that are cumulative sums

# Attempt an exact active-set polish once the primal residual is within this
# factor of eps_abs; a correct guess ends the run long before the first-order
# iteration alone would reach tolerance.
_EARLY_POLISH_GATE = 1e3

# A dual residual near tolerance while the primal is still above it marks a
# crawl along a flat face; polish attempts start early in that case.
_STALL_DUAL_FRACTION = 1e4
_STALL_PRIMAL_GATE = 1e6

# Quasi-definite shift for the polish system; small enough that one or two
# refinement steps erase it, large enough to make the factorization safe.
_POLISH_SHIFT = 1e-8

# Sign-repair of multipliers solves a bounded least-squares problem with one
# column per active row; up to this many rows it runs dense BVLS, beyond it a
# sparse trust-region fit.
_REPAIR_DENSE_ROWS = 600

# Slack window admitting rows into the wide support fit, and the cap on how
# many such rows join it. Wider than the activity window on purpose: rows the
# iterate has not pushed against yet must be on the table for the fit to lean
# on; nearest faces matter most, so the cap keeps the fit affordable.
_SUPPORT_WINDOW = 1e-2
_SUPPORT_EXTRA = 200

# Crossed-row pinning after a support re-identification stops growing the
# mask once the crossings stop looking like isolated weakly active rows.
_GROW_LIMIT = 64


@dataclass(frozen=True)
class SolverSettings:
    """Tunable knobs; the defaults solve every bundled scenario.

    rho is the ADMM penalty (adapted during the run between rho_min and
    rho_max unless adaptive_rho is off); sigma is the proximal regularization
    that keeps the linear system positive definite. Convergence is declared
    on the unscaled problem: constraint violation <= eps_abs, stationarity
    <= eps_abs + eps_rel * (gradient scale), complementarity <= eps_abs.
    """

    rho: float = 0.1
    sigma: float = 1e-6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 100000
    polish: bool = True
    alpha_relax: float = 1.6
    check_interval: int = 25
    adaptive_rho: bool = True
    adaptive_rho_threshold: float = 5.0
    rho_min: float = 1e-6
    rho_max: float = 1e6
    rho_eq_scale: float = 1e3
    scaling_iters: int = 10
    polish_refine_steps: int = 3

    def __post_init__(self):
        positive = {
            "rho": self.rho,
            "sigma": self.sigma,
            "eps_abs": self.eps_abs,
            "eps_rel": self.eps_rel,
            "alpha_relax": self.alpha_relax,
            "rho_eq_scale": self.rho_eq_scale,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name}={value} must be > 0")
        if self.max_iter < 1:
            raise ValueError(f"max_iter={self.max_iter} must be >= 1")
        if self.check_interval < 1:
            raise ValueError(f"check_interval={self.check_interval} must be >= 1")


@dataclass(frozen=True)
class SolveResult:
    """Primal/dual pair plus convergence diagnostics.

    duals holds one multiplier per constraint row in row order,
    non-negative (within eps_abs) for LE rows, sign-free for the equality.
    """

    z: np.ndarray
    duals: np.ndarray
    status: SolveStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool = False
    polish_note: Optional[str] = None


@dataclass(frozen=True)
class Residuals:
    """Unscaled optimality measures for a primal/dual candidate."""

    primal: float
    dual: float
    complementarity: float
    min_dual: float
    primal_scale: float
    dual_scale: float

    def optimal(self, eps_abs: float, eps_rel: float) -> bool:
        return (
            self.primal <= eps_abs
            and self.dual <= eps_abs + eps_rel * self.dual_scale
            and self.complementarity <= eps_abs
            and self.min_dual >= -eps_abs
        )

    def penalty_ratio(self) -> float:
        """Primal over dual residual, for penalty tuning.

        The primal side is normalized by its scale so the cumulative rows,
        whose values dwarf every other row, cannot dominate it. The dual
        side is left absolute: its scale is inflated by the multiplier
        pullback whenever the duals are still moving, which is exactly
        when the signal matters.
        """
        rel_primal = self.primal / max(self.primal_scale, 1e-16)
        return rel_primal / max(self.dual, 1e-16)


def residuals_at(qp: QpForm, z: np.ndarray, duals: np.ndarray) -> Residuals:
    """Measure primal violation, stationarity, complementarity and dual sign."""
    values = qp.constraint_values(z)
    resid = values - qp.rhs
    le = ~qp.is_eq
    primal = max(
        float(np.max(resid[le], initial=0.0)),
        float(np.max(np.abs(resid[qp.is_eq]), initial=0.0)),
        0.0,
    )
    p_scale = max(
        float(np.max(np.abs(values))),
        float(np.max(np.abs(qp.rhs))),
    )
    quad = qp.quad_matvec(z)
    pullback = qp.multiplier_pullback(duals)
    grad = quad + qp.linear + pullback
    dual = float(np.max(np.abs(grad)))
    scale = max(
        float(np.max(np.abs(quad))),
        float(np.max(np.abs(pullback))),
        float(np.max(np.abs(qp.linear))),
    )
    slack = qp.rhs - values
    comp = float(np.max(np.abs(duals[le] * slack[le]), initial=0.0))
    min_dual = float(np.min(duals[le], initial=0.0))
    return Residuals(primal, dual, comp, min_dual, p_scale, scale)


class _Workspace:
    """Equilibrated internal reformulation and its cached factorization.

    The source rows accumulate prefix sums, so a matrix built from them is
    dense in triangles and its conditioning grows with the horizon, dragging
    the iteration count with it. The workspace therefore rewrites the
    problem over u = [y, w, soc] with one state-of-charge variable per slot:

        soc_t - soc_{t-1} - delta*y_t = -delta*x_t      (recurrence)
        0 <= soc_t <= capacity, terminal soc_N = 0      (level box)
        lower_t <= y_t <= x_t + charge_peak             (output box)
        0 <= w_i  unless selling                        (target box)

    the same feasible set with O(N) nonzeros. The box multipliers pull back
    exactly onto the source rows (level bounds onto the cumulative rows, the
    terminal level onto the energy balance), and every candidate is judged
    by residuals on the original, unscaled problem.
    """

    def __init__(self, qp: QpForm, settings: SolverSettings):
        self.qp = qp
        self.settings = settings
        n, k = qp.n_slots, qp.n_targets
        self.n_slots = n
        self.delta = qp.slot_hours
        inst = qp.instance
        demand = inst.load.demand_kw
        battery = inst.battery

        self.n_u = n + k + n
        self.m = 3 * n + (0 if qp.selling else k)
        soc0 = n + k  # column where the state-of-charge block starts

        t = np.arange(n)
        rows = [t, t, t[1:], n + t, 2 * n + t]
        cols = [t, soc0 + t, soc0 + t[:-1], soc0 + t, t]
        vals = [np.full(n, -self.delta), np.ones(n), -np.ones(n - 1), np.ones(n), np.ones(n)]
        if not qp.selling:
            rows.append(3 * n + np.arange(k))
            cols.append(n + np.arange(k))
            vals.append(np.ones(k))
        self.a_rows = np.concatenate(rows)
        self.a_cols = np.concatenate(cols)
        self.a_vals = np.concatenate(vals)

        lower = np.empty(self.m)
        upper = np.empty(self.m)
        recurrence_rhs = -self.delta * demand
        recurrence_rhs[0] += inst.initial_soc_kwh
        lower[:n] = recurrence_rhs
        upper[:n] = recurrence_rhs
        lower[n : 2 * n] = 0.0
        upper[n : 2 * n] = battery.capacity_kwh
        upper[2 * n - 1] = 0.0  # the battery must end the horizon empty
        peak_floor = demand - battery.discharge_peak_kw
        if qp.selling:
            lower[2 * n : 3 * n] = peak_floor
            self.y_lower_is_peak = np.ones(n, dtype=bool)
        else:
            lower[2 * n : 3 * n] = np.maximum(peak_floor, 0.0)
            self.y_lower_is_peak = peak_floor >= 0.0
        upper[2 * n : 3 * n] = demand + battery.charge_peak_kw
        if not qp.selling:
            lower[3 * n :] = 0.0
            upper[3 * n :] = np.inf
        self.lower = lower
        self.upper = upper

        self.is_eq = np.zeros(self.m, dtype=bool)
        self.is_eq[:n] = True
        self.is_eq[2 * n - 1] = True

        quad = qp.quadratic.tocoo()
        self.p_rows = quad.row
        self.p_cols = quad.col
        self.p_vals = quad.data
        self.q_full = np.concatenate([qp.linear, np.zeros(n)])

        self._equilibrate()

        self.a_s = sp.csr_matrix(
            (self.a_vals * self.e[self.a_rows] * self.d[self.a_cols], (self.a_rows, self.a_cols)),
            shape=(self.m, self.n_u),
        )
        self.at_s = self.a_s.T.tocsr()
        self.at_raw = sp.csr_matrix(
            (self.a_vals, (self.a_cols, self.a_rows)), shape=(self.n_u, self.m)
        )
        self.p_s = sp.csr_matrix(
            (
                self.c * self.p_vals * self.d[self.p_rows] * self.d[self.p_cols],
                (self.p_rows, self.p_cols),
            ),
            shape=(self.n_u, self.n_u),
        )
        self.q_s = self.c * self.d * self.q_full
        self.lower_s = self.e * self.lower
        self.upper_s = self.e * self.upper
        self.lu = None

    # -- scaling -----------------------------------------------------------

    def _equilibrate(self):
        d = np.ones(self.n_u)
        e = np.ones(self.m)
        c = 1.0
        abs_a = np.abs(self.a_vals)
        abs_p = np.abs(self.p_vals)
        for _ in range(self.settings.scaling_iters):
            scaled_a = abs_a * e[self.a_rows] * d[self.a_cols]
            col = np.zeros(self.n_u)
            np.maximum.at(col, self.a_cols, scaled_a)
            if abs_p.size:
                np.maximum.at(col, self.p_cols, c * abs_p * d[self.p_rows] * d[self.p_cols])
            row = np.zeros(self.m)
            np.maximum.at(row, self.a_rows, scaled_a)
            d *= 1.0 / np.sqrt(np.where(col < 1e-10, 1.0, col))
            e *= 1.0 / np.sqrt(np.where(row < 1e-10, 1.0, row))

            quad_cols = np.zeros(self.n_u)
            if abs_p.size:
                np.maximum.at(quad_cols, self.p_cols, c * abs_p * d[self.p_rows] * d[self.p_cols])
            denom = max(
                float(np.mean(quad_cols)),
                float(np.max(np.abs(c * d * self.q_full), initial=0.0)),
            )
            if denom > 1e-10:
                c *= 1.0 / denom
        self.d = d
        self.e = e
        self.c = c

    # -- mappings between the two forms --------------------------------------

    def extend(self, z: np.ndarray) -> np.ndarray:
        """Lift a source-variable point to the internal variables (exact levels)."""
        inst = self.qp.instance
        soc = inst.initial_soc_kwh + self.delta * np.cumsum(
            z[: self.n_slots] - inst.load.demand_kw
        )
        return np.concatenate([z, soc])

    def spec_duals(self, mu: np.ndarray) -> np.ndarray:
        """Pull the internal box multipliers back onto the source rows."""
        qp = self.qp
        n = self.n_slots
        beta = mu[n : 2 * n]
        gamma = mu[2 * n : 3 * n]
        duals = np.zeros(qp.n_rows)
        lam_deficit = self.delta * np.maximum(-beta, 0.0)
        lam_overflow = np.maximum(beta, 0.0)
        # The terminal level row is the energy balance in disguise; its
        # multiplier is sign-free and the horizon-end cumulative rows get 0.
        duals[qp.slices[TOTAL_ENERGY]] = self.delta * beta[n - 1]
        lam_deficit[n - 1] = 0.0
        lam_overflow[n - 1] = 0.0
        duals[qp.slices[NO_DEFICIT]] = lam_deficit
        duals[qp.slices[NO_OVERFLOW]] = lam_overflow
        duals[qp.slices[CHARGE_PEAK]] = np.maximum(gamma, 0.0)
        push_down = np.maximum(-gamma, 0.0)
        duals[qp.slices[DISCHARGE_PEAK]] = np.where(self.y_lower_is_peak, push_down, 0.0)
        if not qp.selling:
            duals[qp.slices[OUTPUT_NONNEG]] = np.where(self.y_lower_is_peak, 0.0, push_down)
            duals[qp.slices[TARGET_NONNEG]] = np.maximum(-mu[3 * n :], 0.0)
        return duals

    def internal_duals(self, duals: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`spec_duals`, used to warm-start from source rows."""
        qp = self.qp
        n = self.n_slots
        beta = duals[qp.slices[NO_OVERFLOW]] - duals[qp.slices[NO_DEFICIT]] / self.delta
        beta[n - 1] += float(duals[qp.slices[TOTAL_ENERGY]][0]) / self.delta
        p = -np.cumsum(beta[::-1])[::-1]
        gamma = duals[qp.slices[CHARGE_PEAK]] - duals[qp.slices[DISCHARGE_PEAK]]
        parts = [p, beta, gamma]
        if not qp.selling:
            parts[2] = gamma - duals[qp.slices[OUTPUT_NONNEG]]
            parts.append(-duals[qp.slices[TARGET_NONNEG]])
        return np.concatenate(parts)

    def unscale(self, u: np.ndarray, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = (self.d * u)[: self.qp.n_vars]
        return z, self.spec_duals(self.e * mu / self.c)

    def rho_vector(self, base: float) -> np.ndarray:
        rho = np.full(self.m, base)
        rho[self.is_eq] = base * self.settings.rho_eq_scale
        return rho

    # -- linear system -------------------------------------------------------

    def factorize(self, rho_vec: np.ndarray):
        """Assemble P_scaled + sigma*I + A_scaled' diag(rho) A_scaled and factor it.

        The state-space rows keep the assembled matrix at O(N) nonzeros, so
        the sparse factorization runs in near-linear time and is reused by
        every iteration until the penalty changes.
        """
        gram = self.at_s @ sp.diags(rho_vec) @ self.a_s
        identity = sp.identity(self.n_u, format="csr")
        self.lu = spla.splu((self.p_s + self.settings.sigma * identity + gram).tocsc())

    # -- infeasibility certificate ----------------------------------------------

    def primal_infeasible(self, dmu_scaled: np.ndarray, tol: float = 1e-8) -> bool:
        """Check whether the dual-step direction certifies an empty feasible set."""
        v = self.e * dmu_scaled
        norm = float(np.max(np.abs(v), initial=0.0))
        if norm <= 1e-14:
            return False
        v = v / norm
        if float(np.max(np.abs(self.at_raw @ v))) > tol:
            return False
        pos = np.maximum(v, 0.0)
        unbounded = np.isinf(self.upper)
        if float(np.max(pos[unbounded], initial=0.0)) > tol:
            return False
        support = float(self.upper[~unbounded] @ pos[~unbounded])
        support += float(self.lower @ np.minimum(v, 0.0))
        return support < -tol


def solve(
    qp: QpForm,
    settings: Optional[SolverSettings] = None,
    initial: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> SolveResult:
    """Solve the QP to the requested tolerances.

    Parameters
    ----------
    qp:
        Assembled problem.
    settings:
        Tolerances and algorithm knobs; defaults are fine for all bundled data.
    initial:
        Optional warm start (z, duals) in unscaled units, e.g. the previous
        point of a sweep.

    Returns
    -------
    SolveResult
        status OPTIMAL guarantees feasibility, stationarity and
        complementarity within the tolerances on the unscaled problem;
        MAX_ITERATIONS returns the last iterate with its residuals.
    """
    settings = settings or SolverSettings()
    ws = _Workspace(qp, settings)

    if initial is not None:
        z0, duals0 = initial
        u = ws.extend(np.asarray(z0, dtype=float)) / ws.d
        mu = ws.internal_duals(np.asarray(duals0, dtype=float)) * ws.c / ws.e
    else:
        # Passing the demand through, with any starting charge shed as fast
        # as the discharge peak allows, is feasible whenever the instance is;
        # the run then begins with (near) zero primal violation instead of a
        # cumulative one that shrinks only slowly.
        demand = qp.instance.load.demand_kw
        battery = qp.instance.battery
        delta = qp.slot_hours
        if qp.selling:
            drain_rate = np.full(qp.n_slots, battery.discharge_peak_kw)
        else:
            drain_rate = np.minimum(battery.discharge_peak_kw, demand)
        ahead = np.cumsum(drain_rate) - drain_rate
        shed = np.clip(qp.instance.initial_soc_kwh / delta - ahead, 0.0, drain_rate)
        y0 = demand - shed
        targets = best_targets(y0, qp.instance)
        z0 = qp.encode(y0, targets[:1] if qp.constant_target else targets)
        u = ws.extend(z0) / ws.d
        mu = np.zeros(ws.m)

    lower = ws.lower_s
    upper = ws.upper_s
    v = np.clip(ws.a_s @ u, lower, upper)

    q_s = ws.q_s
    rho_base = float(np.clip(settings.rho, settings.rho_min, settings.rho_max))
    rho_vec = ws.rho_vector(rho_base)
    ws.factorize(rho_vec)

    relax = settings.alpha_relax
    status = SolveStatus.MAX_ITERATIONS
    iterations = settings.max_iter
    measured = None
    mu_at_last_check = mu.copy()
    attempt_interval = 1
    checks_since_attempt = 0
    best_primal = np.inf
    checks_since_progress = 0
    dual_reset_left = 1

    for k in range(1, settings.max_iter + 1):
        rhs = settings.sigma * u - q_s + ws.at_s @ (rho_vec * v - mu)
        u_hat = ws.lu.solve(rhs)
        au_hat = ws.a_s @ u_hat
        u = relax * u_hat + (1.0 - relax) * u
        au_relaxed = relax * au_hat + (1.0 - relax) * v
        v = np.clip(au_relaxed + mu / rho_vec, lower, upper)
        mu = mu + rho_vec * (au_relaxed - v)

        if k % settings.check_interval == 0 or k == settings.max_iter:
            z_u, duals_u = ws.unscale(u, mu)
            measured = residuals_at(qp, z_u, duals_u)
            if measured.optimal(settings.eps_abs, settings.eps_rel):
                status = SolveStatus.OPTIMAL
                iterations = k
                break
            if measured.primal > settings.eps_abs and ws.primal_infeasible(mu - mu_at_last_check):
                status = SolveStatus.INFEASIBLE
                iterations = k
                break
            mu_at_last_check = mu.copy()
            if measured.primal < 0.9 * best_primal:
                best_primal = measured.primal
                checks_since_progress = 0
            else:
                checks_since_progress += 1
            # A poisoned warm start can park the iterate on a wrong face
            # where the multipliers block primal progress indefinitely.
            # Dropping them once lets the iteration rebuild the duals from
            # the primal point it has actually reached.
            if (
                dual_reset_left > 0
                and checks_since_progress >= 40
                and measured.dual <= settings.eps_abs
                and measured.primal > _EARLY_POLISH_GATE * settings.eps_abs
            ):
                dual_reset_left = 0
                mu = np.zeros(ws.m)
                mu_at_last_check = mu.copy()
                best_primal = np.inf
                checks_since_progress = 0
                continue
            stalled = (
                measured.dual <= _STALL_DUAL_FRACTION * settings.eps_abs
                and measured.primal <= _STALL_PRIMAL_GATE * settings.eps_abs
            )
            if settings.polish and (
                measured.primal <= _EARLY_POLISH_GATE * settings.eps_abs or stalled
            ):
                candidate = SolveResult(
                    z=z_u,
                    duals=duals_u,
                    status=SolveStatus.OPTIMAL,
                    iterations=k,
                    primal_residual=measured.primal,
                    dual_residual=measured.dual,
                )
                checks_since_attempt += 1
                # Exponential backoff keeps failed attempts from dominating
                # the run when the activity guess churns check after check;
                # a later retry sees a more settled iterate anyway.
                guess = None
                if checks_since_attempt >= attempt_interval:
                    guess = _active_rows(qp, candidate, settings.eps_abs)
                if guess is not None and int(guess.sum()) <= qp.n_vars:
                    checks_since_attempt = 0
                    attempt_interval = min(2 * attempt_interval, 16)
                    for z_new, duals_new in _polish_candidates(candidate, qp, settings, guess)[0]:
                        better = residuals_at(qp, z_new, duals_new)
                        if better.optimal(settings.eps_abs, settings.eps_rel):
                            return SolveResult(
                                z=z_new,
                                duals=duals_new,
                                status=SolveStatus.OPTIMAL,
                                iterations=k,
                                primal_residual=better.primal,
                                dual_residual=better.dual,
                                polished=True,
                            )
            if settings.adaptive_rho:
                # One capped multiplicative step per check; a persistent
                # imbalance still walks the penalty across decades quickly,
                # while a single noisy reading cannot fling it to a bound.
                factor = float(np.clip(np.sqrt(measured.penalty_ratio()), 1e-2, 1e2))
                candidate_rho = float(np.clip(rho_base * factor, settings.rho_min, settings.rho_max))
                threshold = settings.adaptive_rho_threshold
                if candidate_rho > rho_base * threshold or candidate_rho < rho_base / threshold:
                    rho_base = candidate_rho
                    rho_vec = ws.rho_vector(rho_base)
                    ws.factorize(rho_vec)

    z_u, duals_u = ws.unscale(u, mu)
    if measured is None:
        measured = residuals_at(qp, z_u, duals_u)
    result = SolveResult(
        z=z_u,
        duals=duals_u,
        status=status,
        iterations=iterations,
        primal_residual=measured.primal,
        dual_residual=measured.dual,
    )
    if settings.polish and status is SolveStatus.OPTIMAL:
        result = polish(result, qp, settings)
    return result


def _active_rows(qp: QpForm, result: SolveResult, eps_abs: float) -> np.ndarray:
    # One-sided: a violated row is active no matter how large the violation.
    values = qp.constraint_values(result.z)
    slack = qp.rhs - values
    le = ~qp.is_eq
    near = slack < 10.0 * eps_abs
    pushed = result.duals > eps_abs
    return qp.is_eq | (le & (near | pushed))


def polish(
    qp_result: SolveResult,
    qp: QpForm,
    settings: Optional[SolverSettings] = None,
    active: Optional[np.ndarray] = None,
) -> SolveResult:
    """Re-solve exactly on the identified active set and keep the result only if it wins.

    Consecutive active prefix-sum rows are differenced before factorization,
    which keeps the system sparse (each difference touches only the slots
    between two activation times); the multipliers of the original rows are
    recovered by telescoping. The factored matrix carries a tiny
    quasi-definite shift so that flat optimal faces (e.g. alpha=1, where
    shifting energy between periods leaves the objective unchanged) do not
    break the factorization; refinement against the unshifted system then
    restores an exact point whenever the active set is consistent. Rows the
    guess pinned wrongly reveal themselves through negative multipliers and
    are dropped for another round, and on flat faces a proximal solve
    anchored at the input point stands in for the wandering exact one.
    Acceptance requires both residuals to strictly decrease and the
    inequality multipliers to stay non-negative within eps_abs; otherwise
    the input is returned unchanged. An inconsistent active set (refinement
    fails to converge) is reported via polish_note and leaves the input
    unchanged. Callers holding a sharper activity guess than the default
    slack window gives may pass it as a boolean row mask.
    """
    settings = settings or SolverSettings()
    eps = settings.eps_abs
    candidates, note = _polish_candidates(qp_result, qp, settings, active)
    old = residuals_at(qp, qp_result.z, qp_result.duals)
    for z_new, duals_new in candidates:
        new = residuals_at(qp, z_new, duals_new)
        if new.primal < old.primal and new.dual < old.dual and new.min_dual >= -eps:
            return replace(
                qp_result,
                z=z_new,
                duals=duals_new,
                primal_residual=new.primal,
                dual_residual=new.dual,
                polished=True,
                polish_note=None,
            )
    return replace(qp_result, polish_note=note)


def _polish_candidates(
    qp_result: SolveResult,
    qp: QpForm,
    settings: SolverSettings,
    active: Optional[np.ndarray],
) -> tuple[list[tuple[np.ndarray, np.ndarray]], Optional[str]]:
    """Candidate (z, duals) pairs from active-set re-solves, best guess first.

    Pinned rows whose multipliers come back negative are dropped and the
    system re-solved, until the multipliers are clean or the round budget
    runs out; the final round's candidates are yielded first. The note
    reports a round whose refinement stalled, meaning the guessed rows
    admit no exact solution.
    """
    eps = settings.eps_abs
    active = _active_rows(qp, qp_result, eps) if active is None else active.copy()
    active = _normalize_mask(qp, active)

    rounds: list[list[tuple[np.ndarray, np.ndarray]]] = []
    note = None
    prev_floor = None
    repairs_left = 2
    reidentify_left = 2
    grow_mode = False
    for _ in range(8):
        solved = _active_kkt_solve(qp, qp_result.z, active, settings)
        if solved is None:
            note = "SingularSystem"
            break
        exact, anchored, converged = solved
        batch = [pair for pair in (exact, anchored) if pair is not None]
        rounds.append(batch)
        if not converged:
            note = "SingularSystem"
        if not batch:
            break
        if grow_mode and exact is not None:
            # The support fit keeps only rows with visibly positive
            # multipliers, so weakly active rows (zero multiplier at the
            # optimum) fall out and the exact solution drifts across them.
            # Pinning the crossed rows restores feasibility; their
            # multipliers stay near zero, so no drop cycle follows. A flood
            # of crossings means the fit picked a wrong face altogether:
            # growing the mask row by row would never catch up, so give up.
            slack_exact = qp.rhs - qp.constraint_values(exact[0])
            crossed = ~active & ~qp.is_eq & (slack_exact < -eps)
            n_crossed = int(crossed.sum())
            if n_crossed > _GROW_LIMIT:
                break
            grown = active | crossed
            if crossed.any() and int(grown.sum()) <= qp.n_vars:
                active = grown
                continue
        duals_probe = batch[0][1]
        wrong = active & ~qp.is_eq & (duals_probe < -eps)
        if wrong.any():
            z_prox = batch[-1][0]
            # Dependent active rows can split a legitimately nonnegative
            # multiplier into a signed pair; rebuild the signs for the
            # proximal point before treating any row as wrongly pinned. Only
            # a repair that is itself near-stationary may stand in for row
            # surgery.
            if repairs_left > 0:
                repairs_left -= 1
                repaired = _repair_duals(qp, active, z_prox)
                if repaired is not None:
                    check = residuals_at(qp, z_prox, repaired)
                    if check.min_dual >= -eps and check.dual <= eps + settings.eps_rel * check.dual_scale:
                        batch.insert(0, (z_prox, repaired))
                        break
            if reidentify_left > 0:
                # Second pass casts a wider net: when the reference point
                # sits on a neighbouring face, the rows that should take
                # over are not within the tight window yet.
                window = _SUPPORT_WINDOW * (1.0 if reidentify_left == 2 else 10.0)
                reidentify_left -= 1
                support = _support_mask(qp, z_prox, active, eps, window)
                if support is not None:
                    support = _normalize_mask(qp, support)
                    small = int(support.sum()) <= qp.n_vars
                    if small and not np.array_equal(support, active):
                        active = support
                        prev_floor = None
                        grow_mode = True
                        continue
        if not wrong.any():
            break
        floor = float(duals_probe[wrong].min())
        if prev_floor is not None and floor <= 0.5 * prev_floor:
            break  # dropping is trading one negative multiplier for another
        prev_floor = floor
        active = active & ~wrong
    candidates = [pair for batch in reversed(rounds) for pair in batch]
    return candidates, note


def _normalize_mask(qp: QpForm, active: np.ndarray) -> np.ndarray:
    """Strip rows that would make the pinned system structurally singular."""
    # The horizon-end cumulative rows are scalar multiples of the equality
    # row, so keeping them active would make the system singular; their
    # multipliers fold into the sign-free equality multiplier instead.
    active = active.copy()
    active[qp.slices[NO_DEFICIT].stop - 1] = False
    active[qp.slices[NO_OVERFLOW].stop - 1] = False
    # At most one single-column row per output slot; duplicates arise when a
    # peak bound coincides with the non-negativity bound.
    seen = np.zeros(qp.n_slots, dtype=bool)
    for family in (OUTPUT_NONNEG, DISCHARGE_PEAK, CHARGE_PEAK):
        sl = qp.slices.get(family)
        if sl is None:
            continue
        local = np.flatnonzero(active[sl])
        drop = local[seen[local]]
        active[sl.start + drop] = False
        seen[local] = True
    return active


def _repair_duals(qp: QpForm, active: np.ndarray, z: np.ndarray) -> Optional[np.ndarray]:
    """Sign-feasible multipliers for a fixed point via bounded least squares.

    Linearly dependent active rows let a KKT solve return small negative
    multiplier entries even when a nonnegative combination exists for the
    very same point, and the sign check would then reject a perfectly good
    candidate. This rebuilds the multipliers from scratch: least squares
    against the objective gradient over the active rows, nonnegative except
    for the energy-balance row. Returns None when the repair is unavailable.
    """
    idx = np.flatnonzero(active)
    if idx.size > min(_REPAIR_DENSE_ROWS, qp.n_vars):
        return None
    fitted = _bounded_fit(qp, idx, z)
    if fitted is None:
        return None
    duals = np.zeros(qp.n_rows)
    duals[idx] = fitted
    return duals


def _bounded_fit(qp: QpForm, idx: np.ndarray, z: np.ndarray) -> Optional[np.ndarray]:
    """Sign-constrained least-squares multipliers for the rows idx at point z.

    Small systems go through dense BVLS, which lands on exact corners;
    larger ones fall back to a sparse trust-region fit.
    """
    if idx.size == 0:
        return None
    lower = np.zeros(idx.size)
    lower[qp.is_eq[idx]] = -np.inf
    at_active = qp.constraint_matrix[idx].T
    target = -(qp.quad_matvec(z) + qp.linear)
    if idx.size <= min(_REPAIR_DENSE_ROWS, qp.n_vars):
        extra = {"method": "bvls"}
        at_active = at_active.toarray()
    else:
        extra = {
            "method": "trf",
            "lsq_solver": "lsmr",
            "lsmr_tol": 1e-13,
            "tol": 1e-12,
            "max_iter": 40,
        }
        at_active = at_active.tocsc()
    try:
        fit = scipy.optimize.lsq_linear(
            at_active, target, bounds=(lower, np.full(idx.size, np.inf)), **extra
        )
    except Exception:
        return None
    if not np.all(np.isfinite(fit.x)):
        return None
    return fit.x


def _support_mask(
    qp: QpForm, z: np.ndarray, base: np.ndarray, eps: float, window: float
) -> Optional[np.ndarray]:
    """Re-identify the active set from a wide sign-constrained fit at z.

    All rows within a loose slack window join the guessed rows as fit
    columns; rows the nonnegative fit actually leans on form the new mask.
    Unlike per-row surgery on the guess, the fit sees every nearby face at
    once, so it can swap a wrongly pinned row for the right neighbour.
    """
    if int(base.sum()) > _REPAIR_DENSE_ROWS:
        return None
    slack = qp.rhs - qp.constraint_values(z)
    wide = base | qp.is_eq
    # Cap the fit size: beyond the must-keep rows, nearest faces first.
    extra = np.flatnonzero(~wide & (slack < window))
    if extra.size > _SUPPORT_EXTRA:
        extra = extra[np.argsort(slack[extra], kind="stable")[:_SUPPORT_EXTRA]]
    wide = wide.copy()
    wide[extra] = True
    idx = np.flatnonzero(wide)
    fitted = _bounded_fit(qp, idx, z)
    if fitted is None:
        return None
    support = np.zeros(qp.n_rows, dtype=bool)
    support[idx] = np.abs(fitted) > eps
    return support | qp.is_eq


def _active_kkt_solve(
    qp: QpForm,
    z_ref: np.ndarray,
    active: np.ndarray,
    settings: SolverSettings,
) -> Optional[
    tuple[
        Optional[tuple[np.ndarray, np.ndarray]],
        Optional[tuple[np.ndarray, np.ndarray]],
        bool,
    ]
]:
    """Solve the KKT system of the rows marked active, as equalities.

    Returns (exact, anchored, converged) where each candidate is a
    (z, duals) pair or None, or None outright if factorization fails. The
    exact candidate solves the unshifted system via refinement and is kept
    only when the refinement converged. The anchored candidate solves the
    quasi-definite system with a proximal pull toward z_ref, so directions
    the curvature leaves free stay where the iteration put them instead of
    sliding along a flat face; its residuals are of order the shift, far
    below the tolerances.
    """
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    rhs_hat: list[float] = []
    chains: list[tuple[str, np.ndarray]] = []  # family name, active local indices
    r = 0
    n_slots = qp.n_slots
    for family, sl in qp.slices.items():
        local = np.flatnonzero(active[sl])
        if local.size == 0:
            chains.append((family, local))
            continue
        chains.append((family, local))
        if family in PREFIX_FAMILIES:
            coeff = -1.0 if family == NO_DEFICIT else qp.slot_hours
            prev = -1
            prev_rhs = 0.0
            for t in local:
                span = range(prev + 1, int(t) + 1)
                cols.extend(span)
                vals.extend([coeff] * len(span))
                rows.extend([r] * len(span))
                rhs_hat.append(float(qp.rhs[sl.start + t]) - prev_rhs)
                prev = int(t)
                prev_rhs = float(qp.rhs[sl.start + t])
                r += 1
        elif family == TOTAL_ENERGY:
            cols.extend(range(n_slots))
            vals.extend([1.0] * n_slots)
            rows.extend([r] * n_slots)
            rhs_hat.append(float(qp.rhs[sl.start]))
            r += 1
        else:
            for t in local:
                if family == TARGET_NONNEG:
                    cols.append(n_slots + int(t))
                    vals.append(-1.0)
                elif family == CHARGE_PEAK:
                    cols.append(int(t))
                    vals.append(1.0)
                else:  # DISCHARGE_PEAK or OUTPUT_NONNEG
                    cols.append(int(t))
                    vals.append(-1.0)
                rows.append(r)
                rhs_hat.append(float(qp.rhs[sl.start + t]))
                r += 1

    a_hat = sp.coo_matrix((vals, (rows, cols)), shape=(r, qp.n_vars)).tocsc()
    kkt = sp.bmat([[qp.quadratic, a_hat.T], [a_hat, None]], format="csc")
    shift = sp.diags(np.concatenate([np.full(qp.n_vars, _POLISH_SHIFT), np.full(r, -_POLISH_SHIFT)]))
    rhs_full = np.concatenate([-qp.linear, np.asarray(rhs_hat)])
    rhs_scale = max(float(np.max(np.abs(rhs_full))), 1.0)
    try:
        lu = spla.splu((kkt + shift).tocsc())
    except RuntimeError:
        return None
    u = lu.solve(rhs_full)
    correction = rhs_full - kkt @ u
    for _ in range(settings.polish_refine_steps):
        if float(np.max(np.abs(correction), initial=0.0)) < 1e-14 * rhs_scale:
            break
        u = u + lu.solve(correction)
        correction = rhs_full - kkt @ u
    converged = (
        np.all(np.isfinite(u))
        and float(np.max(np.abs(correction), initial=0.0)) <= 1e-7 * rhs_scale
    )

    def decode(u_vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu = u_vec[qp.n_vars :]
        duals_vec = np.zeros(qp.n_rows)
        offset = 0
        for family, local in chains:
            if local.size == 0:
                continue
            seg = mu[offset : offset + local.size]
            offset += local.size
            sl = qp.slices[family]
            if family in PREFIX_FAMILIES:
                lam = seg.copy()
                lam[:-1] -= seg[1:]  # telescoped differences back to per-row multipliers
                duals_vec[sl.start + local] = lam
            else:
                duals_vec[sl.start + local] = seg
        return u_vec[: qp.n_vars], duals_vec

    exact = decode(u) if converged else None
    rhs_anchor = rhs_full.copy()
    rhs_anchor[: qp.n_vars] += _POLISH_SHIFT * z_ref
    u_anchor = lu.solve(rhs_anchor)
    anchored = decode(u_anchor) if np.all(np.isfinite(u_anchor)) else None
    return exact, anchored, converged


def forced_result(qp: QpForm) -> SolveResult:
    """Closed-form optimum when the battery admits exactly one output profile.

    Applies when capacity, charge peak or discharge peak is zero and the
    battery starts empty: the only feasible output is the demand itself. The
    targets are the privacy-optimal means and the multipliers are built by
    telescoping the objective gradient onto the always-active cumulative
    rows, so the returned point satisfies the optimality system exactly and
    the output equals the demand bit for bit.
    """
    inst = qp.instance
    demand = inst.load.demand_kw
    targets = best_targets(demand, inst)
    w_vars = targets[:1] if qp.constant_target else targets
    z = qp.encode(demand, w_vars)

    grad = qp.quad_matvec(z) + qp.linear
    g = grad[: qp.n_slots]
    duals = np.zeros(qp.n_rows)
    delta = qp.slot_hours
    battery = inst.battery
    if battery.capacity_kwh == 0.0:
        # Both cumulative families are tight everywhere; split the gradient
        # increments by sign between them.
        r = g.copy()
        r[:-1] -= g[1:]
        duals[qp.slices[NO_DEFICIT]] = np.maximum(r, 0.0)
        duals[qp.slices[NO_OVERFLOW]] = np.maximum(-r, 0.0) / delta
    elif battery.charge_peak_kw == 0.0:
        level = np.maximum(np.maximum.accumulate(g[::-1])[::-1], 0.0)
        lam = level.copy()
        lam[:-1] -= level[1:]
        duals[qp.slices[NO_DEFICIT]] = lam
        duals[qp.slices[CHARGE_PEAK]] = level - g
    else:  # discharge peak is zero
        nu = -float(np.min(g))
        h = g + nu
        level = np.minimum.accumulate(h)
        lam = level.copy()
        lam[:-1] -= level[1:]
        duals[qp.slices[NO_DEFICIT]] = lam
        duals[qp.slices[DISCHARGE_PEAK]] = h - level
        duals[qp.slices[TOTAL_ENERGY]] = nu

    measured = residuals_at(qp, z, duals)
    return SolveResult(
        z=z,
        duals=duals,
        status=SolveStatus.OPTIMAL,
        iterations=0,
        primal_residual=measured.primal,
        dual_residual=measured.dual,
    )
