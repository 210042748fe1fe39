"""Minimum-deviation control filter.

Solves argmin ||u - mu||^2 subject to affine rows a.u <= b; slacked rows are
folded in as quadratic penalties.  Problems are tiny (a handful of rows), so
the solver enumerates hard active sets through the KKT conditions, which is
exact and deterministic.  Also provides the exponential-CBF baseline
controller used for comparisons.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from pcbf.core import ClassKFunction, ConstraintFunction, DynamicsModel

_FEAS_TOL = 1e-9
_DUAL_TOL = 1e-9


@dataclass
class AffineConstraint:
    """Row a.u <= bound; slack_weight None means the row is hard."""

    row: np.ndarray
    bound: float
    slack_weight: float | None = None


@dataclass
class FilterResult:
    u: np.ndarray
    active_set: list[int]
    slack_values: list[float]
    feasible: bool
    deviation: float
    infeasible_reason: str | None = None


def build_cbf_constraint(pcbf, deriv, alpha: ClassKFunction, mu,
                         entry_index: int = 0,
                         slack_weight: float | None = None) -> AffineConstraint:
    """Barrier condition c0 + a.(u - mu) <= alpha(-hp) rearranged to a.u <= b."""
    h_p = pcbf.h_vector[entry_index] if hasattr(pcbf, "h_vector") else float(pcbf)
    row = np.asarray(deriv.row, dtype=float)
    bound = alpha.value(-h_p) - deriv.constant + float(row @ mu)
    return AffineConstraint(row=row, bound=bound, slack_weight=slack_weight)


def _penalized_objective(u, mu, slack):
    val = float(np.sum((u - mu) ** 2))
    for con in slack:
        val += con.slack_weight * max(0.0, float(con.row @ u) - con.bound) ** 2
    return val


def _solve_hard(mu, hard, H, c):
    """Minimize 0.5 u'Hu + c'u over the hard rows by active-set enumeration.

    Returns (u, active_indices) or (None, reason).
    """
    m = mu.size
    rows = [np.asarray(con.row, dtype=float) for con in hard]
    bounds = [con.bound for con in hard]

    usable = []
    for i, (a, b) in enumerate(zip(rows, bounds)):
        if np.linalg.norm(a) == 0.0:
            if 0.0 > b + _FEAS_TOL * (1.0 + abs(b)):
                return None, f"zero-row hard constraint {i} unsatisfiable"
            continue  # trivially satisfied, drop
        usable.append(i)

    best = None
    for size in range(len(usable) + 1):
        for subset in itertools.combinations(usable, size):
            k = len(subset)
            A = np.array([rows[i] for i in subset]).reshape(k, m)
            kkt = np.block([[H, A.T], [A, np.zeros((k, k))]]) if k else H
            rhs = np.concatenate([-c, [bounds[i] for i in subset]]) if k else -c
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            u = sol[:m]
            lam = sol[m:]
            if np.any(lam < -_DUAL_TOL):
                continue
            ok = all(
                float(rows[i] @ u) <= bounds[i] + _FEAS_TOL * (1.0 + abs(bounds[i]))
                for i in usable
            )
            if not ok:
                continue
            obj = 0.5 * float(u @ H @ u) + float(c @ u)
            if best is None or obj < best[0] - 1e-12:
                best = (obj, u, list(subset))
        if best is not None:
            break  # smallest consistent active set wins; larger ones only tie
    if best is None:
        return None, "no feasible active set"
    return (best[1], best[2]), None


def solve_min_deviation(mu, constraints: list[AffineConstraint]) -> FilterResult:
    """Deterministic small dense QP: nearest u to mu under the given rows."""
    mu = np.asarray(mu, dtype=float)
    m = mu.size
    hard = [c for c in constraints if c.slack_weight is None]
    slack = [c for c in constraints if c.slack_weight is not None]

    # fast path: one hard row, nothing slacked
    if len(hard) == 1 and not slack:
        a = np.asarray(hard[0].row, dtype=float)
        b = hard[0].bound
        nrm2 = float(a @ a)
        viol = float(a @ mu) - b
        if nrm2 == 0.0:
            if viol > _FEAS_TOL * (1.0 + abs(b)):
                return FilterResult(u=mu.copy(), active_set=[], slack_values=[],
                                    feasible=False, deviation=0.0,
                                    infeasible_reason="zero constraint row")
            return FilterResult(u=mu.copy(), active_set=[], slack_values=[],
                                feasible=True, deviation=0.0)
        u = mu - a * max(0.0, viol) / nrm2
        active = [0] if viol > 0 else []
        return FilterResult(u=u, active_set=active, slack_values=[],
                            feasible=True, deviation=float(np.linalg.norm(u - mu)))

    # iterate on which slacked rows are violated; each pass is a smooth QP
    violated = [False] * len(slack)
    best = None
    for _ in range(2 ** max(len(slack), 1) + 4):
        H = 2.0 * np.eye(m)
        c = -2.0 * mu
        for con, act in zip(slack, violated):
            if act:
                a = np.asarray(con.row, dtype=float)
                H += 2.0 * con.slack_weight * np.outer(a, a)
                c += -2.0 * con.slack_weight * con.bound * a
        result, reason = _solve_hard(mu, hard, H, c)
        if result is None:
            return FilterResult(u=mu.copy(), active_set=[], slack_values=[],
                                feasible=False, deviation=0.0, infeasible_reason=reason)
        u, active = result
        obj = _penalized_objective(u, mu, slack)
        if best is None or obj < best[0] - 1e-12:
            best = (obj, u, active)
        new_violated = [float(con.row @ u) > con.bound for con in slack]
        if new_violated == violated:
            break
        violated = new_violated

    _, u, active = best
    slack_values = [max(0.0, float(con.row @ u) - con.bound) for con in slack]
    return FilterResult(u=u, active_set=active, slack_values=slack_values,
                        feasible=True, deviation=float(np.linalg.norm(u - mu)))


def ecbf_baseline(h: ConstraintFunction, gains, model: DynamicsModel, mu_law):
    """Reactive baseline for relative-degree-2 constraints.

    Enforces hddot + k1 hdot + k2 h <= 0 as an affine row on u and projects
    the nominal input onto it.  Derivatives of hdot are taken by central
    finite differences, so only first derivatives of h are required.
    """
    k1, k2 = gains

    def hdot(t, x):
        return float(h.grad_t(t, x) + h.grad_x(t, x) @ model.drift(t, x))

    def controller(t, x):
        x = np.asarray(x, dtype=float)
        mu = np.asarray(mu_law(t, x), dtype=float)
        dt = 1e-6
        dpsi_dt = (hdot(t + dt, x) - hdot(t - dt, x)) / (2.0 * dt)
        dpsi_dx = np.empty(x.size)
        for i in range(x.size):
            d = max(1e-6, 1e-7 * abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += d
            xm[i] -= d
            dpsi_dx[i] = (hdot(t, xp) - hdot(t, xm)) / (2.0 * d)
        f = model.drift(t, x)
        g = model.input_matrix(t, x)
        row = dpsi_dx @ g
        bound = -k1 * hdot(t, x) - k2 * float(h.value(t, x)) - dpsi_dt - float(dpsi_dx @ f)
        if np.linalg.norm(row) == 0.0 and float(row @ mu) > bound:
            return FilterResult(u=mu, active_set=[], slack_values=[], feasible=False,
                                deviation=0.0, infeasible_reason="zero ECBF row")
        return solve_min_deviation(mu, [AffineConstraint(row=row, bound=bound)])

    return controller
