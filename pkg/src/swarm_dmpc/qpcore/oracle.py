"""Brute-force active-set enumeration for small strictly convex QPs.

Every subset of the inequality and bound constraints is tried as an
active set; the equality-constrained KKT system is solved for each and
the primal-feasible, dual-feasible point with the lowest objective is
returned. Exponential in the number of inequalities, test use only.
"""
from __future__ import annotations

import itertools

import numpy as np

from .problem import QpProblem


def _inequality_rows(p: QpProblem):
    """All inequalities as ``G x >= h`` (general rows, then finite bounds)."""
    rows = [p.dense("Ain")]
    rhs = [p.bin]
    eye = np.eye(p.n)
    lb = np.flatnonzero(np.isfinite(p.lb))
    ub = np.flatnonzero(np.isfinite(p.ub))
    rows += [eye[lb], -eye[ub]]
    rhs += [p.lb[lb], -p.ub[ub]]
    return np.vstack(rows).reshape(-1, p.n), np.concatenate(rhs)


def enumerate_active_sets(p: QpProblem, feas_tol: float = 1e-9, max_ineq: int = 16):
    """Return ``(x, objective)`` of the exact optimum, or ``(None, inf)`` if infeasible."""
    H = p.dense("H")
    Aeq = p.dense("Aeq")
    G, h = _inequality_rows(p)
    m = len(h)
    if m > max_ineq:
        raise ValueError(f"{m} inequalities is too many to enumerate (limit {max_ineq})")
    n, k = p.n, p.n_eq
    best_x, best_obj = None, np.inf
    for size in range(0, min(m, n) + 1):
        for act in itertools.combinations(range(m), size):
            act = list(act)
            C = np.vstack([Aeq, G[act]]) if (k or act) else np.zeros((0, n))
            d = np.concatenate([p.beq, h[act]])
            K = np.block([[H, -C.T], [C, np.zeros((len(d), len(d)))]])
            rhs = np.concatenate([-p.f, d])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            if not np.allclose(K @ sol, rhs, atol=1e-9, rtol=0):
                continue
            x = sol[:n]
            mult = sol[n + k:]
            if np.any(mult < -feas_tol):
                continue
            if np.any(G @ x - h < -feas_tol * (1 + np.abs(h))):
                continue
            obj = p.objective(x)
            if obj < best_obj - 1e-12:
                best_x, best_obj = x, obj
    return best_x, best_obj


def random_qp(rng: np.random.Generator, n: int, n_eq: int, n_in: int, n_bounds: int = 0,
              conditioning: float = 0.1) -> QpProblem:
    """Random strictly convex, feasible QP (a known point satisfies every constraint)."""
    M = rng.standard_normal((n, n))
    H = M.T @ M + conditioning * np.eye(n)
    f = rng.standard_normal(n) * 3.0
    x0 = rng.standard_normal(n)
    Aeq = rng.standard_normal((n_eq, n))
    beq = Aeq @ x0
    Ain = rng.standard_normal((n_in, n))
    bin_ = Ain @ x0 - rng.uniform(0.0, 1.0, n_in)
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    idx = rng.choice(n, size=min(n_bounds, n), replace=False)
    for j in idx:
        if rng.random() < 0.5:
            lb[j] = x0[j] - rng.uniform(0.0, 0.5)
        else:
            ub[j] = x0[j] + rng.uniform(0.0, 0.5)
    return QpProblem(H, f, Aeq, beq, Ain, bin_, lb, ub)
