"""Operator-splitting (ADMM) QP solver with relaxation, adaptive rho and polishing.

The problem is converted to ``l <= A x <= u`` (equalities, inequalities
and finite bounds stacked in that order), Ruiz-equilibrated, and
permuted with reverse Cuthill-McKee so that the linear system
``P + sigma I + A' diag(rho) A`` has a narrow band. The band is factored
once per rho value; the iteration itself lives in ``_kernels``.

A :class:`QpWorkspace` can be re-solved after changing the linear cost,
which is how the ADMM consensus layer reuses factorizations across its
iterations within a control cycle.
"""
from __future__ import annotations

import time

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import _kernels
from .problem import (MAX_ITER, PRIMAL_INFEASIBLE, SOLVED, QpProblem, QpSettings, QpSolution,
                      primal_residual)

RHO_MIN, RHO_MAX = 1e-6, 1e6
RHO_EQ_SCALE = 1e3
SCALE_MIN, SCALE_MAX = 1e-4, 1e4
POLISH_DELTA = 1e-6
POLISH_REFINE = 3
ACTIVE_SET_STEPS = 2  # active-set corrections tried before falling back to iterating


def _stack_constraints(p: QpProblem):
    n = p.n
    blocks = [sp.csr_matrix(p.Aeq), sp.csr_matrix(p.Ain)]
    lo = [p.beq, p.bin]
    hi = [p.beq, np.full(p.n_in, np.inf)]
    bounded = np.flatnonzero(np.isfinite(p.lb) | np.isfinite(p.ub))
    if bounded.size:
        blocks.append(sp.csr_matrix((np.ones(bounded.size), (np.arange(bounded.size), bounded)),
                                    shape=(bounded.size, n)))
        lo.append(p.lb[bounded])
        hi.append(p.ub[bounded])
    A = sp.vstack(blocks, format="csr") if blocks else sp.csr_matrix((0, n))
    return A, np.concatenate(lo), np.concatenate(hi), bounded


def _limit(v):
    v = np.where(v < SCALE_MIN, 1.0, v)
    return np.minimum(v, SCALE_MAX)


def _group_max(idx, vals, size):
    out = np.zeros(size)
    np.maximum.at(out, idx, vals)
    return out


def _ruiz(P, A, q, iters):
    """Modified Ruiz equilibration on COO triplets (cheap for repeated setups)."""
    n, m = P.shape[0], A.shape[0]
    P = P.tocoo()
    A = A.tocoo()
    pr, pc, pv = P.row, P.col, P.data.copy()
    ar, ac, av = A.row, A.col, A.data.copy()
    if _kernels.USE_NUMBA:
        q = np.array(q, dtype=float)
        D, E, c = _kernels.ruiz_numba(pr.astype(np.int64), pc.astype(np.int64), pv,
                                      ar.astype(np.int64), ac.astype(np.int64), av, q, n, m,
                                      iters, SCALE_MIN, SCALE_MAX)
        return (sp.csr_matrix((pv, (pr, pc)), shape=(n, n)),
                sp.csr_matrix((av, (ar, ac)), shape=(m, n)), q, D, E, c)
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    q = q.copy()
    for _ in range(iters):
        colP = _group_max(pc, np.abs(pv), n)
        colA = _group_max(ac, np.abs(av), n)
        d = 1.0 / np.sqrt(_limit(np.maximum(colP, colA)))
        e = 1.0 / np.sqrt(_limit(_group_max(ar, np.abs(av), m)))
        pv *= d[pr] * d[pc]
        av *= e[ar] * d[ac]
        q = d * q
        D *= d
        E *= e
        mean_col = _group_max(pc, np.abs(pv), n).mean() if n else 1.0
        gamma = 1.0 / _limit(np.array([max(mean_col, np.abs(q).max(initial=0.0))]))[0]
        pv *= gamma
        q = q * gamma
        c *= gamma
    P = sp.csr_matrix((pv, (pr, pc)), shape=(n, n))
    A = sp.csr_matrix((av, (ar, ac)), shape=(m, n))
    return P, A, q, D, E, c


def _row_pairs(A: sp.csr_matrix):
    """All same-row nonzero pairs ``(a, b)`` with ``col[a] >= col[b]``.

    Returns ``(row, col_hi, col_lo, product)`` so that ``A' diag(r) A`` has
    lower-triangle entries ``sum r[row] * product`` at ``(col_hi, col_lo)``.
    """
    lens = np.diff(A.indptr)
    row_of = np.repeat(np.arange(A.shape[0]), lens)
    reps = lens[row_of]
    a = np.repeat(np.arange(A.nnz), reps)
    # for every nonzero a: partners indptr[row] .. indptr[row+1]-1
    first = np.repeat(A.indptr[row_of], reps)
    offs = np.arange(a.size) - np.repeat(np.cumsum(reps) - reps, reps)
    b = first + offs
    ca, cb = A.indices[a], A.indices[b]
    keep = ca >= cb
    a, b = a[keep], b[keep]
    return row_of[a], ca[keep], cb[keep], A.data[a] * A.data[b]


class _BandAssembler:
    """Builds ``P + shift I + A' diag(r) A`` directly in lower band storage."""

    def __init__(self, P: sp.csr_matrix, A: sp.csr_matrix):
        n = P.shape[0]
        Pc = P.tocoo()
        lower = Pc.row >= Pc.col
        pr, pc, pv = Pc.row[lower], Pc.col[lower], Pc.data[lower]
        self.rows, hi, lo, self.prod = _row_pairs(A)
        self.bw = int(max((pr - pc).max(initial=0), (hi - lo).max(initial=0)))
        self.n = n
        size = (self.bw + 1) * n
        self.base = np.bincount((pr - pc) * n + pc, weights=pv, minlength=size)
        self.flat = (hi - lo) * n + lo

    def band(self, shift: float, r) -> np.ndarray:
        size = (self.bw + 1) * self.n
        ab = self.base + np.bincount(self.flat, weights=self.prod * r[self.rows],
                                     minlength=size)
        ab[:self.n] += shift
        return ab.reshape(self.bw + 1, self.n)


class QpWorkspace:
    """Set-up data for repeated solves of one QP structure."""

    def __init__(self, problem: QpProblem, settings: QpSettings | None = None):
        self.problem = problem
        self.settings = settings or QpSettings()
        s = self.settings
        P0 = sp.csr_matrix(problem.H)
        A0, l0, u0, self.bounded = _stack_constraints(problem)
        self.n, self.m = problem.n, A0.shape[0]
        self.n_eq, self.n_in = problem.n_eq, problem.n_in
        self._A_orig = A0
        self._l_orig, self._u_orig = l0, u0
        if s.scaling_iters > 0:
            P, A, q, D, E, c = _ruiz(P0, A0, problem.f, s.scaling_iters)
        else:
            P, A, q = P0, A0, problem.f.copy()
            D, E, c = np.ones(self.n), np.ones(self.m), 1.0
        self.c = c
        self.cinv = 1.0 / c
        # fill-reducing permutation of the KKT-reduced matrix pattern
        pattern = (abs(P) + abs(A.T) @ abs(A) + sp.identity(self.n)).tocsr()
        self.perm = np.asarray(reverse_cuthill_mckee(pattern, symmetric_mode=True), dtype=np.int64)
        self.iperm = np.empty_like(self.perm)
        self.iperm[self.perm] = np.arange(self.n)
        self.P_csr = P[self.perm][:, self.perm].tocsr()
        self.A_csr = A[:, self.perm].tocsr()
        self.At_csr = self.A_csr.T.tocsr()
        self._band = _BandAssembler(self.P_csr, self.A_csr)
        self._H_csr = P0
        self._At_orig = A0.T.tocsr()
        self.D = D[self.perm]
        self.Dinv = 1.0 / self.D
        self.E = E
        self.Einv = 1.0 / E
        self.l = np.where(np.isfinite(l0), E * l0, -np.inf)
        self.u = np.where(np.isfinite(u0), E * u0, np.inf)
        self.q = (c * D * problem.f)[self.perm]
        self._D_unperm = D
        self.eq_rows = np.abs(self.u - self.l) < 1e-12
        self.free_rows = ~np.isfinite(self.l) & ~np.isfinite(self.u)
        self.rho = float(np.clip(s.rho, RHO_MIN, RHO_MAX))
        self._factor(self.rho)
        self.x = np.zeros(self.n)
        self.z = np.zeros(self.m)
        self.y = np.zeros(self.m)
        self._has_iterate = False
        self._eq_orig = np.abs(self._u_orig - self._l_orig) < 1e-12
        self._polish_cache = None
        self._active = None  # active set of the last certified solution
        self.n_factorizations = 1

    # -- setup helpers ----------------------------------------------------

    def _rho_vector(self, rho):
        r = np.full(self.m, rho)
        r[self.eq_rows] = RHO_EQ_SCALE * rho
        r[self.free_rows] = RHO_MIN
        return r

    def _factor(self, rho):
        self.rho = rho
        self.rho_vec = self._rho_vector(rho)
        ab = self._band.band(self.settings.sigma, self.rho_vec)
        self.bandwidth = self._band.bw
        self.fact = sla.cholesky_banded(ab, lower=True, check_finite=False)

    # -- public API -------------------------------------------------------

    def update_linear_cost(self, f):
        f = np.asarray(f, dtype=float).reshape(-1)
        if f.shape != (self.n,):
            raise ValueError(f"f has length {f.size}, expected {self.n}")
        self.problem = _replace_f(self.problem, f)
        self.q = (self.c * self._D_unperm * f)[self.perm]

    def warm_start(self, x=None, y=None):
        """Set the starting iterate from unscaled primal / dual vectors."""
        if x is not None:
            x = np.asarray(x, dtype=float).reshape(-1)
            self.x = (x[self.perm] * self.Dinv).copy()
            self.z = np.clip(self.A_csr @ self.x, self.l, self.u)
        if y is not None:
            y = np.asarray(y, dtype=float).reshape(-1)
            self.y = self.c * y * self.Einv
        self._has_iterate = True

    def solve(self, max_iter: int | None = None) -> QpSolution:
        s = self.settings
        t0 = time.perf_counter()
        if not self._has_iterate and s.warm_start is not None:
            self.warm_start(s.warm_start, s.warm_start_dual)
        if s.polish and s.reuse_active_set and (self._active is not None or self._has_iterate):
            # the previous active set often survives a change of linear cost,
            # and a warm start usually predicts it; a polished point that passes
            # the KKT tolerances is a certificate of optimality
            if self._active is not None:
                out = self._polish_on(*self._active)
            else:
                out = self._polish(*self._unscaled_iterate())
            for _ in range(ACTIVE_SET_STEPS):
                if out is None or (out[2] <= out[4] and out[3] <= out[5]):
                    break
                out = self._polish(out[0], out[6])
            if out is not None and out[2] <= out[4] and out[3] <= out[5]:
                xp, yp, pp, dp = out[:4]
                self.warm_start(xp, yp)
                return QpSolution(x=xp, status=SOLVED, primal_residual=float(pp),
                                  dual_residual=float(dp), objective=self.problem.objective(xp),
                                  iterations=0, y=yp, polished=True,
                                  solve_time=time.perf_counter() - t0)
        budget = s.max_iter if max_iter is None else max_iter
        done = 0
        status = _kernels.RUNNING
        prim = dual = np.inf
        while done < budget:
            it, status, prim, dual, ratio = _kernels.run_admm_loop(
                self.fact, self, self.x, self.z, self.y, budget - done, s)
            done += it
            if status == _kernels.RHO_UPDATE:
                new_rho = float(np.clip(self.rho * ratio, RHO_MIN, RHO_MAX))
                if new_rho != self.rho:
                    self._factor(new_rho)
                    self.n_factorizations += 1
                continue
            break
        self._has_iterate = True
        x, y = self._unscaled_iterate()
        sol_status = {_kernels.CONVERGED: SOLVED, _kernels.INFEASIBLE: PRIMAL_INFEASIBLE}.get(
            status, MAX_ITER)
        polished = False
        want_polish = s.polish and sol_status != PRIMAL_INFEASIBLE and (
            s.polish_converged or sol_status != SOLVED)
        out = self._polish(x, y) if want_polish else None
        if out is not None and out[2] <= out[4] and out[3] <= out[5]:
            x, y, pres, dres = out[:4]
            polished = True
            sol_status = SOLVED
        else:
            pres, dres, tol_p, tol_d = self._assess(x, y)
            if out is not None and out[2] <= pres and out[3] <= dres:
                x, y, pres, dres = out[:4]
                polished = True
            if sol_status == SOLVED and (pres > tol_p or dres > tol_d):
                sol_status = MAX_ITER
        obj = self.problem.objective(x)
        return QpSolution(x=x, status=sol_status, primal_residual=float(pres),
                          dual_residual=float(dres), objective=obj, iterations=done, y=y,
                          polished=polished, solve_time=time.perf_counter() - t0)

    # -- diagnostics ------------------------------------------------------

    def _unscaled_iterate(self):
        return self.x[self.iperm] * self._D_unperm, (self.y * self.E) * self.cinv

    def _products(self, x, y):
        return (_matvec(self._A_orig, x), _matvec(self._H_csr, x),
                _matvec(self._At_orig, y))

    def _assess(self, x, y):
        """Unscaled residuals and the matching termination tolerances."""
        s = self.settings
        Ax, Hx, Aty = self._products(x, y)
        f = self.problem.f
        pres = float(np.max(np.maximum(np.maximum(self._l_orig - Ax, Ax - self._u_orig), 0.0),
                            initial=0.0))
        dres = float(np.max(np.abs(Hx + f + Aty), initial=0.0))
        tp = s.eps_abs + s.eps_rel * float(np.max(np.abs(Ax), initial=0.0))
        td = s.eps_abs + s.eps_rel * max(float(np.max(np.abs(Hx), initial=0.0)),
                                         float(np.max(np.abs(Aty), initial=0.0)),
                                         float(np.max(np.abs(f), initial=0.0)))
        return pres, dres, tp, td

    def residuals(self, x, y):
        """Unscaled primal (constraint violation) and dual (stationarity) residuals."""
        return self._assess(x, y)[:2]

    def _polish(self, x, y):
        """Polish on the active set guessed from the iterate ``(x, y)``."""
        l, u = self._l_orig, self._u_orig
        Ax = _matvec(self._A_orig, x)
        # violated rows count as active (unclipped Ax)
        low = (Ax - l < -y) | self._eq_orig
        up = (u - Ax < y) & ~low
        return self._polish_on(low, up)

    def _polish_on(self, low, up):
        """Solve the equality-constrained problem on a given active set.

        The regularized KKT system is reduced to ``P + d I + A_act' A_act / d``
        (same band as the iteration matrix), then refined against the exact
        KKT system. The factor of the last active set is kept for reuse.
        """
        act = low | up
        b = np.where(low, self._l_orig, self._u_orig)
        if not np.all(np.isfinite(b[act])):
            return None
        # scaled, permuted space
        actf = act.astype(float)
        bs = actf * self.E * np.where(act, b, 0.0)
        key = act.tobytes()
        if self._polish_cache is not None and self._polish_cache[0] == key:
            fac = self._polish_cache[1]
        else:
            try:
                fac = sla.cholesky_banded(self._band.band(POLISH_DELTA, actf / POLISH_DELTA),
                                          lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                return None
            self._polish_cache = (key, fac)
        xs = np.zeros(self.n)
        ys = np.zeros(self.m)
        _kernels.polish_refine(fac, self, actf, bs, POLISH_DELTA, 1 + POLISH_REFINE, xs, ys)
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            return None
        xp = xs[self.iperm] * self._D_unperm
        yp = (ys * self.E) * self.cinv
        y_raw = yp.copy()
        # multipliers with the wrong sign mean a wrong active-set guess
        lo_only = low & ~self._eq_orig
        yp[lo_only] = np.minimum(yp[lo_only], 0.0)
        yp[up] = np.maximum(yp[up], 0.0)
        pp, dp, tp, td = self._assess(xp, yp)
        if pp <= tp and dp <= td:
            self._active = (low, up)
        return xp, yp, pp, dp, tp, td, y_raw


def _matvec(M: sp.csr_matrix, v):
    if _kernels.USE_NUMBA:
        out = np.empty(M.shape[0])
        _kernels.csr_matvec(M.data, M.indices, M.indptr, np.ascontiguousarray(v, dtype=float),
                            out)
        return out
    return M @ v


def _replace_f(p: QpProblem, f):
    q = object.__new__(QpProblem)
    q.__dict__.update(p.__dict__)
    q.f = f
    return q


def solve(p: QpProblem, s: QpSettings | None = None) -> QpSolution:
    """Solve one QP from scratch (optionally warm-started via the settings)."""
    ws = QpWorkspace(p, s)
    return ws.solve()


def warmup() -> None:
    """Run every compiled kernel once so later wall-clock timings exclude JIT compilation."""
    p = QpProblem(np.diag([2.0, 4.0, 1.0]), np.array([-2.0, -4.0, 1.0]),
                  Aeq=np.array([[1.0, 1.0, 0.0]]), beq=np.array([1.0]),
                  Ain=np.array([[0.0, 1.0, 1.0]]), bin=np.array([0.2]),
                  lb=np.array([-1.0, -1.0, 0.0]), ub=np.array([1.0, 1.0, 1.0]))
    ws = QpWorkspace(p, QpSettings(polish_converged=True))
    ws.solve()
    ws.update_linear_cost(np.array([-1.0, -3.0, 1.0]))
    ws.solve()
    from .projection import SlackProjection
    SlackProjection(np.array([[1.0, -1.0], [0.0, 1.0]]), np.array([0.5, -0.2]), 2.0, 1.0).solve(
        np.zeros(2))


def split_multipliers(p: QpProblem, ws: QpWorkspace, y):
    """Map stacked solver duals to ``(nu, mu_in, mu_lb, mu_ub)`` of :func:`kkt_check`."""
    y = np.asarray(y)
    nu = -y[:p.n_eq]
    mu_in = -y[p.n_eq:p.n_eq + p.n_in]
    yb = y[p.n_eq + p.n_in:]
    mu_lb = np.zeros(p.n)
    mu_ub = np.zeros(p.n)
    mu_lb[ws.bounded] = np.maximum(-yb, 0.0)
    mu_ub[ws.bounded] = np.maximum(yb, 0.0)
    return nu, mu_in, mu_lb, mu_ub


__all__ = ["QpWorkspace", "solve", "split_multipliers", "primal_residual", "warmup"]
