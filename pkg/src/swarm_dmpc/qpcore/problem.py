"""Convex QP container, solver settings/solution records and KKT diagnostics.

Problem form::

    minimize    1/2 x'Hx + f'x
    subject to  Aeq x  = beq
                Ain x >= bin
                lb <= x <= ub

Matrices may be numpy arrays or scipy sparse matrices; everything is
validated (shapes, symmetry, positive semidefiniteness) on construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import nnls

SYM_TOL = 1e-10
PSD_TOL = 1e-8

SOLVED = "solved"
MAX_ITER = "max_iter"
PRIMAL_INFEASIBLE = "primal_infeasible"


def _as_matrix(M, n, name):
    if M is None:
        return sp.csr_matrix((0, n))
    if sp.issparse(M):
        M = sp.csr_matrix(M, dtype=float)
    else:
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.size == 0:
            M = M.reshape(0, n)
    if M.shape[1] != n:
        raise ValueError(f"{name} has {M.shape[1]} columns, expected {n}")
    return M


def _as_vector(v, m, name, fill=0.0):
    if v is None:
        return np.full(m, fill)
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (m,):
        raise ValueError(f"{name} has length {v.size}, expected {m}")
    return v


def _check_psd(H):
    if sp.issparse(H):
        off = H - sp.diags(H.diagonal())
        if off.count_nonzero() == 0:
            d = H.diagonal()
            if d.size and d.min() < -PSD_TOL:
                raise ValueError(f"cost matrix has negative eigenvalue {d.min():.3e}")
            return
        H = H.toarray()
    if H.shape[0] == 0:
        return
    if np.count_nonzero(H - np.diag(np.diag(H))) == 0:
        d = np.diag(H)
        if d.min() < -PSD_TOL:
            raise ValueError(f"cost matrix has negative eigenvalue {d.min():.3e}")
        return
    try:
        sla.cholesky(H + PSD_TOL * np.eye(H.shape[0]), lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(H).min()
        if w < -PSD_TOL:
            raise ValueError(f"cost matrix has negative eigenvalue {w:.3e}") from None


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    Ain: np.ndarray | None = None
    bin: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float).reshape(-1)
        n = f.size
        H = self.H
        if sp.issparse(H):
            H = sp.csr_matrix(H, dtype=float)
        else:
            H = np.atleast_2d(np.asarray(H, dtype=float))
        if H.shape != (n, n):
            raise ValueError(f"H has shape {H.shape}, expected ({n}, {n})")
        asym = abs(H - H.T).max() if n else 0.0
        if asym > SYM_TOL * max(1.0, abs(H).max() if n else 1.0):
            raise ValueError(f"H is not symmetric (max asymmetry {asym:.3e})")
        H = (H + H.T) * 0.5
        if sp.issparse(H):
            H = sp.csr_matrix(H)
        _check_psd(H)
        self.H = H
        self.f = f
        self.Aeq = _as_matrix(self.Aeq, n, "Aeq")
        self.beq = _as_vector(self.beq, self.Aeq.shape[0], "beq")
        self.Ain = _as_matrix(self.Ain, n, "Ain")
        self.bin = _as_vector(self.bin, self.Ain.shape[0], "bin")
        self.lb = _as_vector(self.lb, n, "lb", -np.inf)
        self.ub = _as_vector(self.ub, n, "ub", np.inf)
        for name, v in (("f", self.f), ("beq", self.beq), ("bin", self.bin)):
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} contains non-finite entries")
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub for some variable")

    @property
    def n(self) -> int:
        return self.f.size

    @property
    def n_eq(self) -> int:
        return self.Aeq.shape[0]

    @property
    def n_in(self) -> int:
        return self.Ain.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.H @ x) + self.f @ x)

    def dense(self, name: str) -> np.ndarray:
        M = getattr(self, name)
        return M.toarray() if sp.issparse(M) else np.asarray(M)

    def with_cost(self, H=None, f=None) -> "QpProblem":
        """Copy with a replaced cost (constraints shared, not copied)."""
        return QpProblem(
            self.H if H is None else H, self.f if f is None else f,
            self.Aeq, self.beq, self.Ain, self.bin, self.lb, self.ub, dict(self.meta),
        )

    def with_diagonal_shift(self, shift: float, f) -> "QpProblem":
        """Copy with ``H + shift I`` and a new ``f``, skipping re-validation.

        A non-negative diagonal shift keeps every invariant checked at
        construction, so only ``f`` is checked.
        """
        if shift < 0:
            raise ValueError("shift must be non-negative")
        f = np.asarray(f, dtype=float).reshape(-1)
        if f.shape != self.f.shape or not np.all(np.isfinite(f)):
            raise ValueError("f must be finite with the problem's dimension")
        q = object.__new__(QpProblem)
        q.__dict__.update(self.__dict__)
        H = self.H
        q.H = (H + shift * sp.identity(self.n, format="csr")).tocsr() if sp.issparse(H) \
            else H + shift * np.eye(self.n)
        q.f = f
        q.meta = dict(self.meta)
        return q


@dataclass
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 200
    warm_start: np.ndarray | None = None
    warm_start_dual: np.ndarray | None = None
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 25
    scaling_iters: int = 10
    check_every: int = 5
    polish: bool = True
    polish_converged: bool = True  # also polish when the iteration already converged
    reuse_active_set: bool = True  # try the last certified active set before iterating
    eps_prim_inf: float = 1e-5

    def __post_init__(self):
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.alpha < 2:
            raise ValueError("relaxation alpha must lie in (0, 2)")


@dataclass
class QpSolution:
    x: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    objective: float
    iterations: int
    y: np.ndarray | None = None  # stacked multipliers [eq, ineq, bound rows]
    polished: bool = False
    solve_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == SOLVED


def primal_residual(p: QpProblem, x) -> float:
    """Largest equality / inequality / bound violation at ``x``."""
    x = np.asarray(x, dtype=float)
    parts = [0.0]
    if p.n_eq:
        parts.append(np.abs(p.Aeq @ x - p.beq).max())
    if p.n_in:
        parts.append(np.maximum(p.bin - p.Ain @ x, 0.0).max())
    if p.n:
        parts.append(np.maximum(p.lb - x, 0.0).max())
        parts.append(np.maximum(x - p.ub, 0.0).max())
    return float(max(parts))


def kkt_check(p: QpProblem, x, multipliers=None, active_tol: float = 1e-7):
    """Measure ``(primal_residual, dual_residual, complementarity)`` at ``x``.

    Without ``multipliers`` the best sign-feasible multipliers for the
    nearly active constraints are fitted by non-negative least squares, so
    the dual residual is the distance of ``-grad`` from the normal cone
    generated by the active constraints.
    ``multipliers`` is ``(nu, mu_in, mu_lb, mu_ub)`` with the convention
    ``H x + f = Aeq' nu + Ain' mu_in + mu_lb - mu_ub``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n,):
        raise ValueError(f"x has shape {x.shape}, expected ({p.n},)")
    pres = primal_residual(p, x)
    grad = np.asarray(p.H @ x).reshape(-1) + p.f
    Aeq = p.dense("Aeq")
    Ain = p.dense("Ain")
    scale_in = 1.0 + np.abs(p.bin)
    slack_in = Ain @ x - p.bin
    slack_lb = x - p.lb
    slack_ub = p.ub - x
    if multipliers is None:
        act_in = np.flatnonzero(slack_in <= active_tol * scale_in)
        act_lb = np.flatnonzero(np.isfinite(p.lb) & (slack_lb <= active_tol * (1.0 + np.abs(p.lb))))
        act_ub = np.flatnonzero(np.isfinite(p.ub) & (slack_ub <= active_tol * (1.0 + np.abs(p.ub))))
        eye = np.eye(p.n)
        cols = [Aeq.T, -Aeq.T, Ain[act_in].T, eye[:, act_lb], -eye[:, act_ub]]
        M = np.hstack(cols) if p.n else np.zeros((0, 0))
        if M.shape[1]:
            w, _ = nnls(M, grad, maxiter=50 * max(M.shape))
            r = grad - M @ w
        else:
            w = np.zeros(0)
            r = grad
        k = p.n_eq
        nu = w[:k] - w[k:2 * k]
        mu_in = np.zeros(p.n_in)
        mu_in[act_in] = w[2 * k:2 * k + act_in.size]
        o = 2 * k + act_in.size
        mu_lb = np.zeros(p.n)
        mu_lb[act_lb] = w[o:o + act_lb.size]
        mu_ub = np.zeros(p.n)
        mu_ub[act_ub] = w[o + act_lb.size:]
        dres = float(np.abs(r).max()) if r.size else 0.0
    else:
        nu, mu_in, mu_lb, mu_ub = (np.asarray(v, dtype=float) for v in multipliers)
        r = grad - Aeq.T @ nu - Ain.T @ mu_in - mu_lb + mu_ub
        dres = float(np.abs(r).max()) if r.size else 0.0
        sign = [np.minimum(mu_in, 0.0), np.minimum(mu_lb, 0.0), np.minimum(mu_ub, 0.0)]
        dres = max(dres, *(float(np.abs(s).max()) if s.size else 0.0 for s in sign))
    comp = [0.0]
    if p.n_in:
        comp.append(np.abs(mu_in * slack_in).max())
    fin_lb = np.isfinite(p.lb)
    fin_ub = np.isfinite(p.ub)
    if fin_lb.any():
        comp.append(np.abs(mu_lb[fin_lb] * slack_lb[fin_lb]).max())
    if fin_ub.any():
        comp.append(np.abs(mu_ub[fin_ub] * slack_ub[fin_ub]).max())
    return pres, dres, float(max(comp))
