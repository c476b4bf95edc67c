"""Exact solver for slack-penalized projections onto an affine coupling.

Solves

    min_{w, s}  rho/2 |w - t|^2 + phi |s|^2
    s.t.        G w - s = b,   s >= 0

which is the structure of the edge-update QP (``w`` stacks both edge
copies, one slack per coupling row). Eliminating ``w`` and ``s`` gives the
concave, piecewise-quadratic dual

    g(nu) = nu'(b - G t) - |G' nu|^2 / (2 rho) - sum_k min(nu_k, 0)^2 / (4 phi)

with ``w = t + G' nu / rho`` and ``s = max(0, -nu) / (2 phi)``. The dual has
one variable per row, so a semismooth Newton method on the dense
``rows x rows`` system reaches the exact optimum in a few steps once the
sign pattern of ``nu`` settles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _kernels

MAX_NEWTON = 50
ARMIJO = 1e-4
REG = 1e-12


@dataclass
class ProjectionResult:
    w: np.ndarray
    s: np.ndarray
    nu: np.ndarray
    iterations: int
    converged: bool
    primal_residual: float


class SlackProjection:
    """Reusable solver for one ``(G, b, rho, phi)``; only ``t`` changes per solve."""

    def __init__(self, G, b, rho: float, phi: float):
        if not (rho > 0 and phi > 0):
            raise ValueError("rho and phi must be positive")
        self.G = sp.csr_matrix(G)
        self.b = np.asarray(b, dtype=float).reshape(-1)
        self.m = self.G.shape[0]
        self.rho = float(rho)
        self.phi = float(phi)
        self.Gt = self.G.T.tocsr()
        self.GG = (self.G @ self.Gt).toarray() / self.rho
        self.nu = np.zeros(self.m)

    def solve(self, t, nu0=None, tol: float = 1e-10) -> ProjectionResult:
        t = np.asarray(t, dtype=float).reshape(-1)
        if self.m == 0:
            return ProjectionResult(t.copy(), np.zeros(0), np.zeros(0), 0, True, 0.0)
        c = self.b - self.G @ t
        nu = self.nu.copy() if nu0 is None else np.array(nu0, dtype=float)
        inv2phi = 1.0 / (2.0 * self.phi)
        if _kernels.USE_NUMBA:
            it, converged = _kernels.projection_newton_numba(self.GG, c, nu, inv2phi, tol,
                                                             MAX_NEWTON, ARMIJO, REG)
        else:
            it, converged = _newton_numpy(self.GG, c, nu, inv2phi, tol)
        self.nu = nu
        w = t + (self.Gt @ nu) / self.rho
        s = np.maximum(-nu, 0.0) * inv2phi
        res = float(np.max(np.abs(self.G @ w - s - self.b), initial=0.0))
        return ProjectionResult(w, s, nu, it, converged, res)


def _dual(GG, nu, c, inv2phi):
    neg = np.minimum(nu, 0.0)
    return float(nu @ c - 0.5 * nu @ (GG @ nu) - 0.5 * inv2phi * (neg @ neg))


def _newton_numpy(GG, c, nu, inv2phi, tol):
    """Numpy twin of ``projection_newton_numba``; updates ``nu`` in place."""
    m = nu.size
    scale = 1.0 + float(np.max(np.abs(c)))
    it = 0
    for it in range(1, MAX_NEWTON + 1):
        grad = c - GG @ nu - np.minimum(nu, 0.0) * inv2phi
        if float(np.max(np.abs(grad))) <= tol * scale:
            return it, True
        neg = nu < 0.0
        K = GG.copy()
        K[np.diag_indices(m)] += np.where(neg, inv2phi, 0.0) + REG
        step = np.linalg.solve(K, grad)
        # a full step that keeps the sign pattern lands on the maximizer;
        # otherwise backtrack on the dual value
        a = 1.0
        if not np.array_equal(nu + step < 0.0, neg):
            g0 = _dual(GG, nu, c, inv2phi)
            slope = float(grad @ step)
            while a > 1e-12 and _dual(GG, nu + a * step, c, inv2phi) < g0 + ARMIJO * a * slope:
                a *= 0.5
        nu += a * step
    return it, False


__all__ = ["SlackProjection", "ProjectionResult"]
