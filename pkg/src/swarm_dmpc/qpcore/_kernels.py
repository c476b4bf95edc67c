"""Inner iteration loop of the operator-splitting QP solver.

Two implementations with identical semantics:

* ``admm_loop_numba`` - explicit loops, compiled with numba (default);
* ``admm_loop_numpy`` - vectorized numpy/scipy, used when
  ``SWARM_DMPC_NUMBA=0``.

Both work on the scaled, permuted problem. The linear system matrix
``P + sigma I + A' diag(rho) A`` is passed as a lower banded Cholesky
factor in LAPACK band storage: ``ab[d, j] = L[j + d, j]``.
"""
import numpy as np
import scipy.linalg as sla

from .._accel import USE_NUMBA, njit

RUNNING = 0
CONVERGED = 1
INFEASIBLE = 2
RHO_UPDATE = 3

BIG = 1e19  # bounds beyond this are treated as infinite


@njit
def band_solve(ab, rhs, out):
    """Solve ``L L' out = rhs`` with ``L`` in lower band storage."""
    bw = ab.shape[0] - 1
    n = rhs.shape[0]
    for i in range(n):
        s = rhs[i]
        lo = i - bw if i - bw > 0 else 0
        for k in range(lo, i):
            s -= ab[i - k, k] * out[k]
        out[i] = s / ab[0, i]
    for i in range(n - 1, -1, -1):
        s = out[i]
        hi = i + bw if i + bw < n - 1 else n - 1
        for k in range(i + 1, hi + 1):
            s -= ab[k - i, i] * out[k]
        out[i] = s / ab[0, i]


@njit
def csr_matvec(data, indices, indptr, x, out):
    for r in range(indptr.shape[0] - 1):
        s = 0.0
        for k in range(indptr[r], indptr[r + 1]):
            s += data[k] * x[indices[k]]
        out[r] = s


@njit
def _inf_norm(v):
    m = 0.0
    for i in range(v.shape[0]):
        a = abs(v[i])
        if a > m:
            m = a
    return m


@njit
def _inf_norm_scaled(v, w):
    m = 0.0
    for i in range(v.shape[0]):
        a = abs(v[i] * w[i])
        if a > m:
            m = a
    return m


@njit
def admm_loop_numba(ab, Pd, Pi, Pp, Ad, Ai, Ap, Atd, Ati, Atp, q, l, u, rho, sigma, alpha,
                    x, z, y, max_iter, check_every, adapt_every, eps_abs, eps_rel, eps_pinf,
                    Dinv, Einv, E, cinv):
    n = x.shape[0]
    m = z.shape[0]
    rhs = np.empty(n)
    xt = np.empty(n)
    zt = np.empty(m)
    tmp_m = np.empty(m)
    Ax = np.empty(m)
    Px = np.empty(n)
    Aty = np.empty(n)
    dy = np.empty(m)
    Atdy = np.empty(n)
    prim = np.inf
    dual = np.inf
    ratio = 1.0
    it = 0
    status = RUNNING
    while it < max_iter:
        it += 1
        # x-tilde: (P + sigma I + A' R A) xt = sigma x - q + A'(rho z - y)
        for i in range(m):
            tmp_m[i] = rho[i] * z[i] - y[i]
        csr_matvec(Atd, Ati, Atp, tmp_m, rhs)
        for j in range(n):
            rhs[j] += sigma * x[j] - q[j]
        band_solve(ab, rhs, xt)
        csr_matvec(Ad, Ai, Ap, xt, zt)
        for j in range(n):
            x[j] = alpha * xt[j] + (1.0 - alpha) * x[j]
        for i in range(m):
            zr = alpha * zt[i] + (1.0 - alpha) * z[i]
            v = zr + y[i] / rho[i]
            if v < l[i]:
                v = l[i]
            elif v > u[i]:
                v = u[i]
            dy[i] = rho[i] * (zr - v)
            y[i] += dy[i]
            z[i] = v
        check = (it % check_every == 0) or it == max_iter
        adapt = adapt_every > 0 and it % adapt_every == 0
        if not (check or adapt):
            continue
        csr_matvec(Ad, Ai, Ap, x, Ax)
        csr_matvec(Pd, Pi, Pp, x, Px)
        csr_matvec(Atd, Ati, Atp, y, Aty)
        prim = 0.0
        for i in range(m):
            a = abs((Ax[i] - z[i]) * Einv[i])
            if a > prim:
                prim = a
        dual = 0.0
        for j in range(n):
            a = abs((Px[j] + q[j] + Aty[j]) * Dinv[j]) * cinv
            if a > dual:
                dual = a
        ax_n = _inf_norm_scaled(Ax, Einv)
        z_n = _inf_norm_scaled(z, Einv)
        px_n = _inf_norm_scaled(Px, Dinv) * cinv
        aty_n = _inf_norm_scaled(Aty, Dinv) * cinv
        q_n = _inf_norm_scaled(q, Dinv) * cinv
        eps_p = eps_abs + eps_rel * max(ax_n, z_n)
        eps_d = eps_abs + eps_rel * max(px_n, max(aty_n, q_n))
        if check and prim <= eps_p and dual <= eps_d:
            status = CONVERGED
            break
        if check:
            # primal infeasibility certificate on the dual increment
            dy_n = _inf_norm_scaled(dy, E)
            if dy_n > 1e-30:
                csr_matvec(Atd, Ati, Atp, dy, Atdy)
                if _inf_norm_scaled(Atdy, Dinv) <= eps_pinf * dy_n:
                    acc = 0.0
                    ok = True
                    for i in range(m):
                        if dy[i] > 0.0:
                            if u[i] >= BIG:
                                ok = False
                                break
                            acc += u[i] * dy[i]
                        elif dy[i] < 0.0:
                            if l[i] <= -BIG:
                                ok = False
                                break
                            acc += l[i] * dy[i]
                    if ok and acc < -eps_pinf * dy_n:
                        status = INFEASIBLE
                        break
        if adapt:
            # residual balancing, in scaled quantities
            sp_ = 0.0
            for i in range(m):
                a = abs(Ax[i] - z[i])
                if a > sp_:
                    sp_ = a
            sd = 0.0
            for j in range(n):
                a = abs(Px[j] + q[j] + Aty[j])
                if a > sd:
                    sd = a
            pn = max(_inf_norm(Ax), _inf_norm(z)) + 1e-30
            dn = max(_inf_norm(Px), max(_inf_norm(Aty), _inf_norm(q))) + 1e-30
            ratio = np.sqrt((sp_ / pn) / (sd / dn + 1e-30) + 1e-30)
            if ratio > 5.0 or ratio < 0.2:
                status = RHO_UPDATE
                break
    return it, status, prim, dual, ratio


def admm_loop_numpy(ab, P, A, At, q, l, u, rho, sigma, alpha, x, z, y, max_iter, check_every,
                    adapt_every, eps_abs, eps_rel, eps_pinf, Dinv, Einv, E, cinv):
    """Vectorized twin of :func:`admm_loop_numba` (sparse matrices as scipy CSR)."""
    prim = dual = np.inf
    ratio = 1.0
    it = 0
    status = RUNNING
    fac = (ab, True)
    while it < max_iter:
        it += 1
        rhs = At @ (rho * z - y) + sigma * x - q
        xt = sla.cho_solve_banded(fac, rhs, check_finite=False)
        zt = A @ xt
        x[:] = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        znew = np.clip(zr + y / rho, l, u)
        dy = rho * (zr - znew)
        y += dy
        z[:] = znew
        check = (it % check_every == 0) or it == max_iter
        adapt = adapt_every > 0 and it % adapt_every == 0
        if not (check or adapt):
            continue
        Ax = A @ x
        Px = P @ x
        Aty = At @ y
        prim = float(np.max(np.abs((Ax - z) * Einv), initial=0.0))
        dual = float(np.max(np.abs((Px + q + Aty) * Dinv), initial=0.0)) * cinv
        eps_p = eps_abs + eps_rel * max(np.max(np.abs(Ax * Einv), initial=0.0),
                                        np.max(np.abs(z * Einv), initial=0.0))
        eps_d = eps_abs + eps_rel * cinv * max(np.max(np.abs(Px * Dinv), initial=0.0),
                                               np.max(np.abs(Aty * Dinv), initial=0.0),
                                               np.max(np.abs(q * Dinv), initial=0.0))
        if check and prim <= eps_p and dual <= eps_d:
            status = CONVERGED
            break
        if check:
            dy_n = np.max(np.abs(dy * E), initial=0.0)
            if dy_n > 1e-30 and np.max(np.abs((At @ dy) * Dinv), initial=0.0) <= eps_pinf * dy_n:
                pos, neg = dy > 0, dy < 0
                if not (np.any(u[pos] >= BIG) or np.any(l[neg] <= -BIG)):
                    acc = u[pos] @ dy[pos] + l[neg] @ dy[neg]
                    if acc < -eps_pinf * dy_n:
                        status = INFEASIBLE
                        break
        if adapt:
            sp_ = np.max(np.abs(Ax - z), initial=0.0)
            sd = np.max(np.abs(Px + q + Aty), initial=0.0)
            pn = max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0)) + 1e-30
            dn = max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
                     np.max(np.abs(q), initial=0.0)) + 1e-30
            ratio = float(np.sqrt((sp_ / pn) / (sd / dn + 1e-30) + 1e-30))
            if ratio > 5.0 or ratio < 0.2:
                status = RHO_UPDATE
                break
    return it, status, prim, dual, ratio


@njit
def polish_refine_numba(ab, Pd, Pi, Pp, Ad, Ai, Ap, Atd, Ati, Atp, q, act, bs, delta,
                        n_steps, xs, ys):
    """Iterative refinement of the active-set KKT system (see ``QpWorkspace._polish``)."""
    n = xs.shape[0]
    m = ys.shape[0]
    r1 = np.empty(n)
    r2 = np.empty(m)
    tmp_n = np.empty(n)
    tmp_m = np.empty(m)
    dx = np.empty(n)
    for _ in range(n_steps):
        csr_matvec(Pd, Pi, Pp, xs, r1)
        csr_matvec(Atd, Ati, Atp, ys, tmp_n)
        for j in range(n):
            r1[j] = -q[j] - r1[j] - tmp_n[j]
        csr_matvec(Ad, Ai, Ap, xs, tmp_m)
        for i in range(m):
            r2[i] = (bs[i] - tmp_m[i]) * act[i]
            tmp_m[i] = r2[i] * act[i] / delta
        csr_matvec(Atd, Ati, Atp, tmp_m, tmp_n)
        for j in range(n):
            tmp_n[j] += r1[j]
        band_solve(ab, tmp_n, dx)
        for j in range(n):
            xs[j] += dx[j]
        csr_matvec(Ad, Ai, Ap, dx, tmp_m)
        for i in range(m):
            ys[i] += act[i] * (tmp_m[i] - r2[i]) / delta


def polish_refine_numpy(fac, P, A, At, q, act, bs, delta, n_steps, xs, ys):
    for _ in range(n_steps):
        r1 = -q - P @ xs - At @ ys
        r2 = act * (bs - A @ xs)
        dx = sla.cho_solve_banded((fac, True), r1 + At @ (act * r2 / delta), check_finite=False)
        xs += dx
        ys += act * (A @ dx - r2) / delta


def polish_refine(fac, ws, act, bs, delta, n_steps, xs, ys):
    """Dispatch to the active backend; updates ``xs`` and ``ys`` in place."""
    P, A, At = ws.P_csr, ws.A_csr, ws.At_csr
    if USE_NUMBA:
        polish_refine_numba(fac, P.data, P.indices, P.indptr, A.data, A.indices, A.indptr,
                            At.data, At.indices, At.indptr, ws.q, act, bs, delta, n_steps,
                            xs, ys)
    else:
        polish_refine_numpy(fac, P, A, At, ws.q, act, bs, delta, n_steps, xs, ys)


@njit
def _dense_chol_solve(K, rhs, out):
    """Solve ``K out = rhs`` for small SPD ``K`` (overwrites ``K`` with its factor)."""
    m = K.shape[0]
    for j in range(m):
        d = K[j, j]
        for k in range(j):
            d -= K[j, k] * K[j, k]
        if d <= 0.0:
            return False
        d = np.sqrt(d)
        K[j, j] = d
        for i in range(j + 1, m):
            v = K[i, j]
            for k in range(j):
                v -= K[i, k] * K[j, k]
            K[i, j] = v / d
    for i in range(m):
        v = rhs[i]
        for k in range(i):
            v -= K[i, k] * out[k]
        out[i] = v / K[i, i]
    for i in range(m - 1, -1, -1):
        v = out[i]
        for k in range(i + 1, m):
            v -= K[k, i] * out[k]
        out[i] = v / K[i, i]
    return True


@njit
def _proj_dual(GG, nu, c, inv4phi):
    m = nu.shape[0]
    val = 0.0
    for i in range(m):
        acc = 0.0
        for k in range(m):
            acc += GG[i, k] * nu[k]
        val += nu[i] * c[i] - 0.5 * nu[i] * acc
        if nu[i] < 0.0:
            val -= nu[i] * nu[i] * inv4phi
    return val


@njit
def projection_newton_numba(GG, c, nu, inv2phi, tol, max_newton, armijo, reg):
    """Semismooth Newton on the projection dual; updates ``nu`` in place.

    Returns ``(iterations, converged)``.
    """
    m = nu.shape[0]
    grad = np.empty(m)
    step = np.empty(m)
    trial = np.empty(m)
    K = np.empty((m, m))
    scale = 1.0
    for i in range(m):
        if abs(c[i]) + 1.0 > scale:
            scale = abs(c[i]) + 1.0
    it = 0
    for it in range(1, max_newton + 1):
        gmax = 0.0
        for i in range(m):
            acc = 0.0
            for k in range(m):
                acc += GG[i, k] * nu[k]
            g = c[i] - acc
            if nu[i] < 0.0:
                g -= nu[i] * inv2phi
            grad[i] = g
            if abs(g) > gmax:
                gmax = abs(g)
        if gmax <= tol * scale:
            return it, True
        for i in range(m):
            for k in range(m):
                K[i, k] = GG[i, k]
            K[i, i] += reg + (inv2phi if nu[i] < 0.0 else 0.0)
        if not _dense_chol_solve(K, grad, step):
            return it, False
        same = True
        for i in range(m):
            if (nu[i] + step[i] < 0.0) != (nu[i] < 0.0):
                same = False
                break
        a = 1.0
        if not same:
            g0 = _proj_dual(GG, nu, c, 0.5 * inv2phi)
            slope = 0.0
            for i in range(m):
                slope += grad[i] * step[i]
            while a > 1e-12:
                for i in range(m):
                    trial[i] = nu[i] + a * step[i]
                if _proj_dual(GG, trial, c, 0.5 * inv2phi) >= g0 + armijo * a * slope:
                    break
                a *= 0.5
        for i in range(m):
            nu[i] += a * step[i]
    return it, False


@njit
def _clamp_scale(v, lo, hi):
    if v < lo:
        return 1.0
    return v if v < hi else hi


@njit
def ruiz_numba(pr, pc, pv, ar, ac, av, q, n, m, iters, lo, hi):
    """Modified Ruiz equilibration on COO triplets; scales ``pv``, ``av``, ``q`` in place.

    Returns ``(D, E, c)``.
    """
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    col = np.empty(n)
    row = np.empty(m)
    for _ in range(iters):
        col[:] = 0.0
        row[:] = 0.0
        for k in range(pv.shape[0]):
            a = abs(pv[k])
            if a > col[pc[k]]:
                col[pc[k]] = a
        for k in range(av.shape[0]):
            a = abs(av[k])
            if a > col[ac[k]]:
                col[ac[k]] = a
            if a > row[ar[k]]:
                row[ar[k]] = a
        for j in range(n):
            col[j] = 1.0 / np.sqrt(_clamp_scale(col[j], lo, hi))
        for i in range(m):
            row[i] = 1.0 / np.sqrt(_clamp_scale(row[i], lo, hi))
        for k in range(pv.shape[0]):
            pv[k] *= col[pr[k]] * col[pc[k]]
        for k in range(av.shape[0]):
            av[k] *= row[ar[k]] * col[ac[k]]
        for j in range(n):
            q[j] *= col[j]
            D[j] *= col[j]
        for i in range(m):
            E[i] *= row[i]
        # cost scaling
        col[:] = 0.0
        for k in range(pv.shape[0]):
            a = abs(pv[k])
            if a > col[pc[k]]:
                col[pc[k]] = a
        mean_col = 0.0
        for j in range(n):
            mean_col += col[j]
        mean_col = mean_col / n if n > 0 else 1.0
        qmax = 0.0
        for j in range(n):
            if abs(q[j]) > qmax:
                qmax = abs(q[j])
        gamma = 1.0 / _clamp_scale(max(mean_col, qmax), lo, hi)
        for k in range(pv.shape[0]):
            pv[k] *= gamma
        for j in range(n):
            q[j] *= gamma
        c *= gamma
    return D, E, c


def run_admm_loop(fact, ws, x, z, y, max_iter, settings):
    """Dispatch to the active backend. ``ws`` is a solver workspace."""
    common = dict(max_iter=max_iter, check_every=settings.check_every,
                  adapt_every=settings.adaptive_rho_interval if settings.adaptive_rho else 0,
                  eps_abs=settings.eps_abs, eps_rel=settings.eps_rel,
                  eps_pinf=settings.eps_prim_inf)
    if USE_NUMBA:
        P, A, At = ws.P_csr, ws.A_csr, ws.At_csr
        return admm_loop_numba(
            fact, P.data, P.indices, P.indptr, A.data, A.indices, A.indptr,
            At.data, At.indices, At.indptr, ws.q, ws.l, ws.u, ws.rho_vec,
            settings.sigma, settings.alpha, x, z, y, common["max_iter"],
            common["check_every"], common["adapt_every"], common["eps_abs"],
            common["eps_rel"], common["eps_pinf"], ws.Dinv, ws.Einv, ws.E, ws.cinv)
    return admm_loop_numpy(
        fact, ws.P_csr, ws.A_csr, ws.At_csr, ws.q, ws.l, ws.u, ws.rho_vec, settings.sigma,
        settings.alpha, x, z, y, common["max_iter"], common["check_every"],
        common["adapt_every"], common["eps_abs"], common["eps_rel"], common["eps_pinf"],
        ws.Dinv, ws.Einv, ws.E, ws.cinv)
