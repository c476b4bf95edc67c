import json
import os
import subprocess
import sys

import numpy as np
import pytest
import scipy.sparse as sp

from swarm_dmpc.qpcore import (MAX_ITER, PRIMAL_INFEASIBLE, SOLVED, QpProblem, QpSettings,
                               QpWorkspace, SlackProjection, dump_qp, enumerate_active_sets,
                               kkt_check, load_qp, primal_residual, qp_from_dict, qp_to_dict,
                               random_qp, solve, split_multipliers)


def box_qp():
    # min (x0-1)^2 + (x1-2)^2  s.t. x0 + x1 = 1, x1 >= 0.8, 0 <= x <= 5
    return QpProblem(2 * np.eye(2), [-2.0, -4.0], [[1.0, 1.0]], [1.0], [[0.0, 1.0]], [0.8],
                     [0.0, 0.0], [5.0, 5.0])


def test_small_qp_exact():
    sol = solve(box_qp())
    assert sol.status == SOLVED and sol.polished
    assert np.allclose(sol.x, [0.0, 1.0], atol=1e-9)
    assert np.isclose(sol.objective, box_qp().objective([0.0, 1.0]))


def test_multipliers_satisfy_kkt():
    p = box_qp()
    ws = QpWorkspace(p)
    sol = ws.solve()
    pres, dres, comp = kkt_check(p, sol.x, split_multipliers(p, ws, sol.y))
    assert pres <= 1e-9 and dres <= 1e-7 and comp <= 1e-7
    pres, dres, _ = kkt_check(p, sol.x)
    assert dres <= 1e-7


def test_unconstrained_and_equality_only(rng):
    M = rng.normal(size=(4, 4))
    H = M @ M.T + np.eye(4)
    f = rng.normal(size=4)
    sol = solve(QpProblem(H, f))
    assert np.allclose(sol.x, np.linalg.solve(H, -f), atol=1e-8)
    A = rng.normal(size=(2, 4))
    b = rng.normal(size=2)
    sol = solve(QpProblem(H, f, A, b))
    K = np.block([[H, A.T], [A, np.zeros((2, 2))]])
    x = np.linalg.solve(K, np.concatenate([-f, b]))[:4]
    assert np.allclose(sol.x, x, atol=1e-8)


def test_matches_oracle_with_sparse_input(rng):
    for _ in range(20):
        p = random_qp(rng, 5, 1, 3, 2)
        q = QpProblem(sp.csr_matrix(p.H), p.f, sp.csr_matrix(p.Aeq), p.beq,
                      sp.csr_matrix(p.Ain), p.bin, p.lb, p.ub)
        x_ref, f_ref = enumerate_active_sets(p)
        sol = solve(q)
        assert np.abs(sol.x - x_ref).max() <= 1e-6
        assert abs(sol.objective - f_ref) <= 1e-7


def test_infeasible_detected():
    p = QpProblem(np.eye(2), [0.0, 0.0], Ain=[[1.0, 0.0], [-1.0, 0.0]], bin=[1.0, 0.0])
    sol = solve(p, QpSettings(max_iter=4000))
    assert sol.status == PRIMAL_INFEASIBLE and not sol.ok


def test_iteration_cap_reported():
    rng = np.random.default_rng(3)
    p = random_qp(rng, 30, 5, 20, 10, conditioning=1e-4)
    sol = solve(p, QpSettings(max_iter=1, polish=False, eps_abs=1e-12, eps_rel=1e-12))
    assert sol.status == MAX_ITER and sol.iterations == 1


def test_non_convex_rejected():
    with pytest.raises(ValueError):
        QpProblem(np.diag([1.0, -1.0]), [0.0, 0.0])
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        QpSettings(eps_abs=0.0)


def test_linear_cost_update_and_active_set_reuse(rng):
    p = random_qp(rng, 8, 2, 6, 4)
    ws = QpWorkspace(p)
    first = ws.solve()
    assert first.ok and first.iterations > 0
    # same problem again: the certified active set is verified directly
    again = ws.solve()
    assert again.ok and again.iterations == 0
    assert np.allclose(again.x, first.x, atol=1e-9)
    f2 = p.f + 0.01 * rng.normal(size=p.n)
    ws.update_linear_cost(f2)
    moved = ws.solve()
    x_ref, _ = enumerate_active_sets(p.with_cost(f=f2))
    assert np.abs(moved.x - x_ref).max() <= 1e-6


def test_reuse_off_iterates():
    p = box_qp()
    ws = QpWorkspace(p, QpSettings(reuse_active_set=False))
    ws.solve()
    assert ws.solve().iterations > 0


def test_warm_start_helps(rng):
    p = random_qp(rng, 20, 4, 10, 5)
    cold = solve(p, QpSettings(polish=False, reuse_active_set=False))
    ws = QpWorkspace(p, QpSettings(polish=False, reuse_active_set=False))
    ws.warm_start(cold.x, cold.y)
    warm = ws.solve()
    assert warm.ok and warm.iterations <= cold.iterations


def test_diagonal_shift_copy(rng):
    p = random_qp(rng, 4, 1, 2)
    f = rng.normal(size=4)
    q = p.with_diagonal_shift(3.0, f)
    assert np.allclose(q.dense("H"), p.dense("H") + 3 * np.eye(4))
    assert np.array_equal(q.f, f) and np.array_equal(p.dense("Aeq"), q.dense("Aeq"))
    with pytest.raises(ValueError):
        p.with_diagonal_shift(1.0, np.zeros(3))


def test_dump_roundtrip(tmp_path):
    p = box_qp()
    p.meta["kind"] = "test"
    back = load_qp(dump_qp(p, tmp_path / "qp.json"))
    for name in ("H", "Aeq", "Ain"):
        assert np.array_equal(back.dense(name), p.dense(name))
    assert np.array_equal(back.lb, p.lb) and back.meta == {"kind": "test"}
    d = qp_to_dict(QpProblem(np.eye(2), [0, 0]))
    assert d["lb"] == [None, None]
    assert json.loads(json.dumps(d)) == d
    assert np.all(np.isinf(qp_from_dict(d).ub))
    with pytest.raises(ValueError):
        qp_from_dict({"format": "other"})


def test_primal_residual():
    p = box_qp()
    assert primal_residual(p, [0.0, 1.0]) == 0.0
    assert np.isclose(primal_residual(p, [0.0, 0.5]), 0.5)


def test_oracle_brute_force_simple():
    # min x^2 s.t. x >= 1
    x, f = enumerate_active_sets(QpProblem([[2.0]], [0.0], Ain=[[1.0]], bin=[1.0]))
    assert np.allclose(x, [1.0]) and np.isclose(f, 1.0)
    x, f = enumerate_active_sets(QpProblem([[2.0]], [0.0], Ain=[[1.0], [-1.0]], bin=[1.0, 0.0]))
    assert x is None and f == np.inf


# --- slack projection -------------------------------------------------------


def projection_qp(G, b, rho, phi, t):
    m, n = G.shape
    H = sp.block_diag([rho * sp.identity(n), 2 * phi * sp.identity(m)], format="csr")
    f = np.concatenate([-rho * t, np.zeros(m)])
    Aeq = sp.hstack([sp.csr_matrix(G), -sp.identity(m)], format="csr")
    lb = np.concatenate([np.full(n, -np.inf), np.zeros(m)])
    return QpProblem(H, f, Aeq, b, lb=lb)


@pytest.mark.parametrize("seed", range(5))
def test_projection_matches_qp(seed):
    rng = np.random.default_rng(seed)
    m, n = 8, 20
    G = rng.normal(size=(m, n)) * (rng.random((m, n)) < 0.3)
    b = rng.normal(size=m)
    t = rng.normal(size=n)
    proj = SlackProjection(G, b, 20.0, 5.0)
    res = proj.solve(t)
    assert res.converged and res.primal_residual <= 1e-9
    assert np.all(res.s >= 0)
    ref = solve(projection_qp(G, b, 20.0, 5.0, t), QpSettings(eps_abs=1e-9, eps_rel=1e-9))
    assert np.abs(res.w - ref.x[:n]).max() <= 1e-6
    assert np.abs(res.s - ref.x[n:]).max() <= 1e-6
    # warm restart from the previous dual lands immediately
    again = proj.solve(t)
    assert again.iterations <= 2 and np.allclose(again.w, res.w)


def test_projection_without_rows_is_identity():
    proj = SlackProjection(np.zeros((0, 4)), np.zeros(0), 1.0, 1.0)
    t = np.arange(4.0)
    assert np.array_equal(proj.solve(t).w, t)
    with pytest.raises(ValueError):
        SlackProjection(np.zeros((1, 4)), np.zeros(1), 0.0, 1.0)


# --- backend parity -----------------------------------------------------------

_PARITY = r"""
import json, numpy as np
from swarm_dmpc import BACKEND
from swarm_dmpc.qpcore import random_qp, solve, SlackProjection
rng = np.random.default_rng(11)
xs = []
for _ in range(25):
    n = int(rng.integers(3, 9))
    xs.append(solve(random_qp(rng, n, 1, 3, 2)).x.tolist())
G = rng.normal(size=(6, 12)); b = rng.normal(size=6); t = rng.normal(size=12)
xs.append(SlackProjection(G, b, 20.0, 5.0).solve(t).w.tolist())
print(json.dumps({"backend": BACKEND, "x": xs}))
"""


def _run_backend(flag):
    env = dict(os.environ, SWARM_DMPC_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", _PARITY], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(out.stdout)


def test_numba_and_numpy_backends_agree():
    a, b = _run_backend("1"), _run_backend("0")
    assert b["backend"] == "numpy"
    for xa, xb in zip(a["x"], b["x"]):
        assert np.abs(np.array(xa) - np.array(xb)).max() <= 1e-8
