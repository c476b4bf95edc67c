"""QP builders: per-agent tracking problem, pairwise edge sets, centralized baseline.

Decision vector of one agent (``5N`` entries, see ``TrajectoryLayout``)::

    [x_1 .. x_N | u_0 .. u_{N-1}]

The measured state ``x_0`` is folded into the right-hand sides, so the
local QP has exactly ``(3 + 2) N`` variables.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .dynamics import (NU, NX, AgentTrajectory, LinearizedDynamics, TrajectoryLayout,
                       angle_diff, linearize_along, rollout_array, tracking_rollout)
from .qpcore import QpProblem
from .safety import CbfBlock, Obstacle, SafetyParams, interagent_block, obstacle_block

EDGE_MODES = ("all_steps", "first_step")


def _pd(M, name, size):
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = np.diag(M)
    if M.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got {M.shape}")
    if not np.allclose(M, M.T):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return M


@dataclass(frozen=True, eq=False)
class CostWeights:
    Q: np.ndarray = field(default_factory=lambda: np.diag([50.0, 50.0, 100.0]))
    R: np.ndarray = field(default_factory=lambda: np.diag([50.0, 10.0]))
    P: np.ndarray = field(default_factory=lambda: 10.0 * np.diag([50.0, 50.0, 100.0]))
    phi_weight: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "Q", _pd(self.Q, "Q", NX))
        object.__setattr__(self, "R", _pd(self.R, "R", NU))
        object.__setattr__(self, "P", _pd(self.P, "P", NX))
        if not self.phi_weight > 0:
            raise ValueError("phi_weight must be positive")


@dataclass(frozen=True)
class InputBounds:
    v_min: float = -0.8
    v_max: float = 0.8
    w_min: float = -1.5
    w_max: float = 1.5

    def __post_init__(self):
        if not (self.v_min <= self.v_max and self.w_min <= self.w_max):
            raise ValueError("input bounds must satisfy min <= max")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.v_min, self.w_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.v_max, self.w_max])

    def clip(self, u):
        return np.clip(u, self.lower, self.upper)


@dataclass
class LocalQp:
    """Agent-local QP (tracking cost over the local feasible set) and its data."""

    problem: QpProblem
    const: float
    layout: TrajectoryLayout
    x0: np.ndarray
    op_states: np.ndarray
    op_inputs: np.ndarray
    reference: np.ndarray
    dynamics: LinearizedDynamics
    obstacle_blocks: list = field(default_factory=list)
    obstacle_ids: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.problem.n

    def cost(self, xi) -> float:
        """Tracking cost ``J(xi)`` including the constant terms."""
        return self.problem.objective(xi) + self.const

    def op_vector(self) -> np.ndarray:
        return np.concatenate([self.op_states.ravel(), self.op_inputs.ravel()])


@dataclass
class EdgeSet:
    """Affine coupling ``psi(z_i, z_j) + s = 0, s >= 0`` for one edge.

    ``block`` rows are over the joint ``[z_i; z_j]`` vector; ``slack_of_row``
    gives the slack index each active row is tied to. Slacks without an
    active row are only penalized (they settle at zero).
    """

    edge: tuple
    block: CbfBlock
    slack_dim: int
    slack_of_row: np.ndarray
    mode: str
    N: int

    @property
    def n_rows(self) -> int:
        return self.block.n_rows

    @property
    def n_vars(self) -> int:
        return 2 * self.N * (NX + NU) + self.slack_dim

    def psi(self, zi, zj) -> np.ndarray:
        return self.block.psi(np.concatenate([zi, zj]))

    def slack_values(self, zi, zj) -> np.ndarray:
        """``max(0, -psi)`` per slack; zero where no row is active."""
        s = np.zeros(self.slack_dim)
        if self.n_rows:
            s[self.slack_of_row] = np.maximum(-self.psi(zi, zj), 0.0)
        return s

    def penalty(self, zi, zj, phi_weight: float) -> float:
        s = self.slack_values(zi, zj)
        return float(phi_weight * s @ s)


# --- operating points ---------------------------------------------------


def initial_operating_point(x0, reference, Ts: float, bounds: InputBounds):
    """Reference-tracking rollout used when no previous plan exists."""
    return tracking_rollout(x0, reference, Ts, (bounds.v_min, bounds.v_max),
                            (bounds.w_min, bounds.w_max))


def shifted_operating_point(x0, previous: AgentTrajectory, Ts: float):
    """Previous plan's inputs shifted one step, re-rolled from the measured state."""
    inputs = np.vstack([previous.inputs[1:], previous.inputs[-1:]])
    return rollout_array(x0, inputs, Ts), inputs


def align_reference(reference, op_states, x0):
    """Lift reference headings to within pi of the operating headings."""
    ref = np.array(reference, dtype=float)
    near = np.concatenate([[x0[2]], op_states[:, 2]])
    ref[:, 2] = near + angle_diff(ref[:, 2], near)
    return ref


# --- local QP -----------------------------------------------------------


def _dynamics_equalities(x0, dyn: LinearizedDynamics, layout: TrajectoryLayout):
    N = layout.N
    rows, cols, vals = [], [], []
    beq = np.empty(N * NX)
    for k in range(N):
        r0 = NX * k
        for a in range(NX):
            rows.append(r0 + a)
            cols.append(layout.state_index(k + 1, a))
            vals.append(1.0)
            for b in range(NU):
                if dyn.B[k, a, b] != 0.0:
                    rows.append(r0 + a)
                    cols.append(layout.input_index(k, b))
                    vals.append(-dyn.B[k, a, b])
            if k > 0:
                for b in range(NX):
                    if dyn.A[k, a, b] != 0.0:
                        rows.append(r0 + a)
                        cols.append(layout.state_index(k, b))
                        vals.append(-dyn.A[k, a, b])
        rhs = dyn.c[k].copy()
        if k == 0:
            rhs += dyn.A[0] @ x0
        beq[r0:r0 + NX] = rhs
    Aeq = sp.csr_matrix((vals, (rows, cols)), shape=(N * NX, layout.dim))
    return Aeq, beq


def _tracking_cost(x0, reference, weights: CostWeights, layout: TrajectoryLayout):
    N = layout.N
    Ws = [weights.Q] * (N - 1) + [weights.P]
    blocks = [2.0 * W for W in Ws] + [2.0 * weights.R] * N
    H = sp.block_diag(blocks, format="csr")
    f = np.zeros(layout.dim)
    const = 0.0
    for k in range(1, N + 1):
        W = Ws[k - 1]
        xd = reference[k]
        f[NX * (k - 1):NX * k] = -2.0 * W @ xd
        const += float(xd @ W @ xd)
    e0 = np.asarray(x0) - reference[0]
    const += float(e0 @ weights.Q @ e0)
    return H, f, const


def select_obstacles(x0, op_states, obstacles: Sequence[Obstacle], activation_radius):
    if activation_radius is None or not np.isfinite(activation_radius):
        return list(range(len(obstacles)))
    pts = np.vstack([np.asarray(x0)[:2], np.asarray(op_states)[:, :2]])
    keep = []
    for idx, o in enumerate(obstacles):
        if np.linalg.norm(pts - o.position, axis=1).min() <= activation_radius:
            keep.append(idx)
    return keep


def build_local_qp(x0, op_states, op_inputs, reference, obstacles: Sequence[Obstacle],
                   weights: CostWeights, bounds: InputBounds, safety: SafetyParams, Ts: float,
                   activation_radius: float | None = 3.0) -> LocalQp:
    """Tracking QP over the local feasible set (no consensus terms).

    ``x0`` and the operating trajectory must share a continuous heading
    frame; ``reference`` (N+1 samples) is re-aligned to it here.
    """
    x0 = np.asarray(x0, dtype=float)
    op_states = np.asarray(op_states, dtype=float).reshape(-1, NX)
    op_inputs = np.asarray(op_inputs, dtype=float).reshape(-1, NU)
    N = len(op_states)
    if len(op_inputs) != N:
        raise ValueError("operating states and inputs differ in length")
    reference = np.asarray(reference, dtype=float)
    if reference.shape != (N + 1, NX):
        raise ValueError(f"reference must have shape ({N + 1}, 3), got {reference.shape}")
    layout = TrajectoryLayout(N)
    ref = align_reference(reference, op_states, x0)
    dyn = linearize_along(x0, op_states, op_inputs, Ts)
    Aeq, beq = _dynamics_equalities(x0, dyn, layout)
    H, f, const = _tracking_cost(x0, ref, weights, layout)
    keep = select_obstacles(x0, op_states, obstacles, activation_radius)
    blocks = [obstacle_block(x0, op_states, obstacles[i].position, safety, layout) for i in keep]
    if blocks:
        Ain = sp.csr_matrix(np.vstack([b.G for b in blocks]))
        bin_ = np.concatenate([b.b for b in blocks])
    else:
        Ain, bin_ = None, None
    lb = np.full(layout.dim, -np.inf)
    ub = np.full(layout.dim, np.inf)
    iu = layout.input_indices()
    lb[iu] = bounds.lower
    ub[iu] = bounds.upper
    problem = QpProblem(H, f, Aeq, beq, Ain, bin_, lb, ub,
                        meta={"kind": "local", "N": N, "obstacles": keep})
    return LocalQp(problem, const, layout, x0, op_states, op_inputs, ref, dyn, blocks, keep)


def with_consensus(local: LocalQp, edge_terms, rho: float) -> QpProblem:
    """Node-update QP: local cost plus ``rho/2 * sum ||xi - z + lam||^2``.

    ``edge_terms`` is a sequence of ``(z, lam)`` pairs, one per neighbor.
    """
    deg = len(edge_terms)
    p = local.problem
    if deg == 0:
        return p
    f = p.f.copy()
    for z, lam in edge_terms:
        z = np.asarray(z, dtype=float)
        lam = np.asarray(lam, dtype=float)
        if z.shape != (p.n,) or lam.shape != (p.n,):
            raise ValueError(f"edge terms must have length {p.n}")
        f += rho * (lam - z)
    q = p.with_diagonal_shift(rho * deg, f)
    q.meta["kind"] = "node"
    return q


# --- edge sets ----------------------------------------------------------


def build_edge_set(edge, x0_i, op_i, x0_j, op_j, safety: SafetyParams, mode: str = "all_steps",
                   activation_radius: float | None = 3.0) -> EdgeSet:
    """Pairwise CBF coupling rows over ``[z_i; z_j]`` and the slack layout."""
    if mode not in EDGE_MODES:
        raise ValueError(f"edge_cbf mode must be one of {EDGE_MODES}, got {mode!r}")
    op_i = np.asarray(op_i, dtype=float).reshape(-1, NX)
    op_j = np.asarray(op_j, dtype=float).reshape(-1, NX)
    N = len(op_i)
    lay_i = TrajectoryLayout(N, 0)
    lay_j = TrajectoryLayout(N, lay_i.dim)
    block = interagent_block(x0_i, op_i, x0_j, op_j, safety, lay_i, lay_j, dim=2 * lay_i.dim)
    if mode == "first_step":
        rows = np.array([0])
        slack_dim = 1
    else:
        rows = np.arange(N)
        slack_dim = N
    slack_of_row = np.arange(len(rows))
    if activation_radius is not None and np.isfinite(activation_radius):
        sep = block.h_op + safety.d_th
        near = np.minimum(sep[:-1], sep[1:]) <= activation_radius
        active = near[rows]
        rows, slack_of_row = rows[active], slack_of_row[active]
    return EdgeSet(tuple(edge), block.select(rows), slack_dim, slack_of_row, mode, N)


def edge_qp(es: EdgeSet, rho: float, phi_weight: float) -> QpProblem:
    """Edge-update QP skeleton (linear cost filled per iteration).

    Variables ``[z_i, z_j, s]``; cost ``phi |s|^2 + rho/2 |z - target|^2``.
    """
    nz = 2 * es.N * (NX + NU)
    n = nz + es.slack_dim
    H = sp.diags(np.concatenate([np.full(nz, rho), np.full(es.slack_dim, 2.0 * phi_weight)]),
                 format="csr")
    if es.n_rows:
        S = sp.csr_matrix((-np.ones(es.n_rows), (np.arange(es.n_rows), es.slack_of_row)),
                          shape=(es.n_rows, es.slack_dim))
        Aeq = sp.hstack([sp.csr_matrix(es.block.G), S], format="csr")
        beq = es.block.b
    else:
        Aeq, beq = None, None
    lb = np.concatenate([np.full(nz, -np.inf), np.zeros(es.slack_dim)])
    return QpProblem(H, np.zeros(n), Aeq, beq, lb=lb,
                     meta={"kind": "edge", "edge": list(es.edge), "mode": es.mode})


def edge_linear_cost(es: EdgeSet, rho: float, target_i, target_j) -> np.ndarray:
    return np.concatenate([-rho * np.asarray(target_i), -rho * np.asarray(target_j),
                           np.zeros(es.slack_dim)])


# --- centralized baseline ----------------------------------------------


@dataclass
class CentralizedQp:
    problem: QpProblem
    const: float
    agent_slices: list
    edge_slices: dict
    edge_sets: dict

    def split(self, x):
        return [x[s] for s in self.agent_slices]


def build_centralized_qp(locals_: Sequence[LocalQp], edge_sets: dict, phi_weight: float
                         ) -> CentralizedQp:
    """Stack every agent's local QP plus all edge couplings and slacks.

    ``edge_sets`` maps ``(i, j)`` to an :class:`EdgeSet` built from the
    same operating points as the local problems.
    """
    dims = [lq.n for lq in locals_]
    offs = np.concatenate([[0], np.cumsum(dims)])
    agent_slices = [slice(int(offs[a]), int(offs[a + 1])) for a in range(len(locals_))]
    n_xi = int(offs[-1])
    edges = sorted(edge_sets)
    edge_slices = {}
    o = n_xi
    for e in edges:
        edge_slices[e] = slice(o, o + edge_sets[e].slack_dim)
        o += edge_sets[e].slack_dim
    n = o
    H = sp.block_diag([lq.problem.H for lq in locals_]
                      + [sp.identity(edge_sets[e].slack_dim) * (2.0 * phi_weight) for e in edges],
                      format="csr")
    f = np.concatenate([lq.problem.f for lq in locals_] + [np.zeros(n - n_xi)])
    const = float(sum(lq.const for lq in locals_))

    def place(M, cols_off, width):
        M = sp.csr_matrix(M)
        return sp.hstack([sp.csr_matrix((M.shape[0], cols_off)), M,
                          sp.csr_matrix((M.shape[0], n - cols_off - width))], format="csr")

    eq_rows, eq_rhs, in_rows, in_rhs = [], [], [], []
    for a, lq in enumerate(locals_):
        p = lq.problem
        eq_rows.append(place(p.Aeq, agent_slices[a].start, p.n))
        eq_rhs.append(p.beq)
        if p.n_in:
            in_rows.append(place(p.Ain, agent_slices[a].start, p.n))
            in_rhs.append(p.bin)
    for e in edges:
        es = edge_sets[e]
        if not es.n_rows:
            continue
        i, j = e
        G = sp.coo_matrix(es.block.G)
        d = dims[i]
        cols = np.where(G.col < d, agent_slices[i].start + G.col,
                        agent_slices[j].start + G.col - d)
        r = np.concatenate([G.row, np.arange(es.n_rows)])
        c = np.concatenate([cols, edge_slices[e].start + es.slack_of_row])
        v = np.concatenate([G.data, -np.ones(es.n_rows)])
        eq_rows.append(sp.csr_matrix((v, (r, c)), shape=(es.n_rows, n)))
        eq_rhs.append(es.block.b)
    lb = np.concatenate([lq.problem.lb for lq in locals_] + [np.zeros(n - n_xi)])
    ub = np.concatenate([lq.problem.ub for lq in locals_] + [np.full(n - n_xi, np.inf)])
    Aeq = sp.vstack(eq_rows, format="csr")
    Ain = sp.vstack(in_rows, format="csr") if in_rows else None
    problem = QpProblem(H, f, Aeq, np.concatenate(eq_rhs), Ain,
                        np.concatenate(in_rhs) if in_rhs else None, lb, ub,
                        meta={"kind": "centralized", "agents": len(locals_),
                              "edges": [list(e) for e in edges]})
    return CentralizedQp(problem, const, agent_slices, edge_slices, edge_sets)


# --- fallback -----------------------------------------------------------


def fallback_plan(last_plan: AgentTrajectory | None, bounds: InputBounds, N: int | None = None,
                  x0=None, Ts: float | None = None, v_scale: float = 0.5) -> AgentTrajectory:
    """Shifted previous plan with the final input repeated at reduced speed.

    Without a previous plan this is a zero-input hold (needs ``N`` and
    ``x0``). With ``x0`` and ``Ts`` the states are re-rolled from ``x0``.
    """
    if last_plan is None:
        if N is None or x0 is None:
            raise ValueError("zero-input hold needs N and x0")
        inputs = np.zeros((N, NU))
        states = np.tile(np.asarray(x0, dtype=float), (N, 1))
        return AgentTrajectory(states, inputs)
    last_u = last_plan.inputs[-1] * np.array([v_scale, 1.0])
    inputs = bounds.clip(np.vstack([last_plan.inputs[1:], last_u]))
    if x0 is not None and Ts is not None:
        states = rollout_array(x0, inputs, Ts)
    else:
        states = np.vstack([last_plan.states[1:], last_plan.states[-1:]])
    return AgentTrajectory(states, inputs, last_plan.stamp + 1)
