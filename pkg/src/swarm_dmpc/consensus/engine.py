"""Node-edge split scaled ADMM over an interaction graph.

Each agent owns its trajectory ``xi``, one edge copy ``z`` and one scaled
dual ``lam`` per neighbor. The lower-indexed endpoint of every edge also
solves that edge's QP. Agents exchange data only through the transport:

    node phase   every agent solves its node QP, then sends
                 TrajectoryShare(xi, lam) to each edge owner among its neighbors
    edge phase   owners solve their edge QPs, update their own duals and send
                 EdgeResult(z_i, z_j) back to the other endpoint
    dual phase   non-owners read EdgeResult and update their duals

Phases are separated by barriers, and all reductions happen in a fixed
agent/edge order, so results do not depend on the number of workers.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .._accel import worker_count
from ..dynamics import AgentTrajectory
from ..planner import (EdgeSet, LocalQp, build_edge_set, edge_linear_cost, edge_qp,
                       with_consensus)
from ..qpcore import MAX_ITER, SOLVED, QpSettings, QpWorkspace, SlackProjection
from ..safety import SafetyParams
from .graph import InteractionGraph
from .messages import EDGE_RESULT, TRAJECTORY_SHARE, Message, QueueTransport

EDGE_SOLVERS = ("projection", "qp")
ACCEPT_TOL = 1e-2  # constraint violation (m) accepted from an iteration-capped solve


def loop_settings() -> QpSettings:
    """QP settings for the control loop: 1e-3 tolerances, 200 iterations, polished."""
    return QpSettings(eps_abs=1e-3, eps_rel=1e-3)


class NodeInfeasible(RuntimeError):
    def __init__(self, agent: int, cycle: int, status: str):
        super().__init__(f"node QP of agent {agent} failed in cycle {cycle}: {status}")
        self.agent = agent
        self.cycle = cycle
        self.status = status


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 20.0
    max_admm_iter: int = 15
    residual_stop: tuple | None = None  # (eps_primal, eps_dual)
    reset_duals_each_cycle: bool = False
    edge_solver: str = "projection"  # exact dual Newton, or the generic QP solver

    def __post_init__(self):
        if self.edge_solver not in EDGE_SOLVERS:
            raise ValueError(f"edge_solver must be one of {EDGE_SOLVERS}")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.max_admm_iter < 1:
            raise ValueError("max_admm_iter must be >= 1")
        if self.residual_stop is not None:
            eps = tuple(float(e) for e in self.residual_stop)
            if len(eps) != 2 or min(eps) <= 0:
                raise ValueError("residual_stop must be (eps_primal, eps_dual), both > 0")
            object.__setattr__(self, "residual_stop", eps)


@dataclass
class EdgeState:
    z_i: np.ndarray
    z_j: np.ndarray
    s: np.ndarray
    lambda_i: np.ndarray
    lambda_j: np.ndarray


@dataclass(frozen=True)
class AdmmResiduals:
    primal: float
    dual: float


def accept(sol) -> bool:
    return sol.status == SOLVED or (sol.status == MAX_ITER and sol.primal_residual <= ACCEPT_TOL)


def shift_vector(vec) -> np.ndarray:
    """Receding-horizon shift of a flat trajectory vector (last step repeated)."""
    return AgentTrajectory.unflatten(vec).shifted().flatten()


# --- the three update steps as standalone functions -----------------------


def node_update(local: LocalQp, edge_terms, rho: float, settings: QpSettings | None = None,
                agent: int = 0, cycle: int = 0) -> AgentTrajectory:
    """argmin over the local feasible set of ``J + rho/2 sum ||xi - z + lam||^2``."""
    sol = QpWorkspace(with_consensus(local, edge_terms, rho), settings).solve()
    if not accept(sol):
        raise NodeInfeasible(agent, cycle, sol.status)
    return AgentTrajectory.unflatten(sol.x, stamp=cycle)


def edge_update(es: EdgeSet, xi_i, xi_j, lam_i, lam_j, phi_weight: float, rho: float,
                settings: QpSettings | None = None, method: str = "projection"):
    """Project the dual-shifted node trajectories onto the edge set.

    Returns ``(z_i, z_j, s)``.
    """
    target_i = np.asarray(xi_i) + lam_i
    target_j = np.asarray(xi_j) + lam_j
    if method == "projection":
        return _project(es, SlackProjection(es.block.G, es.block.b, rho, phi_weight),
                        target_i, target_j)
    ws = QpWorkspace(edge_qp(es, rho, phi_weight), settings)
    ws.update_linear_cost(edge_linear_cost(es, rho, target_i, target_j))
    sol = ws.solve()
    if not accept(sol):
        raise RuntimeError(f"edge QP {es.edge} failed: {sol.status}")
    return _split_edge(es, sol.x)


def _project(es: EdgeSet, proj: SlackProjection, target_i, target_j):
    res = proj.solve(np.concatenate([target_i, target_j]))
    if not res.converged:
        raise RuntimeError(f"edge projection {es.edge} did not converge")
    d = es.N * 5
    s = np.zeros(es.slack_dim)
    s[es.slack_of_row] = res.s
    return res.w[:d], res.w[d:], s


def dual_update(xi_i, xi_j, z_i, z_j, lam_i, lam_j):
    return (np.asarray(lam_i) + np.asarray(xi_i) - z_i,
            np.asarray(lam_j) + np.asarray(xi_j) - z_j)


def _split_edge(es: EdgeSet, x):
    d = es.N * 5
    return x[:d].copy(), x[d:2 * d].copy(), np.maximum(x[2 * d:], 0.0)


# --- agents -----------------------------------------------------------------


class _EdgeWorker:
    """Edge subproblem state held by the owning (lower-indexed) endpoint."""

    def __init__(self, edge, safety, mode, phi_weight, rho, activation_radius, settings,
                 solver="projection"):
        self.edge = edge
        self.solver = solver
        self.safety = safety
        self.mode = mode
        self.phi_weight = phi_weight
        self.rho = rho
        self.activation_radius = activation_radius
        self.settings = settings
        self.es: EdgeSet | None = None
        self.ws: QpWorkspace | None = None
        self.z_i = self.z_j = self.s = None

    def setup(self, x0_i, op_i, x0_j, op_j):
        """Linearize the edge rows at both operating trajectories (flat vectors)."""
        if self.z_i is None:
            self.z_i, self.z_j = np.array(op_i), np.array(op_j)
        else:
            self.z_i, self.z_j = shift_vector(self.z_i), shift_vector(self.z_j)
        states_i = AgentTrajectory.unflatten(op_i).states
        states_j = AgentTrajectory.unflatten(op_j).states
        self.es = build_edge_set(self.edge, x0_i, states_i, x0_j, states_j, self.safety,
                                 self.mode, self.activation_radius)
        self.s = self.es.slack_values(self.z_i, self.z_j)
        if self.solver == "projection":
            self.ws = SlackProjection(self.es.block.G, self.es.block.b, self.rho,
                                      self.phi_weight)
        else:
            self.ws = QpWorkspace(edge_qp(self.es, self.rho, self.phi_weight), self.settings)
            self.ws.warm_start(np.concatenate([self.z_i, self.z_j, self.s]))

    def solve(self, target_i, target_j):
        if self.solver == "projection":
            self.z_i, self.z_j, self.s = _project(self.es, self.ws, target_i, target_j)
            return
        self.ws.update_linear_cost(edge_linear_cost(self.es, self.rho, target_i, target_j))
        sol = self.ws.solve()
        if sol.status not in (SOLVED, MAX_ITER):
            raise RuntimeError(f"edge QP {self.edge} failed: {sol.status}")
        self.z_i, self.z_j, self.s = _split_edge(self.es, sol.x)


class AgentNode:
    """One agent's share of the consensus state plus its owned edge workers."""

    def __init__(self, aid: int, graph: InteractionGraph, transport, rho: float,
                 settings: QpSettings, edge_kw: dict):
        self.id = aid
        self.neighbors = graph.neighbors(aid)
        self.transport = transport
        self.rho = rho
        self.settings = settings
        self.workers = {e: _EdgeWorker(e, rho=rho, settings=settings, **edge_kw)
                        for e in graph.owned_edges(aid)}
        self.xi = None
        self.z: dict[int, np.ndarray] = {}
        self.lam: dict[int, np.ndarray] = {}
        self.z_prev: dict[int, np.ndarray] = {}
        self.local: LocalQp | None = None
        self.ws: QpWorkspace | None = None
        self.degraded = False
        self.status = SOLVED
        self.cycle = 0

    # cycle lifecycle

    def start_cycle(self, local: LocalQp, cycle: int, reset_duals: bool) -> float:
        t0 = time.perf_counter()
        self.local = local
        self.cycle = cycle
        self.degraded = False
        self.status = SOLVED
        op = local.op_vector()
        if self.xi is None:
            self.z = {j: op.copy() for j in self.neighbors}
            self.lam = {j: np.zeros_like(op) for j in self.neighbors}
        else:
            self.z = {j: shift_vector(v) for j, v in self.z.items()}
            self.lam = {j: (np.zeros_like(op) if reset_duals else shift_vector(v))
                        for j, v in self.lam.items()}
        self.xi = op
        qp = with_consensus(local, [(self.z[j], self.lam[j]) for j in self.neighbors], self.rho)
        self.ws = QpWorkspace(qp, self.settings)
        self.ws.warm_start(op)
        return time.perf_counter() - t0

    def node_phase(self, p: int) -> float:
        t0 = time.perf_counter()
        f = self.local.problem.f.copy()
        for j in self.neighbors:
            f += self.rho * (self.lam[j] - self.z[j])
        self.ws.update_linear_cost(f)
        sol = self.ws.solve()
        if accept(sol):
            self.xi = sol.x
        else:
            self.degraded = True
            self.status = sol.status
        elapsed = time.perf_counter() - t0
        for j in self.neighbors:
            if j < self.id:
                payload = {"xi": self.xi, "lam": self.lam[j]}
                if p == 0:
                    payload["x0"] = self.local.x0
                    payload["op"] = self.local.op_vector()
                self.transport.send(Message(TRAJECTORY_SHARE, self.id, j, payload, p, self.cycle))
        return elapsed

    def edge_phase(self, p: int) -> list[float]:
        """Solve every owned edge; returns one timing per owned edge (edge order)."""
        shares = {m.sender: m.payload for m in self.transport.collect(self.id, TRAJECTORY_SHARE)}
        times = []
        for (i, j), w in self.workers.items():
            t0 = time.perf_counter()
            msg = shares[j]
            if p == 0:
                w.setup(self.local.x0, self.local.op_vector(), msg["x0"], msg["op"])
            w.solve(self.xi + self.lam[j], msg["xi"] + msg["lam"])
            times.append(time.perf_counter() - t0)
            self.z_prev[j] = self.z[j]
            self.z[j] = w.z_i
            self.lam[j] = self.lam[j] + self.xi - w.z_i
            self.transport.send(Message(EDGE_RESULT, self.id, j,
                                        {"z_i": w.z_i, "z_j": w.z_j}, p, self.cycle))
        return times

    def dual_phase(self, p: int) -> None:
        for m in self.transport.collect(self.id, EDGE_RESULT):
            j = m.sender
            self.z_prev[j] = self.z[j]
            self.z[j] = m.payload["z_j"]
            self.lam[j] = self.lam[j] + self.xi - self.z[j]


# --- cycle controller ---------------------------------------------------------


@dataclass
class CycleTimings:
    """Per-phase solver wall times in seconds.

    ``node`` has shape (P, n_agents), ``edge`` (P, n_edges) in graph edge
    order; setup covers workspace construction and the first factorization.
    """

    node_setup: np.ndarray
    node: np.ndarray
    edge: np.ndarray
    edge_owner: np.ndarray
    wall: float = 0.0

    def critical_path(self) -> float:
        """Planning time when every agent runs on its own processor."""
        total = float(self.node_setup.max(initial=0.0))
        for p in range(len(self.node)):
            total += float(self.node[p].max(initial=0.0))
            if self.edge.shape[1]:
                per_agent = np.zeros(len(self.node_setup))
                np.add.at(per_agent, self.edge_owner, self.edge[p])
                total += float(per_agent.max())
        return total

    def serial(self) -> float:
        return float(self.node_setup.sum() + self.node.sum() + self.edge.sum())


@dataclass
class CycleResult:
    plans: list
    edge_states: dict
    residuals: list
    timings: CycleTimings
    qp_counts: list
    degraded: list
    node_status: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.qp_counts)


class ConsensusEngine:
    """Runs ADMM cycles over persistent per-agent consensus state."""

    def __init__(self, graph: InteractionGraph, safety: SafetyParams, phi_weight: float,
                 cfg: AdmmConfig | None = None, edge_mode: str = "all_steps",
                 activation_radius: float | None = 3.0, settings: QpSettings | None = None,
                 transport=None, workers: int | None = None):
        self.graph = graph
        self.cfg = cfg or AdmmConfig()
        self.transport = transport if transport is not None else QueueTransport(graph)
        self.settings = settings or loop_settings()
        edge_kw = dict(safety=safety, mode=edge_mode, phi_weight=phi_weight,
                       activation_radius=activation_radius, solver=self.cfg.edge_solver)
        self.agents = [AgentNode(i, graph, self.transport, self.cfg.rho, self.settings, edge_kw)
                       for i in range(graph.n_nodes)]
        self.owners = {e: self.agents[graph.owner(e)] for e in graph.edges}
        self.n_workers = workers if workers is not None else worker_count(graph.n_nodes)
        self._pool = ThreadPoolExecutor(self.n_workers) if self.n_workers > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _map(self, fn, items):
        # list() is the barrier; results come back in submission order
        if self._pool is None:
            return [fn(a) for a in items]
        return list(self._pool.map(fn, items))

    def run_cycle(self, locals_: list, cycle: int = 0) -> CycleResult:
        if len(locals_) != self.graph.n_nodes:
            raise ValueError(f"expected {self.graph.n_nodes} local QPs, got {len(locals_)}")
        t_wall = time.perf_counter()
        reset = self.cfg.reset_duals_each_cycle
        setup = np.array(self._map(lambda a: a.start_cycle(locals_[a.id], cycle, reset),
                                   self.agents))
        n_iter = self.cfg.max_admm_iter if self.graph.n_edges else 1
        owner_ids = np.array([self.graph.owner(e) for e in self.graph.edges], dtype=int)
        node_t, edge_t, counts, residuals = [], [], [], []
        for p in range(n_iter):
            node_t.append(self._map(lambda a: a.node_phase(p), self.agents))
            per_agent = self._map(lambda a: a.edge_phase(p), self.agents)
            self._map(lambda a: a.dual_phase(p), self.agents)
            # flatten owned-edge timings back into graph edge order
            it = {a.id: iter(ts) for a, ts in zip(self.agents, per_agent)}
            edge_t.append([next(it[o]) for o in owner_ids])
            counts.append((len(self.agents), len(self.graph.edges)))
            if self.graph.n_edges:
                residuals.append(self._residuals())
                stop = self.cfg.residual_stop
                if stop and residuals[-1].primal <= stop[0] and residuals[-1].dual <= stop[1]:
                    break
        timings = CycleTimings(setup, np.array(node_t),
                               np.array(edge_t, dtype=float).reshape(len(node_t), -1),
                               owner_ids, time.perf_counter() - t_wall)
        return CycleResult(
            plans=[AgentTrajectory.unflatten(a.xi, stamp=cycle) for a in self.agents],
            edge_states=self.edge_states(),
            residuals=residuals,
            timings=timings,
            qp_counts=counts,
            degraded=[a.degraded for a in self.agents],
            node_status=[a.status for a in self.agents],
        )

    # monitoring views (not part of the agent-to-agent data flow)

    def edge_states(self) -> dict:
        out = {}
        for (i, j) in self.graph.edges:
            ai, aj, w = self.agents[i], self.agents[j], self.owners[(i, j)].workers[(i, j)]
            out[(i, j)] = EdgeState(ai.z[j], aj.z[i], w.s, ai.lam[j], aj.lam[i])
        return out

    def _residuals(self) -> AdmmResiduals:
        prim = dual = 0.0
        for (i, j) in self.graph.edges:
            ai, aj = self.agents[i], self.agents[j]
            prim = max(prim, np.linalg.norm(ai.xi - ai.z[j]), np.linalg.norm(aj.xi - aj.z[i]))
            dz = np.concatenate([ai.z[j] - ai.z_prev[j], aj.z[i] - aj.z_prev[i]])
            dual = max(dual, self.cfg.rho * np.linalg.norm(dz))
        return AdmmResiduals(float(prim), float(dual))

    def slack(self, edge) -> np.ndarray:
        return self.owners[edge].workers[edge].s
