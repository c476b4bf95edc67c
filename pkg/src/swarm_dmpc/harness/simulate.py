"""Closed-loop receding-horizon simulation of a scenario.

Per cycle: measure (and heading-lift) the plant states, regenerate the
references, pick operating points, build the local QPs, plan with the
selected solver, apply each plan's first input to the exact unicycle,
then add any active push.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from ..consensus import ConsensusEngine
from ..consensus.engine import accept, loop_settings
from ..dynamics import (NU, AgentState, AgentTrajectory, angle_diff, bezier_reference,
                        lift_angle, step_array, wrap_angle)
from ..planner import (build_centralized_qp, build_edge_set, build_local_qp, edge_qp,
                       fallback_plan, shifted_operating_point, with_consensus)
from ..qpcore import QpSettings, QpWorkspace, warmup
from .scenario import Scenario

GOAL_POS_TOL = 0.1
GOAL_HEADING_TOL = 0.2


@dataclass
class StepLog:
    """Everything recorded for one control cycle.

    ``states`` is the plant state at the start of the cycle (heading
    wrapped) and ``inputs`` the input applied during it. CBF values are
    evaluated at ``states``; ``h_pair`` follows ``pairs`` order (all
    agent pairs, ``i < j``).
    """

    cycle: int
    states: np.ndarray
    inputs: np.ndarray
    plans: list
    h_obs: np.ndarray
    h_pair: np.ndarray
    residuals: list
    slack_max: list
    qp_counts: list
    degraded: list
    pushed: list
    arrived: list
    objective: float
    stage_cost: float = 0.0
    # wall-clock, seconds
    node_times: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    edge_times: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    planning_time: float = 0.0
    serial_time: float = 0.0
    cycle_time: float = 0.0

    def record(self) -> dict:
        """Deterministic part of the log (no wall-clock values)."""
        return {
            "cycle": self.cycle,
            "states": self.states.tolist(),
            "inputs": self.inputs.tolist(),
            "h_obs": [_num(v) for v in self.h_obs],
            "h_pair": [_num(v) for v in self.h_pair],
            "objective": self.objective,
            "stage_cost": self.stage_cost,
            "residuals": [list(r) for r in self.residuals],
            "slack_max": self.slack_max,
            "qp_counts": [list(c) for c in self.qp_counts],
            "degraded": self.degraded,
            "pushed": self.pushed,
            "arrived": self.arrived,
            "plans": [p.tolist() for p in self.plans],
        }

    def timing_record(self) -> dict:
        return {
            "cycle": self.cycle,
            "node_times": self.node_times.tolist(),
            "edge_times": self.edge_times.tolist(),
            "planning_time": self.planning_time,
            "serial_time": self.serial_time,
            "cycle_time": self.cycle_time,
        }


def _num(v):
    return None if not np.isfinite(v) else float(v)


@dataclass
class SimResult:
    scenario: Scenario
    logs: list
    final_states: np.ndarray | None = None

    @property
    def pairs(self):
        return list(combinations(range(self.scenario.n_agents), 2))

    def positions(self) -> np.ndarray:
        """(cycles + 1, agents, 2) plant positions including the final state."""
        return np.concatenate([np.array([lg.states[:, :2] for lg in self.logs]),
                               self.final_states[None, :, :2]])

    def min_h_obs(self) -> float:
        v = [lg.h_obs.min() for lg in self.logs if lg.h_obs.size]
        return float(min(v)) if v else float("inf")

    def min_h_pair(self) -> float:
        v = [lg.h_pair.min() for lg in self.logs if lg.h_pair.size]
        return float(min(v)) if v else float("inf")

    def arrival_cycles(self) -> list:
        out = []
        for a in range(self.scenario.n_agents):
            hit = [lg.cycle for lg in self.logs if lg.arrived[a]]
            out.append(hit[0] if hit else None)
        return out

    def objective_total(self) -> float:
        """Closed-loop cost: realized stage costs summed over the run."""
        return float(sum(lg.stage_cost for lg in self.logs))

    def plan_objective_total(self) -> float:
        return float(sum(lg.objective for lg in self.logs))

    def planning_times(self) -> np.ndarray:
        return np.array([lg.planning_time for lg in self.logs])


# --- metrics --------------------------------------------------------------


def cbf_values(states, obstacles, d_th: float):
    """Per-agent min obstacle CBF and per-pair inter-agent CBF at ``states``."""
    pos = np.asarray(states)[:, :2]
    if obstacles:
        centers = np.array([o.position for o in obstacles])
        d = np.linalg.norm(pos[:, None, :] - centers[None, :, :], axis=2)
        h_obs = d.min(axis=1) - d_th
    else:
        h_obs = np.full(len(pos), np.inf)
    h_pair = np.array([np.linalg.norm(pos[i] - pos[j]) - d_th
                       for i, j in combinations(range(len(pos)), 2)])
    return h_obs, h_pair


def arrived(state, goal) -> bool:
    return bool(np.linalg.norm(state[:2] - goal[:2]) <= GOAL_POS_TOL
                and abs(angle_diff(state[2], goal[2])) <= GOAL_HEADING_TOL)


def stage_cost(states, inputs, goals, weights) -> float:
    """Realized cost of one cycle: goal-tracking error plus input effort, all agents."""
    err = np.asarray(states, dtype=float) - goals
    err[:, 2] = angle_diff(np.asarray(states)[:, 2], goals[:, 2])
    u = np.asarray(inputs, dtype=float)
    return float(np.einsum("ai,ij,aj->", err, weights.Q, err)
                 + np.einsum("ai,ij,aj->", u, weights.R, u))


def local_problems(sc: Scenario, x_lift, plans) -> list:
    """Each agent's local QP, linearized at its shifted plan (or a hold if none)."""
    locals_ = []
    for a in range(sc.n_agents):
        x = x_lift[a]
        ref = bezier_reference(AgentState.from_array(x), AgentState.from_array(sc.goals[a]),
                               sc.N, sc.Ts).samples
        if plans[a] is None:
            op_s, op_u = hold_operating_point(x, sc.N)
        else:
            op_s, op_u = shifted_operating_point(x, plans[a], sc.Ts)
        locals_.append(build_local_qp(x, op_s, op_u, ref, sc.obstacles, sc.weights,
                                      sc.bounds, sc.safety, sc.Ts, sc.activation_radius))
    return locals_


def edge_sets(sc: Scenario, locals_) -> dict:
    return {(i, j): build_edge_set((i, j), locals_[i].x0, locals_[i].op_states,
                                   locals_[j].x0, locals_[j].op_states, sc.safety,
                                   sc.edge_cbf, sc.activation_radius)
            for i, j in sc.graph.edges}


def hold_operating_point(x0, N: int):
    """Standstill trajectory at ``x0``: exactly satisfies every CBF row when x0 is safe."""
    return np.tile(np.asarray(x0, dtype=float), (N, 1)), np.zeros((N, NU))


# --- simulation -------------------------------------------------------------


class Simulation:
    """Stateful closed loop; one instance per run."""

    def __init__(self, sc: Scenario, workers: int | None = None, transport=None,
                 qp_settings: QpSettings | None = None):
        self.sc = sc
        self.settings = qp_settings or loop_settings()
        warmup()
        self.engine = None
        if sc.solver == "distributed":
            self.engine = ConsensusEngine(sc.graph, sc.safety, sc.weights.phi_weight, sc.admm,
                                          sc.edge_cbf, sc.activation_radius, self.settings,
                                          transport, workers)
        self.plans: list = [None] * sc.n_agents

    def close(self):
        if self.engine is not None:
            self.engine.close()

    # one cycle

    def _lift(self, states):
        out = np.array(states, dtype=float)
        for a, plan in enumerate(self.plans):
            if plan is not None:
                out[a, 2] = lift_angle(out[a, 2], plan.states[0, 2])
        return out

    def _locals(self, x_lift):
        return local_problems(self.sc, x_lift, self.plans)

    def _edge_sets(self, locals_):
        return edge_sets(self.sc, locals_)

    def _plan_distributed(self, locals_, cycle):
        res = self.engine.run_cycle(locals_, cycle)
        t = res.timings
        out = dict(plans=[p.flatten() for p in res.plans], degraded=list(res.degraded),
                   residuals=[(r.primal, r.dual) for r in res.residuals],
                   qp_counts=list(res.qp_counts), node_times=t.node, edge_times=t.edge,
                   planning_time=t.critical_path(), serial_time=t.serial())
        return out

    def _plan_centralized(self, locals_, cycle):
        sc = self.sc
        t0 = time.perf_counter()
        sets = self._edge_sets(locals_)
        cq = build_centralized_qp(locals_, sets, sc.weights.phi_weight)
        ws = QpWorkspace(cq.problem, self.settings)
        ops = [lq.op_vector() for lq in locals_]
        slacks = [sets[e].slack_values(ops[e[0]], ops[e[1]]) for e in sorted(sets)]
        ws.warm_start(np.concatenate(ops + slacks))
        sol = ws.solve()
        elapsed = time.perf_counter() - t0
        ok = accept(sol)
        plans = cq.split(sol.x) if ok else ops
        return dict(plans=[np.array(p) for p in plans], degraded=[not ok] * sc.n_agents,
                    residuals=[], qp_counts=[], node_times=np.zeros((0, 0)),
                    edge_times=np.zeros((0, 0)), planning_time=elapsed, serial_time=elapsed)

    def _plan_decoupled(self, locals_, cycle):
        plans, degraded, times = [], [], []
        for lq in locals_:
            t0 = time.perf_counter()
            ws = QpWorkspace(lq.problem, self.settings)
            ws.warm_start(lq.op_vector())
            sol = ws.solve()
            times.append(time.perf_counter() - t0)
            ok = accept(sol)
            plans.append(sol.x if ok else lq.op_vector())
            degraded.append(not ok)
        times = np.array(times)
        return dict(plans=plans, degraded=degraded, residuals=[], qp_counts=[],
                    node_times=times[None, :], edge_times=np.zeros((1, 0)),
                    planning_time=float(times.max()), serial_time=float(times.sum()))

    def plan_objective(self, locals_, plans) -> float:
        """Sum of tracking costs plus slack penalties of this cycle's plans."""
        sc = self.sc
        total = sum(lq.cost(p) for lq, p in zip(locals_, plans))
        for (i, j), es in self._edge_sets(locals_).items():
            total += es.penalty(plans[i], plans[j], sc.weights.phi_weight)
        return float(total)

    def step(self, cycle: int, states: np.ndarray):
        """Plan and apply one cycle; returns ``(StepLog, next plant states)``."""
        sc = self.sc
        t_cycle = time.perf_counter()
        x_lift = self._lift(states)
        locals_ = self._locals(x_lift)
        planner = {"distributed": self._plan_distributed, "centralized": self._plan_centralized,
                   "decoupled": self._plan_decoupled}[sc.solver]
        out = planner(locals_, cycle)
        plans = []
        for a, vec in enumerate(out["plans"]):
            if out["degraded"][a]:
                traj = fallback_plan(self.plans[a], sc.bounds, sc.N, x_lift[a], sc.Ts)
            else:
                traj = AgentTrajectory.unflatten(vec, stamp=cycle)
            plans.append(traj)
        self.plans = plans
        flat = [p.flatten() for p in plans]
        objective = self.plan_objective(locals_, flat)

        u = np.array([p.inputs[0] for p in plans])
        nxt = np.array([step_array(x_lift[a], u[a], sc.Ts, wrap=True)
                        for a in range(sc.n_agents)])
        pushed = [False] * sc.n_agents
        for ev in sc.disturbances:
            if ev.active(cycle):
                nxt[ev.agent] += ev.delta
                pushed[ev.agent] = True
        nxt[:, 2] = wrap_angle(nxt[:, 2])

        h_obs, h_pair = cbf_values(states, sc.obstacles, sc.safety.d_th)
        slack_max = []
        if self.engine is not None:
            slack_max = [float(self.engine.slack(e).max(initial=0.0)) for e in sc.graph.edges]
        log = StepLog(
            cycle=cycle, states=np.array(states), inputs=u, plans=flat, h_obs=h_obs,
            h_pair=h_pair, residuals=out["residuals"], slack_max=slack_max,
            qp_counts=out["qp_counts"], degraded=[bool(d) for d in out["degraded"]],
            pushed=pushed, arrived=[arrived(states[a], sc.goals[a]) for a in range(sc.n_agents)],
            objective=objective,
            stage_cost=stage_cost(states, u, sc.goals, sc.weights),
            node_times=np.asarray(out["node_times"]),
            edge_times=np.asarray(out["edge_times"]), planning_time=float(out["planning_time"]),
            serial_time=float(out["serial_time"]), cycle_time=time.perf_counter() - t_cycle)
        return log, nxt


def run(sc: Scenario, workers: int | None = None, transport=None, progress=None) -> SimResult:
    """Simulate ``sc.duration`` cycles with the scenario's solver."""
    sim = Simulation(sc, workers, transport)
    states = np.array(sc.starts, dtype=float)
    states[:, 2] = wrap_angle(states[:, 2])
    logs = []
    try:
        for t in range(sc.duration):
            log, states = sim.step(t, states)
            logs.append(log)
            if progress is not None:
                progress(log)
    finally:
        sim.close()
    return SimResult(sc, logs, states)


def first_cycle_problems(sc: Scenario) -> dict:
    """Cycle-0 QPs keyed by name: ``node_<i>``, ``edge_<i>_<j>``, ``centralized``.

    Node QPs carry the consensus terms at their initial values (copies at
    the operating point, zero duals). Edge QPs have a zero linear cost;
    it is refilled each iteration in the loop.
    """
    states = np.array(sc.starts, dtype=float)
    states[:, 2] = wrap_angle(states[:, 2])
    locals_ = local_problems(sc, states, [None] * sc.n_agents)
    sets = edge_sets(sc, locals_)
    out = {}
    for i, lq in enumerate(locals_):
        op = lq.op_vector()
        terms = [(op, np.zeros_like(op)) for _ in sc.graph.neighbors(i)]
        out[f"node_{i}"] = with_consensus(lq, terms, sc.admm.rho)
    for (i, j), es in sorted(sets.items()):
        out[f"edge_{i}_{j}"] = edge_qp(es, sc.admm.rho, sc.weights.phi_weight)
    out["centralized"] = build_centralized_qp(locals_, sets, sc.weights.phi_weight).problem
    return out


# --- output -----------------------------------------------------------------


def write_log(result: SimResult, path) -> Path:
    """JSON-lines log, one StepLog per line; byte-identical across reruns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for lg in result.logs:
            fh.write(json.dumps(lg.record(), separators=(",", ":")) + "\n")
    return path


def write_timings(result: SimResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for lg in result.logs:
            fh.write(json.dumps(lg.timing_record(), separators=(",", ":")) + "\n")
    return path


def write_csv(result: SimResult, path) -> Path:
    """Trajectory dump: cycle, agent, px, py, theta, v, omega, h_obs, h_edge_min."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pairs = result.pairs
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "agent", "px", "py", "theta", "v", "omega", "h_obs", "h_edge_min"])
        for lg in result.logs:
            for a in range(result.scenario.n_agents):
                mine = [lg.h_pair[k] for k, (i, j) in enumerate(pairs) if a in (i, j)]
                h_e = min(mine) if mine else float("inf")
                w.writerow([lg.cycle, a, *(repr(float(v)) for v in lg.states[a]),
                            *(repr(float(v)) for v in lg.inputs[a]),
                            repr(float(lg.h_obs[a])), repr(float(h_e))])
    return path


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


__all__ = ["StepLog", "SimResult", "Simulation", "run", "write_log", "write_timings",
           "write_csv", "read_log", "first_cycle_problems", "cbf_values", "arrived", "stage_cost",
           "hold_operating_point", "GOAL_POS_TOL", "GOAL_HEADING_TOL"]
