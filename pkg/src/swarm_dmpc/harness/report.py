"""Run summaries, safety checks, and distributed-vs-centralized comparison.

All numbers here are derived from the StepLogs of a finished run, so a
summary printed by the CLI can be reproduced exactly from the JSON-lines
log (timings aside, which live in the separate timing file).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .scenario import Scenario
from .simulate import SimResult, run

SAFETY_TOL = 0.02  # m, linearization allowance on nominal CBF values
RECOVERY_WINDOW = 10  # cycles after a push ends


def _stats_ms(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float).ravel() * 1e3
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def _finite_min(values) -> float:
    v = [float(x) for x in values if np.isfinite(x)]
    return min(v) if v else float("inf")


# --- per-run margins -------------------------------------------------------


def agent_margins(result: SimResult) -> np.ndarray:
    """(cycles, agents) smallest CBF value touching each agent.

    Combines the agent's obstacle value with every pair value it is part
    of; ``inf`` when neither exists.
    """
    n = result.scenario.n_agents
    pairs = result.pairs
    out = np.full((len(result.logs), n), np.inf)
    for c, lg in enumerate(result.logs):
        out[c] = lg.h_obs
        for k, (i, j) in enumerate(pairs):
            out[c, i] = min(out[c, i], lg.h_pair[k])
            out[c, j] = min(out[c, j], lg.h_pair[k])
    return out


@dataclass
class PushRecovery:
    """Effect of one push window on the pushed agent's margins.

    Values logged at cycle ``c`` describe the plant after cycle ``c - 1``,
    so the last pushed state shows up at ``end_cycle + 1``.
    ``recovery_cycles`` counts cycles after ``end_cycle`` until the margin
    is back to >= 0 (0 if it never went negative, None if it never came back).
    """

    agent: int
    start_cycle: int
    end_cycle: int
    min_margin: float
    went_negative: bool
    recovery_cycles: int | None


def push_recoveries(result: SimResult) -> list[PushRecovery]:
    margins = agent_margins(result)
    T = len(result.logs)
    out = []
    for ev in result.scenario.disturbances:
        a = ev.agent
        lo = min(ev.start_cycle + 1, T)
        hi = min(ev.end_cycle + 1, T - 1)
        window = margins[lo:hi + 1, a] if lo <= hi else np.zeros(0)
        min_m = _finite_min(window)
        neg = bool(np.any(window < 0.0))
        rec = 0
        if neg:
            rec = None
            for c in range(ev.end_cycle + 1, T):
                if margins[c, a] >= 0.0:
                    rec = c - ev.end_cycle
                    break
        out.append(PushRecovery(a, ev.start_cycle, ev.end_cycle, min_m, neg, rec))
    return out


def _excused(result: SimResult, window: int) -> np.ndarray:
    """(cycles, agents) mask of push windows plus their recovery allowance."""
    mask = np.zeros((len(result.logs), result.scenario.n_agents), dtype=bool)
    for ev in result.scenario.disturbances:
        mask[ev.start_cycle + 1:ev.end_cycle + 1 + window, ev.agent] = True
    return mask


def safety_violations(result: SimResult, tol: float = SAFETY_TOL,
                      window: int = RECOVERY_WINDOW) -> list[str]:
    """Breaches of the nominal safety invariant; empty when the run is safe.

    Outside push windows every CBF value must stay >= ``-tol``. A pushed
    agent gets ``window`` cycles after the push ends to get back to >= 0.
    Pair values are excused when either endpoint is excused.
    """
    problems = []
    excused = _excused(result, window)
    pairs = result.pairs
    for c, lg in enumerate(result.logs):
        for a, h in enumerate(lg.h_obs):
            if h < -tol and not excused[c, a]:
                problems.append(f"cycle {c}: agent {a} obstacle CBF {h:.4f} < -{tol}")
        for k, (i, j) in enumerate(pairs):
            h = lg.h_pair[k]
            if h < -tol and not (excused[c, i] or excused[c, j]):
                problems.append(f"cycle {c}: agents {i},{j} CBF {h:.4f} < -{tol}")
    for pr in push_recoveries(result):
        if pr.went_negative and (pr.recovery_cycles is None or pr.recovery_cycles > window):
            problems.append(f"agent {pr.agent}: no recovery within {window} cycles of the push "
                            f"ending at cycle {pr.end_cycle}")
    return problems


# --- run summary -------------------------------------------------------------


@dataclass
class RunSummary:
    scenario: str
    solver: str
    cycles: int
    arrivals: list
    min_h_obs: float
    min_h_pair: float
    degraded_agent_cycles: int
    planning_ms_mean: float
    planning_ms_std: float
    objective_total: float
    pushes: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("min_h_obs", "min_h_pair"):
            if not np.isfinite(d[key]):
                d[key] = None
        return d

    def text(self) -> str:
        def fmt(v):
            return "n/a" if v is None or not np.isfinite(v) else f"{v:.4f}"

        arr = ", ".join("-" if a is None else str(a) for a in self.arrivals)
        lines = [
            f"scenario           {self.scenario} ({self.solver})",
            f"cycles             {self.cycles}",
            f"arrival cycle      {arr}",
            f"min obstacle CBF   {fmt(self.min_h_obs)} m",
            f"min pair CBF       {fmt(self.min_h_pair)} m",
            f"planning time      {self.planning_ms_mean:.2f} +- {self.planning_ms_std:.2f} ms",
            f"objective total    {self.objective_total:.2f}",
            f"degraded/push      {self.degraded_agent_cycles} degraded agent-cycles, "
            f"{len(self.pushes)} push windows",
        ]
        for p in self.pushes:
            if not p.went_negative:
                state = "margin stayed >= 0"
            elif p.recovery_cycles is None:
                state = "NOT recovered"
            else:
                state = f"recovered in {p.recovery_cycles} cycles"
            lines.append(f"  push agent {p.agent} cycles {p.start_cycle}-{p.end_cycle}: "
                         f"min margin {fmt(p.min_margin)} m, {state}")
        lines.append(f"safety             {'OK' if not self.violations else 'VIOLATED'}")
        lines += [f"  {v}" for v in self.violations[:10]]
        return "\n".join(lines)


def summarize(result: SimResult) -> RunSummary:
    sc = result.scenario
    mean, std = _stats_ms(result.planning_times())
    return RunSummary(
        scenario=sc.name, solver=sc.solver, cycles=len(result.logs),
        arrivals=result.arrival_cycles(), min_h_obs=result.min_h_obs(),
        min_h_pair=result.min_h_pair(),
        degraded_agent_cycles=int(sum(sum(lg.degraded) for lg in result.logs)),
        planning_ms_mean=mean, planning_ms_std=std, objective_total=result.objective_total(),
        pushes=push_recoveries(result), violations=safety_violations(result))


# --- comparison ----------------------------------------------------------------


TABLE_ROWS = ("Node-update QP", "Edge-update QP", "Total (ADMM)", "Total (Centralized)")


@dataclass
class ComparisonReport:
    """Distributed vs centralized run of one scenario; times in milliseconds."""

    scenario: str
    n_agents: int
    n_edges: int
    admm_iterations: int
    qps_per_iteration: list  # [node QPs, edge QPs]
    node_qp_ms: list  # [avg, std]
    edge_qp_ms: list
    total_admm_ms: list
    total_centralized_ms: list
    time_ratio: float
    max_deviation: float
    objective_distributed: float
    objective_centralized: float
    objective_gap: float
    min_h_obs: dict
    min_h_pair: dict
    degraded: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ComparisonReport":
        return cls.from_dict(json.loads(text))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    def table(self) -> str:
        rows = dict(zip(TABLE_ROWS, (self.node_qp_ms, self.edge_qp_ms, self.total_admm_ms,
                                     self.total_centralized_ms)))
        head = f"{self.scenario}: {self.n_agents} agents, {self.n_edges} edges"
        lines = [head, f"{'QP computation time (ms)':<26}{'avg':>10}{'std':>10}"]
        for name, (avg, std) in rows.items():
            lines.append(f"{name:<26}{avg:>10.2f}{std:>10.2f}")
        n, e = self.qps_per_iteration
        lines += [
            f"QPs per ADMM iteration: {n} node + {e} edge, {self.admm_iterations} iterations",
            f"ADMM / centralized time: {self.time_ratio:.3f} "
            f"({100 * (1 - self.time_ratio):.1f}% reduction)",
            f"max trajectory deviation: {self.max_deviation:.4f} m",
            f"objective gap: {100 * self.objective_gap:.3f}%",
        ]
        return "\n".join(lines)


def trajectory_deviation(a: SimResult, b: SimResult) -> np.ndarray:
    """Per-cycle max over agents of the plant position difference."""
    return np.linalg.norm(a.positions() - b.positions(), axis=2).max(axis=1)


def compare(sc: Scenario, workers: int | None = None) -> tuple[ComparisonReport, dict]:
    """Run ``sc`` distributed and centralized; returns the report and both results."""
    results = {s: run(sc.with_solver(s), workers=workers) for s in ("distributed",
                                                                     "centralized")}
    dist, cen = results["distributed"], results["centralized"]
    node = np.concatenate([lg.node_times.ravel() for lg in dist.logs])
    edge = np.concatenate([lg.edge_times.ravel() for lg in dist.logs])
    t_admm = dist.planning_times()
    t_cen = cen.planning_times()
    counts = dist.logs[0].qp_counts[0] if dist.logs[0].qp_counts else (sc.n_agents, 0)
    obj_d, obj_c = dist.objective_total(), cen.objective_total()
    report = ComparisonReport(
        scenario=sc.name, n_agents=sc.n_agents, n_edges=sc.graph.n_edges,
        admm_iterations=len(dist.logs[0].qp_counts),
        qps_per_iteration=[int(counts[0]), int(counts[1])],
        node_qp_ms=list(_stats_ms(node)), edge_qp_ms=list(_stats_ms(edge)),
        total_admm_ms=list(_stats_ms(t_admm)), total_centralized_ms=list(_stats_ms(t_cen)),
        time_ratio=float(t_admm.mean() / t_cen.mean()),
        max_deviation=float(trajectory_deviation(dist, cen).max()),
        objective_distributed=obj_d, objective_centralized=obj_c,
        objective_gap=float(abs(obj_d - obj_c) / max(abs(obj_c), 1e-12)),
        min_h_obs={s: _none_if_inf(r.min_h_obs()) for s, r in results.items()},
        min_h_pair={s: _none_if_inf(r.min_h_pair()) for s, r in results.items()},
        degraded={s: int(sum(sum(lg.degraded) for lg in r.logs)) for s, r in results.items()},
    )
    return report, results


def _none_if_inf(v: float):
    return None if not np.isfinite(v) else float(v)


__all__ = ["ComparisonReport", "RunSummary", "PushRecovery", "compare", "summarize",
           "push_recoveries", "safety_violations", "agent_margins", "trajectory_deviation",
           "SAFETY_TOL", "RECOVERY_WINDOW", "TABLE_ROWS"]
