"""Scenario files: JSON schema, defaults, dotted overrides, and load-time checks.

See ``docs/scenario-schema.md`` for the field reference.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations
from pathlib import Path

import numpy as np

from ..consensus import AdmmConfig, InteractionGraph
from ..planner import EDGE_MODES, CostWeights, InputBounds
from ..safety import Obstacle, SafetyParams

SOLVERS = ("distributed", "centralized", "decoupled")

DEFAULTS = {
    "name": "unnamed",
    "description": "",
    "seed": 0,
    "duration": 100,
    "horizon": 50,
    "Ts": 0.1,
    "agents": [],
    "obstacles": [],
    "random_obstacles": None,
    "graph": "complete",
    "weights": {"Q": [50.0, 50.0, 100.0], "R": [50.0, 10.0], "P": [500.0, 500.0, 1000.0],
                "phi": 5.0},
    "safety": {"d_th": 0.5, "alpha": 0.3},
    "admm": {"rho": 20.0, "max_iter": 15, "residual_stop": None, "reset_duals": False},
    "bounds": {"v": [-0.8, 0.8], "omega": [-1.5, 1.5]},
    "disturbances": [],
    "mode": {"edge_cbf": "all_steps", "solver": "distributed", "activation_radius": 3.0},
}

_TOP_KEYS = set(DEFAULTS)


class ScenarioError(ValueError):
    """Scenario failed schema or initial-safety validation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class PushEvent:
    """Additive plant-state offset applied after every cycle in ``[start, end]``."""

    agent: int
    start_cycle: int
    end_cycle: int
    delta: tuple

    def __post_init__(self):
        if self.start_cycle > self.end_cycle:
            raise ValueError("push start_cycle must be <= end_cycle")
        d = tuple(float(v) for v in self.delta)
        if len(d) != 3 or not np.all(np.isfinite(d)):
            raise ValueError("push delta must be three finite numbers")
        object.__setattr__(self, "delta", d)

    def active(self, cycle: int) -> bool:
        return self.start_cycle <= cycle <= self.end_cycle


@dataclass
class Scenario:
    name: str
    starts: np.ndarray
    goals: np.ndarray
    obstacles: list
    graph: InteractionGraph
    N: int
    Ts: float
    weights: CostWeights
    safety: SafetyParams
    admm: AdmmConfig
    bounds: InputBounds
    disturbances: list
    duration: int
    seed: int
    edge_cbf: str = "all_steps"
    solver: str = "distributed"
    activation_radius: float | None = 3.0
    description: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def n_agents(self) -> int:
        return len(self.starts)

    def with_solver(self, solver: str) -> "Scenario":
        return from_dict(self.raw, overrides={"mode.solver": solver})

    def to_dict(self) -> dict:
        """Effective configuration (defaults filled, random obstacles expanded)."""
        d = copy.deepcopy(self.raw)
        d["obstacles"] = [list(map(float, o.position)) for o in self.obstacles]
        d["random_obstacles"] = None
        return d


# --- loading ------------------------------------------------------------


def packaged_scenarios() -> list[str]:
    root = resources.files("swarm_dmpc") / "scenarios"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def resolve_path(name_or_path) -> Path:
    """A filesystem path, or the name of a packaged scenario."""
    p = Path(name_or_path)
    if p.exists():
        return p
    fname = p.name if p.suffix == ".json" else p.name + ".json"
    cand = resources.files("swarm_dmpc") / "scenarios" / fname
    if cand.is_file():
        return Path(str(cand))
    raise FileNotFoundError(f"no scenario file or packaged scenario named {name_or_path!r}")


def parse_override(text: str):
    """``"a.b=value"`` -> ``("a.b", value)``; values are JSON, else plain strings."""
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like key=value")
    key, val = text.split("=", 1)
    try:
        return key.strip(), json.loads(val)
    except json.JSONDecodeError:
        return key.strip(), val


def apply_overrides(d: dict, overrides) -> dict:
    d = copy.deepcopy(d)
    items = overrides.items() if isinstance(overrides, dict) else overrides
    for key, val in items:
        parts = key.split(".")
        if parts[0] not in _TOP_KEYS:
            raise ScenarioError([f"override key {key!r}: unknown field {parts[0]!r}"])
        node = d
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        if isinstance(node, list):
            node[int(parts[-1])] = val
        else:
            node[parts[-1]] = val
    return d


def _merged(d: dict) -> dict:
    out = copy.deepcopy(DEFAULTS)
    for k, v in d.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def load_scenario(name_or_path, overrides=None, seed: int | None = None) -> Scenario:
    path = resolve_path(name_or_path)
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"{path}: invalid JSON ({exc})"]) from exc
    if not isinstance(d, dict):
        raise ScenarioError([f"{path}: top level must be an object"])
    ov = dict(overrides or {})
    if seed is not None:
        ov["seed"] = int(seed)
    return from_dict(d, ov)


def from_dict(d: dict, overrides=None) -> Scenario:
    unknown = sorted(set(d) - _TOP_KEYS)
    if unknown:
        raise ScenarioError([f"unknown field {k!r}" for k in unknown])
    raw = _merged(apply_overrides(d, overrides or {}))
    problems = []

    def need(cond, msg):
        if not cond:
            problems.append(msg)
        return cond

    for key in ("horizon", "duration", "seed"):
        need(isinstance(raw[key], int) and not isinstance(raw[key], bool),
             f"{key} must be an integer")
    if problems:
        raise ScenarioError(problems)
    need(raw["horizon"] >= 1, "horizon must be >= 1")
    need(raw["duration"] >= 1, "duration must be >= 1")
    need(isinstance(raw["Ts"], (int, float)) and raw["Ts"] > 0, "Ts must be > 0")

    agents = raw["agents"]
    if need(isinstance(agents, list) and len(agents) >= 1, "agents must be a non-empty list"):
        for a, entry in enumerate(agents):
            ok = isinstance(entry, dict) and all(
                isinstance(entry.get(k), list) and len(entry[k]) == 3 for k in ("start", "goal"))
            need(ok, f"agents[{a}] needs 'start' and 'goal' as [px, py, theta]")
    mode = raw["mode"]
    need(mode.get("edge_cbf") in EDGE_MODES, f"mode.edge_cbf must be one of {EDGE_MODES}")
    need(mode.get("solver") in SOLVERS, f"mode.solver must be one of {SOLVERS}")
    if problems:
        raise ScenarioError(problems)

    try:
        w = raw["weights"]
        weights = CostWeights(w["Q"], w["R"], w["P"], float(w["phi"]))
        safety = SafetyParams(float(raw["safety"]["d_th"]), float(raw["safety"]["alpha"]))
        a = raw["admm"]
        admm = AdmmConfig(float(a["rho"]), int(a["max_iter"]), a.get("residual_stop"),
                          bool(a.get("reset_duals", False)))
        b = raw["bounds"]
        bounds = InputBounds(b["v"][0], b["v"][1], b["omega"][0], b["omega"][1])
        starts = np.array([s["start"] for s in agents], dtype=float)
        goals = np.array([s["goal"] for s in agents], dtype=float)
        n = len(agents)
        if raw["graph"] == "complete":
            graph = InteractionGraph.complete(n)
        else:
            graph = InteractionGraph(n, tuple(tuple(e) for e in raw["graph"]))
        pushes = [PushEvent(int(p["agent"]), int(p["start"]), int(p["end"]), p["delta"])
                  for p in raw["disturbances"]]
        obstacles = [Obstacle(o) for o in raw["obstacles"]]
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ScenarioError([f"invalid parameter: {exc}"]) from exc

    if not (np.all(np.isfinite(starts)) and np.all(np.isfinite(goals))):
        raise ScenarioError(["agent states must be finite"])
    for p in pushes:
        need(0 <= p.agent < n, f"push references unknown agent {p.agent}")
    if raw["random_obstacles"]:
        obstacles += random_obstacles(raw["random_obstacles"], starts, goals, safety.d_th,
                                      raw["seed"])
    radius = mode.get("activation_radius", 3.0)
    radius = None if radius in (None, "all") else float(radius)

    problems += initial_safety_problems(starts, obstacles, safety.d_th)
    if problems:
        raise ScenarioError(problems)
    return Scenario(
        name=str(raw["name"]), starts=starts, goals=goals, obstacles=obstacles, graph=graph,
        N=raw["horizon"], Ts=float(raw["Ts"]), weights=weights, safety=safety, admm=admm,
        bounds=bounds, disturbances=pushes, duration=raw["duration"], seed=raw["seed"],
        edge_cbf=mode["edge_cbf"], solver=mode["solver"], activation_radius=radius,
        description=str(raw["description"]), raw=raw)


def initial_safety_problems(starts, obstacles, d_th: float) -> list[str]:
    out = []
    for i, j in combinations(range(len(starts)), 2):
        dist = float(np.linalg.norm(starts[i, :2] - starts[j, :2]))
        if dist < d_th:
            out.append(f"agents {i} and {j} start {dist:.3f} m apart (< d_th = {d_th})")
    for i in range(len(starts)):
        for k, o in enumerate(obstacles):
            dist = float(np.linalg.norm(starts[i, :2] - o.position))
            if dist < d_th:
                out.append(f"agent {i} starts {dist:.3f} m from obstacle {k} (< d_th = {d_th})")
    return out


def random_obstacles(box: dict, starts, goals, d_th: float, seed: int) -> list:
    """Seeded rejection sampling of obstacle centers in a box.

    ``box``: ``{"count": int, "x": [lo, hi], "y": [lo, hi], "clearance": float,
    "min_gap": float}``; centers keep ``d_th + clearance`` from every start and
    goal position and ``min_gap`` from each other.
    """
    rng = np.random.default_rng(seed)
    count = int(box["count"])
    lo = np.array([box["x"][0], box["y"][0]], dtype=float)
    hi = np.array([box["x"][1], box["y"][1]], dtype=float)
    keep_out = d_th + float(box.get("clearance", 0.5))
    min_gap = float(box.get("min_gap", 0.0))
    anchors = np.vstack([np.asarray(starts)[:, :2], np.asarray(goals)[:, :2]])
    out = []
    for _ in range(1000 * max(count, 1)):
        if len(out) == count:
            break
        c = lo + rng.random(2) * (hi - lo)
        if np.linalg.norm(anchors - c, axis=1).min() < keep_out:
            continue
        if out and min(np.linalg.norm(o.position - c) for o in out) < min_gap:
            continue
        out.append(Obstacle(c))
    if len(out) < count:
        raise ScenarioError([f"could only place {len(out)} of {count} random obstacles"])
    return out
