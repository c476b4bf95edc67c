import csv
import json

import numpy as np
import pytest
from conftest import cached_run

from swarm_dmpc.harness import (ComparisonReport, ScenarioError, compare, load_scenario,
                                packaged_scenarios, read_log, run, safety_violations, summarize,
                                write_csv, write_log)
from swarm_dmpc.harness.report import TABLE_ROWS, agent_margins, push_recoveries
from swarm_dmpc.harness.scenario import PushEvent, from_dict, parse_override


def two_agents(**extra):
    d = {"name": "t", "duration": 5,
         "agents": [{"start": [-1, 0, 0], "goal": [1, 0, 0]},
                    {"start": [1, 1, 0], "goal": [-1, 1, 0]}]}
    d.update(extra)
    return d


# --- scenario loading ----------------------------------------------------------


def test_packaged_scenarios_load():
    names = packaged_scenarios()
    assert {"two_agent_swap.json", "four_agent_cross.json", "far_apart.json",
            "push_recovery.json", "rough_field_10obs.json"} <= set(names)
    for n in names:
        load_scenario(n)


def test_defaults_and_overrides():
    sc = from_dict(two_agents(), {"admm.rho": 50, "safety.d_th": 0.4})
    assert sc.admm.rho == 50.0 and sc.safety.d_th == 0.4
    assert sc.N == 50 and sc.Ts == 0.1 and sc.admm.max_admm_iter == 15
    assert sc.graph.edges == ((0, 1),) and sc.activation_radius == 3.0
    assert parse_override("mode.solver=centralized") == ("mode.solver", "centralized")
    assert parse_override("admm.rho=2e1") == ("admm.rho", 20.0)
    assert from_dict(two_agents(), [("agents.0.goal", [2, 0, 0])]).goals[0, 0] == 2.0
    with pytest.raises(ValueError):
        parse_override("rho")


@pytest.mark.parametrize("patch, needle", [
    ({"agents": [{"start": [0, 0, 0], "goal": [1, 0, 0]},
                 {"start": [0.3, 0, 0], "goal": [2, 0, 0]}]}, "agents 0 and 1"),
    ({"obstacles": [[-1.2, 0.0]]}, "obstacle 0"),
    ({"horizon": 2.5}, "horizon"),
    ({"mode": {"solver": "magic"}}, "mode.solver"),
    ({"agents": []}, "non-empty"),
    ({"colour": "red"}, "colour"),
    ({"safety": {"alpha": 1.5}}, "invalid parameter"),
    ({"disturbances": [{"agent": 4, "start": 1, "end": 2, "delta": [0, 0, 0]}]}, "unknown agent"),
])
def test_validation_errors(patch, needle):
    with pytest.raises(ScenarioError) as err:
        from_dict(two_agents(**patch))
    assert any(needle in p for p in err.value.problems)


def test_bad_override_key():
    with pytest.raises(ScenarioError):
        from_dict(two_agents(), {"nope.x": 1})


def test_invalid_json_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(p)
    with pytest.raises(FileNotFoundError):
        load_scenario(tmp_path / "missing.json")


def test_random_obstacles_are_seeded():
    box = {"count": 6, "x": [-2, 2], "y": [-2, 2], "clearance": 0.3, "min_gap": 0.6}
    a = from_dict(two_agents(random_obstacles=box, seed=4))
    b = from_dict(two_agents(random_obstacles=box, seed=4))
    c = from_dict(two_agents(random_obstacles=box, seed=5))
    pa = np.array([o.position for o in a.obstacles])
    assert np.array_equal(pa, [o.position for o in b.obstacles])
    assert not np.array_equal(pa, [o.position for o in c.obstacles])
    anchors = np.vstack([a.starts[:, :2], a.goals[:, :2]])
    assert all(np.linalg.norm(anchors - p, axis=1).min() >= 0.8 for p in pa)
    # expanded obstacles survive a round trip through the effective config
    assert np.array_equal(pa, [o.position for o in from_dict(a.to_dict()).obstacles])
    with pytest.raises(ScenarioError):
        from_dict(two_agents(random_obstacles={**box, "count": 200, "min_gap": 1.0}))


def test_push_event_validation():
    with pytest.raises(ValueError):
        PushEvent(0, 5, 4, (0, 0, 0))
    with pytest.raises(ValueError):
        PushEvent(0, 1, 2, (0, 0))
    ev = PushEvent(0, 3, 4, [0, 1, 0])
    assert ev.active(3) and ev.active(4) and not ev.active(5)


# --- simulation -------------------------------------------------------------------


def test_agents_at_goal_stay_put():
    # 4 m apart, beyond the activation radius: no coupling rows, pure equilibrium
    sc = from_dict({"name": "still", "duration": 5, "obstacles": [[2, 3]],
                    "agents": [{"start": [0, 0, 0], "goal": [0, 0, 0]},
                               {"start": [4, 0, 1], "goal": [4, 0, 1]}]})
    res = run(sc, workers=1)
    assert np.abs(res.final_states - sc.starts).max() <= 1e-6
    assert max(np.abs(lg.inputs).max() for lg in res.logs) <= 1e-6
    h = np.array([np.concatenate([lg.h_obs, lg.h_pair]) for lg in res.logs])
    assert np.abs(h - h[0]).max() <= 1e-6
    assert res.arrival_cycles() == [0, 0]
    assert res.objective_total() <= 1e-6


def test_slack_penalty_prices_margin_inside_radius():
    # psi + s = 0 with s >= 0 makes s the pair margin, so phi(s) is paid even
    # at a safe standstill; the decoupled solver ignores it and holds still
    agents = [{"start": [0, 0, 0], "goal": [0, 0, 0]}, {"start": [2, 0, 1], "goal": [2, 0, 1]}]
    moved = {}
    for solver in ("decoupled", "centralized", "distributed"):
        res = run(from_dict({"name": "near", "duration": 3, "agents": agents,
                             "mode": {"solver": solver}}), workers=1)
        moved[solver] = max(np.abs(lg.inputs).max() for lg in res.logs)
        assert res.min_h_pair() >= 0.0
    assert moved["decoupled"] <= 1e-6
    assert moved["centralized"] > 1e-3 and moved["distributed"] > 1e-3


def test_log_csv_and_summary(tmp_path):
    res = run(from_dict(two_agents(obstacles=[[0, 2.5]])), workers=1)
    log = read_log(write_log(res, tmp_path / "r.jsonl"))
    assert len(log) == 5 and "planning_time" not in log[0]
    assert log[2]["qp_counts"] == [[2, 1]] * 15
    with open(write_csv(res, tmp_path / "r.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["cycle", "agent", "px", "py", "theta", "v", "omega", "h_obs",
                             "h_edge_min"]
    assert len(rows) == 10
    assert float(rows[3]["px"]) == log[1]["states"][1][0]
    s = summarize(res)
    assert s.min_h_obs == min(min(r["h_obs"]) for r in log)
    assert s.min_h_pair == min(min(r["h_pair"]) for r in log)
    assert np.isclose(s.objective_total, sum(r["stage_cost"] for r in log))
    assert s.to_dict()["cycles"] == 5 and "safety             OK" in s.text()


@pytest.mark.slow
def test_swap_regression():
    res = cached_run("two_agent_swap", duration=200)
    d = np.linalg.norm(res.positions()[:, 0] - res.positions()[:, 1], axis=1)
    assert d.min() >= 0.48
    assert res.arrival_cycles() == [190, 190]
    assert safety_violations(res) == []


@pytest.mark.slow
def test_symmetric_head_on_stays_safe():
    # exact mirror symmetry gives the solver no side to pass on: it must stop, not collide
    res = cached_run("two_agent_swap", duration=120, agents=[
        {"start": [-2, 0, 0], "goal": [2, 0, 0]},
        {"start": [2, 0, np.pi], "goal": [-2, 0, np.pi]}])
    assert res.min_h_pair() >= 0.0
    assert res.arrival_cycles() == [None, None]


@pytest.mark.slow
def test_push_recovery_scenario():
    res = cached_run("push_recovery")
    recs = push_recoveries(res)
    assert len(recs) == 3
    negative = [r for r in recs if r.went_negative]
    assert negative and all(r.recovery_cycles <= 10 for r in negative)
    h_obs = np.array([lg.h_obs for lg in res.logs])
    for r in recs:
        seg = h_obs[r.start_cycle + 1:r.end_cycle + 11, r.agent]
        # the obstacle margin dips below zero for at most 3 cycles, then comes back
        assert np.count_nonzero(seg < 0) <= 3
        assert seg[-1] >= 0
    assert (h_obs[:, 0] < 0).any()
    last = max(r.end_cycle for r in recs)
    assert h_obs[last + 11:].min() >= 0.0
    assert agent_margins(res)[last + 11:].min() >= 0.0
    assert safety_violations(res) == []


def test_unrecovered_push_is_a_violation():
    # pushed into an obstacle on the last two cycles: no time left to recover
    sc = from_dict(two_agents(duration=6, obstacles=[[-0.7, -0.8]], disturbances=[
        {"agent": 0, "start": 3, "end": 4, "delta": [0, -0.3, 0]}]))
    res = run(sc, workers=1)
    rec = push_recoveries(res)[0]
    assert rec.went_negative and rec.recovery_cycles is None
    assert any("no recovery" in v for v in safety_violations(res))
    assert "NOT recovered" in summarize(res).text()


def test_compare_far_apart(tmp_path):
    report, results = compare(load_scenario("far_apart", {"duration": 20}), workers=1)
    assert report.max_deviation <= 1e-3
    assert report.qps_per_iteration == [2, 1] and report.admm_iterations == 15
    assert set(results) == {"distributed", "centralized"}
    back = ComparisonReport.from_json(report.write(tmp_path / "cmp.json").read_text())
    assert back == report
    table = report.table()
    assert all(row in table for row in TABLE_ROWS)
    assert json.loads(report.to_json())["scenario"] == "far_apart"
