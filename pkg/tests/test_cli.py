import json
import subprocess
import sys

import pytest

from swarm_dmpc.cli import EXIT_ERROR, EXIT_OK, EXIT_UNSAFE, main


def write_scenario(tmp_path, **extra):
    d = {"name": "tiny", "duration": 4,
         "agents": [{"start": [-1, 0, 0], "goal": [1, 0, 0]},
                    {"start": [1, 1, 0], "goal": [-1, 1, 0]}]}
    d.update(extra)
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(d))
    return str(p)


def test_run_is_deterministic(tmp_path):
    sc = write_scenario(tmp_path)
    for out in ("a", "b"):
        assert main(["run", sc, "--seed", "7", "--quiet", "--out", str(tmp_path / out)]) == EXIT_OK
    for suffix in (".jsonl", ".csv", ".config.json"):
        a = (tmp_path / "a" / f"tiny_distributed{suffix}").read_bytes()
        assert a == (tmp_path / "b" / f"tiny_distributed{suffix}").read_bytes()
    assert json.loads((tmp_path / "a" / "tiny_distributed.config.json").read_text())["seed"] == 7


def test_run_timings_and_solver_flag(tmp_path):
    sc = write_scenario(tmp_path)
    assert main(["run", sc, "--solver", "centralized", "--timings", "--quiet",
                 "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "tiny_centralized.timings.jsonl").read_text().splitlines()
    assert len(lines) == 4 and "planning_time" in json.loads(lines[0])


def test_override_echo(tmp_path, capsys):
    sc = write_scenario(tmp_path)
    assert main(["validate", sc, "--override", "admm.rho=20", "--admm-iters", "7"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "rho=20.0" in out and "admm_iters=7" in out and "OK" in out


def test_push_summary(tmp_path, capsys):
    code = main(["run", "push_recovery", "--override", "duration=35", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "degraded/push" in out and "recovered in" in out


def test_unrecovered_push_exits_2(tmp_path, capsys):
    sc = write_scenario(tmp_path, duration=6, obstacles=[[-0.7, -0.8]], disturbances=[
        {"agent": 0, "start": 3, "end": 4, "delta": [0, -0.3, 0]}])
    assert main(["run", sc, "--out", str(tmp_path)]) == EXIT_UNSAFE
    assert "VIOLATED" in capsys.readouterr().out


def test_validate_names_the_unsafe_pair(tmp_path, capsys):
    sc = write_scenario(tmp_path, agents=[{"start": [0, 0, 0], "goal": [1, 0, 0]},
                                          {"start": [0.2, 0, 0], "goal": [2, 0, 0]}])
    assert main(["validate", sc]) == EXIT_ERROR
    assert "agents 0 and 1" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["{broken", "[1, 2]"])
def test_bad_json_exits_1(tmp_path, capsys, text):
    p = tmp_path / "bad.json"
    p.write_text(text)
    assert main(["validate", str(p)]) == EXIT_ERROR
    assert "invalid scenario" in capsys.readouterr().err


def test_unknown_scenario_and_override(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "nope.json")]) == EXIT_ERROR
    assert main(["validate", "far_apart", "--override", "rho"]) == EXIT_ERROR
    err = capsys.readouterr().err
    assert "no scenario file" in err and "key=value" in err


def test_dump_qp_sizes(tmp_path, capsys):
    assert main(["dump-qp", "two_agent_swap", "--override", "mode.edge_cbf=first_step",
                 "--out", str(tmp_path)]) == EXIT_OK
    node = json.loads((tmp_path / "node_0.json").read_text())
    edge = json.loads((tmp_path / "edge_0_1.json").read_text())
    assert node["n"] == 250 and edge["n"] == 501
    assert (tmp_path / "centralized.json").exists()
    assert "n=250" in capsys.readouterr().out


def test_compare_far_apart(tmp_path, capsys):
    assert main(["compare", "far_apart", "--override", "duration=10",
                 "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "far_apart.compare.json").read_text())
    assert report["max_deviation"] <= 1e-3
    assert "Total (Centralized)" in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "swarm_dmpc", "list"], capture_output=True,
                         text=True, check=True)
    assert "two_agent_swap.json" in out.stdout.split()
