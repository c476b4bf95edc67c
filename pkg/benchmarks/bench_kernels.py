"""Numba vs numpy timings for the hot kernels.

Each backend runs in its own interpreter because ``SWARM_DMPC_NUMBA`` is
read at import time. JIT compilation happens in a warm-up pass and is
reported separately.

    python benchmarks/bench_kernels.py [--repeat 5] [--cycles 10]
"""
import argparse
import json
import os
import subprocess
import sys

_WORKER = r"""
import json, sys, time
import numpy as np
from swarm_dmpc import BACKEND
from swarm_dmpc.harness import load_scenario, run
from swarm_dmpc.harness.simulate import first_cycle_problems
from swarm_dmpc.qpcore import QpSettings, QpWorkspace, SlackProjection, warmup

repeat, cycles = int(sys.argv[1]), int(sys.argv[2])
t0 = time.perf_counter()
warmup()
compile_s = time.perf_counter() - t0

sc = load_scenario("four_agent_cross")
probs = first_cycle_problems(sc)
node, central = probs["node_0"], probs["centralized"]
settings = QpSettings(eps_abs=1e-3, eps_rel=1e-3, reuse_active_set=False)
rng = np.random.default_rng(0)
G = rng.normal(size=(50, 500)) * (rng.random((50, 500)) < 0.05)
b = rng.normal(size=50)
t = rng.normal(size=500)


def best(fn):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


out = {
    "backend": BACKEND,
    "compile_s": compile_s,
    "node_qp_s": best(lambda: QpWorkspace(node, settings).solve()),
    "centralized_qp_s": best(lambda: QpWorkspace(central, settings).solve()),
    "edge_projection_s": best(lambda: SlackProjection(G, b, 20.0, 5.0).solve(t)),
    "scenario_s": best(lambda: run(load_scenario("two_agent_swap", {"duration": cycles}))),
}
print(json.dumps(out))
"""


def measure(flag: str, repeat: int, cycles: int) -> dict:
    env = dict(os.environ, SWARM_DMPC_NUMBA=flag)
    proc = subprocess.run([sys.executable, "-c", _WORKER, str(repeat), str(cycles)], env=env,
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--cycles", type=int, default=10, help="closed-loop cycles for the scenario row")
    args = ap.parse_args(argv)

    fast = measure("1", args.repeat, args.cycles)
    slow = measure("0", args.repeat, args.cycles)
    rows = [("node QP (250 vars)", "node_qp_s"), ("centralized QP (4 agents)", "centralized_qp_s"),
            ("edge projection (50 rows)", "edge_projection_s"),
            (f"two_agent_swap, {args.cycles} cycles", "scenario_s")]
    print(f"{'kernel':<32}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for label, key in rows:
        a, b = fast[key], slow[key]
        print(f"{label:<32}{1e3 * a:>10.2f}ms{1e3 * b:>10.2f}ms{b / a:>9.1f}x")
    print(f"JIT warm-up: {fast['compile_s']:.2f} s (cached after the first run)")


if __name__ == "__main__":
    main()
