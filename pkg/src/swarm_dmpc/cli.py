"""Command-line entry point: ``swarm-dmpc {run,compare,validate,dump-qp,list}``.

Exit codes: 0 success, 2 safety-invariant violation, 1 any other error
(including scenario schema problems, which are listed on stderr).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (ScenarioError, compare, load_scenario, packaged_scenarios,
                      parse_override, run, safety_violations, summarize, write_csv, write_log,
                      write_timings)
from .harness.scenario import SOLVERS
from .harness.simulate import first_cycle_problems
from .qpcore.dump import dump_qp

EXIT_OK, EXIT_ERROR, EXIT_UNSAFE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swarm-dmpc",
                                 description="Distributed CBF-MPC for unicycle teams.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, solver=True):
        p.add_argument("scenario", help="scenario JSON file or packaged scenario name")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--override", action="append", default=[], metavar="K=V",
                       help="dotted-path override, e.g. admm.rho=20 (repeatable)")
        if solver:
            p.add_argument("--solver", choices=SOLVERS, default=None)
        p.add_argument("--admm-iters", type=int, default=None, dest="admm_iters")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("run", help="simulate one scenario and write its logs")
    common(p)
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--timings", action="store_true",
                   help="also write wall-clock timings (not reproducible between runs)")

    p = sub.add_parser("compare", help="distributed vs centralized on one scenario")
    common(p, solver=False)
    p.add_argument("--out", default="runs")

    p = sub.add_parser("validate", help="check a scenario file without running it")
    common(p)

    p = sub.add_parser("dump-qp", help="write the first cycle's QPs as JSON")
    common(p)
    p.add_argument("--out", default="qp_dump")

    sub.add_parser("list", help="list packaged scenarios")
    return ap


def _load(args):
    ov = dict(parse_override(t) for t in args.override)
    if getattr(args, "solver", None):
        ov["mode.solver"] = args.solver
    if args.admm_iters is not None:
        ov["admm.max_iter"] = args.admm_iters
    return load_scenario(args.scenario, ov, args.seed)


def _echo(sc) -> str:
    a = sc.admm
    return (f"effective config: {sc.name} agents={sc.n_agents} edges={sc.graph.n_edges} "
            f"obstacles={len(sc.obstacles)} N={sc.N} Ts={sc.Ts} solver={sc.solver} "
            f"edge_cbf={sc.edge_cbf} rho={a.rho} admm_iters={a.max_admm_iter} "
            f"d_th={sc.safety.d_th} alpha={sc.safety.alpha_slope} phi={sc.weights.phi_weight} "
            f"seed={sc.seed} duration={sc.duration}")


def cmd_run(args) -> int:
    sc = _load(args)
    say = (lambda *a: None) if args.quiet else print
    say(_echo(sc))
    result = run(sc)
    out = Path(args.out)
    stem = f"{sc.name}_{sc.solver}"
    write_log(result, out / f"{stem}.jsonl")
    write_csv(result, out / f"{stem}.csv")
    if args.timings:
        write_timings(result, out / f"{stem}.timings.jsonl")
    (out / f"{stem}.config.json").write_text(json.dumps(sc.to_dict(), indent=2, sort_keys=True))
    summary = summarize(result)
    say(summary.text())
    return EXIT_UNSAFE if summary.violations else EXIT_OK


def cmd_compare(args) -> int:
    sc = _load(args)
    say = (lambda *a: None) if args.quiet else print
    say(_echo(sc))
    report, results = compare(sc)
    out = Path(args.out)
    report.write(out / f"{sc.name}.compare.json")
    say(report.table())
    unsafe = any(safety_violations(r) for r in results.values())
    return EXIT_UNSAFE if unsafe else EXIT_OK


def cmd_validate(args) -> int:
    sc = _load(args)
    if not args.quiet:
        print(_echo(sc))
        print("OK")
    return EXIT_OK


def cmd_dump_qp(args) -> int:
    sc = _load(args)
    out = Path(args.out)
    for name, qp in first_cycle_problems(sc).items():
        path = dump_qp(qp, out / f"{name}.json")
        if not args.quiet:
            print(f"{name:<14} n={qp.n:<5} eq={qp.n_eq:<5} ineq={qp.n_in:<5} -> {path}")
    return EXIT_OK


def main(argv=None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    if args.command == "list":
        for name in packaged_scenarios():
            print(name)
        return EXIT_OK
    handler = {"run": cmd_run, "compare": cmd_compare, "validate": cmd_validate,
               "dump-qp": cmd_dump_qp}[args.command]
    try:
        return handler(args)
    except ScenarioError as exc:
        print(f"invalid scenario {args.scenario}:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
