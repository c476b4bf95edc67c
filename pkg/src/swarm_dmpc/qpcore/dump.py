"""Self-describing JSON dump of a QP for offline inspection.

Matrices are dense row-major nested lists; infinite bounds are written
as ``null``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .problem import QpProblem

FORMAT = "swarm_dmpc.qp/1"


def _vec(v, inf_ok=False):
    v = np.asarray(v, dtype=float)
    if inf_ok:
        return [None if not np.isfinite(a) else float(a) for a in v]
    return v.tolist()


def qp_to_dict(p: QpProblem) -> dict:
    return {
        "format": FORMAT,
        "n": p.n,
        "n_eq": p.n_eq,
        "n_in": p.n_in,
        "form": "min 1/2 x'Hx + f'x  s.t.  Aeq x = beq, Ain x >= bin, lb <= x <= ub",
        "H": p.dense("H").tolist(),
        "f": _vec(p.f),
        "Aeq": p.dense("Aeq").tolist(),
        "beq": _vec(p.beq),
        "Ain": p.dense("Ain").tolist(),
        "bin": _vec(p.bin),
        "lb": _vec(p.lb, inf_ok=True),
        "ub": _vec(p.ub, inf_ok=True),
        "meta": p.meta,
    }


def qp_from_dict(d: dict) -> QpProblem:
    if d.get("format") != FORMAT:
        raise ValueError(f"unknown QP dump format {d.get('format')!r}")
    n = d["n"]

    def mat(key):
        a = np.asarray(d[key], dtype=float)
        return a.reshape(-1, n)

    def bound(key, fill):
        return np.array([fill if a is None else a for a in d[key]], dtype=float)

    return QpProblem(np.asarray(d["H"], dtype=float).reshape(n, n), d["f"], mat("Aeq"), d["beq"],
                     mat("Ain"), d["bin"], bound("lb", -np.inf), bound("ub", np.inf),
                     d.get("meta", {}))


def dump_qp(p: QpProblem, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # dumps() takes the C encoder; dump() to a file handle does not
    path.write_text(json.dumps(qp_to_dict(p)))
    return path


def load_qp(path) -> QpProblem:
    with open(path) as fh:
        return qp_from_dict(json.load(fh))
