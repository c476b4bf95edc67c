"""Dense/sparse convex QP model and operator-splitting solver."""
from .dump import dump_qp, load_qp, qp_from_dict, qp_to_dict
from .oracle import enumerate_active_sets, random_qp
from .problem import (MAX_ITER, PRIMAL_INFEASIBLE, SOLVED, QpProblem, QpSettings, QpSolution,
                      kkt_check, primal_residual)
from .projection import ProjectionResult, SlackProjection
from .solver import QpWorkspace, solve, split_multipliers, warmup

__all__ = [
    "QpProblem", "QpSettings", "QpSolution", "QpWorkspace", "solve", "kkt_check",
    "primal_residual", "split_multipliers", "enumerate_active_sets", "random_qp", "dump_qp",
    "load_qp", "qp_to_dict", "qp_from_dict", "SlackProjection", "ProjectionResult", "warmup",
    "SOLVED", "MAX_ITER", "PRIMAL_INFEASIBLE",
]
