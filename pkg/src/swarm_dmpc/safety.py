"""Discrete-time control barrier functions and their affine linearization.

Both barrier families are signed distances minus a threshold:

    h_obs(x)     = ||p(x) - o|| - d_th
    h_pair(x, y) = ||p(x) - p(y)|| - d_th

The decrease condition ``h_{k+1} - h_k >= -alpha * h_k`` is written as
``h_{k+1} >= (1 - alpha) * h_k`` and every ``h`` at a predicted step is
replaced by its first-order expansion around the operating trajectory.
At ``k = 0`` the measured state is known, so that term is a constant.

Rows are returned in matrix form ``G @ zeta >= b`` over a flat decision
vector; :func:`cbf_rows_obstacle` / :func:`cbf_rows_interagent` give the
same thing as a list of sparse :class:`AffineConstraintRow`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import AgentState, AgentTrajectory, TrajectoryLayout

GRAD_EPS = 1e-6
COEFF_DROP = 1e-12
DEFAULT_DIRECTION = np.array([1.0, 0.0])


@dataclass(frozen=True)
class Obstacle:
    center: tuple

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        if c.shape != (2,) or not np.all(np.isfinite(c)):
            raise ValueError(f"obstacle center must be a finite 2-vector, got {self.center!r}")
        object.__setattr__(self, "center", (float(c[0]), float(c[1])))

    @property
    def position(self) -> np.ndarray:
        return np.array(self.center)


@dataclass(frozen=True)
class SafetyParams:
    d_th: float = 0.5
    alpha_slope: float = 0.3

    def __post_init__(self):
        if not self.d_th > 0:
            raise ValueError(f"d_th must be positive, got {self.d_th}")
        if not 0 < self.alpha_slope < 1:
            raise ValueError(f"alpha_slope must lie in (0, 1), got {self.alpha_slope}")

    @property
    def decay(self) -> float:
        return 1.0 - self.alpha_slope


@dataclass
class AffineConstraintRow:
    """``coeffs . zeta[indices] (sense) rhs`` with sense ``">="`` or ``"="``."""

    indices: np.ndarray
    coeffs: np.ndarray
    rhs: float
    sense: str = ">="
    dim: int | None = None
    degenerate: bool = False

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.sense not in (">=", "="):
            raise ValueError(f"unknown sense {self.sense!r}")
        if self.dim is not None and self.indices.size and (
            self.indices.min() < 0 or self.indices.max() >= self.dim
        ):
            raise ValueError("row index outside decision vector")

    def value(self, zeta) -> float:
        """Row left-hand side minus rhs (>= 0 means satisfied)."""
        return float(self.coeffs @ np.asarray(zeta)[self.indices]) - self.rhs

    def dense(self, dim: int) -> np.ndarray:
        row = np.zeros(dim)
        np.add.at(row, self.indices, self.coeffs)
        return row


@dataclass
class CbfBlock:
    """Stacked rows ``G @ zeta >= b`` plus diagnostics at the operating point."""

    G: np.ndarray
    b: np.ndarray
    h_op: np.ndarray  # barrier values at steps 0..N of the operating point
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    directions: np.ndarray | None = None  # unit gradients used, (N+1, 2)

    @property
    def n_rows(self) -> int:
        return len(self.b)

    def residual(self, zeta) -> np.ndarray:
        return self.G @ zeta - self.b

    def psi(self, zeta) -> np.ndarray:
        """Coupling function in ``psi(zeta) <= 0`` form."""
        return self.b - self.G @ zeta

    def rows(self, drop: float = COEFF_DROP) -> list[AffineConstraintRow]:
        out = []
        dim = self.G.shape[1]
        for r in range(self.n_rows):
            nz = np.flatnonzero(np.abs(self.G[r]) > drop)
            flag = bool(self.degenerate[r]) if self.degenerate.size else False
            out.append(AffineConstraintRow(nz, self.G[r, nz], float(self.b[r]), ">=", dim, flag))
        return out

    def select(self, keep) -> "CbfBlock":
        keep = np.asarray(keep)
        deg = self.degenerate[keep] if self.degenerate.size else self.degenerate
        return CbfBlock(self.G[keep], self.b[keep], self.h_op, deg, self.directions)


def h_obstacle(x: AgentState, o: Obstacle, p: SafetyParams) -> float:
    return float(np.hypot(x.px - o.center[0], x.py - o.center[1])) - p.d_th


def h_interagent(xi: AgentState, xj: AgentState, p: SafetyParams) -> float:
    return float(np.hypot(xi.px - xj.px, xi.py - xj.py)) - p.d_th


def h_obstacle_array(positions, center, d_th: float) -> np.ndarray:
    positions = np.asarray(positions, dtype=float)
    return np.linalg.norm(positions - np.asarray(center, dtype=float), axis=-1) - d_th


def unit_directions(delta: np.ndarray, fallback=None):
    """Row-wise unit vectors; rows shorter than ``GRAD_EPS`` get a fallback.

    ``fallback`` may be a single 2-vector or one per row (e.g. last
    cycle's directions). Returns ``(units, degenerate_mask)``.
    """
    delta = np.asarray(delta, dtype=float)
    norm = np.linalg.norm(delta, axis=1)
    bad = norm < GRAD_EPS
    units = np.empty_like(delta)
    units[~bad] = delta[~bad] / norm[~bad, None]
    if bad.any():
        fb = DEFAULT_DIRECTION if fallback is None else np.asarray(fallback, dtype=float)
        fb = np.broadcast_to(fb, delta.shape)[bad]
        fb_norm = np.linalg.norm(fb, axis=1)
        fb = np.where(fb_norm[:, None] > GRAD_EPS, fb / np.maximum(fb_norm, GRAD_EPS)[:, None],
                      DEFAULT_DIRECTION)
        units[bad] = fb
    return units, bad


def guard_directions(units, h_bar, delta, d_th: float):
    """Freeze the expansion direction once the operating trajectory turns unsafe.

    For any unit ``e``, ``e . delta - d_th`` is a lower bound of
    ``|delta| - d_th``, so rows built on a frozen direction stay
    conservative. From the first step ``k >= 1`` with ``h_bar[k] < 0`` on,
    the direction of step ``k - 1`` is reused and ``h_bar`` becomes the
    matching support value. Returns ``(units, h_bar, guarded_mask)``.
    """
    bad = np.flatnonzero(h_bar[1:] < 0.0)
    guarded = np.zeros(len(h_bar), dtype=bool)
    if bad.size == 0:
        return units, h_bar, guarded
    k = int(bad[0]) + 1
    units = units.copy()
    h_bar = h_bar.copy()
    units[k:] = units[k - 1]
    h_bar[k:] = np.einsum("ij,ij->i", units[k:], delta[k:]) - d_th
    guarded[k:] = True
    return units, h_bar, guarded


def _decrease_rows(units, h_bar, p_bar_blocks, layouts, signs, decay, dim):
    """Assemble ``hhat_{k+1} - decay * hhat_k >= 0`` for k = 0..N-1.

    ``p_bar_blocks[a]`` holds operating positions (N+1, 2) of the a-th
    agent in the row (index 0 is the measured position), ``signs[a]`` is
    +1 / -1 for the gradient direction on that agent's block.
    """
    n = len(h_bar) - 1
    G = np.zeros((n, dim))
    b = np.empty(n)
    # constant part of hhat_j: h_bar_j - g_j . p_bar_j (summed over agents)
    const = h_bar.copy()
    for p_bar, sign in zip(p_bar_blocks, signs):
        const -= sign * np.einsum("ij,ij->i", units, p_bar)
    const[0] = h_bar[0]  # measured step is not a decision variable
    rows = np.arange(n)
    for lay, sign in zip(layouts, signs):
        pos = lay.position_indices()  # x_1..x_N
        g = sign * units
        # + g_{k+1} on p_{k+1}
        G[rows[:, None], pos] += g[1:]
        # - decay * g_k on p_k for k >= 1
        G[rows[1:, None], pos[:-1]] -= decay * g[1:-1]
    b[:] = -const[1:] + decay * const[:-1]
    G[np.abs(G) < COEFF_DROP] = 0.0
    return G, b


def obstacle_block(x0, op_states, center, p: SafetyParams, layout: TrajectoryLayout,
                   dim: int | None = None, fallback=None, guard: bool = True) -> CbfBlock:
    """Linearized obstacle decrease rows for one obstacle over the horizon.

    With ``guard`` the expansion direction is frozen after the operating
    trajectory enters the unsafe set (see :func:`guard_directions`).
    """
    op_states = np.asarray(op_states, dtype=float).reshape(-1, 3)
    if len(op_states) != layout.N:
        raise ValueError(f"operating trajectory has {len(op_states)} steps, "
                         f"layout expects {layout.N}")
    p_bar = np.vstack([np.asarray(x0, dtype=float)[:2], op_states[:, :2]])
    delta = p_bar - np.asarray(center, dtype=float)
    units, bad = unit_directions(delta, fallback)
    h_bar = np.linalg.norm(delta, axis=1) - p.d_th
    if guard:
        units, h_bar, _ = guard_directions(units, h_bar, delta, p.d_th)
    dim = layout.stop if dim is None else dim
    G, b = _decrease_rows(units, h_bar, [p_bar], [layout], [1.0], p.decay, dim)
    deg = bad[1:] | bad[:-1]
    return CbfBlock(G, b, h_bar, deg, units)


def interagent_block(x0_i, op_i, x0_j, op_j, p: SafetyParams, layout_i: TrajectoryLayout,
                     layout_j: TrajectoryLayout, dim: int | None = None,
                     fallback=None, guard: bool = True) -> CbfBlock:
    """Linearized pairwise decrease rows over the joint ``(xi_i, xi_j)`` layout."""
    op_i = np.asarray(op_i, dtype=float).reshape(-1, 3)
    op_j = np.asarray(op_j, dtype=float).reshape(-1, 3)
    if len(op_i) != len(op_j):
        raise ValueError("operating trajectories must share the horizon")
    pi = np.vstack([np.asarray(x0_i, dtype=float)[:2], op_i[:, :2]])
    pj = np.vstack([np.asarray(x0_j, dtype=float)[:2], op_j[:, :2]])
    units, bad = unit_directions(pi - pj, fallback)
    h_bar = np.linalg.norm(pi - pj, axis=1) - p.d_th
    if guard:
        units, h_bar, _ = guard_directions(units, h_bar, pi - pj, p.d_th)
    dim = max(layout_i.stop, layout_j.stop) if dim is None else dim
    G, b = _decrease_rows(units, h_bar, [pi, pj], [layout_i, layout_j], [1.0, -1.0], p.decay, dim)
    deg = bad[1:] | bad[:-1]
    return CbfBlock(G, b, h_bar, deg, units)


def _split_op(op: AgentTrajectory | np.ndarray, x0):
    if isinstance(op, AgentTrajectory):
        states = op.states
    else:
        states = np.asarray(op, dtype=float).reshape(-1, 3)
    return np.asarray(x0, dtype=float) if x0 is not None else states[0], states


def cbf_rows_obstacle(op: AgentTrajectory, obstacles: Sequence[Obstacle], p: SafetyParams,
                      layout: TrajectoryLayout, x0=None) -> list[AffineConstraintRow]:
    """One row per (step, obstacle), ordered step-major within each obstacle.

    ``x0`` is the measured state at step 0; when omitted the first
    operating state is used (a static operating point).
    """
    x0, states = _split_op(op, x0)
    rows = []
    for o in obstacles:
        rows.extend(obstacle_block(x0, states, o.position, p, layout).rows())
    return rows


def cbf_rows_interagent(op_i: AgentTrajectory, op_j: AgentTrajectory, p: SafetyParams,
                        layout_i: TrajectoryLayout, layout_j: TrajectoryLayout,
                        x0_i=None, x0_j=None) -> list[AffineConstraintRow]:
    x0_i, si = _split_op(op_i, x0_i)
    x0_j, sj = _split_op(op_j, x0_j)
    return interagent_block(x0_i, si, x0_j, sj, p, layout_i, layout_j).rows()
