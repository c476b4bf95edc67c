"""Kinematic unicycle model, Euler discretization and Bezier references.

State is ``(px, py, theta)``, input is ``(v, omega)``. The array-level
helpers (``*_array``) are what the planner uses; the dataclass wrappers
carry the documented invariants.

Trajectory arrays keep the heading continuous (unwrapped) so that they
can be used directly as QP decision vectors; ``AgentState`` objects are
always wrapped to (-pi, pi].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NX = 3
NU = 2


def wrap_angle(theta):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def angle_diff(a, b):
    """Wrapped difference ``a - b`` in (-pi, pi]."""
    return wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def lift_angle(theta, near):
    """Return ``theta + 2*pi*k`` closest to ``near``."""
    return near + angle_diff(theta, near)


def _require_finite(name, *values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{name}: non-finite argument {v!r}")


@dataclass(frozen=True)
class AgentState:
    px: float
    py: float
    theta: float

    def __post_init__(self):
        _require_finite("AgentState", self.px, self.py, self.theta)
        object.__setattr__(self, "px", float(self.px))
        object.__setattr__(self, "py", float(self.py))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def from_array(cls, a) -> "AgentState":
        a = np.asarray(a, dtype=float)
        return cls(a[0], a[1], a[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.theta])

    @property
    def position(self) -> np.ndarray:
        return np.array([self.px, self.py])


@dataclass(frozen=True)
class ControlInput:
    v: float
    omega: float

    def __post_init__(self):
        _require_finite("ControlInput", self.v, self.omega)
        object.__setattr__(self, "v", float(self.v))
        object.__setattr__(self, "omega", float(self.omega))

    @classmethod
    def from_array(cls, a) -> "ControlInput":
        a = np.asarray(a, dtype=float)
        return cls(a[0], a[1])

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.omega])


@dataclass
class AgentTrajectory:
    """Predicted states ``x_{t+1..t+N}`` and inputs ``u_{t..t+N-1}``.

    ``states`` has shape (N, 3) and ``inputs`` shape (N, 2). The flat
    decision vector is all states (time-major) followed by all inputs
    (time-major): ``[px1, py1, th1, ..., pxN, pyN, thN, v0, w0, ..., vN-1, wN-1]``.
    """

    states: np.ndarray
    inputs: np.ndarray
    stamp: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, NX)
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(-1, NU)
        if len(self.states) != len(self.inputs):
            raise ValueError(
                f"states ({len(self.states)}) and inputs ({len(self.inputs)}) lengths differ"
            )
        if len(self.states) == 0:
            raise ValueError("empty trajectory")

    @property
    def horizon(self) -> int:
        return len(self.states)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.states.ravel(), self.inputs.ravel()])

    @classmethod
    def unflatten(cls, vec, stamp: int = 0) -> "AgentTrajectory":
        vec = np.asarray(vec, dtype=float)
        if vec.size % (NX + NU):
            raise ValueError(f"vector length {vec.size} is not a multiple of {NX + NU}")
        n = vec.size // (NX + NU)
        return cls(vec[: NX * n].reshape(n, NX), vec[NX * n :].reshape(n, NU), stamp)

    def state(self, k: int) -> AgentState:
        return AgentState.from_array(self.states[k])

    def input(self, k: int) -> ControlInput:
        return ControlInput.from_array(self.inputs[k])

    def shifted(self) -> "AgentTrajectory":
        """Drop the first step and repeat the last one."""
        return AgentTrajectory(
            np.vstack([self.states[1:], self.states[-1:]]),
            np.vstack([self.inputs[1:], self.inputs[-1:]]),
            self.stamp + 1,
        )


@dataclass
class LinearizedDynamics:
    """Per-step affine model ``x_{k+1} = A[k] x_k + B[k] u_k + c[k]``."""

    A: np.ndarray  # (N, 3, 3)
    B: np.ndarray  # (N, 3, 2)
    c: np.ndarray  # (N, 3)


@dataclass
class ReferenceTrajectory:
    samples: np.ndarray  # (N+1, 3), heading continuous along the curve
    control_points: np.ndarray = field(default_factory=lambda: np.zeros((4, 2)))

    def __len__(self):
        return len(self.samples)

    def state(self, k: int) -> AgentState:
        return AgentState.from_array(self.samples[k])


@dataclass(frozen=True)
class TrajectoryLayout:
    """Index map of one agent's flat decision vector inside a larger one."""

    N: int
    offset: int = 0

    @property
    def dim(self) -> int:
        return self.N * (NX + NU)

    @property
    def stop(self) -> int:
        return self.offset + self.dim

    def state_index(self, k: int, c: int) -> int:
        """Index of component ``c`` of predicted state ``x_k``, k = 1..N."""
        if not 1 <= k <= self.N:
            raise IndexError(f"state step {k} outside 1..{self.N}")
        return self.offset + NX * (k - 1) + c

    def input_index(self, k: int, c: int) -> int:
        """Index of component ``c`` of input ``u_k``, k = 0..N-1."""
        if not 0 <= k < self.N:
            raise IndexError(f"input step {k} outside 0..{self.N - 1}")
        return self.offset + NX * self.N + NU * k + c

    def position_indices(self) -> np.ndarray:
        """(N, 2) indices of ``(px, py)`` for x_1..x_N."""
        base = self.offset + NX * np.arange(self.N)
        return np.column_stack([base, base + 1])

    def input_indices(self) -> np.ndarray:
        base = self.offset + NX * self.N + NU * np.arange(self.N)
        return np.column_stack([base, base + 1])

    def shifted(self, offset: int) -> "TrajectoryLayout":
        return TrajectoryLayout(self.N, offset)


# --- array kernels -------------------------------------------------------


def step_array(x, u, Ts: float, wrap: bool = True) -> np.ndarray:
    """Euler step on arrays; works on a single state or a (..., 3) batch."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    th = x[..., 2]
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (NX,)))
    out[..., 0] = x[..., 0] + Ts * u[..., 0] * np.cos(th)
    out[..., 1] = x[..., 1] + Ts * u[..., 0] * np.sin(th)
    out[..., 2] = th + Ts * u[..., 1]
    if wrap:
        out[..., 2] = wrap_angle(out[..., 2])
    return out


def jacobians_array(x, u, Ts: float):
    """Batch Jacobians of the Euler step; ``x`` (..., 3), ``u`` (..., 2)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    th = x[..., 2]
    v = u[..., 0]
    c, s = np.cos(th), np.sin(th)
    lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    A = np.zeros(lead + (NX, NX))
    A[..., 0, 0] = 1.0
    A[..., 1, 1] = 1.0
    A[..., 2, 2] = 1.0
    A[..., 0, 2] = -Ts * v * s
    A[..., 1, 2] = Ts * v * c
    B = np.zeros(lead + (NX, NU))
    B[..., 0, 0] = Ts * c
    B[..., 1, 0] = Ts * s
    B[..., 2, 1] = Ts
    return A, B


def linearize_array(x, u, Ts: float):
    """Affine model around ``(x, u)``; exact at the operating point.

    The residual ``c`` uses the unwrapped heading update, so that chained
    predictions stay continuous in theta; modulo 2*pi it equals the
    wrapped ``step``.
    """
    A, B = jacobians_array(x, u, Ts)
    nxt = step_array(x, u, Ts, wrap=False)
    c = nxt - np.einsum("...ij,...j->...i", A, x) - np.einsum("...ij,...j->...i", B, u)
    return A, B, c


def rollout_array(x0, inputs, Ts: float, wrap: bool = False) -> np.ndarray:
    """States ``x_1..x_N`` from iterating the Euler step over ``inputs``."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, NU)
    out = np.empty((len(inputs), NX))
    x = np.asarray(x0, dtype=float).copy()
    for k, u in enumerate(inputs):
        x = step_array(x, u, Ts, wrap=wrap)
        out[k] = x
    return out


# --- public operations ---------------------------------------------------


def _check_ts(Ts):
    if not (np.isfinite(Ts) and Ts > 0):
        raise ValueError(f"sampling time must be positive and finite, got {Ts}")


def step(x: AgentState, u: ControlInput, Ts: float) -> AgentState:
    """One Euler step of the unicycle, heading wrapped to (-pi, pi]."""
    _check_ts(Ts)
    return AgentState.from_array(step_array(x.as_array(), u.as_array(), Ts))


def linearize(x_bar: AgentState, u_bar: ControlInput, Ts: float):
    """Return ``(A, B, c)`` of the Euler step around ``(x_bar, u_bar)``."""
    _check_ts(Ts)
    return linearize_array(x_bar.as_array(), u_bar.as_array(), Ts)


def linearize_along(x0, states, inputs, Ts: float) -> LinearizedDynamics:
    """Linearize every horizon step of an operating trajectory.

    Step ``k`` is expanded at ``(x_k, u_k)`` where ``x_0`` is the
    measured state and ``x_k`` (k >= 1) are the operating states.
    """
    _check_ts(Ts)
    states = np.asarray(states, dtype=float).reshape(-1, NX)
    pts = np.vstack([np.asarray(x0, dtype=float)[None, :], states[:-1]])
    A, B, c = linearize_array(pts, np.asarray(inputs, dtype=float).reshape(-1, NU), Ts)
    return LinearizedDynamics(A, B, c)


def rollout(x0: AgentState, inputs: Sequence[ControlInput], Ts: float) -> list[AgentState]:
    if len(inputs) == 0:
        raise ValueError("rollout needs at least one input")
    _check_ts(Ts)
    arr = np.array([u.as_array() for u in inputs])
    return [AgentState.from_array(s) for s in rollout_array(x0.as_array(), arr, Ts)]


def bezier_control_points(p0, th0, pg, thg) -> np.ndarray:
    p0 = np.asarray(p0, dtype=float)
    pg = np.asarray(pg, dtype=float)
    d = float(np.linalg.norm(pg - p0))
    h0 = np.array([np.cos(th0), np.sin(th0)])
    hg = np.array([np.cos(thg), np.sin(thg)])
    return np.array([p0, p0 + d / 3.0 * h0, pg - d / 3.0 * hg, pg])


def bezier_eval(ctrl: np.ndarray, s):
    """Cubic Bezier point and derivative at parameters ``s``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))[:, None]
    m = 1.0 - s
    pts = m**3 * ctrl[0] + 3 * m**2 * s * ctrl[1] + 3 * m * s**2 * ctrl[2] + s**3 * ctrl[3]
    der = (3 * m**2 * (ctrl[1] - ctrl[0]) + 6 * m * s * (ctrl[2] - ctrl[1])
           + 3 * s**2 * (ctrl[3] - ctrl[2]))
    return pts, der


def bezier_reference(x0: AgentState, goal: AgentState, N: int, Ts: float,
                     tangent_eps: float = 1e-9) -> ReferenceTrajectory:
    """Cubic Bezier from the current position to the goal over N steps.

    Interior control points sit ``d/3`` along the start and goal
    headings. Headings follow the curve tangent (goal heading where the
    tangent vanishes) and are returned unwrapped, continuous from the
    start heading. ``Ts`` does not change the geometry; the samples are
    the reference at times ``t, t+Ts, ..., t+N*Ts``.
    """
    if N < 1:
        raise ValueError("horizon must be >= 1")
    _check_ts(Ts)
    ctrl = bezier_control_points(x0.position, x0.theta, goal.position, goal.theta)
    s = np.linspace(0.0, 1.0, N + 1)
    pts, der = bezier_eval(ctrl, s)
    speed = np.linalg.norm(der, axis=1)
    heading = np.where(speed > tangent_eps, np.arctan2(der[:, 1], der[:, 0]), goal.theta)
    # continuous heading starting exactly at the current heading
    heading[0] = x0.theta
    heading = np.unwrap(heading)
    samples = np.column_stack([pts, heading])
    samples[0] = x0.as_array()
    samples[-1, :2] = goal.position
    return ReferenceTrajectory(samples, ctrl)


def tracking_rollout(x0, reference: np.ndarray, Ts: float, v_lim=(-np.inf, np.inf),
                     w_lim=(-np.inf, np.inf)):
    """Open-loop inputs that roughly follow ``reference`` and their rollout.

    Used to seed operating points when no previous plan exists.
    """
    reference = np.asarray(reference, dtype=float)
    n = len(reference) - 1
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((n, NX))
    inputs = np.empty((n, NU))
    for k in range(n):
        dp = reference[k + 1, :2] - x[:2]
        heading = np.array([np.cos(x[2]), np.sin(x[2])])
        v = np.clip(float(dp @ heading) / Ts, *v_lim)
        w = np.clip(float(angle_diff(reference[k + 1, 2], x[2])) / Ts, *w_lim)
        inputs[k] = (v, w)
        x = step_array(x, inputs[k], Ts, wrap=False)
        states[k] = x
    return states, inputs
