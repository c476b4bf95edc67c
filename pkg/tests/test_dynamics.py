import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarm_dmpc.dynamics import (AgentState, AgentTrajectory, ControlInput, TrajectoryLayout,
                                 angle_diff, bezier_eval, bezier_reference, lift_angle,
                                 linearize, linearize_along, rollout, step, step_array,
                                 wrap_angle)

Ts = 0.1


def test_step_examples():
    assert np.allclose(step(AgentState(0, 0, 0), ControlInput(1, 0), Ts).as_array(), [0.1, 0, 0])
    assert np.allclose(step(AgentState(0, 0, 0), ControlInput(0, 1), Ts).as_array(), [0, 0, 0.1])
    out = step(AgentState(1, 2, np.pi / 2), ControlInput(1, 0), Ts).as_array()
    assert np.allclose(out, [1, 2.1, np.pi / 2], atol=1e-15)


def test_step_wraps_heading():
    out = step(AgentState(0, 0, np.pi - 0.01), ControlInput(0, 10.0), Ts)
    assert -np.pi < out.theta <= np.pi
    assert np.isclose(out.theta, np.pi - 0.01 + 1.0 - 2 * np.pi)


def test_wrap_angle_range():
    th = np.linspace(-20, 20, 1001)
    w = wrap_angle(th)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    assert np.allclose(np.cos(w), np.cos(th)) and np.allclose(np.sin(w), np.sin(th))
    assert wrap_angle(-np.pi) == np.pi
    assert np.isclose(angle_diff(np.pi - 0.1, -np.pi + 0.1), -0.2)
    assert np.isclose(lift_angle(-np.pi + 0.1, 3.0), np.pi + 0.1)


def test_linearize_examples():
    A, B, _ = linearize(AgentState(0, 0, 0), ControlInput(1, 0), Ts)
    assert np.allclose(A, [[1, 0, 0], [0, 1, 0.1], [0, 0, 1]])
    assert np.allclose(B, [[0.1, 0], [0, 0], [0, 0.1]])
    A, B, _ = linearize(AgentState(0, 0, np.pi / 2), ControlInput(1, 0), Ts)
    assert np.allclose(A, [[1, 0, -0.1], [0, 1, 0], [0, 0, 1]])
    assert np.allclose(B, [[0, 0], [0.1, 0], [0, 0.1]])


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-np.pi, np.pi),
       st.floats(-2, 2), st.floats(-3, 3))
def test_affine_model_exact_at_operating_point(px, py, th, v, w):
    x, u = AgentState(px, py, th), ControlInput(v, w)
    A, B, c = linearize(x, u, Ts)
    pred = A @ x.as_array() + B @ u.as_array() + c
    assert np.abs(pred - step_array(x.as_array(), u.as_array(), Ts, wrap=False)).max() <= 1e-12


def test_rollout_examples():
    out = rollout(AgentState(0, 0, 0), [ControlInput(1, 0)] * 3, Ts)
    assert np.allclose([s.as_array() for s in out], [[0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0]])
    still = rollout(AgentState(0, 0, 0), [ControlInput(0, 0)] * 5, Ts)
    assert len(still) == 5 and all(s == AgentState(0, 0, 0) for s in still)
    with pytest.raises(ValueError):
        rollout(AgentState(0, 0, 0), [], Ts)


def test_rollout_is_nested_steps(rng):
    x = AgentState(0.3, -0.2, 0.4)
    us = [ControlInput(*rng.uniform(-1, 1, 2)) for _ in range(6)]
    out = rollout(x, us, Ts)
    cur = x
    for k, u in enumerate(us):
        cur = step(cur, u, Ts)
        assert np.allclose(out[k].as_array()[:2], cur.as_array()[:2])
        assert np.isclose(angle_diff(out[k].theta, cur.theta), 0.0)


def test_linearize_along_uses_measured_state_first(rng):
    x0 = np.array([0.0, 0.0, 0.3])
    states = rng.normal(size=(4, 3))
    inputs = rng.normal(size=(4, 2))
    dyn = linearize_along(x0, states, inputs, Ts)
    A0, _, _ = linearize(AgentState(*x0), ControlInput(*inputs[0]), Ts)
    A2, _, _ = linearize(AgentState(*states[1]), ControlInput(*inputs[2]), Ts)
    assert np.allclose(dyn.A[0], A0) and np.allclose(dyn.A[2], A2)


def test_non_finite_and_bad_ts_rejected():
    with pytest.raises(ValueError):
        AgentState(np.nan, 0, 0)
    with pytest.raises(ValueError):
        ControlInput(np.inf, 0)
    with pytest.raises(ValueError):
        step(AgentState(0, 0, 0), ControlInput(0, 0), 0.0)


def test_trajectory_flatten_roundtrip_and_shift(rng):
    tr = AgentTrajectory(rng.normal(size=(5, 3)), rng.normal(size=(5, 2)))
    vec = tr.flatten()
    assert vec.shape == (25,)
    back = AgentTrajectory.unflatten(vec)
    assert np.array_equal(back.states, tr.states) and np.array_equal(back.inputs, tr.inputs)
    sh = tr.shifted()
    assert np.array_equal(sh.states[:-1], tr.states[1:])
    assert np.array_equal(sh.states[-1], tr.states[-1])
    with pytest.raises(ValueError):
        AgentTrajectory.unflatten(np.zeros(7))


def test_layout_indices_match_flat_vector(rng):
    tr = AgentTrajectory(rng.normal(size=(4, 3)), rng.normal(size=(4, 2)))
    vec = tr.flatten()
    lay = TrajectoryLayout(4)
    assert vec[lay.state_index(3, 1)] == tr.states[2, 1]
    assert vec[lay.input_index(0, 1)] == tr.inputs[0, 1]
    assert np.array_equal(vec[lay.position_indices()], tr.states[:, :2])
    assert lay.shifted(10).state_index(1, 0) == 10
    with pytest.raises(IndexError):
        lay.state_index(0, 0)


def test_bezier_straight_line():
    ref = bezier_reference(AgentState(0, 0, 0), AgentState(1, 0, 0), 20, Ts).samples
    assert ref.shape == (21, 3)
    assert np.allclose(ref[:, 1], 0.0)
    assert np.all(np.diff(ref[:, 0]) >= -1e-15)
    assert np.array_equal(ref[0], [0, 0, 0]) and np.array_equal(ref[-1, :2], [1, 0])


def test_bezier_degenerate_curve():
    ref = bezier_reference(AgentState(1, 2, 0.5), AgentState(1, 2, 0.5), 10, Ts).samples
    assert np.allclose(ref, [1, 2, 0.5])


def test_bezier_end_tangents():
    ref = bezier_reference(AgentState(0, 0, 0), AgentState(1, 1, np.pi / 2), 10, Ts)
    _, der = bezier_eval(ref.control_points, [0.0, 1.0])
    t0 = der[0] / np.linalg.norm(der[0])
    t1 = der[1] / np.linalg.norm(der[1])
    assert np.abs(t0 - [1, 0]).max() <= 1e-9
    assert np.abs(t1 - [0, 1]).max() <= 1e-9
