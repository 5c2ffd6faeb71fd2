"""Tests for the jerk-minimizing QP refinement of spline segments."""

import numpy as np
import pytest

from pegkit.errors import NonDivisibleInterval, SolverFailure
from pegkit.kinematics import (
    JointLimits,
    Pose,
    ToolGeometry,
    forward_kinematics,
    inverse_kinematics,
)
from pegkit.spline_planner import Channel, hermite_segment, min_duration, optimize_transfer
from pegkit.sqp_refiner import (
    BoundaryConditions,
    DiscreteTrajectory,
    audit_trajectory,
    interpolate_to_controller,
    jerk_objective,
    refine_segment,
    refine_transfer,
    sample_segment,
    shorten_time,
)

LIMITS = JointLimits()
GEOM = ToolGeometry()
T = 0.05
ZERO = np.zeros(6)


def rest_bc(q0, q1):
    return BoundaryConditions(q_start=q0, q_end=q1, v_start=ZERO, v_end=ZERO)


def rest_segment(q0, q1, duration=None):
    if duration is None:
        duration = min_duration(q0, ZERO, q1, ZERO, LIMITS)
    return hermite_segment(q0, ZERO, q1, ZERO, duration)


def tip_joints(p_xyz):
    """Joint vector whose tool tip sits at the given base-frame point."""
    return inverse_kinematics(Pose(np.eye(3), np.asarray(p_xyz)), GEOM)


def equality_qp_oracle(q0, q1, horizon):
    """Dense KKT solve of the rest-to-rest jerk QP with no active boxes.

    Positions and velocities are eliminated through the dynamics, leaving
    the accelerations constrained only by the two terminal equalities; the
    unique minimizer then solves a linear KKT system.
    """
    H = horizon
    n = 6 * H
    diff = np.zeros((6 * (H - 1), n))
    for t in range(1, H):
        for j in range(6):
            row = 6 * (t - 1) + j
            diff[row, 6 * (t - 1) + j] = -1.0 / T
            diff[row, 6 * t + j] = 1.0 / T
    hessian = 2.0 * diff.T @ diff

    # v_H = T * sum_t a_t ;  q_H - q_0 = sum_t T^2 (H - t - 1/2) a_t
    s_v = np.zeros((6, n))
    s_q = np.zeros((6, n))
    for t in range(H):
        for j in range(6):
            s_v[j, 6 * t + j] = T
            s_q[j, 6 * t + j] = T * T * (H - t - 0.5)
    constraints = np.vstack([s_q, s_v])
    rhs = np.concatenate([q1 - q0, np.zeros(6)])

    kkt = np.block([
        [hessian, constraints.T],
        [constraints, np.zeros((12, 12))],
    ])
    sol = np.linalg.solve(kkt, np.concatenate([np.zeros(n), rhs]))
    return sol[:n].reshape(H, 6)


def test_zero_motion_stays_at_rest():
    q0 = np.array([0.1, -0.2, 0.12, 0.3, -0.4, 0.5])
    seg = rest_segment(q0, q0, duration=0.5)
    warm = sample_segment(seg, 10, T)
    traj, stats = refine_segment(warm, rest_bc(q0, q0), LIMITS)
    assert np.allclose(traj.q, q0, atol=1e-9)
    assert np.allclose(traj.v, 0.0, atol=1e-9)
    assert stats.objective <= 1e-12
    assert audit_trajectory(traj, rest_bc(q0, q0), LIMITS).ok


def test_matches_dense_kkt_oracle_when_no_box_is_active():
    q0 = np.array([0.10, -0.05, 0.140, 0.20, -0.10, 0.15])
    q1 = q0 + np.array([0.010, -0.008, 0.004, 0.012, 0.006, -0.010])
    horizon = 5
    seg = rest_segment(q0, q1, duration=horizon * T)
    warm = sample_segment(seg, horizon, T)
    traj, stats = refine_segment(warm, rest_bc(q0, q1), LIMITS)
    oracle_a = equality_qp_oracle(q0, q1, horizon)

    scale = max(1.0, float(np.max(np.abs(oracle_a))))
    assert np.max(np.abs(traj.a[:horizon] - oracle_a)) / scale < 1e-6
    oracle_obj = float(np.sum((np.diff(oracle_a, axis=0) / T) ** 2))
    assert abs(stats.objective - oracle_obj) <= 1e-6 * max(1.0, oracle_obj)


def test_refined_never_slower_and_usually_faster():
    rng = np.random.default_rng(11)
    lo = LIMITS.lo + 0.2 * (LIMITS.hi - LIMITS.lo)
    hi = LIMITS.hi - 0.2 * (LIMITS.hi - LIMITS.lo)
    shorter = 0
    for _ in range(5):
        q0, q1 = rng.uniform(lo, hi, size=(2, 6))
        seg = rest_segment(q0, q1)
        traj, stats = shorten_time(seg, rest_bc(q0, q1), LIMITS)
        assert traj.duration <= seg.duration + 1e-9
        assert audit_trajectory(traj, rest_bc(q0, q1), LIMITS).ok
        shorter += traj.duration < seg.duration - 1e-12
    assert shorter >= 4


def test_shorten_reports_smallest_probed_feasible_horizon():
    q0 = tip_joints([0.02, 0.01, -0.070])
    q1 = tip_joints([0.02, 0.01, -0.050])
    seg = rest_segment(q0, q1)
    traj, stats = shorten_time(seg, rest_bc(q0, q1), LIMITS)
    first_h = int(np.ceil(seg.duration / T - 1e-9))
    assert 1 <= stats.horizon <= first_h
    assert traj.horizon == stats.horizon
    assert traj.duration == pytest.approx(stats.horizon * T)


def test_channel_keeps_tip_within_tolerance_plus_slack():
    p_xy = np.array([0.02, 0.01])
    q0 = tip_joints([p_xy[0], p_xy[1], -0.070])
    q1 = tip_joints([p_xy[0], p_xy[1], -0.050])
    seg = rest_segment(q0, q1)
    channel = Channel(p=p_xy)
    bc = rest_bc(q0, q1)
    traj, stats = shorten_time(seg, bc, LIMITS, channel)
    assert traj.duration < seg.duration - 1e-12

    worst = 0.0
    for row in traj.q:
        tip = forward_kinematics(row, GEOM).t[:2]
        worst = max(worst, float(np.max(np.abs(tip - p_xy))))
    assert worst <= channel.tolerance + stats.max_slack + 1e-6
    report = audit_trajectory(traj, bc, LIMITS, channel,
                              max_slack=stats.max_slack)
    assert report.ok


def test_segment_shorter_than_one_interval_raises():
    q0 = np.zeros(6)
    q0[2] = 0.1
    q1 = q0 + 0.001
    seg = rest_segment(q0, q1, duration=0.049)
    with pytest.raises(SolverFailure):
        shorten_time(seg, rest_bc(q0, q1), LIMITS)


def trial_transfer():
    pick = np.array([0.02, 0.012, -0.070])
    place = np.array([0.045, -0.012, -0.070])
    waypoints = np.array([
        tip_joints(pick),
        tip_joints([pick[0], pick[1], -0.050]),
        tip_joints([place[0], place[1], -0.050]),
        tip_joints(place),
    ])
    transfer = optimize_transfer(waypoints, LIMITS, GEOM)
    channels = (Channel(p=pick[:2]), None, Channel(p=place[:2]))
    return transfer, channels


def test_transfer_chains_exactly_and_shortens():
    transfer, channels = trial_transfer()
    result = refine_transfer(transfer, LIMITS, channels)
    assert not result.fell_back
    assert result.total_duration <= transfer.total_duration + 1e-9
    assert result.total_duration < transfer.total_duration - 1e-12
    assert result.total_duration == pytest.approx(
        sum(t.duration for t in result.segments))

    first, middle, last = result.segments
    assert np.array_equal(first.q[0], transfer.waypoints[0])
    assert np.array_equal(last.q[-1], transfer.waypoints[3])
    assert np.allclose(first.v[0], 0.0)
    assert np.allclose(last.v[-1], 0.0)
    for left, right in ((first, middle), (middle, last)):
        assert np.max(np.abs(left.q[-1] - right.q[0])) <= 1e-12
        assert np.max(np.abs(left.v[-1] - right.v[0])) <= 1e-12


def test_transfer_segments_all_pass_audit():
    transfer, channels = trial_transfer()
    result = refine_transfer(transfer, LIMITS, channels)
    assert not result.fell_back
    v_in = ZERO
    for i, (traj, stats) in enumerate(zip(result.segments, result.stats)):
        v_out = ZERO if i == 2 else traj.v[-1]
        bc = BoundaryConditions(
            q_start=transfer.waypoints[i], q_end=transfer.waypoints[i + 1],
            v_start=v_in, v_end=v_out)
        report = audit_trajectory(traj, bc, LIMITS, channels[i],
                                  max_slack=stats.max_slack)
        assert report.ok, f"segment {i}: {report}"
        v_in = traj.v[-1]


def test_transfer_falls_back_when_solver_budget_exhausted():
    transfer, channels = trial_transfer()
    result = refine_transfer(transfer, LIMITS, channels, budget=1)
    assert result.fell_back
    assert result.segments is None
    assert result.stats is None
    assert result.total_duration == pytest.approx(transfer.total_duration)


def test_refinement_is_deterministic():
    transfer, channels = trial_transfer()
    first = refine_transfer(transfer, LIMITS, channels)
    second = refine_transfer(transfer, LIMITS, channels)
    for a, b in zip(first.segments, second.segments):
        assert a.q.tobytes() == b.q.tobytes()
        assert a.v.tobytes() == b.v.tobytes()
        assert a.a.tobytes() == b.a.tobytes()


def test_free_end_velocity_stays_within_limits():
    q0 = tip_joints([0.02, 0.012, -0.050])
    q1 = tip_joints([0.045, -0.012, -0.050])
    seg = rest_segment(q0, q1)
    bc = BoundaryConditions(q_start=q0, q_end=q1, v_start=ZERO, v_end=None)
    traj, _ = shorten_time(seg, bc, LIMITS)
    assert np.all(np.abs(traj.v[-1]) <= LIMITS.v_max + 1e-9)


def test_sample_segment_carries_boundary_states():
    q0 = np.array([0.1, -0.1, 0.12, 0.4, -0.3, 0.2])
    q1 = q0 + 0.05
    seg = rest_segment(q0, q1, duration=0.8)
    warm = sample_segment(seg, 12, T)
    assert np.allclose(warm.q[0], q0, atol=1e-12)
    assert np.allclose(warm.q[-1], q1, atol=1e-12)
    assert np.allclose(warm.v[0], 0.0, atol=1e-12)
    assert np.allclose(warm.v[-1], 0.0, atol=1e-12)
    assert warm.duration == pytest.approx(12 * T)


def exact_trajectory():
    """Hand-built discrete trajectory satisfying the dynamics to round-off."""
    H = 6
    rng = np.random.default_rng(3)
    a = rng.uniform(-0.5, 0.5, size=(H, 6))
    q = np.zeros((H + 1, 6))
    v = np.zeros((H + 1, 6))
    q[0] = rng.uniform(-0.3, 0.3, size=6)
    for t in range(H):
        q[t + 1] = q[t] + v[t] * T + 0.5 * a[t] * T * T
        v[t + 1] = v[t] + a[t] * T
    return DiscreteTrajectory(T=T, q=q, v=v, a=np.vstack([a, a[-1]]))


def test_interpolation_identity_when_period_equals_interval():
    traj = exact_trajectory()
    q, v, a = interpolate_to_controller(traj, period=T)
    assert np.array_equal(q, traj.q)
    assert np.array_equal(v, traj.v)
    assert np.array_equal(a, traj.a)


def test_interpolation_substeps_are_exact():
    traj = exact_trajectory()
    q, v, a = interpolate_to_controller(traj, period=0.01)
    k = 5
    assert q.shape == (traj.horizon * k + 1, 6)
    # shared ticks reproduce the coarse rows exactly
    assert np.max(np.abs(q[::k] - traj.q)) <= 1e-15
    assert np.max(np.abs(v[::k] - traj.v)) <= 1e-12
    # every dense step obeys the constant-acceleration dynamics
    dq = q[1:] - q[:-1] - v[:-1] * 0.01 - 0.5 * a[:-1] * 0.01**2
    dv = v[1:] - v[:-1] - a[:-1] * 0.01
    assert np.max(np.abs(dq)) <= 1e-12
    assert np.max(np.abs(dv)) <= 1e-12
    # displacement quadrature across each coarse interval
    for t in range(traj.horizon):
        step = traj.v[t] * T + 0.5 * traj.a[t] * T * T
        assert np.max(np.abs(q[(t + 1) * k] - q[t * k] - step)) <= 1e-9


def test_interpolation_rejects_nondivisible_period():
    traj = exact_trajectory()
    with pytest.raises(NonDivisibleInterval):
        interpolate_to_controller(traj, period=0.02)
    with pytest.raises(NonDivisibleInterval):
        interpolate_to_controller(traj, period=0.1)


def test_audit_flags_injected_violations():
    traj = exact_trajectory()
    bc = BoundaryConditions(q_start=traj.q[0], q_end=traj.q[-1],
                            v_start=traj.v[0], v_end=traj.v[-1])
    assert audit_trajectory(traj, bc, LIMITS).ok

    bad_a = traj.a.copy()
    bad_a[2, 4] = LIMITS.a_max[4] + 0.1
    broken = DiscreteTrajectory(T=T, q=traj.q, v=traj.v, a=bad_a)
    report = audit_trajectory(broken, bc, LIMITS)
    assert not report.ok
    assert report.limit_violation > 0.05

    bad_q = traj.q.copy()
    bad_q[3] += 1e-4
    broken = DiscreteTrajectory(T=T, q=bad_q, v=traj.v, a=traj.a)
    report = audit_trajectory(broken, bc, LIMITS)
    assert not report.ok
    assert report.dynamics_residual > 1e-5
