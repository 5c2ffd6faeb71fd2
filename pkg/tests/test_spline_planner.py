import numpy as np
import pytest

from pegkit.errors import Infeasible, NonPositiveDuration
from pegkit.kinematics import JointLimits, Pose, ToolGeometry, inverse_kinematics
from pegkit.spline_planner import (
    CubicSegment,
    _feasible_mask,
    _peak_vel_acc,
    hermite_segment,
    min_duration,
    optimize_transfer,
)

GEOM = ToolGeometry()
LIMITS = JointLimits()


def single_joint_limits(v_max, a_max):
    return JointLimits(lo=np.full(6, -10.0), hi=np.full(6, 10.0),
                       v_max=np.full(6, v_max), a_max=np.full(6, a_max))


def standard_transfer_waypoints():
    """Pick at the near peg, place at the far peg, 25 mm lift clearance."""
    def vert(x, y, z):
        return inverse_kinematics(Pose(np.eye(3), np.array([x, y, z])), GEOM)
    return np.vstack([vert(0.03, 0.0, -0.150), vert(0.03, 0.0, -0.125),
                      vert(0.09, 0.0, -0.125), vert(0.09, 0.0, -0.150)])


def test_min_duration_velocity_bound_case():
    lim = single_joint_limits(v_max=1.0, a_max=10.0)
    q0, q1, z = np.zeros(6), np.eye(6)[0], np.zeros(6)
    assert min_duration(q0, z, q1, z, lim) == pytest.approx(1.50, abs=1e-12)


def test_min_duration_acceleration_bound_case():
    lim = single_joint_limits(v_max=1.0, a_max=2.0)
    q0, q1, z = np.zeros(6), np.eye(6)[0], np.zeros(6)
    assert min_duration(q0, z, q1, z, lim) == pytest.approx(1.74, abs=1e-12)


def test_unit_segment_coefficients():
    seg = hermite_segment(np.zeros(6), np.zeros(6), np.eye(6)[0], np.zeros(6), 1.0)
    assert seg.a[0] == pytest.approx(-2.0, abs=1e-12)
    assert seg.b[0] == pytest.approx(3.0, abs=1e-12)


def test_hermite_boundary_interpolation():
    rng = np.random.default_rng(11)
    for _ in range(200):
        q0 = rng.uniform(-2, 2, 6)
        q1 = rng.uniform(-2, 2, 6)
        v0 = rng.uniform(-1, 1, 6)
        v1 = rng.uniform(-1, 1, 6)
        t = rng.uniform(0.05, 4.0)
        seg = hermite_segment(q0, v0, q1, v1, t)
        assert np.abs(seg.position(0.0) - q0).max() < 1e-10
        assert np.abs(seg.velocity(0.0) - v0).max() < 1e-10
        assert np.abs(seg.position(t) - q1).max() < 1e-10
        assert np.abs(seg.velocity(t) - v1).max() < 1e-10


def test_non_positive_duration_rejected():
    with pytest.raises(NonPositiveDuration):
        hermite_segment(np.zeros(6), np.zeros(6), np.ones(6), np.zeros(6), 0.0)


def test_peak_formulas_match_dense_sampling():
    rng = np.random.default_rng(12)
    for _ in range(100):
        q0 = rng.uniform(-1, 1, 6)
        q1 = rng.uniform(-1, 1, 6)
        v0 = rng.uniform(-0.5, 0.5, 6)
        v1 = rng.uniform(-0.5, 0.5, 6)
        t = rng.uniform(0.2, 3.0)
        vel, acc = _peak_vel_acc(q0, v0, q1, v1, np.array([t]))
        seg = hermite_segment(q0, v0, q1, v1, t)
        ts = np.linspace(0, t, 4001)
        dense_v = np.abs(seg.velocity(ts)).max(axis=0)
        dense_a = np.abs(seg.acceleration(ts)).max(axis=0)
        assert np.all(vel[0] >= dense_v - 1e-9)
        assert np.all(acc[0] >= dense_a - 1e-9)
        assert np.all(vel[0] <= dense_v + 1e-3)  # extrema, not loose bounds
        assert np.all(acc[0] <= dense_a + 1e-9)


def test_min_duration_minimality():
    rng = np.random.default_rng(13)
    for _ in range(1000):
        q0 = rng.uniform(LIMITS.lo, LIMITS.hi)
        q1 = rng.uniform(LIMITS.lo, LIMITS.hi)
        v0 = rng.uniform(-0.3, 0.3, 6) * LIMITS.v_max
        v1 = rng.uniform(-0.3, 0.3, 6) * LIMITS.v_max
        t = min_duration(q0, v0, q1, v1, LIMITS)
        assert _feasible_mask(q0, v0, q1, v1, np.array([t]), LIMITS)[0]
        if t > 0.0105:
            assert not _feasible_mask(q0, v0, q1, v1, np.array([t - 0.01]),
                                      LIMITS)[0]


def test_min_duration_result_respects_limits_densely():
    rng = np.random.default_rng(14)
    for _ in range(50):
        q0 = rng.uniform(LIMITS.lo, LIMITS.hi)
        q1 = rng.uniform(LIMITS.lo, LIMITS.hi)
        t = min_duration(q0, np.zeros(6), q1, np.zeros(6), LIMITS)
        seg = hermite_segment(q0, np.zeros(6), q1, np.zeros(6), t)
        ts = np.linspace(0, t, 2001)
        assert np.all(np.abs(seg.velocity(ts)) <= LIMITS.v_max * (1 + 1e-6))
        assert np.all(np.abs(seg.acceleration(ts)) <= LIMITS.a_max * (1 + 1e-6))


def test_boundary_velocity_over_limit_is_infeasible():
    v_bad = np.zeros(6)
    v_bad[0] = LIMITS.v_max[0] * 1.5
    with pytest.raises(Infeasible):
        min_duration(np.zeros(6), v_bad, np.ones(6) * 0.1, np.zeros(6), LIMITS)


def test_far_apart_waypoints_hit_ceiling():
    lim = single_joint_limits(v_max=0.05, a_max=10.0)
    with pytest.raises(Infeasible):
        min_duration(np.zeros(6), np.zeros(6), np.eye(6)[0], np.zeros(6), lim)


def test_optimize_transfer_beats_rest_to_rest():
    way = standard_transfer_waypoints()
    traj = optimize_transfer(way, LIMITS, GEOM)
    zero = np.zeros(6)
    rest_total = sum(min_duration(way[i], zero, way[i + 1], zero, LIMITS)
                     for i in range(3))
    assert np.all(traj.junction_speeds > 0.0)
    assert traj.total_duration < rest_total


def test_optimize_transfer_segments_are_continuous():
    way = standard_transfer_waypoints()
    traj = optimize_transfer(way, LIMITS, GEOM)
    for k in range(3):
        seg = traj.segments[k]
        assert np.abs(seg.position(0.0) - way[k]).max() < 1e-10
        assert np.abs(seg.position(seg.duration) - way[k + 1]).max() < 1e-10
    for k in range(2):
        v_end = traj.segments[k].velocity(traj.segments[k].duration)
        v_start = traj.segments[k + 1].velocity(0.0)
        assert np.abs(v_end - v_start).max() < 1e-10


def test_optimize_transfer_deterministic():
    way = standard_transfer_waypoints()
    a = optimize_transfer(way, LIMITS, GEOM)
    b = optimize_transfer(way, LIMITS, GEOM)
    assert np.array_equal(a.junction_speeds, b.junction_speeds)
    assert a.total_duration == b.total_duration


def test_trajectory_sampling_grid():
    way = standard_transfer_waypoints()
    traj = optimize_transfer(way, LIMITS, GEOM)
    ts, qs, vs, accs = traj.sample(0.01)
    assert ts[0] == 0.0
    assert ts[-1] == pytest.approx(traj.total_duration, abs=1e-9)
    assert np.allclose(np.diff(ts), 0.01, atol=1e-9)
    assert np.abs(qs[0] - way[0]).max() < 1e-10
    assert np.abs(qs[-1] - way[3]).max() < 1e-10
    assert np.all(np.abs(vs) <= LIMITS.v_max * (1 + 1e-6))
