"""Time-minimized cubic spline trajectories through transfer waypoints.

Each trajectory segment is a per-joint cubic ``f(t) = a t^3 + b t^2 + c t + d``
fixed by boundary positions/velocities and a duration.  Durations are chosen
as the smallest multiple of a 10 ms grid for which every joint respects its
velocity and acceleration limits (checked at the analytic extrema, not on a
sample grid).

A pick-place transfer visits four waypoints: grasp, lifted, above the target,
lowered.  The two junction velocities are constrained to the lifting/lowering
directions in the workspace; their magnitudes (lambda) are chosen by gradient
descent on the total duration, evaluated on a continuous (un-gridded)
duration relaxation so the objective has usable slopes.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import Infeasible, NonPositiveDuration
from .kinematics import ToolGeometry, solve_joint_velocity

DURATION_GRID = 0.01  # s; also the controller period
SEGMENT_CEILING = 10.0  # s; durations beyond this are treated as infeasible
_FEAS_EPS = 1e-9  # slack for limit comparisons at analytic extrema


@dataclass(frozen=True)
class CubicSegment:
    """One cubic segment over ``t in [0, duration]``; coefficient arrays are (6,)."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    duration: float

    def position(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        return ((self.a * t + self.b) * t + self.c) * t + self.d

    def velocity(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        return (3.0 * self.a * t + 2.0 * self.b) * t + self.c

    def acceleration(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        return 6.0 * self.a * t + 2.0 * self.b


@dataclass(frozen=True)
class Channel:
    """Vertical corridor above a peg the carried block must stay inside.

    ``p`` is the peg-axis (x, y) in the arm frame; the corridor's lateral
    half-width is ``tolerance`` (m).
    """

    p: np.ndarray
    tolerance: float = 5e-4

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(2)
        object.__setattr__(self, "p", p)
        if not self.tolerance > 0.0:
            raise ValueError("channel tolerance must be positive")


def hermite_segment(q_start, v_start, q_end, v_end, duration):
    """Cubic interpolant matching both endpoint positions and velocities."""
    if duration <= 0.0:
        raise NonPositiveDuration(f"duration must be > 0, got {duration}")
    q_start = np.asarray(q_start, dtype=float)
    v_start = np.asarray(v_start, dtype=float)
    q_end = np.asarray(q_end, dtype=float)
    v_end = np.asarray(v_end, dtype=float)
    t = float(duration)
    a = (v_end + v_start) / t ** 2 + 2.0 * (q_start - q_end) / t ** 3
    b = 0.5 * (v_end - v_start) / t - 1.5 * a * t
    return CubicSegment(a, b, c=v_start.copy(), d=q_start.copy(), duration=t)


def _peak_vel_acc(q_start, v_start, q_end, v_end, durations):
    """Per-joint worst-case |velocity| and |acceleration| of the cubic.

    ``durations`` is a (k,) array; returns two (k, 6) arrays.  The velocity
    extremum sits where the acceleration crosses zero; accelerations are
    linear, so their extrema are the endpoints.
    """
    t = np.asarray(durations, dtype=float)[:, None]
    a = (v_end + v_start) / t ** 2 + 2.0 * (q_start - q_end) / t ** 3
    b = 0.5 * (v_end - v_start) / t - 1.5 * a * t

    vel_peak = np.maximum(np.abs(v_start), np.abs(v_end)) * np.ones_like(t)
    a_safe = np.where(np.abs(a) > 1e-300, a, 1e-300)
    t_star = -b / (3.0 * a_safe)
    interior = (t_star > 0.0) & (t_star < t) & (np.abs(a) > 1e-300)
    v_star = np.abs(v_start - b ** 2 / (3.0 * a_safe))
    vel_peak = np.where(interior, np.maximum(vel_peak, v_star), vel_peak)

    acc_peak = np.maximum(np.abs(2.0 * b), np.abs(6.0 * a * t + 2.0 * b))
    return vel_peak, acc_peak


def _feasible_mask(q_start, v_start, q_end, v_end, durations, limits):
    vel, acc = _peak_vel_acc(q_start, v_start, q_end, v_end, durations)
    ok_v = np.all(vel <= limits.v_max * (1.0 + _FEAS_EPS) + _FEAS_EPS, axis=1)
    ok_a = np.all(acc <= limits.a_max * (1.0 + _FEAS_EPS) + _FEAS_EPS, axis=1)
    return ok_v & ok_a


def min_duration(q_start, v_start, q_end, v_end, limits,
                 grid=DURATION_GRID, ceiling=SEGMENT_CEILING):
    """Smallest duration on the grid for which all joint limits hold.

    Scans grid multiples from below in growing chunks, so the returned value
    is exactly the first feasible one.  Raises Infeasible when the boundary
    velocities already exceed limits or nothing under ``ceiling`` works.
    """
    q_start = np.asarray(q_start, dtype=float)
    v_start = np.asarray(v_start, dtype=float)
    q_end = np.asarray(q_end, dtype=float)
    v_end = np.asarray(v_end, dtype=float)
    if np.any(np.abs(v_start) > limits.v_max * (1.0 + _FEAS_EPS)) or \
            np.any(np.abs(v_end) > limits.v_max * (1.0 + _FEAS_EPS)):
        raise Infeasible("boundary velocity exceeds the velocity limit")

    k_max = int(np.ceil(ceiling / grid))
    lo, hi = 1, 64
    while lo <= k_max:
        ks = np.arange(lo, min(hi, k_max) + 1)
        mask = _feasible_mask(q_start, v_start, q_end, v_end, ks * grid, limits)
        if np.any(mask):
            return float(ks[np.argmax(mask)] * grid)
        lo, hi = hi + 1, hi * 4
    raise Infeasible(f"no feasible duration below {ceiling} s")


def _min_duration_smooth(q_start, v_start, q_end, v_end, limits,
                         ceiling=SEGMENT_CEILING):
    """Continuous-duration variant used inside the descent (no grid rounding)."""
    def feasible(t):
        return bool(_feasible_mask(q_start, v_start, q_end, v_end,
                                   np.array([t]), limits)[0])

    # Analytic rest-to-rest style estimates give a cheap starting bracket.
    dq = np.abs(np.asarray(q_end, dtype=float) - np.asarray(q_start, dtype=float))
    t_guess = max(float(np.max(1.5 * dq / limits.v_max)),
                  float(np.max(np.sqrt(6.0 * dq / limits.a_max))), 1e-4)
    hi = t_guess
    while not feasible(hi):
        hi *= 2.0
        if hi > ceiling:
            raise Infeasible(f"no feasible duration below {ceiling} s")
    lo = 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class TransferTrajectory:
    """Three chained cubic segments through the four transfer waypoints."""

    segments: tuple
    waypoints: np.ndarray          # (4, 6)
    junction_speeds: np.ndarray    # (2,) lambda magnitudes, workspace m/s
    junction_directions: np.ndarray  # (2, 6) joint-space unit-tip-speed vectors
    total_duration: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total_duration",
                           float(sum(s.duration for s in self.segments)))

    def sample(self, dt):
        """Sample positions/velocities/accelerations every ``dt`` seconds.

        Junction samples are emitted once; the final sample lands exactly on
        the total duration.  Returns (times, q, v, a).
        """
        times, qs, vs, accs = [], [], [], []
        offset = 0.0
        for k, seg in enumerate(self.segments):
            n = int(round(seg.duration / dt))
            include_end = k == len(self.segments) - 1
            local = np.arange(n + 1 if include_end else n) * dt
            times.append(offset + local)
            qs.append(seg.position(local))
            vs.append(seg.velocity(local))
            accs.append(seg.acceleration(local))
            offset += seg.duration
        return (np.concatenate(times), np.vstack(qs), np.vstack(vs),
                np.vstack(accs))


def junction_direction(q, tip_direction, geometry=ToolGeometry()):
    """Joint velocity realizing a unit tip velocity along ``tip_direction``."""
    twist = np.concatenate([np.asarray(tip_direction, dtype=float), np.zeros(3)])
    return solve_joint_velocity(q, twist, geometry)


def _lambda_ceiling(direction, limits):
    """Largest junction speed keeping every joint inside its velocity limit."""
    mag = np.abs(direction)
    ratios = np.full(6, np.inf)
    ratios[mag > 1e-12] = limits.v_max[mag > 1e-12] / mag[mag > 1e-12]
    return float(ratios.min())


def optimize_transfer(waypoints, limits, geometry=ToolGeometry(),
                      lift_direction=(0.0, 0.0, 1.0),
                      lower_direction=(0.0, 0.0, -1.0),
                      step=0.1, fd_step=1e-3, tol=1e-4, max_iter=50):
    """Choose junction speeds minimizing the total transfer duration.

    Gradient descent with backtracking on the continuous-duration objective,
    starting from zero junction speed.  The returned trajectory is rebuilt on
    the duration grid at the optimized speeds.
    """
    way = np.asarray(waypoints, dtype=float)
    if way.shape != (4, 6):
        raise ValueError(f"expected 4 waypoints of 6 joints, got {way.shape}")
    dirs = np.vstack([junction_direction(way[1], lift_direction, geometry),
                      junction_direction(way[2], lower_direction, geometry)])
    lam_hi = np.array([_lambda_ceiling(dirs[0], limits),
                       _lambda_ceiling(dirs[1], limits)])

    def boundary(lam):
        v1 = lam[0] * dirs[0]
        v2 = lam[1] * dirs[1]
        zero = np.zeros(6)
        return [(way[0], zero, way[1], v1), (way[1], v1, way[2], v2),
                (way[2], v2, way[3], zero)]

    def cost(lam):
        # Opposing junction velocities can defeat every duration; that is a
        # genuinely infinite cost, not an error, inside the descent.
        try:
            return sum(_min_duration_smooth(*bc, limits) for bc in boundary(lam))
        except Infeasible:
            return np.inf

    lam = np.zeros(2)
    f_prev = cost(lam)
    if not np.isfinite(f_prev):
        raise Infeasible("transfer infeasible even at zero junction speed")
    for _ in range(max_iter):
        grad = np.zeros(2)
        for i in range(2):
            up = lam.copy()
            dn = lam.copy()
            up[i] = min(lam[i] + fd_step, lam_hi[i])
            dn[i] = max(lam[i] - fd_step, 0.0)
            f_up, f_dn = cost(up), cost(dn)
            if not np.isfinite(f_up):
                f_up, up = f_prev, lam  # fall back to a one-sided difference
            if not np.isfinite(f_dn):
                f_dn, dn = f_prev, lam
            spread = up[i] - dn[i]
            grad[i] = (f_up - f_dn) / spread if spread > 0 else 0.0

        beta = step
        candidate, f_cand = lam, f_prev
        for _ in range(30):
            trial = np.clip(lam - beta * grad, 0.0, lam_hi)
            f_trial = cost(trial)
            if f_trial <= f_prev:
                candidate, f_cand = trial, f_trial
                break
            beta *= 0.5
        if np.array_equal(candidate, lam) or abs(f_prev - f_cand) < tol:
            lam, f_prev = candidate, f_cand
            break
        lam, f_prev = candidate, f_cand

    segments = tuple(hermite_segment(*bc, min_duration(*bc, limits))
                     for bc in boundary(lam))
    return TransferTrajectory(segments=segments, waypoints=way,
                              junction_speeds=lam, junction_directions=dirs)
