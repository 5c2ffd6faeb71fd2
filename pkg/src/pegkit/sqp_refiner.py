"""Jerk-minimizing discrete refinement of spline transfer segments.

Each spline segment is re-solved as a convex quadratic program over sampled
positions, velocities, and accelerations at a fixed interval ``T``: minimize
the summed squared jerk subject to the discrete constant-acceleration
dynamics, joint boxes, the segment's boundary conditions, and (during lift
and lower) a corridor constraint keeping the tool tip laterally near the peg
axis.  The corridor couples the joints through forward kinematics, so it is
linearized at the previous iterate and the QP is re-solved until the iterates
settle (a sequential quadratic program).  Shrinking the horizon one interval
at a time and keeping the shortest feasible solve trades the cubic spline's
conservative velocity shape for transfer time.
"""

from dataclasses import dataclass

import numpy as np
import osqp
import scipy.sparse as sp

from .errors import NonDivisibleInterval, SolverFailure
from .kinematics import JointLimits, ToolGeometry, forward_kinematics, jacobian
from .spline_planner import Channel, CubicSegment, TransferTrajectory

DEFAULT_T = 0.05         # s; QP waypoint interval (5 controller periods)
CONTROLLER_PERIOD = 0.01  # s
SQP_MAX_ITER = 10
SQP_STEP_TOL = 1e-6       # rad; iterate change declaring the SQP converged
SLACK_PENALTY = 1e3       # linear cost per meter of corridor slack
AUDIT_TOL = 1e-6
_OSQP_EPS = 1e-8
SOLVER_BUDGET = 200000    # ADMM iterations per solve; exhaustion = infeasible


@dataclass(frozen=True)
class DiscreteTrajectory:
    """(q, v, a) samples every ``T`` seconds; row t is waypoint t of 0..H.

    The dynamics q_{t+1} = q_t + v_t·T + a_t·T²/2 and v_{t+1} = v_t + a_t·T
    hold between consecutive rows; the final acceleration row duplicates
    a_{H-1} so all three arrays share one shape.
    """

    T: float
    q: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        for name in ("q", "v", "a"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
        if not self.T > 0.0:
            raise ValueError("T must be positive")
        if self.q.ndim != 2 or self.q.shape[1] != 6 or self.q.shape[0] < 2:
            raise ValueError("q must be (H+1, 6) with H >= 1")
        if self.v.shape != self.q.shape or self.a.shape != self.q.shape:
            raise ValueError("q, v, a must share one shape")

    @property
    def horizon(self) -> int:
        return self.q.shape[0] - 1

    @property
    def duration(self) -> float:
        return self.T * self.horizon


@dataclass(frozen=True)
class BoundaryConditions:
    """Segment endpoints; a velocity of None is free within the joint limits."""

    q_start: np.ndarray
    q_end: np.ndarray
    v_start: np.ndarray | None = None
    v_end: np.ndarray | None = None

    def __post_init__(self):
        for name in ("q_start", "q_end", "v_start", "v_end"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name,
                                   np.asarray(val, dtype=float).reshape(6))


@dataclass(frozen=True)
class RefineStats:
    """Solver bookkeeping for one refined segment."""

    iterations: int
    horizon: int
    max_slack: float
    objective: float


@dataclass(frozen=True)
class AuditReport:
    """Independent re-check of every constraint on a returned trajectory."""

    dynamics_residual: float
    boundary_residual: float
    limit_violation: float
    channel_excess: float
    ok: bool


def jerk_objective(traj: DiscreteTrajectory) -> float:
    """Sum of squared acceleration differences per interval, over all joints."""
    diffs = np.diff(traj.a[: traj.horizon], axis=0) / traj.T
    return float(np.sum(diffs**2))


def sample_segment(segment: CubicSegment, horizon: int, T: float) -> DiscreteTrajectory:
    """Warm start: the cubic re-timed onto ``horizon`` intervals of ``T``.

    Sampled at equally spaced points of the segment's own clock, with
    velocities and accelerations scaled to the new clock so the boundary
    conditions carry over exactly.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    s = np.linspace(0.0, segment.duration, horizon + 1)
    scale = segment.duration / (T * horizon)
    q = segment.position(s)
    v = segment.velocity(s) * scale
    a = segment.acceleration(s) * scale**2
    a[-1] = a[-2]
    return DiscreteTrajectory(T=T, q=q, v=v, a=a)


def _retime(traj: DiscreteTrajectory, horizon: int, T: float) -> DiscreteTrajectory:
    """Re-time a discrete trajectory onto ``horizon`` intervals of ``T``.

    Piecewise constant-acceleration evaluation at equally spaced points of
    the source clock, with velocities and accelerations rescaled to the new
    clock — the discrete analogue of ``sample_segment``, used to carry one
    horizon's solution over as the next (shorter) horizon's warm start.
    """
    times = np.linspace(0.0, traj.duration, horizon + 1)
    idx = np.minimum((times / traj.T).astype(int), traj.horizon - 1)
    tau = (times - idx * traj.T)[:, None]
    q = traj.q[idx] + traj.v[idx] * tau + 0.5 * traj.a[idx] * tau**2
    v = traj.v[idx] + traj.a[idx] * tau
    a = traj.a[idx]
    scale = traj.duration / (T * horizon)
    return DiscreteTrajectory(T=T, q=q, v=v * scale, a=a * scale**2)


def _solve_qp(horizon, T, bc, limits, channel, lin, geometry,
              budget=SOLVER_BUDGET):
    """One linearized QP; returns (q, v, a, max_slack) or None if infeasible.

    ``lin`` is the (q, v, a) triple of the current iterate: its positions are
    the corridor linearization point and the whole triple warm-starts the
    solver.  ``budget`` caps ADMM iterations per solve; exhausting it counts
    as infeasible, which can only stop the horizon shrink early.
    """
    H = horizon
    lin_q = lin[0]
    nq = 6 * (H + 1)
    na = 6 * H
    ns = 2 * (H + 1) if channel is not None else 0
    n = 2 * nq + na + ns

    def iq(t):
        return 6 * t

    def iv(t):
        return nq + 6 * t

    def ia(t):
        return 2 * nq + 6 * t

    def islack(t, d):
        return 2 * nq + na + 2 * t + d

    rows, cols, vals = [], [], []
    lower, upper = [], []
    r = 0

    def add_row(entries, lo, hi):
        nonlocal r
        for c, v in entries:
            rows.append(r)
            cols.append(c)
            vals.append(v)
        lower.append(lo)
        upper.append(hi)
        r += 1

    # discrete dynamics
    for t in range(H):
        for j in range(6):
            add_row([(iq(t + 1) + j, 1.0), (iq(t) + j, -1.0),
                     (iv(t) + j, -T), (ia(t) + j, -0.5 * T * T)], 0.0, 0.0)
            add_row([(iv(t + 1) + j, 1.0), (iv(t) + j, -1.0),
                     (ia(t) + j, -T)], 0.0, 0.0)

    # boundary conditions
    for j in range(6):
        add_row([(iq(0) + j, 1.0)], bc.q_start[j], bc.q_start[j])
        add_row([(iq(H) + j, 1.0)], bc.q_end[j], bc.q_end[j])
    for v_fixed, t in ((bc.v_start, 0), (bc.v_end, H)):
        for j in range(6):
            if v_fixed is not None:
                add_row([(iv(t) + j, 1.0)], v_fixed[j], v_fixed[j])
            else:
                add_row([(iv(t) + j, 1.0)], -limits.v_max[j], limits.v_max[j])

    # interior boxes
    for t in range(1, H):
        for j in range(6):
            add_row([(iq(t) + j, 1.0)], limits.lo[j], limits.hi[j])
            add_row([(iv(t) + j, 1.0)], -limits.v_max[j], limits.v_max[j])
    for t in range(H):
        for j in range(6):
            add_row([(ia(t) + j, 1.0)], -limits.a_max[j], limits.a_max[j])

    # corridor constraint, linearized at lin_q: tip_xy(q) ~ tip_xy(q0) + J_xy (q - q0)
    if channel is not None:
        for t in range(H + 1):
            q0 = lin_q[t]
            jac_xy = jacobian(q0, geometry)[0:2, :]
            const = channel.p + jac_xy @ q0 - forward_kinematics(q0, geometry).t[:2]
            for d in range(2):
                entries = [(iq(t) + j, jac_xy[d, j]) for j in range(6)]
                add_row(entries + [(islack(t, d), 1.0)],
                        const[d] - channel.tolerance, np.inf)
                add_row(entries + [(islack(t, d), -1.0)],
                        -np.inf, const[d] + channel.tolerance)
                add_row([(islack(t, d), 1.0)], 0.0, np.inf)

    A = sp.csc_matrix((vals, (rows, cols)), shape=(r, n))

    # objective: sum over t of |(a_t - a_{t-1})/T|^2  (+ linear slack penalty),
    # scaled by T^2/2 so the Hessian entries are O(1) — the raw 2/T^2 weights
    # condition the ADMM iteration badly enough that it stalls
    prows, pcols, pvals = [], [], []
    obj_scale = 0.5 * T * T
    w = (2.0 / (T * T)) * obj_scale
    for t in range(1, H):
        for j in range(6):
            i0, i1 = ia(t - 1) + j, ia(t) + j
            prows += [i0, i1, i0, i1]
            pcols += [i0, i1, i1, i0]
            pvals += [w, w, -w, -w]
    P = sp.csc_matrix((pvals, (prows, pcols)), shape=(n, n))
    q_lin = np.zeros(n)
    if ns:
        q_lin[2 * nq + na:] = SLACK_PENALTY * obj_scale

    x_warm = np.zeros(n)
    x_warm[:nq] = lin[0][: H + 1].ravel()
    x_warm[nq: 2 * nq] = lin[1][: H + 1].ravel()
    x_warm[2 * nq: 2 * nq + na] = lin[2][:H].ravel()
    l_vec, u_vec = np.array(lower), np.array(upper)

    def attempt(eps, x0, y0=None):
        solver = osqp.OSQP()
        # fixed adaptive_rho_interval: the default adapts rho on wall-clock
        # timing, which makes iterates (and hence emitted floats) vary
        # run-to-run; alpha=1.9 roughly quarters the iteration count here.
        # polish_refine_iter=10: the default 3 refinement passes leave ~5e-9
        # residual on this KKT (P has curvature only in the acceleration
        # block, and the dynamics rows carry 1/T weights), which the stiff
        # endpoint duals turn into a visibly suboptimal objective
        solver.setup(P=P, q=q_lin, A=A, l=l_vec, u=u_vec, verbose=False,
                     eps_abs=eps, eps_rel=eps, polishing=True, max_iter=budget,
                     adaptive_rho_interval=50, alpha=1.9,
                     polish_refine_iter=10)
        solver.warm_start(x=x0, y=y0)
        return solver.solve(raise_error=False)

    def feasible_enough(x):
        ax = A @ x
        res = max(float(np.max(l_vec - ax)), float(np.max(ax - u_vec)))
        return res <= 1e-7

    # Climb an accuracy ladder, restarting each rung from the previous
    # iterates.  A rung's solve is accepted when its constraint rows check
    # out numerically and it was either polished (exact for its active set)
    # or the final rung (whose unpolished residual is already two orders
    # under the audit level).  Slack-bearing problems skip the loosest rung:
    # their degenerate active sets defeat polishing there, so it only
    # wastes a solve.  Infeasibility certificates escalate too — loose
    # settings can certify a marginally feasible problem as infeasible —
    # and only the final rung's certificate rejects the horizon.
    rungs = (1e-6, _OSQP_EPS) if channel is not None else (1e-4, 1e-6, _OSQP_EPS)
    accepted = False
    x0, y0 = x_warm, None
    for eps in rungs:
        result = attempt(eps, x0, y0)
        info = result.info
        final_rung = eps == _OSQP_EPS
        if info.status == "solved":
            if ((info.status_polish == 1 or final_rung)
                    and feasible_enough(result.x)):
                accepted = True
                break
            x0, y0 = result.x, result.y
        elif "infeasible" in info.status:
            if final_rung:
                return None
            x0, y0 = x_warm, None
        elif result.x is not None:
            x0, y0 = result.x, result.y
    if not accepted:
        return None
    x = result.x
    q = x[:nq].reshape(H + 1, 6)
    v = x[nq: 2 * nq].reshape(H + 1, 6)
    a = x[2 * nq: 2 * nq + na].reshape(H, 6)
    max_slack = float(np.max(x[2 * nq + na:], initial=0.0))
    return q, v, a, max_slack


def _reproject(bc, T, q_sol, v_sol, a_sol):
    """Assemble the trajectory from the solver's state and input rows.

    Boundary rows are overwritten with the exact boundary conditions, so
    chained segments join to round-off.  Positions, velocities and
    accelerations are kept as solved: every audited quantity (dynamics,
    limits, corridor) then carries only the solver's per-row residual,
    with nothing integrated or differenced that would amplify it.
    """
    q = q_sol.copy()
    v = v_sol.copy()
    q[0], q[-1] = bc.q_start, bc.q_end
    if bc.v_start is not None:
        v[0] = bc.v_start
    if bc.v_end is not None:
        v[-1] = bc.v_end
    a_full = np.vstack([a_sol, a_sol[-1]])
    return DiscreteTrajectory(T=T, q=q, v=v, a=a_full)


def refine_segment(warm, bc, limits, channel=None, geometry=ToolGeometry(),
                   probe=False, budget=SOLVER_BUDGET):
    """Solve the jerk QP at the warm trajectory's horizon.

    Without a corridor the problem is a single convex QP.  With one, the
    corridor is re-linearized at each solution until successive iterates
    move less than SQP_STEP_TOL, within SQP_MAX_ITER rounds; ``probe``
    settles for the first linearization instead, which is how the horizon
    search tests feasibility cheaply.  Returns (DiscreteTrajectory,
    RefineStats); raises SolverFailure when the QP is infeasible or the
    iteration budget runs out before convergence.
    """
    T, H = warm.T, warm.horizon
    lin = (warm.q, warm.v, warm.a)
    for iteration in range(1, SQP_MAX_ITER + 1):
        sol = _solve_qp(H, T, bc, limits, channel, lin, geometry, budget)
        if sol is None:
            raise SolverFailure(f"QP infeasible at horizon {H}")
        q_sol, v_sol, a_sol, max_slack = sol
        step = float(np.max(np.abs(q_sol - lin[0])))
        lin = (q_sol, v_sol, a_sol)
        if channel is None or probe or step < SQP_STEP_TOL:
            traj = _reproject(bc, T, q_sol, v_sol, a_sol)
            stats = RefineStats(iterations=iteration, horizon=H,
                                max_slack=max_slack,
                                objective=jerk_objective(traj))
            return traj, stats
    raise SolverFailure(
        f"SQP did not settle within {SQP_MAX_ITER} iterations at horizon {H}")


def shorten_time(segment, bc, limits, channel=None, T=DEFAULT_T,
                 geometry=ToolGeometry(), budget=SOLVER_BUDGET):
    """Smallest-horizon feasible refinement of one spline segment.

    Starts at the horizon covering the spline duration and decrements by one
    interval until the QP turns infeasible, keeping the last success.  The
    shrink probes each horizon with a single corridor linearization — warm
    starts track the previous optimum closely enough for the feasibility
    decision — and the kept horizon is then re-solved to full SQP
    convergence, stepping back up an interval in the rare case convergence
    fails there.  Raises SolverFailure if even the initial horizon fails or
    the refinement cannot match the spline's duration (the caller then
    executes the spline).
    """
    duration = segment.duration
    first_h = max(1, int(np.ceil(duration / T - 1e-9)))
    best = None
    for horizon in range(first_h, 0, -1):
        # warm-start each horizon from the previous optimum once there is
        # one — far closer to the new optimum than the re-timed spline
        if best is None:
            warm = sample_segment(segment, horizon, T)
        else:
            warm = _retime(best[0], horizon, T)
        try:
            best = refine_segment(warm, bc, limits, channel, geometry,
                                  probe=True, budget=budget)
        except SolverFailure:
            if best is None:
                raise
            break
    if channel is not None:
        # converge the corridor linearization at the kept horizon; if the
        # fully converged problem rejects it, retreat one interval at a time
        traj = best[0]
        for horizon in range(traj.horizon, first_h + 1):
            warm = traj if horizon == traj.horizon else _retime(traj, horizon, T)
            try:
                best = refine_segment(warm, bc, limits, channel, geometry,
                                      budget=budget)
                break
            except SolverFailure:
                if horizon == first_h:
                    raise
    traj, stats = best
    if traj.duration > duration + 1e-9:
        raise SolverFailure("refined trajectory would be slower than the spline")
    return traj, stats


@dataclass(frozen=True)
class RefinedTransfer:
    """Refinement outcome for a full three-segment transfer.

    When ``fell_back`` is set the QP pipeline failed and callers must execute
    ``spline`` instead; ``segments`` is None in that case.
    """

    spline: TransferTrajectory
    segments: tuple | None
    stats: tuple | None
    fell_back: bool
    total_duration: float


def refine_transfer(transfer, limits, channels=(None, None, None),
                    T=DEFAULT_T, geometry=ToolGeometry(),
                    budget=SOLVER_BUDGET):
    """Refine all three transfer segments, chaining junction velocities.

    Segment boundaries are pinned to the transfer waypoints; the optimized
    end velocity of each segment becomes the fixed start velocity of the
    next, and the transfer starts and ends at rest.
    """
    waypoints = transfer.waypoints
    n_seg = len(transfer.segments)

    def run_pass(pinned):
        """One chaining pass; pinned junctions use the spline's velocities."""
        refined, stats = [], []
        v_chain = np.zeros(6)
        for i, segment in enumerate(transfer.segments):
            if i == n_seg - 1:
                v_end = np.zeros(6)
            elif pinned:
                v_end = (transfer.junction_speeds[i]
                         * transfer.junction_directions[i])
            else:
                v_end = None
            bc = BoundaryConditions(
                q_start=waypoints[i], q_end=waypoints[i + 1],
                v_start=v_chain, v_end=v_end)
            traj, st = shorten_time(segment, bc, limits, channels[i], T,
                                    geometry, budget)
            refined.append(traj)
            stats.append(st)
            v_chain = traj.v[-1]
        return refined, stats

    # Free junction velocities give the shortest result, but a greedy exit
    # speed can leave the next segment with no feasible deceleration at its
    # starting horizon.  Retry with junctions pinned to the spline's own
    # velocities (which every neighbouring segment is known to absorb)
    # before giving up on refinement altogether.
    refined = stats = None
    for pinned in (False, True):
        try:
            refined, stats = run_pass(pinned)
            break
        except SolverFailure:
            continue
    if refined is None:
        return RefinedTransfer(spline=transfer, segments=None, stats=None,
                               fell_back=True,
                               total_duration=transfer.total_duration)
    return RefinedTransfer(spline=transfer, segments=tuple(refined),
                           stats=tuple(stats), fell_back=False,
                           total_duration=float(sum(t.duration for t in refined)))


def interpolate_to_controller(traj: DiscreteTrajectory,
                              period: float = CONTROLLER_PERIOD):
    """Densify to the controller period with constant-acceleration substeps.

    Returns (q, v, a) arrays of shape (H·k + 1, 6) where k = T / period.
    """
    ratio = traj.T / period
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9:
        raise NonDivisibleInterval(
            f"interval {traj.T} is not an integer multiple of {period}")
    if k == 1:
        return traj.q.copy(), traj.v.copy(), traj.a.copy()
    H = traj.horizon
    tau = (np.arange(k) * period)[:, None]
    q = np.empty((H * k + 1, 6))
    v = np.empty_like(q)
    a = np.empty_like(q)
    for t in range(H):
        sl = slice(t * k, (t + 1) * k)
        q[sl] = traj.q[t] + traj.v[t] * tau + 0.5 * traj.a[t] * tau**2
        v[sl] = traj.v[t] + traj.a[t] * tau
        a[sl] = traj.a[t]
    q[-1], v[-1], a[-1] = traj.q[H], traj.v[H], traj.a[H]
    return q, v, a


def audit_trajectory(traj, bc, limits, channel=None, max_slack=0.0,
                     geometry=ToolGeometry(), tol=AUDIT_TOL) -> AuditReport:
    """Re-verify every constraint from scratch, not trusting solver status."""
    T, H = traj.T, traj.horizon
    q, v, a = traj.q, traj.v, traj.a

    dyn_q = q[1:] - q[:-1] - v[:-1] * T - 0.5 * a[:H] * T * T
    dyn_v = v[1:] - v[:-1] - a[:H] * T
    dynamics = max(float(np.max(np.abs(dyn_q))), float(np.max(np.abs(dyn_v))))

    boundary = max(float(np.max(np.abs(q[0] - bc.q_start))),
                   float(np.max(np.abs(q[H] - bc.q_end))))
    if bc.v_start is not None:
        boundary = max(boundary, float(np.max(np.abs(v[0] - bc.v_start))))
    if bc.v_end is not None:
        boundary = max(boundary, float(np.max(np.abs(v[H] - bc.v_end))))

    limit = max(
        float(np.max(limits.lo - q, initial=0.0)),
        float(np.max(q - limits.hi, initial=0.0)),
        float(np.max(np.abs(v) - limits.v_max, initial=0.0)),
        float(np.max(np.abs(a[:H]) - limits.a_max, initial=0.0)),
    )

    channel_excess = 0.0
    if channel is not None:
        for t in range(H + 1):
            tip_xy = forward_kinematics(q[t], geometry).t[:2]
            dev = float(np.max(np.abs(tip_xy - channel.p)))
            channel_excess = max(
                channel_excess, dev - channel.tolerance - max_slack)
        channel_excess = max(channel_excess, 0.0)

    ok = (dynamics <= tol and boundary <= tol and limit <= tol
          and channel_excess <= tol)
    return AuditReport(dynamics_residual=dynamics, boundary_residual=boundary,
                       limit_violation=limit, channel_excess=channel_excess,
                       ok=ok)
