"""Robust velocity/acceleration/jerk estimation from measured configurations.

Measured joint positions are explained by discrete constant-acceleration
dynamics whose residuals pay a Huber penalty, as one convex QP per joint:

    minimize    sum_t (u_t)^2 + delta * (r_t + s_t)        (q and v channels)
    subject to  q_{t+1} - q_t = v_t T + a_t T^2/2 + u_t^q + r_t^q - s_t^q
                v_{t+1} - v_t = a_t T             + u_t^v + r_t^v - s_t^v
                |u_t| <= delta,  r_t >= 0,  s_t >= 0

The quadratic/linear split makes the effective loss quadratic for residuals
up to delta/2 and linear beyond, so isolated outliers perturb the recovered
kinematics locally instead of leaking into the whole series.  Jerk is the
difference of consecutive accelerations divided by the sampling interval.
"""

from dataclasses import dataclass

import numpy as np
import osqp
import scipy.sparse as sp

from .errors import SolverFailure, TooShort
from .kinematics import ToolGeometry, jacobian

HUBER_DELTA_Q = 1e-3  # rad (or m for the prismatic joint)
HUBER_DELTA_V = 1e-2  # rad/s
_OSQP_EPS = 1e-9


@dataclass(frozen=True)
class MeasurementSeries:
    """Measured joint configurations q (H_m + 1, 6) at fixed interval T_m."""

    q: np.ndarray
    T_m: float

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        if q.ndim != 2 or q.shape[1] != 6:
            raise ValueError(f"q must be (H_m + 1, 6), got {q.shape}")
        if not self.T_m > 0.0:
            raise ValueError("T_m must be positive")
        object.__setattr__(self, "q", q)

    @property
    def horizon(self):
        return len(self.q) - 1


@dataclass(frozen=True)
class KinematicEstimate:
    """Fitted kinematics plus the slack split of every dynamics residual.

    v has one row per measurement; a stops one short (the final
    acceleration is not constrained by any data); jerk is one shorter
    still.  The slack arrays satisfy residual = u + r - s exactly with
    r, s >= 0 and |u| bounded by the corresponding huber delta.
    """

    T_m: float
    v: np.ndarray
    a: np.ndarray
    jerk: np.ndarray
    u_q: np.ndarray
    r_q: np.ndarray
    s_q: np.ndarray
    u_v: np.ndarray
    r_v: np.ndarray
    s_v: np.ndarray
    objective: float


def _huber_split(residual, delta):
    """Exact minimizing split of a residual into (u, r, s).

    Minimizes u^2 + delta*(r + s) subject to u + r - s = residual and the
    sign constraints; the quadratic piece saturates at delta/2.
    """
    u = np.clip(residual, -0.5 * delta, 0.5 * delta)
    over = residual - u
    return u, np.maximum(over, 0.0), np.maximum(-over, 0.0)


def _solve_joint(dq, T, delta_q, delta_v):
    """Huber dynamics fit for one joint; returns (v, a, objective).

    ``dq`` holds the H measured position increments.  Variables are
    stacked [v (H+1), a (H), u_q, r_q, s_q, u_v, r_v, s_v (H each)].
    """
    h = len(dq)
    nv = h + 1
    n = nv + 7 * h

    def block(k):
        return nv + k * h  # a=0, u_q=1, r_q=2, s_q=3, u_v=4, r_v=5, s_v=6

    rows, cols, vals, lower, upper = [], [], [], [], []
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

    for t in range(h):
        add_row([(t, T), (block(0) + t, 0.5 * T * T), (block(1) + t, 1.0),
                 (block(2) + t, 1.0), (block(3) + t, -1.0)], dq[t], dq[t])
        add_row([(t, 1.0), (t + 1, -1.0), (block(0) + t, T),
                 (block(4) + t, 1.0), (block(5) + t, 1.0),
                 (block(6) + t, -1.0)], 0.0, 0.0)
    for t in range(h):
        add_row([(block(1) + t, 1.0)], -delta_q, delta_q)
        add_row([(block(4) + t, 1.0)], -delta_v, delta_v)
        for k in (2, 3, 5, 6):
            add_row([(block(k) + t, 1.0)], 0.0, np.inf)

    a_mat = sp.csc_matrix((vals, (rows, cols)), shape=(r, n))
    l_vec, u_vec = np.array(lower), np.array(upper)

    p_diag = np.zeros(n)
    p_diag[block(1): block(2)] = 2.0
    p_diag[block(4): block(5)] = 2.0
    p_mat = sp.diags(p_diag, format="csc")
    q_lin = np.zeros(n)
    q_lin[block(2): block(4)] = delta_q
    q_lin[block(5): block(7)] = delta_v

    solver = osqp.OSQP()
    # deterministic settings and deep polish refinement, for the same
    # reasons as the trajectory refiner: wall-clock rho adaptation varies
    # run-to-run, and the default 3 refinement passes leave visible
    # residual on a KKT whose curvature lives only in the u blocks
    solver.setup(P=p_mat, q=q_lin, A=a_mat, l=l_vec, u=u_vec, verbose=False,
                 eps_abs=_OSQP_EPS, eps_rel=_OSQP_EPS, polishing=True,
                 max_iter=200000, adaptive_rho_interval=50, alpha=1.9,
                 polish_refine_iter=10)
    result = solver.solve(raise_error=False)
    if result.info.status != "solved":
        raise SolverFailure(f"huber fit did not solve: {result.info.status}")
    v = result.x[:nv]
    a = result.x[block(0): block(1)]
    return v, a, float(result.info.obj_val)


def estimate(series, huber_delta_q=HUBER_DELTA_Q, huber_delta_v=HUBER_DELTA_V):
    """Fit velocities and accelerations to a measured series.

    Solves the per-joint Huber QP, then re-splits the achieved dynamics
    residuals analytically so the returned slacks satisfy their sign and
    bound constraints exactly.  Raises TooShort for fewer than three
    intervals.
    """
    h = series.horizon
    if h < 3:
        raise TooShort(f"need at least 3 intervals, got {h}")
    T = series.T_m
    dq = np.diff(series.q, axis=0)

    v = np.empty((h + 1, 6))
    a = np.empty((h, 6))
    objective = 0.0
    for j in range(6):
        v[:, j], a[:, j], _ = _solve_joint(dq[:, j], T, huber_delta_q,
                                           huber_delta_v)

    res_q = dq - v[:-1] * T - 0.5 * a * T * T
    res_v = np.diff(v, axis=0) - a * T
    u_q, r_q, s_q = _huber_split(res_q, huber_delta_q)
    u_v, r_v, s_v = _huber_split(res_v, huber_delta_v)
    objective = float(
        np.sum(u_q ** 2) + huber_delta_q * np.sum(r_q + s_q)
        + np.sum(u_v ** 2) + huber_delta_v * np.sum(r_v + s_v))
    return KinematicEstimate(
        T_m=T, v=v, a=a, jerk=np.diff(a, axis=0) / T,
        u_q=u_q, r_q=r_q, s_q=s_q, u_v=u_v, r_v=r_v, s_v=s_v,
        objective=objective)


def _stats(magnitudes):
    if len(magnitudes) == 0:
        return {"mean": 0.0, "p50": 0.0, "p95": 0.0, "max": 0.0}
    mags = np.asarray(magnitudes, dtype=float)
    return {
        "mean": float(np.mean(mags)),
        "p50": float(np.percentile(mags, 50)),
        "p95": float(np.percentile(mags, 95)),
        "max": float(np.max(mags)),
    }


def summarize(est, series, geometry=ToolGeometry()):
    """Joint-space and tip-space magnitude statistics of an estimate.

    Joint-space magnitudes are Euclidean norms of the 6-vectors.  Tip
    velocities push the joint velocities through the translational
    Jacobian at each measured configuration; tip acceleration and jerk
    follow by differencing the tip velocity series, which folds in the
    Jacobian's own rate of change.
    """
    tip_v = np.empty((len(series.q), 3))
    for t, q in enumerate(series.q):
        tip_v[t] = jacobian(q, geometry)[0:3, :] @ est.v[t]
    tip_a = np.diff(tip_v, axis=0) / est.T_m
    tip_jerk = np.diff(tip_a, axis=0) / est.T_m
    return {
        "joint": {
            "v": _stats(np.linalg.norm(est.v, axis=1)),
            "a": _stats(np.linalg.norm(est.a, axis=1)),
            "jerk": _stats(np.linalg.norm(est.jerk, axis=1)),
        },
        "tip": {
            "v": _stats(np.linalg.norm(tip_v, axis=1)),
            "a": _stats(np.linalg.norm(tip_a, axis=1)),
            "jerk": _stats(np.linalg.norm(tip_jerk, axis=1)),
        },
    }
