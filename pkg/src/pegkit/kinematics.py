"""Closed-form kinematics for a 6-DoF remote-center-of-motion tool arm.

The arm pivots about a fixed remote center (the base frame origin).  Joints:

    q1  outer yaw     (rad)
    q2  outer pitch   (rad)
    q3  insertion     (m, prismatic)
    q4  tool roll     (rad)
    q5  wrist pitch   (rad)
    q6  wrist yaw     (rad)

Poses map the end-effector frame to the base frame.  The solver works in the
tool frame: with ``t_inv = -R^T t`` the translation depends only on
(q3, q5, q6), which peels the wrist position joints off in closed form; the
remaining rotation factor then yields (q1, q2, q4) from single matrix entries.
Only the principal branch is returned (|q2| < pi/2, insertion past the pivot).
"""

from dataclasses import dataclass, field
import time

import numpy as np
from scipy.optimize import least_squares

from .errors import DegenerateWrist, Unreachable

# Clamp tolerance for asin/sqrt arguments that drift past their domain by
# round-off only.  Anything worse is a genuine workspace violation.
_DOMAIN_EPS = 1e-12


@dataclass(frozen=True)
class ToolGeometry:
    """Link offsets of the instrument (meters)."""

    l1: float = 0.4318  # pivot to insertion-axis reference
    l2: float = 0.4162  # carriage offset along the shaft
    l3: float = 0.0091  # wrist pitch-to-yaw offset
    l4: float = 0.0102  # yaw-to-tip offset


@dataclass(frozen=True)
class JointLimits:
    """Box limits on joint position, velocity and acceleration.

    Units are rad (rad/s, rad/s^2) for revolute joints and m (m/s, m/s^2)
    for the prismatic insertion joint q3.
    """

    lo: np.ndarray = field(
        default_factory=lambda: np.array([-1.5, -0.93, 0.05, -2.2, -1.4, -1.4]))
    hi: np.ndarray = field(
        default_factory=lambda: np.array([1.5, 0.93, 0.24, 2.2, 1.4, 1.4]))
    v_max: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 1.0, 0.2, 8.0, 8.0, 8.0]))
    a_max: np.ndarray = field(
        default_factory=lambda: np.array([5.0, 5.0, 1.0, 10.0, 10.0, 10.0]))

    def clip(self, q):
        return np.clip(q, self.lo, self.hi)

    def contains(self, q, tol=0.0):
        return bool(np.all(q >= self.lo - tol) and np.all(q <= self.hi + tol))


@dataclass(frozen=True)
class Pose:
    """Rigid pose: rotation matrix ``r`` (end-effector -> base) and origin ``t``."""

    r: np.ndarray
    t: np.ndarray

    def validate(self, tol=1e-9):
        """Raise ValueError unless ``r`` is a proper rotation within ``tol``."""
        r = np.asarray(self.r, dtype=float)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > tol:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > tol:
            raise ValueError("rotation has det != +1")
        if np.asarray(self.t).shape != (3,):
            raise ValueError("translation must be a 3-vector")


def _rot_x(t):
    c, s = np.cos(t), np.sin(t)
    one, zero = np.ones_like(c), np.zeros_like(c)
    return np.array([[one, zero, zero], [zero, c, -s], [zero, s, c]])


def _rot_y(t):
    c, s = np.cos(t), np.sin(t)
    one, zero = np.ones_like(c), np.zeros_like(c)
    return np.array([[c, zero, s], [zero, one, zero], [-s, zero, c]])


def _rot_z(t):
    c, s = np.cos(t), np.sin(t)
    one, zero = np.ones_like(c), np.zeros_like(c)
    return np.array([[c, -s, zero], [s, c, zero], [zero, zero, one]])


def _wrist_rotation(q5, q6):
    """Rotation factor contributed by the wrist pitch/yaw pair."""
    c5, s5 = np.cos(q5), np.sin(q5)
    c6, s6 = np.cos(q6), np.sin(q6)
    zero = np.zeros_like(c5)
    return np.array([[s5 * s6, -c6, c5 * s6],
                     [c5, zero, -s5],
                     [c6 * s5, s6, c5 * c6]])


def _shoulder_rotation(q1, q2, q4):
    """Rotation factor contributed by yaw/pitch/roll: Rz(q4 - pi/2) Rx(q2) Ry(q1)."""
    return _rot_z(q4 - np.pi / 2) @ _rot_x(q2) @ _rot_y(q1)


def _fk_arrays(q, g):
    """FK core; dtype-agnostic so a complex step can ride through it."""
    q1, q2, q3, q4, q5, q6 = q
    rot = _shoulder_rotation(q1, q2, q4).T @ _wrist_rotation(q5, q6).T
    reach = q3 - g.l1 + g.l2  # tip extension past the pivot along the shaft
    arm = reach * np.cos(q5) + g.l3
    t_inv = np.array([arm * np.sin(q6), -reach * np.sin(q5), g.l4 + arm * np.cos(q6)])
    return rot, -rot @ t_inv


def forward_kinematics(q, geometry=ToolGeometry()):
    """Pose of the end-effector frame in the base frame for joint vector ``q``."""
    q = np.asarray(q)
    if q.shape != (6,):
        raise ValueError(f"joint vector must have shape (6,), got {q.shape}")
    rot, t = _fk_arrays(q, geometry)
    return Pose(rot, t)


def inverse_kinematics(pose, geometry=ToolGeometry(), limits=None):
    """Closed-form principal-branch IK.

    Raises Unreachable when the pose falls outside the workspace (insertion
    out of range) and DegenerateWrist when the pitch extraction leaves the
    arcsine domain by more than round-off.
    """
    pose.validate()
    rot = np.asarray(pose.r, dtype=float)
    t_inv = -rot.T @ np.asarray(pose.t, dtype=float)

    # Wrist yaw from the tool-frame translation, then the in-plane radius.
    q6 = np.arctan2(t_inv[0], t_inv[2] - geometry.l4)
    rad2 = t_inv[0] ** 2 + (t_inv[2] - geometry.l4) ** 2
    if rad2 < -_DOMAIN_EPS:
        raise Unreachable("pose outside workspace (negative radicand)")
    p = -geometry.l3 + np.sqrt(max(rad2, 0.0))

    ins2 = t_inv[1] ** 2 + p ** 2
    if ins2 < -_DOMAIN_EPS:
        raise Unreachable("pose outside workspace (negative radicand)")
    q3 = geometry.l1 - geometry.l2 + np.sqrt(max(ins2, 0.0))
    if limits is not None and not (limits.lo[2] <= q3 <= limits.hi[2]):
        raise Unreachable(f"insertion {q3:.4f} m outside limits")
    q5 = np.arctan2(-t_inv[1], p)

    # Remaining rotation after removing the wrist factor.
    r73 = _wrist_rotation(q5, q6).T @ rot.T
    s2 = r73[2, 1]
    if abs(s2) > 1.0 + _DOMAIN_EPS:
        raise DegenerateWrist(f"pitch arcsine argument {s2:.6f} outside [-1, 1]")
    q2 = np.arcsin(np.clip(s2, -1.0, 1.0))
    q1 = np.arctan2(-r73[2, 0], r73[2, 2])
    q4 = np.arctan2(r73[1, 1], r73[0, 1])
    return np.array([q1, q2, q3, q4, q5, q6])


def jacobian(q, geometry=ToolGeometry()):
    """6x6 geometric Jacobian at ``q``; rows = [linear velocity; angular velocity].

    Computed by complex-step differentiation of the FK (exact to round-off;
    the FK core contains no branches or absolute values).
    """
    q = np.asarray(q, dtype=float)
    rot0, _ = _fk_arrays(q, geometry)
    jac = np.zeros((6, 6))
    h = 1e-200
    for i in range(6):
        qc = q.astype(complex)
        qc[i] += 1j * h
        rot_c, t_c = _fk_arrays(qc, geometry)
        jac[:3, i] = t_c.imag / h
        omega_hat = (rot_c.imag / h) @ rot0.T  # dR/dqi R^T, skew-symmetric
        jac[3:, i] = [omega_hat[2, 1], omega_hat[0, 2], omega_hat[1, 0]]
    return jac


def solve_joint_velocity(q, twist, geometry=ToolGeometry()):
    """Joint velocity producing the given base-frame twist [v; w] at ``q``.

    Least-squares solve, so a direction that stays in the column space is
    recovered exactly even at a singular configuration.
    """
    jac = jacobian(q, geometry)
    sol, *_ = np.linalg.lstsq(jac, np.asarray(twist, dtype=float), rcond=None)
    return sol


# ---------------------------------------------------------------------------
# Iterative baseline and benchmark
# ---------------------------------------------------------------------------

def _fk_batch_translation(qs, g):
    """Translations for an (n, 6) batch of joint vectors (vectorized FK)."""
    q1, q2, q3, q4, q5, q6 = qs.T
    stack = lambda m: np.moveaxis(m, 2, 0)  # (3, 3, n) -> (n, 3, 3)
    shoulder = (stack(_rot_z(q4 - np.pi / 2)) @ stack(_rot_x(q2))
                @ stack(_rot_y(q1)))
    rot = np.transpose(shoulder, (0, 2, 1)) @ np.transpose(
        stack(_wrist_rotation(q5, q6)), (0, 2, 1))
    reach = q3 - g.l1 + g.l2
    arm = reach * np.cos(q5) + g.l3
    t_inv = np.stack([arm * np.sin(q6), -reach * np.sin(q5),
                      g.l4 + arm * np.cos(q6)], axis=1)
    return -np.einsum("nij,nj->ni", rot, t_inv)


def iterative_ik(pose, geometry=ToolGeometry(), limits=JointLimits(),
                 n_restarts=1000, rng=None):
    """Numerical IK baseline: screen ``n_restarts`` random joint vectors by
    tip distance, then run bounded least-squares from the best one."""
    if rng is None:
        rng = np.random.default_rng(0)
    samples = rng.uniform(limits.lo, limits.hi, size=(n_restarts, 6))
    tips = _fk_batch_translation(samples, geometry)
    seed = samples[np.argmin(np.linalg.norm(tips - pose.t, axis=1))]

    target_r = np.asarray(pose.r, dtype=float)
    target_t = np.asarray(pose.t, dtype=float)

    def residual(qv):
        rot, t = _fk_arrays(qv, geometry)
        return np.concatenate([(t - target_t) * 100.0, (rot - target_r).ravel()])

    fit = least_squares(residual, seed, bounds=(limits.lo, limits.hi),
                        xtol=1e-12, ftol=1e-12, gtol=1e-12)
    return fit.x


@dataclass(frozen=True)
class IkBenchResult:
    n_closed: int
    n_iterative: int
    closed_mean_s: float
    iterative_mean_s: float
    speedup: float
    max_roundtrip_error: float


def benchmark_ik(n_closed=10000, n_iterative=25, seed=0,
                 geometry=ToolGeometry(), limits=JointLimits()):
    """Time closed-form IK against the random-restart iterative baseline.

    The closed-form solver is timed over ``n_closed`` random reachable poses;
    the iterative baseline over a subsample (it is orders of magnitude
    slower).  Reported speedup is the ratio of per-pose means.
    """
    rng = np.random.default_rng(seed)
    qs = rng.uniform(limits.lo, limits.hi, size=(n_closed, 6))
    poses = [forward_kinematics(q, geometry) for q in qs]

    start = time.perf_counter()
    solutions = [inverse_kinematics(p, geometry) for p in poses]
    closed_elapsed = time.perf_counter() - start
    max_err = max(np.max(np.abs(sol - q)) for sol, q in zip(solutions, qs))

    subset = poses[:n_iterative]
    start = time.perf_counter()
    for pose in subset:
        iterative_ik(pose, geometry, limits, rng=np.random.default_rng(1))
    iter_elapsed = time.perf_counter() - start

    closed_mean = closed_elapsed / n_closed
    iter_mean = iter_elapsed / max(len(subset), 1)
    return IkBenchResult(n_closed, len(subset), closed_mean, iter_mean,
                         iter_mean / closed_mean, float(max_err))
