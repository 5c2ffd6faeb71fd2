"""Synthetic depth scenes, rigid registration, and grasp selection.

A top-down depth capture of the pegboard is synthesised by sampling the
visible surfaces of the board, pegs, and triangular blocks, then adding
isotropic Gaussian sensor noise.  Blocks are localised by cropping a height
band above the board, clustering the survivors by proximity, and registering
the block's surface model to the chosen cluster with point-to-nearest-sample
ICP seeded from the expected pose.  Grasp poses are selected among the six
block-edge candidates by reachability and planar distance from the peg.
"""

from dataclasses import dataclass
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import Degenerate, EmptyInput, NoFeasibleGrasp
from .kinematics import Pose, ToolGeometry, inverse_kinematics
from .errors import Unreachable, DegenerateWrist

DEFAULT_DENSITY = 2.0e6  # surface samples per square metre
DEFAULT_NOISE_SD = 0.0003  # per-axis sensor noise (m)
CLUSTER_RADIUS = 0.002  # connected-component linkage distance


@dataclass(frozen=True)
class PointCloud:
    """Point set in a common frame, with optional audit labels.

    Labels identify the surface each point was sampled from (0 = board,
    1..12 = pegs, 100+k = block k) and exist only so synthetic-scene tests
    can audit the geometric pipeline; the pipeline itself never reads them.
    """

    points: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=int)
            if lab.shape != (len(pts),):
                raise ValueError("labels must be one int per point")
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.points)

    def select(self, mask_or_index):
        """Subset preserving point order and labels."""
        lab = None if self.labels is None else self.labels[mask_or_index]
        return PointCloud(self.points[mask_or_index], lab)


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid transform: x_out = r @ x_in + t."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rigid transform needs a 3x3 rotation and 3-vector")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation has det != +1")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.r.T + self.t

    def invert_points(self, points):
        """Map world-frame points into this transform's source frame."""
        return (np.asarray(points, dtype=float) - self.t) @ self.r

    def compose(self, other):
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return RigidTransform(self.r @ other.r, self.r @ other.t + self.t)

    def inverse(self):
        return RigidTransform(self.r.T, -self.r.T @ self.t)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])


def _rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class BlockModel:
    """Equilateral triangular prism with a central cylindrical opening.

    The block frame has its origin at the triangle centroid on the bottom
    face, z up; one vertex points along +y.  Six grasp poses sit on the top
    rim, two per edge at the quarter points, tool z down-the-opening and
    tool x along the edge.
    """

    side: float = 0.018
    height: float = 0.006
    opening_radius: float = 0.0045

    def __post_init__(self):
        if self.opening_radius * 2.0 * np.sqrt(3.0) >= self.side:
            raise ValueError("opening does not fit inside the triangle")

    @property
    def circumradius(self):
        return self.side / np.sqrt(3.0)

    def vertices(self):
        """Triangle vertices in the block frame, (3, 2)."""
        ang = np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3,
                        np.pi / 2 + 4 * np.pi / 3])
        return self.circumradius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def grasp_poses(self):
        """Six block-frame grasp poses: edges (0-1, 1-2, 2-0) x (1/4, 3/4)."""
        verts = self.vertices()
        poses = []
        for e in range(3):
            a, b = verts[e], verts[(e + 1) % 3]
            yaw = np.arctan2(b[1] - a[1], b[0] - a[0])
            for frac in (0.25, 0.75):
                p = a + frac * (b - a)
                poses.append(Pose(_rot_z(yaw),
                                  np.array([p[0], p[1], self.height])))
        return tuple(poses)

    def surface_areas(self):
        """(top, one side, inner wall) areas in m^2."""
        tri = 0.25 * np.sqrt(3.0) * self.side ** 2
        top = tri - np.pi * self.opening_radius ** 2
        side = self.side * self.height
        inner = 2 * np.pi * self.opening_radius * self.height
        return top, side, inner

    def contains_footprint(self, xy):
        """True for planar points inside the triangle but not the opening."""
        xy = np.asarray(xy, dtype=float)
        verts = self.vertices()
        inside = np.ones(len(xy), dtype=bool)
        for e in range(3):
            a, b = verts[e], verts[(e + 1) % 3]
            edge = b - a
            # vertices wind counter-clockwise, so interior is to the left
            cross = edge[0] * (xy[:, 1] - a[1]) - edge[1] * (xy[:, 0] - a[0])
            inside &= cross >= 0.0
        in_hole = np.einsum("ij,ij->i", xy, xy) < self.opening_radius ** 2
        return inside & ~in_hole


@dataclass(frozen=True, eq=False)
class BoardModel:
    """Pegboard: 12 pegs on a flat plate, 6 on each half.

    Peg order is column-major left to right: index 0..5 have x < 0.
    Positions are in the board frame (plate top surface at z = 0).
    """

    peg_xy: np.ndarray
    peg_radius: float = 0.001125
    peg_height: float = 0.008
    half_extents: tuple = (0.055, 0.036)

    def __post_init__(self):
        xy = np.asarray(self.peg_xy, dtype=float)
        if xy.shape != (12, 2):
            raise ValueError("board needs exactly 12 peg positions")
        if np.sum(xy[:, 0] < 0) != 6:
            raise ValueError("board needs 6 left and 6 right pegs")
        object.__setattr__(self, "peg_xy", xy)

    @classmethod
    def default(cls):
        xs = (-0.0375, -0.0125, 0.0125, 0.0375)
        ys = (-0.025, 0.0, 0.025)
        return cls(np.array([(x, y) for x in xs for y in ys]))

    def left_pegs(self):
        return np.arange(12)[self.peg_xy[:, 0] < 0]

    def right_pegs(self):
        return np.arange(12)[self.peg_xy[:, 0] > 0]


# ---------------------------------------------------------------------------
# surface sampling and analytic projection

# surface piece ids: 0..2 side rectangles, 3 inner wall, 4 top face

def _project_piece(model, pts, piece):
    """Closest points on one surface piece, for local-frame query points."""
    pts = np.atleast_2d(pts)
    xy, z = pts[:, :2], pts[:, 2]
    if piece < 3:
        verts = model.vertices()
        a, b = verts[piece], verts[(piece + 1) % 3]
        edge = b - a
        length = np.linalg.norm(edge)
        ehat = edge / length
        u = np.clip((xy - a) @ ehat, 0.0, length)
        foot = a + u[:, None] * ehat
        return np.column_stack([foot, np.clip(z, 0.0, model.height)])
    if piece == 3:
        r = np.linalg.norm(xy, axis=1)
        safe = np.where(r[:, None] > 1e-30, xy, [1.0, 0.0])
        dirn = safe / np.linalg.norm(safe, axis=1, keepdims=True)
        return np.column_stack([model.opening_radius * dirn,
                                np.clip(z, 0.0, model.height)])
    # top face: triangle minus opening, at z = height
    foot = xy.copy()
    r = np.linalg.norm(xy, axis=1)
    in_hole = r < model.opening_radius
    if np.any(in_hole):
        safe = np.where(r[in_hole, None] > 1e-30, xy[in_hole], [1.0, 0.0])
        foot[in_hole] = model.opening_radius * safe \
            / np.linalg.norm(safe, axis=1, keepdims=True)
    verts = model.vertices()
    outside = ~model.contains_footprint(xy) & ~in_hole
    if np.any(outside):
        cand = np.full((np.sum(outside), 2), np.inf)
        best = np.full(np.sum(outside), np.inf)
        sub = xy[outside]
        for e in range(3):
            a, b = verts[e], verts[(e + 1) % 3]
            edge = b - a
            u = np.clip((sub - a) @ edge / (edge @ edge), 0.0, 1.0)
            proj = a + u[:, None] * edge
            d = np.linalg.norm(sub - proj, axis=1)
            closer = d < best
            best[closer] = d[closer]
            cand[closer] = proj[closer]
        foot[outside] = cand
    return np.column_stack([foot, np.full(len(pts), model.height)])


def surface_closest(model, pts):
    """Exact closest surface points: (closest (N,3), distance (N,))."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    best_pts = None
    best_d = np.full(len(pts), np.inf)
    for piece in range(5):
        proj = _project_piece(model, pts, piece)
        d = np.linalg.norm(pts - proj, axis=1)
        if best_pts is None:
            best_pts, best_d = proj, d
        else:
            closer = d < best_d
            best_pts[closer] = proj[closer]
            best_d[closer] = d[closer]
    return best_pts, best_d


def _sample_block_surface(model, counts, rng):
    """Random samples of the camera-facing block surfaces.

    ``counts`` is (per-side, top, inner-wall) sample counts.  Points lie
    exactly on the analytic surfaces.
    """
    verts = model.vertices()
    pieces = []
    n_side, n_top, n_inner = counts
    for e in range(3):
        a, b = verts[e], verts[(e + 1) % 3]
        u = rng.uniform(size=n_side)
        w = rng.uniform(0.0, model.height, size=n_side)
        xy = a + u[:, None] * (b - a)
        pieces.append(np.column_stack([xy, w]))
    theta = rng.uniform(0.0, 2 * np.pi, size=n_inner)
    z = rng.uniform(0.0, model.height, size=n_inner)
    pieces.append(np.column_stack([model.opening_radius * np.cos(theta),
                                   model.opening_radius * np.sin(theta), z]))
    # top face: uniform in the triangle by reflection, reject the opening
    kept = []
    need = n_top
    while need > 0:
        s = rng.uniform(size=need)
        t = rng.uniform(size=need)
        flip = s + t > 1.0
        s[flip], t[flip] = 1.0 - s[flip], 1.0 - t[flip]
        xy = verts[0] + np.outer(s, verts[1] - verts[0]) \
            + np.outer(t, verts[2] - verts[0])
        xy = xy[np.einsum("ij,ij->i", xy, xy) >= model.opening_radius ** 2]
        kept.append(xy)
        need = n_top - sum(len(k) for k in kept)
    xy = np.vstack(kept)[:n_top]
    pieces.append(np.column_stack([xy, np.full(n_top, model.height)]))
    return np.vstack(pieces)


def synth_scene(board, blocks, density=DEFAULT_DENSITY,
                noise_sd=DEFAULT_NOISE_SD, seed=0,
                board_T=None):
    """Render a top-down capture of the board, pegs, and posed blocks.

    ``blocks`` is a list of (BlockModel, RigidTransform) with poses in the
    same world frame as ``board_T`` (board -> world, default identity).
    Board points hidden under a block footprint are occluded.  Gaussian
    noise of ``noise_sd`` per axis is added after assembly, so the same seed
    with different noise levels perturbs identical underlying samples.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    if board_T is None:
        board_T = RigidTransform.identity()
    rng = np.random.default_rng(seed)
    clouds, labels = [], []

    hx, hy = board.half_extents
    n_plate = int(round(4 * hx * hy * density))
    plate = np.column_stack([rng.uniform(-hx, hx, n_plate),
                             rng.uniform(-hy, hy, n_plate),
                             np.zeros(n_plate)])
    clouds.append(board_T.apply(plate))
    labels.append(np.zeros(n_plate, dtype=int))

    side_area = 2 * np.pi * board.peg_radius * board.peg_height
    top_area = np.pi * board.peg_radius ** 2
    for k, (px, py) in enumerate(board.peg_xy):
        n_side = int(round(side_area * density))
        n_top = int(round(top_area * density))
        theta = rng.uniform(0, 2 * np.pi, n_side)
        z = rng.uniform(0, board.peg_height, n_side)
        shaft = np.column_stack([px + board.peg_radius * np.cos(theta),
                                 py + board.peg_radius * np.sin(theta), z])
        rr = board.peg_radius * np.sqrt(rng.uniform(size=n_top))
        tt = rng.uniform(0, 2 * np.pi, n_top)
        cap = np.column_stack([px + rr * np.cos(tt), py + rr * np.sin(tt),
                               np.full(n_top, board.peg_height)])
        clouds.append(board_T.apply(np.vstack([shaft, cap])))
        labels.append(np.full(n_side + n_top, k + 1, dtype=int))

    for k, (model, pose) in enumerate(blocks):
        top, side, inner = model.surface_areas()
        counts = (int(round(side * density)), int(round(top * density)),
                  int(round(inner * density)))
        local = _sample_block_surface(model, counts, rng=rng)
        clouds.append(pose.apply(local))
        labels.append(np.full(len(local), 100 + k, dtype=int))

    points = np.vstack(clouds)
    label_arr = np.concatenate(labels)

    # occlude plate points beneath each block footprint (the opening still
    # sees through to the plate)
    keep = np.ones(len(points), dtype=bool)
    plate_rows = np.flatnonzero(label_arr == 0)
    for model, pose in blocks:
        local = pose.invert_points(points[plate_rows])
        shadowed = model.contains_footprint(local[:, :2])
        keep[plate_rows[shadowed]] = False
    points, label_arr = points[keep], label_arr[keep]

    if noise_sd > 0.0:
        points = points + rng.normal(0.0, noise_sd, points.shape)
    return PointCloud(points, label_arr)


# ---------------------------------------------------------------------------
# cropping and clustering

def crop_height(cloud, board_T, z_range):
    """Keep points whose board-frame z lies in [lo, hi]; order-preserving."""
    lo, hi = z_range
    if not lo < hi:
        raise ValueError("z_range must satisfy lo < hi")
    z = cloud.points @ board_T.r[:, 2] - board_T.t @ board_T.r[:, 2]
    return cloud.select((z >= lo) & (z <= hi))


def crop_window(cloud, center_xy, half_extent):
    """Keep points within a planar square window; order-preserving."""
    d = np.abs(cloud.points[:, :2] - np.asarray(center_xy, dtype=float))
    return cloud.select((d[:, 0] <= half_extent) & (d[:, 1] <= half_extent))


def cluster_points(cloud, radius=CLUSTER_RADIUS):
    """Connected components under a neighbour radius.

    Returns a list of ascending index arrays, ordered by each component's
    lowest member index.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    n = len(pts)
    if n == 0:
        return []
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    graph = csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                       shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    clusters = [np.flatnonzero(comp == c) for c in range(comp.max() + 1)]
    clusters.sort(key=lambda idx: idx[0])
    return clusters


# ---------------------------------------------------------------------------
# registration

def arun_fit(p, q, correspondence=None):
    """Least-squares rigid fit: find (R, t) minimising sum |R p_i + t - q_i|^2.

    Centroid-subtract, SVD of the cross-covariance, proper-rotation
    correction when the raw optimum is a reflection.  ``correspondence`` is
    an optional (K, 2) index pairing (rows of p, rows of q); by default the
    clouds pair row-for-row.
    """
    p_pts = p.points if isinstance(p, PointCloud) else np.asarray(p, dtype=float)
    q_pts = q.points if isinstance(q, PointCloud) else np.asarray(q, dtype=float)
    if correspondence is not None:
        pairs = np.asarray(correspondence, dtype=int)
        p_pts, q_pts = p_pts[pairs[:, 0]], q_pts[pairs[:, 1]]
    if len(p_pts) != len(q_pts):
        raise ValueError("point sets must pair one-to-one")
    if len(p_pts) < 3:
        raise Degenerate(f"need at least 3 pairs, got {len(p_pts)}")
    p_bar, q_bar = p_pts.mean(axis=0), q_pts.mean(axis=0)
    h = (p_pts - p_bar).T @ (q_pts - q_bar)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= max(s[0], 1e-300) * 1e-9:
        raise Degenerate("correspondences are collinear (rank < 2)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, q_bar - r @ p_bar)


def icp(cloud, model, init, max_iter=60, tol=0.005,
        max_points=600, trace=None):
    """Register a block model to a cloud by iterative closest point.

    Alternates exact closest-surface-point correspondence (the block has
    five analytic pieces, so projecting beats a sampled spatial index on
    both accuracy and speed) with the rigid least-squares fit, starting
    from ``init`` (model -> cloud frame), until the correspondence RMS
    changes by less than ``tol`` relative to its current value or
    ``max_iter`` is reached.  A relative test serves both regimes: noisy
    clouds plateau at the noise floor after one refinement, while
    noiseless clouds keep refining until the pose is exact.  Returns
    (transform, rms).  Large clouds are subsampled evenly to
    ``max_points`` rows for speed; pass None to disable.  ``trace``, if a
    list, receives the RMS of every iteration.
    """
    if len(cloud) == 0:
        raise EmptyInput("cannot register an empty cloud")
    pts = cloud.points
    if max_points is not None and len(pts) > max_points:
        pts = pts[np.linspace(0, len(pts) - 1, max_points).astype(int)]
    x = init
    prev_rms = np.inf
    rms = np.inf
    for _ in range(max_iter):
        local = x.invert_points(pts)
        matched, dist = surface_closest(model, local)
        rms = float(np.sqrt(np.mean(dist ** 2)))
        if trace is not None:
            trace.append(rms)
        if abs(prev_rms - rms) < tol * rms + 1e-12:
            break
        x = arun_fit(matched, pts)
        prev_rms = rms
    return x, rms


def register_board(cloud, board, guess_T, band_halfwidth=0.0015):
    """Refine a board pose from peg-top clusters.

    Crops a band around the nominal peg-top height (using ``guess_T``),
    clusters it, matches cluster centroids to the nearest model peg, and
    fits the rigid transform board -> cloud frame over the matches.
    """
    band = (board.peg_height - band_halfwidth, board.peg_height + band_halfwidth)
    tops = crop_height(cloud, guess_T, band)
    if len(tops) == 0:
        raise Degenerate("no points in the peg-top band")
    clusters = cluster_points(tops)
    centroids = np.array([tops.points[idx].mean(axis=0) for idx in clusters])
    model_tops = np.column_stack([board.peg_xy,
                                  np.full(12, board.peg_height)])
    expected = guess_T.apply(model_tops)
    src, dst = [], []
    for k in range(12):
        d = np.linalg.norm(centroids - expected[k], axis=1)
        j = int(np.argmin(d))
        if d[j] <= 0.005:
            src.append(model_tops[k])
            dst.append(centroids[j])
    return arun_fit(np.array(src), np.array(dst))


# ---------------------------------------------------------------------------
# grasp selection

def _yaw_flip(pose):
    """The half-turn-equivalent grasp (gripper jaws are symmetric)."""
    return Pose(pose.r @ _rot_z(np.pi), pose.t)


def select_grasp(model, block_T, peg_xy, limits, arm_base,
                 geometry=ToolGeometry()):
    """Pick the best reachable grasp on a registered block.

    The six model grasp poses are taken to the world frame, poses behind
    the peg (the open half-plane opposite the block centroid) are discarded,
    reachability is checked by closed-form IK against the joint limits
    (either jaw orientation of the symmetric gripper may serve), and the
    surviving pose with the largest planar distance from the peg wins.
    Ties resolve to the lowest grasp index.
    """
    peg_xy = np.asarray(peg_xy, dtype=float)
    arm_base = np.asarray(arm_base, dtype=float)
    centroid = block_T.apply(np.array([[0.0, 0.0, 0.5 * model.height]]))[0]
    axis = centroid[:2] - peg_xy
    norm = np.linalg.norm(axis)
    axis = axis / norm if norm > 1e-9 else None

    best = None
    for index, grasp in enumerate(model.grasp_poses()):
        world = Pose(block_T.r @ grasp.r, block_T.apply(grasp.t[None, :])[0])
        offset = world.t[:2] - peg_xy
        if axis is not None and offset @ axis < 0.0:
            continue  # behind the peg
        reachable = None
        for candidate in (world, _yaw_flip(world)):
            arm_pose = Pose(candidate.r, candidate.t - arm_base)
            try:
                joints = inverse_kinematics(arm_pose, geometry)
            except (Unreachable, DegenerateWrist):
                continue
            if limits.contains(joints):
                reachable = candidate
                break
        if reachable is None:
            continue
        distance = float(np.linalg.norm(offset))
        if best is None or distance > best[0] + 1e-12:
            best = (distance, index, reachable)
    if best is None:
        raise NoFeasibleGrasp("all six grasp poses are excluded or unreachable")
    return best[2]


# ---------------------------------------------------------------------------
# import/export

def save_xyz(cloud, path):
    """Whitespace-delimited text: x y z per row, plus a label column if any."""
    if cloud.labels is None:
        np.savetxt(path, cloud.points, fmt="%.17g")
    else:
        np.savetxt(path, np.column_stack([cloud.points, cloud.labels]),
                   fmt=("%.17g", "%.17g", "%.17g", "%d"))


def load_xyz(path):
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] == 3:
        return PointCloud(data)
    if data.shape[1] == 4:
        return PointCloud(data[:, :3], data[:, 3].astype(int))
    raise ValueError(f"expected 3 or 4 columns, got {data.shape[1]}")


def save_cloud(cloud, path):
    """Compact binary form (single .npz archive)."""
    if cloud.labels is None:
        np.savez(path, points=cloud.points)
    else:
        np.savez(path, points=cloud.points, labels=cloud.labels)


def load_cloud(path):
    with np.load(path) as data:
        labels = data["labels"] if "labels" in data.files else None
        return PointCloud(data["points"], labels)


def save_transform(transform, path):
    """4x4 row-major homogeneous matrix as structured text."""
    np.savetxt(path, transform.matrix(), fmt="%.17g")


def load_transform(path):
    return RigidTransform.from_matrix(np.loadtxt(path))
