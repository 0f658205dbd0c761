"""Point-cloud containers, rigid-motion algebra, and nearest-neighbor search.

Conventions used throughout the package:
  * points are stored as rows, shape [N, 3]; a transform acts as p' = R p + t,
    i.e. ``points @ R.T + t`` on row storage
  * Euler angles (alpha, beta, gamma) are radians and decode as
    R = Rz(gamma) @ Ry(beta) @ Rx(alpha)
  * quaternions are scalar-first (w, x, y, z)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ORTHO_TOL = 1e-8
# brute-force KNN below this size; kd-tree above
_KDTREE_MIN_POINTS = 64


@dataclass
class PointCloud:
    """Ordered 3D points with optional unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"points must be [N,3] with N >= 1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points contain non-finite coordinates")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals must match points in shape")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("normals must be unit length within 1e-6")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class RigidTransform:
    """Rotation matrix + translation vector; validated to lie in SE(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        err = np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3)))
        if err > ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (deviation {err:.2e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1 (reflection?)")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])


_ROT_PARAM_LEN = {"euler": 3, "quaternion": 4, "sixd": 6, "matrix": 9}


@dataclass
class RotationParam:
    """Rotation parameterization: euler / quaternion / sixd / matrix."""

    mode: str
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mode not in _ROT_PARAM_LEN:
            raise ValueError(f"unknown rotation mode {self.mode!r}")
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        want = _ROT_PARAM_LEN[self.mode]
        if self.values.shape[0] != want:
            raise ValueError(f"mode {self.mode!r} needs {want} values, got {self.values.shape[0]}")


def rotation_param_dim(mode: str) -> int:
    return _ROT_PARAM_LEN[mode]


# ---------------------------------------------------------------------------
# basic cloud ops


def centroid(cloud: PointCloud) -> np.ndarray:
    return cloud.points.mean(axis=0)


def sqdist_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances via the expanded form (fast, may be -eps)."""
    a2 = np.sum(a * a, axis=1)
    b2 = np.sum(b * b, axis=1)
    d2 = a2[:, None] + b2[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def _select_k(d2: np.ndarray, tie_key: np.ndarray, k: int) -> np.ndarray:
    """Per row, indices of the k smallest entries; ties broken by tie_key."""
    n, m = d2.shape
    if k + 1 >= m:
        order = np.lexsort((np.broadcast_to(tie_key, (n, m)), d2), axis=1)
        return order[:, :k].astype(np.int64)
    cand = np.argpartition(d2, k, axis=1)[:, : k + 1]
    cd = np.take_along_axis(d2, cand, axis=1)
    order = np.lexsort((tie_key[cand], cd), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    cd = np.take_along_axis(cd, order, axis=1)
    out = cand[:, :k].astype(np.int64)
    # a tie at the selection boundary means the partition may have kept the
    # wrong representatives; those rows get an exact full sort
    unsafe = np.nonzero(cd[:, k - 1] >= cd[:, k])[0]
    for i in unsafe:
        out[i] = np.lexsort((tie_key, d2[i]))[:k]
    return out


def knn_indices(data: np.ndarray, k: int) -> np.ndarray:
    """Brute-force k-nearest-neighbor table for row vectors of any dimension.

    Sorted ascending by squared distance, ties broken by lower index; a row
    is never its own neighbor.
    """
    n = data.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, N-1] = [1, {n - 1}], got {k}")
    d2 = sqdist_matrix(data, data)
    np.fill_diagonal(d2, np.inf)
    return _select_k(d2, np.arange(n), k)


def graph_knn(data: np.ndarray, k: int) -> np.ndarray:
    """Neighbor table over the k nearest *distinct* feature locations.

    Exactly coincident rows collapse to one graph vertex whose representative
    is the lowest index, so duplicated points neither crowd out genuine
    neighbors nor link to themselves. Falls back to plain :func:`knn_indices`
    when fewer than k+1 distinct locations exist.
    """
    n = data.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, N-1] = [1, {n - 1}], got {k}")
    uniq, inverse = np.unique(data, axis=0, return_inverse=True)
    m = uniq.shape[0]
    if m == n:
        return knn_indices(data, k)
    if m - 1 < k:
        return knn_indices(data, k)
    reps = np.full(m, n, dtype=np.int64)
    np.minimum.at(reps, inverse, np.arange(n))
    d2 = sqdist_matrix(uniq, uniq)
    np.fill_diagonal(d2, np.inf)
    nbr_uniq = _select_k(d2, reps, k)  # [m, k] in unique-row ids
    return reps[nbr_uniq][inverse]


def _knn_brute(points: np.ndarray, k: int) -> np.ndarray:
    return knn_indices(points, k)


def knn(cloud: PointCloud, k: int) -> np.ndarray:
    """KNN table [N, k] for a 3D cloud; kd-tree backed above 64 points.

    Same ordering contract as :func:`knn_indices`. The kd-tree path falls
    back to the brute scan for any row whose neighbor set is ambiguous
    (boundary ties, coincident points), so results are always exact.
    """
    pts = cloud.points
    n = pts.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, N-1] = [1, {n - 1}], got {k}")
    if n < _KDTREE_MIN_POINTS or k + 2 >= n:
        return _knn_brute(pts, k)

    m = k + 2
    tree = cKDTree(pts)
    _, cand = tree.query(pts, k=m)
    d2 = np.sum((pts[:, None, :] - pts[cand]) ** 2, axis=-1)  # [n, m]
    not_self = cand != np.arange(n)[:, None]
    d2[~not_self] = np.inf
    order = np.lexsort((cand, d2), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    out = cand[:, :k].astype(np.int64)
    # rows where self is missing/duplicated, or where the boundary ties, are
    # ambiguous from m candidates alone
    unsafe = (not_self.sum(axis=1) != m - 1) | (d2[:, k - 1] >= d2[:, k])
    if np.any(unsafe):
        sub = _knn_brute(pts, k)
        out[unsafe] = sub[unsafe]
    return out


# ---------------------------------------------------------------------------
# rotations


def euler_to_matrix(angles: np.ndarray) -> np.ndarray:
    """R = Rz(gamma) @ Ry(beta) @ Rx(alpha) for angles (alpha, beta, gamma)."""
    a, b, g = float(angles[0]), float(angles[1]), float(angles[2])
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cg, sg = np.cos(g), np.sin(g)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rz @ ry @ rx


def euler_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix`; gimbal lock resolves with gamma=0."""
    r20 = np.clip(rot[2, 0], -1.0, 1.0)
    beta = np.arcsin(-r20)
    if abs(r20) < 1.0 - 1e-12:
        alpha = np.arctan2(rot[2, 1], rot[2, 2])
        gamma = np.arctan2(rot[1, 0], rot[0, 0])
    else:
        s = -np.sign(r20)
        alpha = np.arctan2(s * rot[0, 1], s * rot[0, 2])
        gamma = 0.0
    return np.array([alpha, beta, gamma])


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def decode_rotation(param: RotationParam) -> np.ndarray:
    """Decode any rotation parameterization to a proper rotation matrix."""
    v = param.values
    if param.mode == "euler":
        return euler_to_matrix(v)
    if param.mode == "quaternion":
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise ValueError("degenerate quaternion (all zero)")
        return quaternion_to_matrix(v / norm)
    if param.mode == "sixd":
        a, b = v[:3], v[3:]
        na = np.linalg.norm(a)
        if na < 1e-9:
            raise ValueError("degenerate sixd parameter: first column is zero")
        c1 = a / na
        b_perp = b - np.dot(c1, b) * c1
        nb = np.linalg.norm(b_perp)
        if nb < 1e-9:
            raise ValueError("degenerate sixd parameter: columns are parallel")
        c2 = b_perp / nb
        c3 = np.cross(c1, c2)
        return np.column_stack([c1, c2, c3])
    # matrix mode: nearest rotation by SVD projection with reflection guard
    m = v.reshape(3, 3)
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0.0:
        d = 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


# ---------------------------------------------------------------------------
# rigid motion


def apply_transform(transform: RigidTransform, cloud: PointCloud) -> PointCloud:
    """p -> R p + t for every point; normals rotate without translating."""
    pts = cloud.points @ transform.rotation.T + transform.translation
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ transform.rotation.T
    return PointCloud(pts, normals)


def canonicalize(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """p -> R^T (p - t); inverse of :func:`apply_transform`."""
    pts = (cloud.points - transform.translation) @ transform.rotation
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ transform.rotation
    return PointCloud(pts, normals)


def compose_relative(t_x: RigidTransform, t_y: RigidTransform) -> RigidTransform:
    """Relative motion R = R_Y R_X^T, t = t_Y - R t_X.

    Aligns X onto Y whenever both share the same canonical shape, i.e.
    canonicalize(X, T_X) == canonicalize(Y, T_Y).
    """
    rot = t_y.rotation @ t_x.rotation.T
    trans = t_y.translation - rot @ t_x.translation
    return RigidTransform(rot, trans)


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid motion src -> dst (SVD with reflection guard)."""
    if src.shape != dst.shape or src.ndim != 2 or src.shape[0] < 3:
        raise ValueError("fit_rigid needs matching [n>=3, 3] arrays")
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0.0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = dc - rot @ sc
    return RigidTransform(rot, trans)


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric mean of squared nearest-neighbor distances.

    Computed from explicit coordinate differences so that the value is
    exactly symmetric in its arguments and exactly zero for identical sets.
    """
    diff = a.points[:, None, :] - b.points[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())
