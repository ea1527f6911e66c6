"""Rigid transforms, point clouds, and the small numeric kernels shared by the planner.

Frames are right-handed; distances are meters and angles radians.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial.transform import Rotation

ORTHONORMAL_TOL = 1e-9
NORMAL_TOL = 1e-6
COLLINEAR_TOL = 1e-9


class GeometryError(ValueError):
    pass


class DegenerateHullError(GeometryError):
    pass


class EmptyCloudError(GeometryError):
    pass


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> R x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHONORMAL_TOL * 10) or \
                abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL * 10:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls(rotation_from_axis_angle(axis, angle), translation)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def is_valid(self) -> bool:
        R = self.rotation
        return bool(np.abs(R.T @ R - np.eye(3)).max() <= ORTHONORMAL_TOL
                    and abs(np.linalg.det(R) - 1.0) <= ORTHONORMAL_TOL)


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    x, y, z = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def rotation_between(a, b) -> np.ndarray:
    """Smallest rotation taking unit vector a onto unit vector b."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(np.dot(a, b))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        return rotation_from_axis_angle(orthogonal_unit_vector(a), np.pi)
    return rotation_from_axis_angle(v / s, np.arctan2(s, c))


def orthogonal_unit_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    helper = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(v, helper)
    return u / np.linalg.norm(u)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


@dataclass
class PointCloud:
    """Points with optional unit normals and optional integer labels."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise GeometryError("point cloud contains non-finite points")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise GeometryError("normals must match points")
            if len(self.normals) and np.abs(np.linalg.norm(self.normals, axis=1) - 1).max() > NORMAL_TOL:
                raise GeometryError("normals must have unit length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
            if len(self.labels) != len(self.points):
                raise GeometryError("labels must match points")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask) -> "PointCloud":
        return PointCloud(
            self.points[mask],
            None if self.normals is None else self.normals[mask],
            None if self.labels is None else self.labels[mask],
        )

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))


def transform_cloud(pose: Pose, cloud: PointCloud) -> PointCloud:
    normals = None if cloud.normals is None else pose.apply_vectors(cloud.normals)
    return PointCloud(pose.apply(cloud.points), normals, cloud.labels)


def truncated_normal_cdf(x, mu, sigma, a, b):
    """CDF at x of N(mu, sigma^2) truncated to [a, b]."""
    x = np.asarray(x, dtype=float)
    if np.any(np.asarray(sigma) <= 0):
        raise GeometryError("sigma must be positive")
    if np.any(np.asarray(a) >= np.asarray(b)):
        raise GeometryError("need a < b")
    if np.any(x < a) or np.any(x > b):
        raise GeometryError("x outside [a, b]")
    za = (np.asarray(a, dtype=float) - mu) / sigma
    zb = (np.asarray(b, dtype=float) - mu) / sigma
    zx = (x - mu) / sigma
    with np.errstate(divide="ignore", invalid="ignore"):
        # mirror into the lower tail when the window sits above the mode
        lower = np.exp(_log_ndtr_diff(zx, za) - _log_ndtr_diff(zb, za))
        upper = np.exp(_log_ndtr_diff(-za, -zx) - _log_ndtr_diff(-za, -zb))
    out = np.clip(np.where(za > 0, upper, lower), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def _log_ndtr_diff(u, v):
    """log(Phi(u) - Phi(v)) for u >= v."""
    lu = special.log_ndtr(u)
    return lu + np.log1p(-np.exp(special.log_ndtr(v) - lu))


def erf(x):
    return special.erf(x)


def inverse_erf(y):
    """Inverse error function, refined by Newton steps to ~1 ulp."""
    y_arr = np.asarray(y, dtype=float)
    if np.any(np.abs(y_arr) >= 1.0) or not np.isfinite(y_arr).all():
        raise GeometryError("inverse_erf domain is (-1, 1)")
    x = special.erfinv(y_arr)
    for _ in range(2):
        err = special.erf(x) - y_arr
        x = x - err / (2.0 / np.sqrt(np.pi) * np.exp(-x * x))
    return float(x) if np.ndim(x) == 0 else x


def _check_not_collinear(pts: np.ndarray):
    if len(pts) < 3:
        raise DegenerateHullError("need at least 3 points for a 2D hull")
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= COLLINEAR_TOL * max(1.0, np.sqrt(len(pts))):
        raise DegenerateHullError("hull points are collinear")


def hull_edge_equations(hull_points: np.ndarray) -> np.ndarray:
    """Outward unit edge normals and offsets (n . p + d <= 0 inside)."""
    pts = np.asarray(hull_points, dtype=float).reshape(-1, 2)
    _check_not_collinear(pts)
    try:
        return ConvexHull(pts).equations
    except Exception as exc:
        raise DegenerateHullError(str(exc)) from exc


def hull_depth_2d(point, hull_points: np.ndarray) -> float:
    """Signed distance from point to the hull boundary, positive inside."""
    eq = hull_edge_equations(hull_points)
    p = np.asarray(point, dtype=float).reshape(2)
    return float(-(eq[:, :2] @ p + eq[:, 2]).max())


def point_in_hull_2d(point, hull_points: np.ndarray) -> bool:
    return hull_depth_2d(point, hull_points) >= -1e-12


def nearest_neighbor_index(query, cloud: PointCloud | np.ndarray) -> int:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(pts) == 0:
        raise EmptyCloudError("nearest neighbor of an empty cloud")
    return int(nearest_neighbor_indices(np.asarray(query, dtype=float).reshape(1, 3), pts)[0])


def nearest_neighbor_indices(queries: np.ndarray, points: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    """Batched nearest neighbors; exact distance ties resolve to the lowest index."""
    if len(points) == 0:
        raise EmptyCloudError("nearest neighbor of an empty cloud")
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    tree = tree if tree is not None else cKDTree(points)
    k = min(4, len(points))
    d, idx = tree.query(queries, k=k)
    if k == 1:
        return idx.astype(int)
    best = idx[:, 0].copy()
    # ties can only live among the k nearest if the kth is strictly farther
    tied = d[:, 1] <= d[:, 0]
    if tied.any():
        for q in np.nonzero(tied)[0]:
            dq = np.linalg.norm(points - queries[q], axis=1)
            best[q] = int(np.flatnonzero(dq == dq.min())[0])
    return best.astype(int)


def estimate_normals(points: np.ndarray, k: int = 12, tree: cKDTree | None = None) -> np.ndarray:
    """Unoriented PCA normals from the k nearest neighbors."""
    n = len(points)
    if n < 3:
        return np.tile([0.0, 0.0, 1.0], (n, 1))
    k = min(k, n)
    tree = tree if tree is not None else cKDTree(points)
    _, idx = tree.query(points, k=k)
    nb = points[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def stable_hash(*keys) -> int:
    return zlib.crc32(repr(keys).encode()) & 0x7FFFFFFF


def derive_seed(master: int, *keys) -> int:
    """Counter-based child seed: independent streams keyed by (master, keys)."""
    spawn = tuple(k if isinstance(k, int) and k >= 0 else stable_hash(k) for k in keys)
    ss = np.random.SeedSequence(entropy=int(master) & 0xFFFFFFFFFFFF, spawn_key=spawn)
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
