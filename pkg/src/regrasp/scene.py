"""Synthetic objects, an overhead depth sensor, and calibrated perception noise.

Objects are unions of convex parts (half-space polyhedra and z-axis frusta) in a
canonical frame whose origin is the center of mass.  Surfaces are cell-centered
grids, so sampling is deterministic and the density bound is easy to check.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import special
from scipy.spatial import cKDTree

from .geom import (
    EmptyCloudError,
    PointCloud,
    Pose,
    derive_seed,
    erf,
    estimate_normals,
    nearest_neighbor_indices,
    rotation_between,
    rotation_from_axis_angle,
)

UBAR_MAX = 1.0 - 1e-6
SURFACE_SPACING = 0.004
INSIDE_TOL = 1e-9
NORMAL_K = 40  # neighbors for local PCA normals
TASKS = ("packing", "bottles", "canonical")
PERCEPTION_MODES = ("ground_truth", "gt_segmentation", "corrupted", "no_completion")


class SceneError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shapes

@dataclass(frozen=True)
class ShapeSpec:
    """Primitive kind plus dimensions in meters."""

    kind: str
    dims: tuple

    def key(self) -> str:
        return self.kind + ":" + ",".join(f"{d:.6f}" for d in self.dims)

    def spec_hash(self) -> str:
        return hashlib.sha1(self.key().encode()).hexdigest()[:16]


@dataclass
class Face:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    polygon: np.ndarray  # convex, counter-clockwise in (u, v)
    normal: np.ndarray


@dataclass
class PolyPart:
    A: np.ndarray  # A x <= b
    b: np.ndarray
    faces: list
    volume: float
    centroid: np.ndarray

    def shifted(self, s):
        faces = [replace(f, origin=f.origin + s) for f in self.faces]
        return PolyPart(self.A, self.b + self.A @ s, faces, self.volume, self.centroid + s)

    def contains(self, p, tol=INSIDE_TOL):
        return np.all(p @ self.A.T - self.b <= tol, axis=1)


@dataclass
class FrustumPart:
    center: np.ndarray  # axis position (x, y)
    z0: float
    z1: float
    r0: float
    r1: float

    @property
    def volume(self):
        h = self.z1 - self.z0
        return np.pi * h * (self.r0 ** 2 + self.r0 * self.r1 + self.r1 ** 2) / 3.0

    @property
    def centroid(self):
        r0, r1, h = self.r0, self.r1, self.z1 - self.z0
        zc = h * (r0 ** 2 + 2 * r0 * r1 + 3 * r1 ** 2) / (4 * (r0 ** 2 + r0 * r1 + r1 ** 2))
        return np.array([self.center[0], self.center[1], self.z0 + zc])

    def radius_at(self, z):
        return self.r0 + (self.r1 - self.r0) * (z - self.z0) / (self.z1 - self.z0)

    def shifted(self, s):
        return FrustumPart(self.center + s[:2], self.z0 + s[2], self.z1 + s[2], self.r0, self.r1)

    def contains(self, p, tol=INSIDE_TOL):
        z = p[:, 2]
        r = np.hypot(p[:, 0] - self.center[0], p[:, 1] - self.center[1])
        return (z >= self.z0 - tol) & (z <= self.z1 + tol) & (r <= self.radius_at(z) + tol)


def _rect_face(origin, u, v, du, dv, normal):
    poly = np.array([[0, 0], [du, 0], [du, dv], [0, dv]], dtype=float)
    return Face(np.asarray(origin, float), np.asarray(u, float), np.asarray(v, float), poly,
                np.asarray(normal, float))


def box_part(lo, hi) -> PolyPart:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    d = hi - lo
    A = np.vstack([np.eye(3), -np.eye(3)])
    b = np.concatenate([hi, -lo])
    ex, ey, ez = np.eye(3)
    faces = [
        _rect_face(lo, ey, ez, d[1], d[2], -ex),
        _rect_face(lo + d[0] * ex, ey, ez, d[1], d[2], ex),
        _rect_face(lo, ex, ez, d[0], d[2], -ey),
        _rect_face(lo + d[1] * ey, ex, ez, d[0], d[2], ey),
        _rect_face(lo, ex, ey, d[0], d[1], -ez),
        _rect_face(lo + d[2] * ez, ex, ey, d[0], d[1], ez),
    ]
    return PolyPart(A, b, faces, float(np.prod(d)), (lo + hi) / 2)


def wedge_part(L, W, H) -> PolyPart:
    """Triangular prism: (0,0), (L,0), (0,H) in x-z, extruded over y in [0, W]."""
    slope = np.array([H, 0.0, L]) / np.hypot(H, L)
    A = np.array([[0, -1.0, 0], [0, 1.0, 0], [0, 0, -1.0], [-1.0, 0, 0], slope])
    b = np.array([0, W, 0, 0, slope @ np.array([L, 0, 0])])
    ex, ey, ez = np.eye(3)
    S = np.hypot(L, H)
    tri = np.array([[0, 0], [L, 0], [0, H]], dtype=float)
    faces = [
        _rect_face([0, 0, 0], ex, ey, L, W, -ez),
        _rect_face([0, 0, 0], ey, ez, W, H, -ex),
        _rect_face([L, 0, 0], ey, np.array([-L, 0, H]) / S, W, S, slope),
        Face(np.zeros(3), ex, ez, tri, -ey),
        Face(np.array([0, W, 0.0]), ex, ez, tri, ey),
    ]
    return PolyPart(A, b, faces, L * H * W / 2, np.array([L / 3, W / 2, H / 3]))


def build_parts(spec: ShapeSpec) -> list:
    """Parts in the canonical frame (origin at the center of mass)."""
    k, d = spec.kind, spec.dims
    if k == "box":
        parts = [box_part([0, 0, 0], d)]
    elif k == "cylinder":
        r, h = d
        parts = [FrustumPart(np.zeros(2), 0.0, h, r, r)]
    elif k == "bottle":
        r, hb, rn, hn = d
        parts = [FrustumPart(np.zeros(2), 0.0, hb, r, r), FrustumPart(np.zeros(2), hb, hb + hn, r, rn)]
    elif k == "lblock":
        L, W, T, T2, H = d
        parts = [box_part([0, 0, 0], [L, W, T]), box_part([0, 0, T], [T2, W, T + H])]
    elif k == "wedge":
        parts = [wedge_part(*d)]
    else:
        raise SceneError(f"unknown shape kind {k!r}")
    vol = np.array([p.volume for p in parts])
    com = (vol[:, None] * np.array([p.centroid for p in parts])).sum(axis=0) / vol.sum()
    return [p.shifted(-com) for p in parts]


def _grid(lo, hi, h):
    n = max(1, int(np.ceil((hi - lo) / h - 1e-9)))
    step = (hi - lo) / n
    return lo + step * (np.arange(n) + 0.5)


def _sample_face(face: Face, h):
    poly = face.polygon
    us = _grid(poly[:, 0].min(), poly[:, 0].max(), h)
    vs = _grid(poly[:, 1].min(), poly[:, 1].max(), h)
    uv = np.stack(np.meshgrid(us, vs, indexing="ij"), axis=-1).reshape(-1, 2)
    e = np.roll(poly, -1, axis=0) - poly
    w = uv[:, None, :] - poly[None]
    cross = e[None, :, 0] * w[..., 1] - e[None, :, 1] * w[..., 0]
    uv = uv[np.all(cross > 1e-12, axis=1)]
    pts = face.origin + uv[:, :1] * face.u + uv[:, 1:] * face.v
    return pts, np.tile(face.normal, (len(pts), 1))


def _sample_disk(center_xy, z, r, h, up):
    xs = _grid(-r, r, h)
    g = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    g = g[np.hypot(g[:, 0], g[:, 1]) < r]
    pts = np.column_stack([g + center_xy, np.full(len(g), z)])
    return pts, np.tile([0.0, 0.0, 1.0 if up else -1.0], (len(pts), 1))


def _sample_frustum(part: FrustumPart, h):
    H = part.z1 - part.z0
    slant = np.hypot(H, part.r1 - part.r0)
    ts = _grid(0.0, 1.0, h / slant)
    pts, nrm = [], []
    for t in ts:
        z = part.z0 + t * H
        r = part.r0 + t * (part.r1 - part.r0)
        th = _grid(0.0, 2 * np.pi, h / r)
        c, s = np.cos(th), np.sin(th)
        pts.append(np.column_stack([part.center[0] + r * c, part.center[1] + r * s, np.full(len(th), z)]))
        n = np.column_stack([H * c, H * s, np.full(len(th), part.r0 - part.r1)])
        nrm.append(n / np.linalg.norm(n, axis=1, keepdims=True))
    p0, n0 = _sample_disk(part.center, part.z0, part.r0, h, up=False)
    p1, n1 = _sample_disk(part.center, part.z1, part.r1, h, up=True)
    return np.vstack(pts + [p0, p1]), np.vstack(nrm + [n0, n1])


def sample_surface(parts, spacing=SURFACE_SPACING):
    """Dense surface samples of the union of parts, interior faces removed."""
    pts_all, nrm_all = [], []
    for i, part in enumerate(parts):
        if isinstance(part, PolyPart):
            samples = [_sample_face(f, spacing) for f in part.faces]
            pts = np.vstack([s[0] for s in samples])
            nrm = np.vstack([s[1] for s in samples])
        else:
            pts, nrm = _sample_frustum(part, spacing)
        keep = np.ones(len(pts), dtype=bool)
        for j, other in enumerate(parts):
            if j != i:
                keep &= ~other.contains(pts)
        pts_all.append(pts[keep])
        nrm_all.append(nrm[keep])
    return PointCloud(np.vstack(pts_all), np.vstack(nrm_all))


def shape_vertices(parts, n_circle=64):
    """Vertices of the parts (frusta discretized); handy for hull-based reasoning."""
    out = []
    for p in parts:
        if isinstance(p, PolyPart):
            for f in p.faces:
                out.append(f.origin + f.polygon[:, :1] * f.u + f.polygon[:, 1:] * f.v)
        else:
            th = np.linspace(0, 2 * np.pi, n_circle, endpoint=False)
            for z, r in ((p.z0, p.r0), (p.z1, p.r1)):
                out.append(np.column_stack([p.center[0] + r * np.cos(th), p.center[1] + r * np.sin(th),
                                            np.full(n_circle, z)]))
    return np.unique(np.round(np.vstack(out), 12), axis=0)


# ---------------------------------------------------------------------------
# ray casting

def _poly_interval(part: PolyPart, o, d):
    num = part.b[None, :] - o @ part.A.T
    den = d @ part.A.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / den
    enter = np.where(den < 0, t, -np.inf).max(axis=1)
    leave = np.where(den > 0, t, np.inf).min(axis=1)
    blocked = np.any((den == 0) & (num < 0), axis=1)
    leave = np.where(blocked, -np.inf, leave)
    return enter, leave


def _frustum_interval(part: FrustumPart, o, d):
    # z slab
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (part.z0 - o[:, 2]) / d[:, 2]
        tb = (part.z1 - o[:, 2]) / d[:, 2]
    flat = d[:, 2] == 0
    inside_z = (o[:, 2] >= part.z0) & (o[:, 2] <= part.z1)
    s0 = np.where(flat, np.where(inside_z, -np.inf, np.inf), np.minimum(ta, tb))
    s1 = np.where(flat, np.where(inside_z, np.inf, -np.inf), np.maximum(ta, tb))
    # cone: |xy| <= rho0 + rho1 t
    k = (part.r1 - part.r0) / (part.z1 - part.z0)
    X = o[:, 0] - part.center[0]
    Y = o[:, 1] - part.center[1]
    rho0 = part.r0 + k * (o[:, 2] - part.z0)
    rho1 = k * d[:, 2]
    A = d[:, 0] ** 2 + d[:, 1] ** 2 - rho1 ** 2
    B = 2 * (X * d[:, 0] + Y * d[:, 1] - rho0 * rho1)
    C = X ** 2 + Y ** 2 - rho0 ** 2
    disc = B * B - 4 * A * C
    sq = np.sqrt(np.maximum(disc, 0.0))
    eps = 1e-14
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = (-B - sq) / (2 * A)
        r2 = (-B + sq) / (2 * A)
        lin = -C / B
    lo_r, hi_r = np.minimum(r1, r2), np.maximum(r1, r2)
    c0 = np.full(len(o), np.inf)
    c1 = np.full(len(o), -np.inf)
    # A > 0: between the roots
    m = (A > eps) & (disc >= 0)
    c0[m], c1[m] = lo_r[m], hi_r[m]
    # A < 0: outside the roots, one nappe meets the slab
    m = A < -eps
    full = m & (disc < 0)
    c0[full], c1[full] = -np.inf, np.inf
    two = m & (disc >= 0)
    first_ok = np.minimum(s1, lo_r) >= s0
    c0[two] = np.where(first_ok, -np.inf, hi_r)[two]
    c1[two] = np.where(first_ok, lo_r, np.inf)[two]
    # A == 0: linear
    m = np.abs(A) <= eps
    pos = m & (B > 0)
    neg = m & (B < 0)
    zero = m & (B == 0)
    c0[pos], c1[pos] = -np.inf, lin[pos]
    c0[neg], c1[neg] = lin[neg], np.inf
    c0[zero & (C <= 0)], c1[zero & (C <= 0)] = -np.inf, np.inf
    return np.maximum(s0, c0), np.minimum(s1, c1)


def ray_hit_distance(parts, pose: Pose, origins, dirs):
    """Distance along each unit ray to the first entry into the object (inf if none)."""
    inv = pose.inverse()
    o = inv.apply(origins)
    d = inv.apply_vectors(dirs)
    best = np.full(len(o), np.inf)
    for part in parts:
        if isinstance(part, PolyPart):
            t0, t1 = _poly_interval(part, o, d)
        else:
            t0, t1 = _frustum_interval(part, o, d)
        hit = (t0 <= t1) & (t0 > 0)
        best = np.where(hit & (t0 < best), t0, best)
    return best


# ---------------------------------------------------------------------------
# scene objects

@dataclass
class GroundTruthObject:
    surface: PointCloud  # world frame
    center_of_mass: np.ndarray
    pose: Pose
    object_id: int
    shape_spec: ShapeSpec
    parts: list = field(repr=False, default_factory=list)
    canonical_surface: Optional[PointCloud] = field(repr=False, default=None)

    @classmethod
    def from_spec(cls, spec: ShapeSpec, pose: Pose, object_id: int, spacing=SURFACE_SPACING):
        parts = build_parts(spec)
        canon = sample_surface(parts, spacing)
        obj = cls(PointCloud.empty(), np.zeros(3), pose, object_id, spec, parts, canon)
        return obj.placed_at(pose)

    def placed_at(self, pose: Pose) -> "GroundTruthObject":
        surf = PointCloud(pose.apply(self.canonical_surface.points),
                          pose.apply_vectors(self.canonical_surface.normals))
        return replace(self, surface=surf, center_of_mass=pose.translation.copy(), pose=pose)

    def moved(self, displacement: Pose) -> "GroundTruthObject":
        return self.placed_at(displacement @ self.pose)


@dataclass
class Sensor:
    pose: Pose
    resolution: int = 240
    half_fov_tan: float = 0.25

    @property
    def position(self):
        return self.pose.translation


def overhead_sensor(height=1.0, center=(0.0, 0.0), resolution=240, half_width=0.25) -> Sensor:
    # camera z looks down; x right, y flipped
    R = np.diag([1.0, -1.0, -1.0])
    return Sensor(Pose(R, [center[0], center[1], height]), resolution, half_width / height)


def render_cloud(scene, sensor_pose: Pose | Sensor, resolution=240, half_fov_tan=0.25) -> PointCloud:
    """Z-buffered pinhole rendering; labels carry the true object ids."""
    if isinstance(sensor_pose, Sensor):
        resolution, half_fov_tan = sensor_pose.resolution, sensor_pose.half_fov_tan
        sensor_pose = sensor_pose.pose
    if sensor_pose.translation[2] <= 0:
        raise SceneError("sensor must be above the support plane")
    if len(scene) == 0:
        return PointCloud(np.zeros((0, 3)), labels=np.zeros(0, dtype=int))
    s = np.linspace(-half_fov_tan, half_fov_tan, resolution)
    u, v = np.meshgrid(s, s, indexing="ij")
    rays = np.column_stack([u.ravel(), v.ravel(), np.ones(u.size)])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    dirs = sensor_pose.apply_vectors(rays)
    origins = np.tile(sensor_pose.translation, (len(dirs), 1))
    best = np.full(len(dirs), np.inf)
    owner = np.full(len(dirs), -1)
    for obj in scene:
        t = ray_hit_distance(obj.parts, obj.pose, origins, dirs)
        closer = t < best
        best[closer] = t[closer]
        owner[closer] = obj.object_id
    hit = np.isfinite(best)
    pts = origins[hit] + best[hit, None] * dirs[hit]
    return PointCloud(pts, labels=owner[hit])


def visible_mask(scene, obj_index: int, sensor_position, tol=1e-6) -> np.ndarray:
    """True for surface points of scene[obj_index] with a clear line of sight."""
    p = scene[obj_index].surface.points
    diff = p - np.asarray(sensor_position, dtype=float)
    dist = np.linalg.norm(diff, axis=1)
    dirs = diff / dist[:, None]
    origins = np.tile(np.asarray(sensor_position, dtype=float), (len(p), 1))
    first = np.full(len(p), np.inf)
    for obj in scene:
        first = np.minimum(first, ray_hit_distance(obj.parts, obj.pose, origins, dirs))
    return first >= dist - tol


# ---------------------------------------------------------------------------
# scene generation

START_AREA = ((-0.15, 0.15), (-0.15, 0.15))

CANONICAL_CATALOG = (
    ShapeSpec("box", (0.04, 0.06, 0.10)),
    ShapeSpec("box", (0.05, 0.05, 0.03)),
    ShapeSpec("cylinder", (0.03, 0.09)),
    ShapeSpec("bottle", (0.03, 0.10, 0.012, 0.04)),
    ShapeSpec("lblock", (0.08, 0.04, 0.025, 0.025, 0.06)),
    ShapeSpec("wedge", (0.08, 0.05, 0.05)),
    ShapeSpec("box", (0.03, 0.07, 0.05)),
    ShapeSpec("cylinder", (0.025, 0.12)),
)


def random_spec(rng: np.random.Generator, kind: Optional[str] = None) -> ShapeSpec:
    kind = kind or rng.choice(["box", "cylinder", "bottle", "lblock", "wedge"])
    u = lambda lo, hi: float(np.round(rng.uniform(lo, hi), 4))
    if kind == "box":
        dims = (u(0.03, 0.07), u(0.03, 0.08), u(0.03, 0.10))
    elif kind == "cylinder":
        dims = (u(0.02, 0.035), u(0.05, 0.12))
    elif kind == "bottle":
        r = u(0.025, 0.035)
        dims = (r, u(0.08, 0.12), float(np.round(0.4 * r, 4)), u(0.03, 0.045))
    elif kind == "lblock":
        dims = (u(0.06, 0.09), u(0.03, 0.05), u(0.02, 0.03), u(0.02, 0.03), u(0.05, 0.08))
    else:
        dims = (u(0.05, 0.08), u(0.03, 0.06), u(0.04, 0.07))
    return ShapeSpec(str(kind), dims)


def stable_rest_rotations(obj: GroundTruthObject, delta=0.003, eps_hull=0.002):
    """Rotations (canonical -> world, yaw zero) under which the object rests stably."""
    from scipy.spatial import ConvexHull
    from .grasp_place import check_stable

    pts = obj.canonical_surface.points
    hull = ConvexHull(pts)
    normals = np.unique(np.round(hull.equations[:, :3], 6), axis=0)
    out = []
    for n in normals:
        R = rotation_between(n, [0.0, 0.0, -1.0])
        if check_stable(obj.canonical_surface, Pose(R), np.zeros(3), delta, eps_hull):
            out.append(R)
    return out


def rest_pose(obj: GroundTruthObject, R: np.ndarray, xy, yaw: float) -> Pose:
    Rz = rotation_from_axis_angle([0, 0, 1], yaw)
    R = Rz @ R
    z = -(obj.canonical_surface.points @ R.T)[:, 2].min()
    return Pose(R, [xy[0], xy[1], z])


_BASE_CACHE = {}


def _base_object(spec: ShapeSpec, spacing):
    """Canonical object and its stable rests, memoized per shape."""
    key = (spec.key(), spacing)
    if key not in _BASE_CACHE:
        base = GroundTruthObject.from_spec(spec, Pose.identity(), 0, spacing)
        _BASE_CACHE[key] = (base, stable_rest_rotations(base))
    return _BASE_CACHE[key]


def generate_scene(seed: int, task: str = "packing", n_obj: Optional[int] = None,
                   area=START_AREA, min_separation=0.01, spacing=SURFACE_SPACING,
                   specs=None) -> list:
    """Non-overlapping objects resting on z = 0, deterministic in seed."""
    if task not in TASKS:
        raise SceneError(f"unknown task {task!r}")
    if n_obj is None:
        n_obj = {"packing": 6, "bottles": 3, "canonical": 5}[task]
    if n_obj < 1:
        raise SceneError("n_obj must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, "scene", task))
    if specs is None:
        if task == "canonical":
            idx = rng.choice(len(CANONICAL_CATALOG), size=n_obj, replace=n_obj > len(CANONICAL_CATALOG))
            specs = [CANONICAL_CATALOG[i] for i in idx]
        elif task == "bottles":
            specs = [random_spec(rng, "bottle") for _ in range(min(2, n_obj))]
            specs += [random_spec(rng) for _ in range(n_obj - len(specs))]
        else:
            specs = [random_spec(rng) for _ in range(n_obj)]
    scene, trees, attempts = [], [], 0
    for i, spec in enumerate(specs):
        base, rests = _base_object(spec, spacing)
        base = replace(base, object_id=i)
        while True:
            attempts += 1
            if attempts > 10_000:
                raise SceneError("could not place objects without overlap")
            R = rests[rng.integers(len(rests))]
            xy = (rng.uniform(*area[0]), rng.uniform(*area[1]))
            obj = base.placed_at(rest_pose(base, R, xy, rng.uniform(0, 2 * np.pi)))
            if all(t.query(obj.surface.points, k=1)[0].min() >= min_separation for t in trees):
                scene.append(obj)
                trees.append(cKDTree(obj.surface.points))
                break
    return scene


# ---------------------------------------------------------------------------
# perception

@dataclass
class NoiseSpec:
    """Completion noise scale, segmentation flip rates, and the accuracy radius."""

    beta: float = 0.005
    sigma_range: tuple = (0.0005, 0.006)
    flip_prob_range: tuple = (0.0, 0.1)
    seed: int = 0
    visible_scale: float = 0.25
    correlation_length: float = 0.06

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        for name, (lo, hi) in (("sigma_range", self.sigma_range), ("flip_prob_range", self.flip_prob_range)):
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be nonnegative and ordered")
        if self.flip_prob_range[1] >= 1:
            raise ValueError("flip probability must stay below 1")
        if not 0 <= self.visible_scale <= 1:
            raise ValueError("visible_scale must lie in [0, 1]")
        if self.correlation_length < 0:
            raise ValueError("correlation_length must be nonnegative")


@dataclass
class PerceivedObject:
    completed: PointCloud
    completion_uncertainty: np.ndarray
    segmentation_uncertainty: np.ndarray
    observed: PointCloud
    true_id: int
    sigma_true: Optional[np.ndarray] = field(default=None, repr=False)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.completed)
        self.completion_uncertainty = np.minimum(np.asarray(self.completion_uncertainty, float), UBAR_MAX)
        self.segmentation_uncertainty = np.asarray(self.segmentation_uncertainty, float)
        if self.completion_uncertainty.shape != (n,) or self.segmentation_uncertainty.shape != (n,):
            raise ValueError("one uncertainty entry per completed point")
        for u in (self.completion_uncertainty, self.segmentation_uncertainty):
            if n and (u.min() <= 0 or u.max() > 1):
                raise ValueError("uncertainties must lie in (0, 1]")

    @property
    def com_estimate(self) -> np.ndarray:
        return volume_centroid(self.completed.points)

    def moved(self, displacement: Pose) -> "PerceivedObject":
        from .geom import transform_cloud
        return replace(self, completed=transform_cloud(displacement, self.completed),
                       observed=transform_cloud(displacement, self.observed), cache={})


def volume_centroid(points: np.ndarray) -> np.ndarray:
    """Centroid of the solid convex hull, falling back to the point mean."""
    from scipy.spatial import ConvexHull
    if len(points) < 4:
        return points.mean(axis=0) if len(points) else np.zeros(3)
    try:
        hull = ConvexHull(points)
    except Exception:
        return points.mean(axis=0)
    apex = points[hull.vertices].mean(axis=0)
    tri = points[hull.simplices]
    vol = np.abs(np.einsum("ij,ij->i", tri[:, 0] - apex, np.cross(tri[:, 1] - apex, tri[:, 2] - apex))) / 6
    if vol.sum() <= 0:
        return points.mean(axis=0)
    cent = (tri.sum(axis=1) + apex) / 4
    return (vol[:, None] * cent).sum(axis=0) / vol.sum()


def ubar_from_sigma(sigma, beta):
    """P(|N(0, sigma^2)| <= beta), clamped below 1."""
    sigma = np.asarray(sigma, dtype=float)
    with np.errstate(divide="ignore"):
        u = np.where(sigma > 0, erf(beta / (np.maximum(sigma, 1e-300) * np.sqrt(2.0))), 1.0)
    return np.minimum(u, UBAR_MAX)


def smooth_uniform(rng: np.random.Generator, points, length: float, n_features: int = 64) -> np.ndarray:
    """Per-point values with Uniform(0, 1) marginals.

    length 0 gives independent draws; otherwise a random Fourier feature
    Gaussian field with that length scale is pushed through the normal CDF.
    """
    if length <= 0:
        return rng.uniform(size=len(points))
    W = rng.normal(scale=1.0 / length, size=(n_features, 3))
    b = rng.uniform(0, 2 * np.pi, n_features)
    z = np.sqrt(2.0 / n_features) * np.cos(points @ W.T + b).sum(axis=1)
    return special.ndtr(z)


def random_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def orient_normals(normals, reference):
    flip = np.einsum("ij,ij->i", normals, reference) < 0
    out = normals.copy()
    out[flip] *= -1
    return out


def rotate_between_batch(a, b, x):
    """Apply, row-wise, the smallest rotation taking unit a onto unit b to x."""
    v = np.cross(a, b)
    c = np.einsum("ij,ij->i", a, b)
    vx = np.einsum("ij,ij->i", v, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(c > -1 + 1e-12, vx / (1 + c), 0.0)
    out = x * c[:, None] + np.cross(v, x) + v * k[:, None]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def perturbed_normals(clean_pts, noisy_pts, clean_normals, k=None):
    """Clean normals rotated by the change in local PCA normal caused by the noise.

    With zero noise the clean normals come back unchanged, sharp edges included.
    """
    k = NORMAL_K if k is None else k
    idx = cKDTree(clean_pts).query(clean_pts, k=min(k, len(clean_pts)))[1]
    a = orient_normals(pca_normals(clean_pts, idx), clean_normals)
    b = orient_normals(pca_normals(noisy_pts, idx), a)
    return rotate_between_batch(a, b, clean_normals)


def pca_normals(points, idx):
    nb = points[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", nb, nb))
    return vecs[:, :, 0]


def segment_observed(scene, observed: PointCloud, flip_range, rng):
    """Flip labels per point; returns (labels, U)."""
    ids = np.array([o.object_id for o in scene])
    n = len(observed)
    true = observed.labels
    q = rng.uniform(flip_range[0], flip_range[1], size=n) if len(ids) > 1 else np.zeros(n)
    flip = rng.uniform(size=n) < q
    labels = true.copy()
    if len(ids) > 1 and flip.any():
        # uniform over the other ids: skip the true id's slot
        ids = np.sort(ids)
        slot = np.searchsorted(ids, true[flip])
        j = rng.integers(0, len(ids) - 1, size=flip.sum())
        labels[flip] = ids[j + (j >= slot)]
    return labels, 1.0 - q


def corrupt_perception(scene, observed: PointCloud, noise: NoiseSpec,
                       sensor_position=(0.0, 0.0, 1.0), flip_segmentation=True) -> list:
    """Perceived objects with calibration-exact segmentation and completion uncertainty."""
    rng = np.random.default_rng(derive_seed(noise.seed, "perception"))
    flip_range = noise.flip_prob_range if flip_segmentation else (0.0, 0.0)
    labels, U_obs = segment_observed(scene, observed, flip_range, rng)
    lo, hi = noise.sigma_range
    out = []
    for k, obj in enumerate(scene):
        seg = labels == obj.object_id
        if not seg.any():
            continue
        orng = np.random.default_rng(derive_seed(noise.seed, "completion", obj.object_id))
        surf = obj.surface
        vis = visible_mask(scene, k, sensor_position)
        # visible points draw from the low visible_scale share of the range
        top = np.where(vis, lo + noise.visible_scale * (hi - lo), hi)
        sigma = lo + smooth_uniform(orng, surf.points, noise.correlation_length) * (top - lo)
        offsets = random_directions(orng, len(surf)) * (orng.normal(size=len(surf)) * sigma)[:, None]
        pts = surf.points + offsets
        normals = perturbed_normals(surf.points, pts, surf.normals)
        seg_pts = observed.points[seg]
        nn = nearest_neighbor_indices(pts, seg_pts)
        out.append(PerceivedObject(
            PointCloud(pts, normals),
            ubar_from_sigma(sigma, noise.beta),
            U_obs[seg][nn],
            PointCloud(seg_pts, labels=labels[seg]),
            obj.object_id,
            sigma,
        ))
    return out


def perceive(scene, mode: str, noise: NoiseSpec, sensor: Optional[Sensor] = None) -> list:
    """Run the sensor and one of the perception conditions."""
    if mode not in PERCEPTION_MODES:
        raise SceneError(f"unknown perception mode {mode!r}")
    sensor = sensor or overhead_sensor()
    observed = render_cloud(scene, sensor)
    if mode == "corrupted":
        return corrupt_perception(scene, observed, noise, sensor.position)
    if mode == "gt_segmentation":
        return corrupt_perception(scene, observed, noise, sensor.position, flip_segmentation=False)
    out = []
    for obj in scene:
        seg = observed.labels == obj.object_id
        if not seg.any():
            continue
        seg_cloud = PointCloud(observed.points[seg], labels=observed.labels[seg])
        if mode == "ground_truth":
            n = len(obj.surface)
            out.append(PerceivedObject(PointCloud(obj.surface.points.copy(), obj.surface.normals.copy()),
                                       np.full(n, UBAR_MAX), np.ones(n), seg_cloud, obj.object_id,
                                       np.zeros(n)))
        else:
            pts = seg_cloud.points
            if len(pts) < 3:
                continue
            toward = sensor.position - pts
            normals = orient_normals(estimate_normals(pts), toward)
            n = len(pts)
            out.append(PerceivedObject(PointCloud(pts, normals), np.full(n, UBAR_MAX), np.ones(n),
                                       seg_cloud, obj.object_id, np.zeros(n)))
    return out


# ---------------------------------------------------------------------------
# csv dumps

CSV_COLUMNS = ["x", "y", "z", "nx", "ny", "nz", "object_id", "U", "Ubar"]


def write_perception_csv(path, objects) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for o in objects:
            P, N = o.completed.points, o.completed.normals
            for i in range(len(P)):
                w.writerow([*(f"{v:.9g}" for v in P[i]), *(f"{v:.9g}" for v in N[i]), o.true_id,
                            f"{o.segmentation_uncertainty[i]:.9g}", f"{o.completion_uncertainty[i]:.9g}"])


def read_perception_csv(path) -> list:
    rows = np.genfromtxt(path, delimiter=",", names=True)
    rows = np.atleast_1d(rows)
    out = []
    for oid in np.unique(rows["object_id"]).astype(int):
        r = rows[rows["object_id"] == oid]
        P = np.column_stack([r["x"], r["y"], r["z"]])
        N = np.column_stack([r["nx"], r["ny"], r["nz"]])
        N /= np.linalg.norm(N, axis=1, keepdims=True)
        out.append(PerceivedObject(PointCloud(P, N), r["Ubar"], r["U"], PointCloud.empty(), int(oid)))
    return out


def write_scene_csv(path, scene) -> None:
    """Ground-truth surfaces in the same column layout (U = Ubar = 1)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for o in scene:
            for p, n in zip(o.surface.points, o.surface.normals):
                w.writerow([*(f"{v:.9g}" for v in p), *(f"{v:.9g}" for v in n), o.object_id, 1, 1])


__all__ = [
    "ShapeSpec", "GroundTruthObject", "PerceivedObject", "NoiseSpec", "Sensor",
    "generate_scene", "render_cloud", "corrupt_perception", "perceive", "visible_mask",
    "overhead_sensor", "build_parts", "sample_surface", "CANONICAL_CATALOG", "EmptyCloudError",
]
