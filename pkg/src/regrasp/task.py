"""Arrangement planners that turn a task into goal triples (pose, cost, object)."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .geom import Pose, random_rotation, rotation_between
from .grasp_place import DELTA, EPS_HULL, check_stable
from .scene import CANONICAL_CATALOG, GroundTruthObject, ShapeSpec, stable_rest_rotations

GOAL_AREA = (0.30, 0.22)


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class GoalTriple:
    """pose is the displacement taking the object from its current pose to the goal."""

    pose: Pose
    cost: float
    object_index: int

    def __post_init__(self):
        if not np.isfinite(self.cost):
            raise TaskError("goal cost must be finite")


def _cloud(obj):
    return obj.completed.points if hasattr(obj, "completed") else np.asarray(obj, dtype=float)


def _com(obj):
    return obj.com_estimate if hasattr(obj, "com_estimate") else _cloud(obj).mean(axis=0)


# ---------------------------------------------------------------------------
# packing

@dataclass(frozen=True)
class BinSpec:
    center: tuple = (0.0, 0.36)
    inner: tuple = (0.26, 0.26)
    wall_height: float = 0.10
    cell: float = 0.005

    @property
    def lo(self):
        return np.array(self.center) - np.array(self.inner) / 2

    @property
    def hi(self):
        return np.array(self.center) + np.array(self.inner) / 2

    def wall_points(self, spacing=0.005, thickness=0.0):
        """Points on the four inner wall faces, used as obstacles."""
        lo, hi = self.lo - thickness, self.hi + thickness
        zs = np.arange(spacing / 2, self.wall_height, spacing)
        xs = np.arange(lo[0], hi[0] + 1e-9, spacing)
        ys = np.arange(lo[1], hi[1] + 1e-9, spacing)
        out = []
        for x in (lo[0], hi[0]):
            Y, Z = np.meshgrid(ys, zs)
            out.append(np.column_stack([np.full(Y.size, x), Y.ravel(), Z.ravel()]))
        for y in (lo[1], hi[1]):
            X, Z = np.meshgrid(xs, zs)
            out.append(np.column_stack([X.ravel(), np.full(X.size, y), Z.ravel()]))
        return np.vstack(out)


def axis_rotations():
    """The 24 proper rotations that permute the coordinate axes."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            R = np.zeros((3, 3))
            R[np.arange(3), perm] = signs
            if np.linalg.det(R) > 0:
                out.append(R)
    return out


class HeightMap:
    """Column-wise top surface of the bin contents."""

    def __init__(self, spec: BinSpec):
        self.spec = spec
        self.shape = tuple(np.floor(np.array(spec.inner) / spec.cell + 1e-9).astype(int))
        self.top = np.zeros(self.shape)

    def cells(self, xy):
        ij = np.floor((xy - self.spec.lo) / self.spec.cell).astype(int)
        return ij

    def add(self, pts):
        ij = self.cells(pts[:, :2])
        ok = np.all((ij >= 0) & (ij < self.shape), axis=1)
        np.maximum.at(self.top, (ij[ok, 0], ij[ok, 1]), pts[ok, 2])

    @property
    def height(self) -> float:
        return float(self.top.max())


def principal_frame(points):
    """Right-handed principal axes of a cloud as columns, largest last."""
    X = points - points.mean(axis=0)
    _, vecs = np.linalg.eigh(X.T @ X)
    if np.linalg.det(vecs) < 0:
        vecs[:, 0] *= -1
    return vecs


def _footprint(pts, cell):
    """Bottom profile of a cloud on a cell grid anchored at its xy minimum."""
    xy0 = pts[:, :2].min(axis=0)
    ij = np.floor((pts[:, :2] - xy0) / cell).astype(int)
    shape = tuple(ij.max(axis=0) + 1)
    bottom = np.full(shape, np.inf)
    np.minimum.at(bottom, (ij[:, 0], ij[:, 1]), pts[:, 2])
    return bottom, xy0


def best_drops(hm: HeightMap, pts):
    """Lowest resting z for each footprint offset, with the footprint's clearance.

    Returns (z, clearance, offsets) over all fits.  Clearance is the distance
    from the footprint to the nearest wall or occupied cell, so ties in height
    can go to spots that leave room for the fingers.
    """
    bottom, _ = _footprint(pts, hm.spec.cell)
    fx, fy = bottom.shape
    gx, gy = hm.shape
    if fx > gx or fy > gy:
        return np.zeros(0), np.zeros(0), np.zeros((0, 2), dtype=int)
    mask = np.isfinite(bottom)
    bi, bj = np.nonzero(mask)
    bz = bottom[bi, bj]
    nx, ny = gx - fx + 1, gy - fy + 1
    free = np.pad(hm.top <= 1e-9, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(free)[1:-1, 1:-1] * hm.spec.cell
    z = np.full((nx, ny), -np.inf)
    clear = np.full((nx, ny), np.inf)
    for a, b, h in zip(bi, bj, bz):
        z = np.maximum(z, hm.top[a:a + nx, b:b + ny] - h)
        clear = np.minimum(clear, dist[a:a + nx, b:b + ny])
    ox, oy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    return z.ravel(), clear.ravel(), np.column_stack([ox.ravel(), oy.ravel()])


def packing_goals(objects, box: BinSpec = BinSpec(), n_goal: int = 5, placed=(), seed: int = 0,
                  n_random: int = 16, delta=DELTA, eps_hull=EPS_HULL) -> list:
    """Goals that keep the stack low, sorted by estimated height in centimeters.

    Each object is tried in the 24 orientations that permute its principal
    axes onto the bin axes and n_random random ones, keeping those stable on a flat support; every orientation
    is dropped at every footprint offset onto the current height map.  Ties in
    height go to the most clearance from walls and placed objects, then to the
    lowest (y, x) offset.
    """
    hm = HeightMap(box)
    for cloud in placed:
        hm.add(np.asarray(cloud, dtype=float))
    rng = np.random.default_rng(seed)
    random_rots = [random_rotation(rng) for _ in range(n_random)]
    out = []
    for idx, obj in enumerate(objects):
        P = _cloud(obj)
        if len(P) < 4:
            continue
        com = _com(obj)
        F = principal_frame(P)
        rotations = [A @ F.T for A in axis_rotations()] + random_rots
        cands = []
        for R in rotations:
            local = (P - com) @ R.T
            zmin = local[:, 2].min()
            local[:, 2] -= zmin
            if not check_stable(local, Pose.identity(), np.array([0.0, 0.0, -zmin]), delta, eps_hull):
                continue
            z, clear, offs = best_drops(hm, local)
            if len(z) == 0:
                continue
            top = z + local[:, 2].max()
            height = np.round(np.maximum(top, hm.height), 9)
            order = np.lexsort((offs[:, 0], offs[:, 1], -clear, height))
            k = order[0]
            cands.append((height[k], k, R, z[k] - zmin, offs[k], local))
        cands.sort(key=lambda c: (c[0], c[1]))
        for height, _, R, dz, off, local in cands[:n_goal]:
            xy0 = local[:, :2].min(axis=0)
            shift = box.lo + off * box.cell - xy0 + 1e-9
            t = np.array([shift[0], shift[1], dz]) - R @ com
            out.append(GoalTriple(Pose(R, t), float(100.0 * height), idx))
    out.sort(key=lambda g: (g.cost, g.object_index))
    return out


# ---------------------------------------------------------------------------
# bottles

@dataclass(frozen=True)
class Coaster:
    center: tuple
    radius: float = 0.045


DEFAULT_COASTERS = (Coaster((0.32, 0.12)), Coaster((0.32, 0.27)))


def principal_axis(points):
    return principal_frame(points)[:, -1]


def bottle_up_axis(points):
    """Principal axis pointing from the wide end toward the narrow end."""
    a = principal_axis(points)
    s = (points - points.mean(axis=0)) @ a
    radial = np.linalg.norm((points - points.mean(axis=0)) - np.outer(s, a), axis=1)
    lo, hi = np.quantile(s, [0.2, 0.8])
    return a if radial[s <= lo].mean() >= radial[s >= hi].mean() else -a


def free_coasters(coasters, clouds, clearance=0.0):
    """Coasters with no cloud point over their disk."""
    pts = np.vstack([np.asarray(c, float).reshape(-1, 3) for c in clouds]) if len(clouds) else np.zeros((0, 3))
    out = []
    for c in coasters:
        d = np.linalg.norm(pts[:, :2] - np.asarray(c.center), axis=1) if len(pts) else np.zeros(0)
        if not (d <= c.radius + clearance).any():
            out.append(c)
    return out


def bottle_goals(objects, coasters: Sequence[Coaster] = DEFAULT_COASTERS, occupied=(),
                 indices: Optional[Sequence[int]] = None) -> list:
    """Upright placements centered on free coasters, cost 0."""
    free = [c for k, c in enumerate(coasters) if k not in set(occupied)]
    if not free:
        return []
    out = []
    indices = range(len(objects)) if indices is None else indices
    for idx in indices:
        P = _cloud(objects[idx])
        up = bottle_up_axis(P)
        R = rotation_between(up, [0.0, 0.0, 1.0])
        local = P @ R.T
        s = (P - P.mean(axis=0)) @ up
        base = P.mean(axis=0) + up * s.min()
        base_r = R @ base
        for c in free:
            t = np.array([c.center[0] - base_r[0], c.center[1] - base_r[1], -local[:, 2].min()])
            out.append(GoalTriple(Pose(R, t), 0.0, idx))
    return out


# ---------------------------------------------------------------------------
# canonical

@dataclass
class OracleTable:
    """Fixed goal pose (canonical frame to world) per shape spec."""

    poses: dict = field(default_factory=dict)

    def goal_pose(self, spec: ShapeSpec) -> Pose:
        key = spec.spec_hash()
        if key not in self.poses:
            raise TaskError(f"shape {spec.key()} is not in the oracle table")
        return self.poses[key]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for key in sorted(self.poses):
                vals = " ".join(f"{float(v)!r}" for v in self.poses[key].matrix[:3].ravel())
                fh.write(f"{key} {vals}\n")

    @classmethod
    def load(cls, path) -> "OracleTable":
        poses = {}
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                M = np.array([float(v) for v in parts[1:13]]).reshape(3, 4)
                poses[parts[0]] = Pose(M[:, :3], M[:, 3])
        return cls(poses)


def build_oracle_table(specs=CANONICAL_CATALOG, area=GOAL_AREA, yaw=0.5) -> OracleTable:
    """One stable resting pose per spec: the rest with the highest com, at a fixed yaw."""
    from .scene import rest_pose
    poses = {}
    for spec in specs:
        obj = GroundTruthObject.from_spec(spec, Pose.identity(), 0)
        rests = stable_rest_rotations(obj)
        if not rests:
            raise TaskError(f"no stable rest for {spec.key()}")
        # the tallest rest makes the task need regrasps more often
        heights = [-(obj.canonical_surface.points @ R.T)[:, 2].min() for R in rests]
        R = rests[int(np.argmax(np.round(heights, 9)))]
        poses[spec.spec_hash()] = rest_pose(obj, R, area, yaw)
    return OracleTable(poses)


def canonical_goals(object_index: int, oracle_table: OracleTable, spec: ShapeSpec,
                    current_pose: Pose) -> list:
    """The oracle's single goal, as a displacement from current_pose."""
    T = oracle_table.goal_pose(spec)
    return [GoalTriple(T @ current_pose.inverse(), 0.0, object_index)]
