"""Grasp and placement candidates plus the deterministic antipodal and stability checks.

Gripper frame: x is the closing axis (right finger at +x), z the approach axis,
y = z cross x.  The closing region is the box between the finger pads; the palm
sits behind it along -z.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull

from .geom import (
    DegenerateHullError,
    GeometryError,
    PointCloud,
    Pose,
    hull_depth_2d,
    rotation_between,
    rotation_from_axis_angle,
)

THETA_MAX = np.radians(12.0)
DELTA = 0.003
EPS_HULL = 0.002
CONTACT_BAND = 0.001
TEMP_AREA = (0.30, -0.25)
HINT_JITTER = np.radians(45.0)


class NoContactError(GeometryError):
    pass


@dataclass(frozen=True)
class GripperModel:
    """Parallel-jaw gripper; default aperture matches a common 8.5 cm two-finger hand."""

    max_aperture: float = 0.085
    finger_width: float = 0.02
    finger_depth: float = 0.045
    finger_thickness: float = 0.01
    palm_depth: float = 0.02
    wrist_length: float = 0.08
    wrist_half_width: float = 0.025

    def __post_init__(self):
        if self.max_aperture <= 0 or self.finger_width <= 0 or self.finger_depth <= 0:
            raise ValueError("gripper dimensions must be positive")

    @property
    def closing_region(self):
        h = np.array([self.max_aperture, self.finger_width, self.finger_depth]) / 2
        return -h, h

    def body_boxes(self):
        """Finger, palm and wrist boxes as (lo, hi) pairs in the gripper frame."""
        a, w, d, t = self.max_aperture / 2, self.finger_width / 2, self.finger_depth / 2, self.finger_thickness
        pz = -d - self.palm_depth
        ww = self.wrist_half_width
        return [
            (np.array([a, -w, -d]), np.array([a + t, w, d])),
            (np.array([-a - t, -w, -d]), np.array([-a, w, d])),
            (np.array([-a - t, -w, pz]), np.array([a + t, w, -d])),
            (np.array([-ww, -ww, pz - self.wrist_length]), np.array([ww, ww, pz])),
        ]

    @property
    def reach(self):
        """Radius of a ball about the gripper origin enclosing the body."""
        corners = np.vstack([np.vstack([lo, hi]) for lo, hi in self.body_boxes()])
        return float(np.linalg.norm(np.abs(corners).max(axis=0)))


@dataclass
class Grasp:
    pose: Pose
    contact_left: int = -1
    contact_right: int = -1

    @property
    def closing_axis(self):
        return self.pose.rotation[:, 0]

    @property
    def approach_axis(self):
        return self.pose.rotation[:, 2]


@dataclass
class Place:
    pose: Pose  # displacement of the object from its current pose
    support_contacts: tuple = ()
    is_goal: bool = False
    goal_cost: Optional[float] = None


def _points(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)


def in_box(pts, lo, hi, margin=0.0):
    return np.all((pts >= lo - margin) & (pts <= hi + margin), axis=1)


def closing_region_indices(grasp: Grasp, cloud, gripper: GripperModel = GripperModel()):
    local = grasp.pose.inverse().apply(_points(cloud))
    lo, hi = gripper.closing_region
    idx = np.flatnonzero(in_box(local, lo, hi))
    return idx, local[idx]


def closing_region_points(grasp: Grasp, cloud, gripper: GripperModel = GripperModel()) -> PointCloud:
    """Cloud points inside the closing region, in the gripper frame."""
    idx, local = closing_region_indices(grasp, cloud, gripper)
    normals = None
    if isinstance(cloud, PointCloud) and cloud.normals is not None:
        normals = grasp.pose.inverse().apply_vectors(cloud.normals[idx])
    return PointCloud(local, normals)


def _extremal(local, sign, band):
    x = sign * local[:, 0]
    cand = np.flatnonzero(x >= x.max() - band)
    rad = local[cand, 1] ** 2 + local[cand, 2] ** 2
    return cand[int(np.argmin(rad))]


def grasp_contacts(shape, grasp: Grasp, gripper: GripperModel = GripperModel(), band=CONTACT_BAND):
    """Index of the first point each finger touches: (left, right).

    Among points within `band` of the extreme along the closing axis, the one
    nearest the closing line wins; remaining ties go to the lowest index.
    """
    idx, local = closing_region_indices(grasp, shape, gripper)
    if len(idx) == 0:
        raise NoContactError("closing region is empty")
    return int(idx[_extremal(local, -1, band)]), int(idx[_extremal(local, 1, band)])


def contact_angles(points, normals, left: int, right: int):
    """Angles between each contact normal and the outward contact-line direction."""
    pl, pr = points[left], points[right]
    d = pr - pl
    n = np.linalg.norm(d)
    if n == 0:
        return np.pi, np.pi
    b = d / n
    tl = np.arccos(np.clip(-b @ normals[left], -1, 1))
    tr = np.arccos(np.clip(b @ normals[right], -1, 1))
    return float(tl), float(tr)


def check_antipodal(shape: PointCloud, grasp: Grasp, theta_max=THETA_MAX,
                    gripper: GripperModel = GripperModel(), band=CONTACT_BAND) -> bool:
    if shape.normals is None:
        raise GeometryError("antipodal check needs normals")
    left, right = grasp_contacts(shape, grasp, gripper, band)
    if left == right:
        return False
    tl, tr = contact_angles(shape.points, shape.normals, left, right)
    return tl <= theta_max and tr <= theta_max


def body_collides(grasp_pose: Pose, obstacles, gripper: GripperModel = GripperModel(), margin=0.0) -> bool:
    pts = _points(obstacles)
    if len(pts) == 0:
        return False
    local = grasp_pose.inverse().apply(pts)
    return any(in_box(local, lo, hi, margin).any() for lo, hi in gripper.body_boxes())


# ---------------------------------------------------------------------------
# grasp sampling

def anchor_partners(P, N, anchors, max_width, theta_max):
    """For each anchor, the points whose normal opposes it along the connecting line."""
    cos_t = np.cos(theta_max)
    d = P[anchors, None, :] - P[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    with np.errstate(invalid="ignore", divide="ignore"):
        u = d / dist[..., None]
    ok = (dist > 1e-9) & (dist <= max_width)
    ok &= np.einsum("ijk,ik->ij", u, N[anchors]) >= cos_t
    ok &= -np.einsum("ijk,jk->ij", u, N) >= cos_t
    return [np.flatnonzero(r) for r in ok]


def _box_mask(xyz, lo, hi, margin=0.0):
    x, y, z = xyz
    return ((x >= lo[0] - margin) & (x <= hi[0] + margin) & (y >= lo[1] - margin)
            & (y <= hi[1] + margin) & (z >= lo[2] - margin) & (z <= hi[2] + margin))


def batch_contacts(xyz, valid=None, band=CONTACT_BAND, gripper: GripperModel = GripperModel()):
    """Vectorized grasp_contacts over a batch of clouds in gripper frames.

    xyz holds three B x n coordinate arrays; returns (left, right, nonempty).
    """
    lo, hi = gripper.closing_region
    inr = _box_mask(xyz, lo, hi)
    if valid is not None:
        inr &= valid
    x = xyz[0]
    rad = xyz[1] ** 2 + xyz[2] ** 2
    xmax = np.where(inr, x, -np.inf).max(axis=1, keepdims=True)
    xmin = np.where(inr, x, np.inf).min(axis=1, keepdims=True)
    right = np.argmin(np.where(inr & (x >= xmax - band), rad, np.inf), axis=1)
    left = np.argmin(np.where(inr & (x <= xmin + band), rad, np.inf), axis=1)
    return left, right, inr.any(axis=1)


def _antipodal_rows(pl, pr, nl, nr, theta_max):
    d = pr - pl
    n = np.linalg.norm(d, axis=1)
    ok = n > 0
    b = d / np.where(ok, n, 1.0)[:, None]
    # compare angles, not cosines, to match the scalar check exactly
    tl = np.arccos(np.clip(np.sum(-b * nl, axis=1), -1, 1))
    tr = np.arccos(np.clip(np.sum(b * nr, axis=1), -1, 1))
    return ok & (tl <= theta_max) & (tr <= theta_max)


def batch_antipodal(points, normals, left, right, theta_max=THETA_MAX):
    """Antipodal test on per-row contacts; points/normals are B x n x 3."""
    r = np.arange(len(points))
    return _antipodal_rows(points[r, left], points[r, right], normals[r, left], normals[r, right], theta_max)


def _frames_from_pairs(P, i, j, psi, s):
    x = P[i] - P[j]
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    helper = np.where(np.abs(x[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
    e1 = np.cross(x, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(x, e1)
    z = np.cos(psi)[:, None] * e1 + np.sin(psi)[:, None] * e2
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=2)
    t = (P[i] + P[j]) / 2 - s[:, None] * z
    return R, t


def _roll_toward(P, i, j, d):
    """Roll about each contact line that turns the approach axis closest to d."""
    x = P[i] - P[j]
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    helper = np.where(np.abs(x[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
    e1 = np.cross(x, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(x, e1)
    return np.arctan2(np.sum(d * e2, axis=1), np.sum(d * e1, axis=1))


def _to_local(R, t, pts):
    """Gripper-frame coordinates of pts for a batch of frames, as three B x n arrays."""
    return tuple(R[:, :, k] @ pts.T - np.sum(R[:, :, k] * t, axis=1)[:, None] for k in range(3))


def sample_grasps(obj, gripper: GripperModel = GripperModel(), count: int = 50, seed: int = 0,
                  theta_max=THETA_MAX, others=(), band=CONTACT_BAND, max_proposals=None,
                  approach_hints=()) -> list:
    """Antipodal point-pair grasps on the completed cloud.

    Proposal: a uniform anchor point, a uniform partner among points whose normal
    opposes it within theta_max inside the aperture, a roll about the contact
    line and a uniform offset along the approach.  A proposal is kept if the
    closing region holds points of this object alone, the gripper body misses
    the object, and the re-derived contacts pass the antipodal check.

    The roll is uniform, or with approach_hints (object-frame directions) half
    the proposals turn the approach toward a random hint, give or take
    HINT_JITTER.
    """
    cloud = obj.completed if hasattr(obj, "completed") else obj
    P, N = cloud.points, cloud.normals
    if N is None:
        raise GeometryError("grasp sampling needs normals")
    rng = np.random.default_rng(seed)
    if len(P) < 2:
        return []
    cache = getattr(obj, "cache", None)
    key = ("partners", gripper.max_aperture, float(theta_max))
    table = cache.setdefault(key, {}) if cache is not None else {}
    other_pts = np.vstack([_points(o) for o in others]) if len(others) else np.zeros((0, 3))
    if len(other_pts):
        c = P.mean(axis=0)
        rad = np.linalg.norm(P - c, axis=1).max() + gripper.reach
        other_pts = other_pts[np.linalg.norm(other_pts - c, axis=1) <= rad]
    hints = np.asarray(approach_hints, dtype=float).reshape(-1, 3)
    half_d = gripper.finger_depth / 2
    lo_r, hi_r = gripper.closing_region
    boxes = gripper.body_boxes()
    max_proposals = 50 * count if max_proposals is None else max_proposals
    batch = max(32, 2 * count)
    out, used = [], 0
    while len(out) < count and used < max_proposals:
        B = min(batch, max_proposals - used)
        used += B
        i = rng.integers(len(P), size=B)
        pick = rng.random(B)
        psi = rng.uniform(0, 2 * np.pi, size=B)
        s = rng.uniform(-0.8 * half_d, 0.8 * half_d, size=B)
        hinted = np.zeros(B, dtype=bool)
        if len(hints):
            hinted = rng.random(B) < 0.5
            hint = rng.integers(len(hints), size=B)
            jitter = rng.uniform(-HINT_JITTER, HINT_JITTER, size=B)
        missing = [a for a in np.unique(i) if a not in table]
        if missing:
            table.update(zip(missing, anchor_partners(P, N, np.array(missing), gripper.max_aperture, theta_max)))
        n_partner = np.array([len(table[a]) for a in i])
        has = n_partner > 0
        if not has.any():
            continue
        i, pick, psi, s, n_partner = i[has], pick[has], psi[has], s[has], n_partner[has]
        j = np.array([table[a][int(f * n)] for a, f, n in zip(i, pick, n_partner)])
        if hinted.any():
            h = hinted[has]
            psi[h] = _roll_toward(P, i[h], j[h], hints[hint[has][h]]) + jitter[has][h]
        R, t = _frames_from_pairs(P, i, j, psi, s)
        # a hit on the coarse subset is a hit on the full cloud
        coarse = _to_local(R, t, P[::8])
        ok = np.ones(len(i), dtype=bool)
        for lo, hi in boxes:
            ok &= ~_box_mask(coarse, lo, hi).any(axis=1)
        if not ok.any():
            continue
        i, j, R, t = i[ok], j[ok], R[ok], t[ok]
        local = _to_local(R, t, P)
        ok = np.ones(len(i), dtype=bool)
        for lo, hi in boxes:
            ok &= ~_box_mask(local, lo, hi).any(axis=1)
        if len(other_pts) and ok.any():
            hit = _box_mask(_to_local(R[ok], t[ok], other_pts), lo_r, hi_r).any(axis=1)
            ok[np.flatnonzero(ok)[hit]] = False
        left, right, nonempty = batch_contacts(local, band=band, gripper=gripper)
        ok &= nonempty & (left != right)
        if ok.any():
            k = np.flatnonzero(ok)
            nl = np.matmul(N[left[k]][:, None, :], R[k])[:, 0]
            nr = np.matmul(N[right[k]][:, None, :], R[k])[:, 0]
            pl = np.stack([c[k, left[k]] for c in local], axis=1)
            pr = np.stack([c[k, right[k]] for c in local], axis=1)
            ok[k] = _antipodal_rows(pl, pr, nl, nr, theta_max)
        for k in np.flatnonzero(ok):
            if len(out) >= count:
                break
            out.append(Grasp(Pose(R[k], t[k]), int(left[k]), int(right[k])))
    return out


# ---------------------------------------------------------------------------
# stability

def support_set(points: np.ndarray, delta=DELTA) -> np.ndarray:
    return np.flatnonzero(points[:, 2] <= points[:, 2].min() + delta)


def stability_depth(points: np.ndarray, com, delta=DELTA) -> float:
    """Depth of the projected com inside the support hull (-inf when degenerate)."""
    if len(points) == 0:
        return -np.inf
    S = support_set(points, delta)
    if len(S) < 3:
        return -np.inf
    try:
        return hull_depth_2d(np.asarray(com)[:2], points[S, :2])
    except DegenerateHullError:
        return -np.inf


def check_stable(shape, pose: Pose, com, delta=DELTA, eps_hull=EPS_HULL) -> bool:
    """Static stability on a horizontal plane under the three-contact model."""
    pts = pose.apply(_points(shape))
    if len(pts) == 0:
        raise GeometryError("stability check on an empty shape")
    return stability_depth(pts, pose.apply(np.asarray(com, float).reshape(1, 3))[0], delta) > eps_hull


def support_contacts(points: np.ndarray, delta=DELTA) -> tuple:
    """Three support points spanning the largest triangle (indices into points)."""
    S = support_set(points, delta)
    if len(S) < 3:
        return tuple(int(s) for s in S)
    xy = points[S, :2]
    try:
        verts = S[ConvexHull(xy).vertices]
    except Exception:
        verts = S
    if len(verts) > 40:
        verts = verts[:: len(verts) // 40 + 1]
    v = points[verts, :2]
    tri = np.array(list(combinations(range(len(verts)), 3)))
    e1 = v[tri[:, 1]] - v[tri[:, 0]]
    e2 = v[tri[:, 2]] - v[tri[:, 0]]
    best = tri[int(np.argmax(np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])))]
    trip = verts[best]
    return tuple(int(t) for t in trip)


def hull_facet_normals(points: np.ndarray):
    """Outward facet normals of the 3D hull with their facet areas."""
    hull = ConvexHull(points)
    tri = points[hull.simplices]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    return hull.equations[:, :3], area


def resting_displacement(points: np.ndarray, com, down_normal, yaw, xy) -> Pose:
    """Rotate so down_normal faces -z, spin by yaw, put com over xy and the low point on z = 0."""
    com = np.asarray(com, dtype=float)
    R = rotation_from_axis_angle([0, 0, 1], yaw) @ rotation_between(down_normal, [0.0, 0.0, -1.0])
    local = (points - com) @ R.T
    t = np.array([xy[0], xy[1], -local[:, 2].min()]) - R @ com
    return Pose(R, t)


def sample_temporary_places(obj, count: int = 20, seed: int = 0, area=TEMP_AREA,
                            delta=DELTA, eps_hull=EPS_HULL, com=None, area_jitter=0.0,
                            max_proposals=None) -> list:
    """Stable face-down placements on the temporary area, checked on the completed cloud."""
    cloud = obj.completed if hasattr(obj, "completed") else obj
    P = _points(cloud)
    if len(P) == 0:
        raise GeometryError("cannot place an empty cloud")
    if com is None:
        com = obj.com_estimate if hasattr(obj, "com_estimate") else P.mean(axis=0)
    rng = np.random.default_rng(seed)
    try:
        normals, areas = hull_facet_normals(P)
    except Exception:
        return []
    prob = areas / areas.sum()
    max_proposals = 50 * count if max_proposals is None else max_proposals
    out = []
    for _ in range(max_proposals):
        if len(out) >= count:
            break
        f = int(rng.choice(len(normals), p=prob))
        yaw = rng.uniform(0, 2 * np.pi)
        xy = np.asarray(area) + rng.uniform(-area_jitter, area_jitter, size=2)
        D = resting_displacement(P, com, normals[f], yaw, xy)
        placed = D.apply(P)
        if stability_depth(placed, D.apply(np.asarray(com).reshape(1, 3))[0], delta) <= eps_hull:
            continue
        out.append(Place(D, support_contacts(placed, delta), False, None))
    return out
