import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull

from regrasp import grasp_place as G
from regrasp import scene as S
from regrasp.geom import Pose, PointCloud, random_rotation, rotation_from_axis_angle
from regrasp.task import axis_rotations

THETA = np.radians(12.0)


def solid(kind, dims, pose=None):
    return S.GroundTruthObject.from_spec(S.ShapeSpec(kind, dims), pose or Pose.identity(), 0)


def frame(closing, approach, center):
    x = np.asarray(closing, float)
    z = np.asarray(approach, float)
    return Pose(np.column_stack([x, np.cross(z, x), z]), center)


def brute_contacts(points, pose, gripper, band=G.CONTACT_BAND):
    # independent linear scan over the closing region
    R, t = pose.rotation, pose.translation
    lo, hi = gripper.closing_region
    best = {}
    for i, p in enumerate(points):
        q = R.T @ (p - t)
        if not np.all((q >= lo) & (q <= hi)):
            continue
        best[i] = q
    if not best:
        return None
    out = []
    for sign in (-1, 1):
        top = max(sign * q[0] for q in best.values())
        cands = [(q[1] ** 2 + q[2] ** 2, i) for i, q in best.items() if sign * q[0] >= top - band]
        out.append(min(cands)[1])
    return tuple(out)


def test_thin_box_has_grasps_across_parallel_faces():
    obj = solid("box", (0.03, 0.10, 0.10))
    grasps = G.sample_grasps(obj.surface, count=20, seed=0)
    assert len(grasps) >= 1
    # the only faces closer than the aperture are the two x faces
    assert all(abs(g.closing_axis[0]) > np.cos(THETA) for g in grasps)


def test_wide_box_has_no_grasps():
    obj = solid("box", (0.10, 0.10, 0.10))
    assert G.sample_grasps(obj.surface, count=5, seed=0) == []


def test_cylinder_grasps_recheck():
    obj = solid("cylinder", (0.03, 0.09))
    grasps = G.sample_grasps(obj.surface, count=100, seed=1)
    assert len(grasps) == 100
    P, N = obj.surface.points, obj.surface.normals
    gr = G.GripperModel()
    for g in grasps:
        assert G.check_antipodal(obj.surface, g, THETA)
        left, right = brute_contacts(P, g.pose, gr)
        b = (P[right] - P[left]) / np.linalg.norm(P[right] - P[left])
        assert np.degrees(np.arccos(np.clip(b @ N[right], -1, 1))) <= 12 + 1e-9
        assert np.degrees(np.arccos(np.clip(-b @ N[left], -1, 1))) <= 12 + 1e-9
        assert abs(g.closing_axis @ g.approach_axis) < 1e-6


def test_parallel_faces_antipodal_for_any_theta():
    obj = solid("box", (0.04, 0.06, 0.10))
    g = G.Grasp(frame([1, 0, 0], [0, 0, -1], [0, 0, 0.02]))
    for theta in (1e-6, 0.01, THETA, 1.0):
        assert G.check_antipodal(obj.surface, g, theta)


def test_wedge_faces_fail_at_twelve_degrees():
    # a 30 degree wedge: the slanted face sits 30 degrees off the closing axis
    L, W = 0.08, 0.05
    H = L * np.tan(np.radians(30))
    obj = solid("wedge", (L, W, H))
    com = obj.center_of_mass
    g = G.Grasp(frame([0, 0, 1], [0, 1, 0], com + [-0.01, 0, 0]))
    _, right = G.grasp_contacts(obj.surface, g)
    n = obj.surface.normals[right]
    assert abs(np.degrees(np.arccos(n @ g.closing_axis)) - 30) < 1e-6
    assert not G.check_antipodal(obj.surface, g, THETA)


def cylinder_normal(p, r, h):
    if abs(np.hypot(p[0], p[1]) - r) < 1e-9:
        return np.array([p[0], p[1], 0.0]) / r
    return np.array([0.0, 0.0, np.sign(p[2])])


def test_cylinder_antipodal_matches_analytic_normals():
    r, h = 0.03, 0.09
    obj = solid("cylinder", (r, h))
    P = obj.surface.points
    rng = np.random.default_rng(0)
    agree, total = 0, 0
    while total < 500:
        g = G.Grasp(Pose(random_rotation(rng), rng.normal(scale=0.015, size=3)))
        try:
            left, right = G.grasp_contacts(obj.surface, g)
        except G.NoContactError:
            continue
        if left == right:
            continue
        b = (P[right] - P[left]) / np.linalg.norm(P[right] - P[left])
        tl = np.arccos(np.clip(-b @ cylinder_normal(P[left], r, h), -1, 1))
        tr = np.arccos(np.clip(b @ cylinder_normal(P[right], r, h), -1, 1))
        agree += G.check_antipodal(obj.surface, g, THETA) == (max(tl, tr) <= THETA)
        total += 1
    assert agree / total >= 0.99


def test_contacts_symmetric_for_centered_box():
    obj = solid("box", (0.04, 0.06, 0.10))
    g = G.Grasp(frame([1, 0, 0], [0, 0, -1], [0, 0, 0]))
    left, right = G.grasp_contacts(obj.surface, g)
    P = obj.surface.points
    assert abs(P[left][0] + 0.02) < 1e-9 and abs(P[right][0] - 0.02) < 1e-9
    assert np.linalg.norm(P[left][1:] + P[right][1:]) <= 0.004 * np.sqrt(2)


def test_contacts_match_linear_scan_on_offset_box():
    obj = solid("box", (0.05, 0.03, 0.07), Pose.from_axis_angle([0.3, 1, 0.2], 0.4) @
                Pose.from_translation([0.01, -0.02, 0.05]))
    gr = G.GripperModel()
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(60):
        pose = Pose(random_rotation(rng), obj.center_of_mass + rng.normal(scale=0.01, size=3))
        want = brute_contacts(obj.surface.points, pose, gr)
        if want is None:
            with pytest.raises(G.NoContactError):
                G.grasp_contacts(obj.surface, G.Grasp(pose))
            continue
        assert G.grasp_contacts(obj.surface, G.Grasp(pose)) == want
        checked += 1
    assert checked > 30


def test_empty_closing_region_raises():
    obj = solid("box", (0.04, 0.04, 0.04))
    g = G.Grasp(Pose.from_translation([1.0, 0, 0]))
    with pytest.raises(G.NoContactError):
        G.grasp_contacts(obj.surface, g)
    assert len(G.closing_region_points(g, obj.surface)) == 0


def test_closing_region_known_points():
    g = G.Grasp(Pose.from_axis_angle([0, 0, 1], 0.5) @ Pose.from_translation([0.1, 0.2, 0.3]))
    local_in = np.array([[0.0, 0, 0], [0.04, 0.009, -0.02], [-0.04, -0.009, 0.02]])
    local_out = np.array([[0.05, 0, 0], [0, 0.02, 0], [0, 0, 0.03]])
    cloud = g.pose.apply(np.vstack([local_in, local_out]))
    out = G.closing_region_points(g, PointCloud(cloud))
    assert len(out) == 3
    assert np.abs(out.points - local_in).max() < 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_closing_region_frame_invariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(scale=0.03, size=(200, 3))
    g = G.Grasp(Pose(random_rotation(rng), rng.normal(scale=0.01, size=3)))
    M = Pose(random_rotation(rng), rng.normal(size=3))
    a = G.closing_region_points(g, PointCloud(pts))
    b = G.closing_region_points(G.Grasp(M @ g.pose), PointCloud(M.apply(pts)))
    if len(a) == len(b):
        assert np.abs(a.points - b.points).max() < 1e-9
    else:
        # membership can only flip for points on the box boundary
        lo, hi = G.GripperModel().closing_region
        local = g.pose.inverse().apply(pts)
        edge = np.min(np.minimum(np.abs(local - lo), np.abs(local - hi)), axis=1)
        assert edge.min() < 1e-9


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_antipodal_symmetric_under_finger_swap(seed):
    rng = np.random.default_rng(seed)
    obj = solid("cylinder", (0.03, 0.09))
    g = G.Grasp(Pose(random_rotation(rng), rng.normal(scale=0.01, size=3)))
    flip = Pose(np.diag([-1.0, -1.0, 1.0]))
    swapped = G.Grasp(g.pose @ flip)
    try:
        a = G.check_antipodal(obj.surface, g, THETA)
    except G.NoContactError:
        with pytest.raises(G.NoContactError):
            G.check_antipodal(obj.surface, swapped, THETA)
        return
    l1, r1 = G.grasp_contacts(obj.surface, g)
    l2, r2 = G.grasp_contacts(obj.surface, swapped)
    if (l1, r1) == (r2, l2):
        assert G.check_antipodal(obj.surface, swapped, THETA) == a


def test_anchor_partners_brute_force():
    rng = np.random.default_rng(0)
    obj = solid("box", (0.03, 0.05, 0.04))
    P, N = obj.surface.points, obj.surface.normals
    anchors = rng.choice(len(P), 25, replace=False)
    got = G.anchor_partners(P, N, anchors, 0.085, THETA)
    for a, js in zip(anchors, got):
        want = []
        for j in range(len(P)):
            d = P[a] - P[j]
            n = np.linalg.norm(d)
            if n <= 1e-9 or n > 0.085:
                continue
            u = d / n
            if u @ N[a] >= np.cos(THETA) and -u @ N[j] >= np.cos(THETA):
                want.append(j)
        assert list(js) == want


def test_stable_box_face_and_edge():
    obj = solid("box", (0.04, 0.06, 0.10))
    P = obj.surface.points
    flat = Pose.from_translation([0, 0, 0.05])
    assert G.check_stable(P, flat, np.zeros(3))
    edge = Pose(rotation_from_axis_angle([1, 0, 0], np.pi / 4))
    assert not G.check_stable(P, edge, np.zeros(3))


def lblock_table(spec):
    """Analytic stability per axis orientation from the exact support polygon."""
    V = S.shape_vertices(S.build_parts(spec))
    out = []
    for R in axis_rotations():
        v = V @ R.T
        sup = v[v[:, 2] <= v[:, 2].min() + 1e-9, :2]
        hull = ConvexHull(sup)
        depth = np.min(-hull.equations[:, 2])
        out.append(depth > 0.002)
    return out


def test_lblock_orientations_match_hand_table():
    spec = S.CANONICAL_CATALOG[4]
    # frozen from the support-polygon analysis: 16 stable, 8 tipping
    expect = lblock_table(spec)
    assert sum(expect) == 16
    obj = solid(spec.kind, spec.dims)
    got = [G.check_stable(obj.canonical_surface, Pose(R), np.zeros(3)) for R in axis_rotations()]
    assert got == expect


@given(st.floats(0, 2 * np.pi), st.integers(0, 5))
@settings(max_examples=40, deadline=None)
def test_stability_invariant_to_yaw(yaw, k):
    spec = S.CANONICAL_CATALOG[[0, 4, 5, 1, 6, 3][k]]
    obj = solid(spec.kind, spec.dims)
    for R in axis_rotations()[:8]:
        a = G.check_stable(obj.canonical_surface, Pose(R), np.zeros(3))
        Rz = rotation_from_axis_angle([0, 0, 1], yaw)
        b = G.check_stable(obj.canonical_surface, Pose(Rz @ R, [0.3, -0.1, 0.0]), np.zeros(3))
        assert a == b


def test_box_places_cover_all_faces():
    obj = solid("box", (0.04, 0.06, 0.10))
    places = G.sample_temporary_places(obj.surface, count=60, seed=0, com=np.zeros(3))
    downs = set()
    for pl in places:
        R = pl.pose.rotation
        down = np.round(R.T @ [0, 0, -1]).astype(int)
        downs.add(tuple(down))
        assert not pl.is_goal and pl.goal_cost is None
        assert G.check_stable(obj.surface.points, pl.pose, np.zeros(3))
        placed = pl.pose.apply(obj.surface.points)
        assert np.all(placed[list(pl.support_contacts), 2] <= placed[:, 2].min() + G.DELTA)
    assert len(downs) == 6


def test_sphere_has_no_places():
    # with a tight contact tolerance the support cap is narrower than the hull margin
    n = 2000
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    th = np.pi * (1 + 5 ** 0.5) * k
    pts = 0.03 * np.column_stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)])
    assert G.sample_temporary_places(PointCloud(pts), count=5, seed=0, com=np.zeros(3),
                                     delta=1e-5) == []


def test_places_deterministic_and_restable():
    scene = S.generate_scene(4, "packing")
    p = S.perceive(scene, "corrupted", S.NoiseSpec(seed=2))[0]
    a = G.sample_temporary_places(p, 10, seed=5)
    b = G.sample_temporary_places(p, 10, seed=5)
    assert [x.pose.matrix.tolist() for x in a] == [x.pose.matrix.tolist() for x in b]
    for pl in a:
        assert G.check_stable(p.completed, pl.pose, p.com_estimate)


def test_zero_noise_grasps_hold_on_ground_truth():
    noise = S.NoiseSpec(sigma_range=(0.0, 0.0), flip_prob_range=(0.0, 0.0))
    ok, total = 0, 0
    for seed in range(6):
        scene = S.generate_scene(seed, "packing")
        by = {o.object_id: o for o in scene}
        for p in S.perceive(scene, "corrupted", noise):
            for g in G.sample_grasps(p, count=20, seed=seed):
                ok += G.check_antipodal(by[p.true_id].surface, g, THETA)
                total += 1
    assert total > 200
    assert ok / total >= 0.99


def test_sampled_grasps_deterministic_and_single_segment():
    scene = S.generate_scene(11, "packing")
    percs = S.perceive(scene, "corrupted", S.NoiseSpec(seed=3))
    p = percs[0]
    others = [q.completed for q in percs[1:]]
    a = G.sample_grasps(p, count=15, seed=9, others=others)
    b = G.sample_grasps(p, count=15, seed=9, others=others)
    assert [g.pose.matrix.tolist() for g in a] == [g.pose.matrix.tolist() for g in b]
    for g in a:
        assert G.check_antipodal(p.completed, g, THETA)
        for o in others:
            assert len(G.closing_region_points(g, o)) == 0


def test_approach_hints_turn_grasps_toward_hint():
    obj = S.GroundTruthObject.from_spec(S.ShapeSpec("cylinder", (0.03, 0.09)), Pose.identity(), 0)
    down = np.array([0.0, 0.0, -1.0])
    plain = G.sample_grasps(obj.surface, count=200, seed=3)
    hinted = G.sample_grasps(obj.surface, count=200, seed=3, approach_hints=[down])
    tilt = lambda gs: np.array([g.approach_axis @ down for g in gs])
    assert np.mean(tilt(hinted) > np.cos(np.radians(60))) > np.mean(tilt(plain) > np.cos(np.radians(60))) + 0.2
    # no hints leaves the proposal stream untouched
    again = G.sample_grasps(obj.surface, count=200, seed=3, approach_hints=())
    assert all(np.array_equal(a.pose.matrix, b.pose.matrix) for a, b in zip(plain, again))
