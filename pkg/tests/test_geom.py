import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from regrasp import geom
from regrasp.geom import Pose, PointCloud


def quad_truncnorm_cdf(x, mu, sigma, a, b):
    # scale by the density peak on [a, b] so far-tail windows do not underflow
    peak = min(max(mu, a), b)
    dens = lambda t: np.exp(-0.5 * (((t - mu) / sigma) ** 2 - ((peak - mu) / sigma) ** 2))
    pts = [mu] if a < mu < b else None
    num = quad(dens, a, x, epsabs=1e-14, epsrel=1e-12, limit=200,
               points=[mu] if a < mu < x else None)[0]
    den = quad(dens, a, b, epsabs=1e-14, epsrel=1e-12, limit=200, points=pts)[0]
    return num / den


def quad_erf(x):
    return 2.0 / np.sqrt(np.pi) * quad(lambda t: np.exp(-t * t), 0, x, epsabs=1e-14, epsrel=1e-13)[0]


def test_transform_identity_and_translation():
    cloud = PointCloud(np.array([[1.0, 2.0, 3.0]]), np.array([[0.0, 0.0, 1.0]]))
    out = geom.transform_cloud(Pose.identity(), cloud)
    assert np.array_equal(out.points, cloud.points)
    out = geom.transform_cloud(Pose.from_translation([0, 0, 0.1]), cloud)
    assert np.allclose(out.points, [[1, 2, 3.1]], atol=0)
    assert np.allclose(out.normals, cloud.normals)


def test_transform_rotation_about_z():
    pose = Pose.from_axis_angle([0, 0, 1], np.pi / 2)
    out = geom.transform_cloud(pose, PointCloud(np.array([[1.0, 0, 0]]), np.array([[1.0, 0, 0]])))
    assert np.abs(out.points - [[0, 1, 0]]).max() < 1e-12
    assert np.abs(out.normals - [[0, 1, 0]]).max() < 1e-12


def test_pose_rejects_non_orthonormal():
    with pytest.raises(geom.GeometryError):
        Pose(np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(geom.GeometryError):
        Pose(np.diag([1.0, 1.0, -1.0]))


def test_compose_inverse_is_identity():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = Pose(geom.random_rotation(rng), rng.normal(size=3))
        q = p @ p.inverse()
        assert np.abs(q.matrix - np.eye(4)).max() < 1e-9


def test_point_cloud_validation():
    with pytest.raises(geom.GeometryError):
        PointCloud(np.array([[np.nan, 0, 0]]))
    with pytest.raises(geom.GeometryError):
        PointCloud(np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]))
    assert len(PointCloud.empty()) == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_transform_preserves_distances(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(20, 3))
    pose = Pose(geom.random_rotation(rng), rng.normal(size=3))
    out = geom.transform_cloud(pose, PointCloud(pts)).points
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-9


def test_truncnorm_boundaries_and_symmetry():
    assert geom.truncated_normal_cdf(0.0, 0.3, 0.2, 0.0, 1.0) == 0.0
    assert geom.truncated_normal_cdf(1.0, 0.3, 0.2, 0.0, 1.0) == 1.0
    for s in (0.01, 0.3, 5.0):
        assert abs(geom.truncated_normal_cdf(0.5, 0.5, s, 0.0, 1.0) - 0.5) < 1e-12


def test_truncnorm_frozen_quadrature_value():
    # adaptive quadrature of the truncated density, computed offline
    assert abs(geom.truncated_normal_cdf(0.2094, 0.0, 0.15, 0.0, np.pi) - 0.8372855048503866) < 1e-6


def test_truncnorm_domain_errors():
    with pytest.raises(geom.GeometryError):
        geom.truncated_normal_cdf(-0.1, 0, 1, 0, 1)
    with pytest.raises(geom.GeometryError):
        geom.truncated_normal_cdf(0.5, 0, 0.0, 0, 1)
    with pytest.raises(geom.GeometryError):
        geom.truncated_normal_cdf(0.5, 0, 1, 1, 0)


def test_truncnorm_far_tails_are_finite():
    # window far above the mode and far below it
    v = geom.truncated_normal_cdf(np.radians(12), np.radians(30), 1e-4, 0, np.pi)
    assert v == 0.0
    v = geom.truncated_normal_cdf(np.radians(12), 0.0, 1e-4, 0, np.pi)
    assert v == 1.0
    v = geom.truncated_normal_cdf(2.0, -3.0, 0.1, 1.0, 3.0)
    assert 0.99 < v <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.floats(0, np.pi), st.floats(-1.0, 4.0), st.floats(0.02, 2.0))
def test_truncnorm_matches_quadrature(x, mu, sigma):
    ref = quad_truncnorm_cdf(x, mu, sigma, 0.0, np.pi)
    assert abs(geom.truncated_normal_cdf(x, mu, sigma, 0.0, np.pi) - ref) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.0, 4.0), st.floats(0.02, 2.0))
def test_truncnorm_monotone(mu, sigma):
    xs = np.linspace(0, np.pi, 200)
    vals = geom.truncated_normal_cdf(xs, mu, sigma, 0.0, np.pi)
    assert np.all(np.diff(vals) >= -1e-15)


def test_inverse_erf_values():
    assert geom.inverse_erf(0.0) == 0.0
    # bisection on a quadrature erf, computed offline
    assert abs(geom.inverse_erf(0.5) - 0.4769362762044699) < 1e-9
    big = geom.inverse_erf(0.999999)
    assert np.isfinite(big) and big > 3
    with pytest.raises(geom.GeometryError):
        geom.inverse_erf(1.0)
    with pytest.raises(geom.GeometryError):
        geom.inverse_erf(-1.0)


def test_inverse_erf_against_quadrature_erf():
    for y in (-0.9, -0.3, 0.1, 0.6827, 0.95):
        assert abs(quad_erf(geom.inverse_erf(y)) - y) < 1e-10


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.999, 0.999))
def test_inverse_erf_round_trip(y):
    assert abs(geom.erf(geom.inverse_erf(y)) - y) < 1e-10


def half_plane_oracle(p, pts):
    from scipy.spatial import ConvexHull
    h = ConvexHull(pts)
    v = pts[h.vertices]  # counter-clockwise
    e = np.roll(v, -1, axis=0) - v
    w = p - v
    cross = e[:, 0] * w[:, 1] - e[:, 1] * w[:, 0]
    return bool(np.all(cross >= 0))


def test_point_in_hull_basic():
    tri = np.array([[0.0, 0], [1, 0], [0, 1]])
    assert geom.point_in_hull_2d(tri.mean(axis=0), tri)
    assert not geom.point_in_hull_2d([2.0, 2.0], tri)
    with pytest.raises(geom.DegenerateHullError):
        geom.point_in_hull_2d([0, 0], np.array([[0.0, 0], [1, 1], [2, 2]]))


def test_point_in_hull_matches_half_plane_oracle():
    rng = np.random.default_rng(11)
    pts = rng.uniform(-1, 1, size=(12, 2))
    queries = rng.uniform(-1.3, 1.3, size=(1000, 2))
    for q in queries:
        assert geom.point_in_hull_2d(q, pts) == half_plane_oracle(q, pts)


def test_hull_depth_square():
    sq = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]])
    assert abs(geom.hull_depth_2d([0.5, 0.5], sq) - 0.5) < 1e-12
    assert abs(geom.hull_depth_2d([0.1, 0.5], sq) - 0.1) < 1e-12
    assert geom.hull_depth_2d([1.5, 0.5], sq) < 0


def test_nearest_neighbor_basic_and_ties():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0], [1, 0, 0]])
    cloud = PointCloud(pts)
    assert geom.nearest_neighbor_index([1, 0, 0], cloud) == 1
    assert geom.nearest_neighbor_index([0.5, 0, 0], PointCloud(pts[1:])) == 0
    assert geom.nearest_neighbor_index([0, 0, 0.3], PointCloud(pts[1:3])) == 0
    with pytest.raises(geom.EmptyCloudError):
        geom.nearest_neighbor_index([0, 0, 0], PointCloud.empty())


def test_nearest_neighbor_matches_linear_scan():
    rng = np.random.default_rng(5)
    pts = rng.uniform(size=(500, 3))
    # a quantized cloud makes exact ties common
    pts[:250] = np.round(pts[:250] * 4) / 4
    queries = np.vstack([rng.uniform(size=(9000, 3)), np.round(rng.uniform(size=(1000, 3)) * 8) / 8])
    got = geom.nearest_neighbor_indices(queries, pts)
    for q, g in zip(queries, got):
        d = np.sum((pts - q) ** 2, axis=1)
        assert g == int(np.argmin(d))


def test_estimate_normals_plane():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(size=(200, 2)), np.zeros(200)])
    n = geom.estimate_normals(pts)
    assert np.allclose(np.abs(n[:, 2]), 1.0)


def test_derive_seed_deterministic_and_distinct():
    assert geom.derive_seed(7, "episode", 3) == geom.derive_seed(7, "episode", 3)
    assert geom.derive_seed(7, "episode", 3) != geom.derive_seed(7, "episode", 4)
    assert geom.derive_seed(7, "episode", 3) != geom.derive_seed(8, "episode", 3)
