import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualreg.geometry import (BRUTE_FORCE_MAX, PointCloud, RigidTransform, SizeError,
                              apply_transform, build_neighborhood_index, compose,
                              compute_metrics, one_nn_cloud, rot_z)

from conftest import random_rotation, random_transform


def brute_knn(pts, K):
    """Plain double loop, ties to the lower index."""
    n = len(pts)
    rows = []
    for i in range(n):
        cand = []
        for j in range(n):
            if j != i:
                cand.append((float(((pts[j] - pts[i]) ** 2).sum()), j))
        cand.sort()
        rows.append([j for _, j in cand[:K]])
    return np.array(rows)


def pairwise(pts):
    return np.linalg.norm(pts[:, None] - pts[None], axis=-1)


SQUARE = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])


class TestPointCloud:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            PointCloud([[0.0, np.nan, 0.0]])

    def test_rejects_empty(self):
        with pytest.raises(SizeError):
            PointCloud(np.zeros((0, 3)))

    def test_immutable(self):
        c = PointCloud(SQUARE)
        with pytest.raises(ValueError):
            c.points[0, 0] = 5.0


class TestNeighborhoodIndex:
    def test_unit_square_edges_before_diagonal(self):
        idx = build_neighborhood_index(PointCloud(SQUARE), 2)
        # corner 0 touches 1 and 3; the diagonal corner 2 is farther
        assert idx.neighbors.tolist() == [[1, 3], [0, 2], [1, 3], [0, 2]]
        idx3 = build_neighborhood_index(PointCloud(SQUARE), 3)
        assert idx3.neighbors[:, 2].tolist() == [2, 3, 0, 1]

    def test_collinear_tie_goes_to_lower_index(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
        idx = build_neighborhood_index(pts, 1)
        assert idx.neighbors[1, 0] == 0
        assert idx.neighbors[2, 0] == 1

    def test_random_64_matches_brute_force(self, rng):
        pts = rng.normal(size=(64, 3))
        idx = build_neighborhood_index(pts, 8)
        np.testing.assert_array_equal(idx.neighbors, brute_knn(pts, 8))

    def test_tree_path_matches_brute_force(self, rng):
        pts = rng.normal(size=(400, 3))
        assert len(pts) > BRUTE_FORCE_MAX
        idx = build_neighborhood_index(pts, 6)
        np.testing.assert_array_equal(idx.neighbors, brute_knn(pts, 6))

    def test_tree_path_with_ties(self):
        # integer lattice: many equal distances
        g = np.stack(np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
        idx = build_neighborhood_index(g, 7)
        np.testing.assert_array_equal(idx.neighbors, brute_knn(g, 7))

    def test_row_invariants(self, rng):
        pts = rng.normal(size=(50, 3))
        idx = build_neighborhood_index(pts, 5)
        for i, row in enumerate(idx.neighbors):
            assert len(set(row)) == 5 and i not in row
            d = np.linalg.norm(pts[row] - pts[i], axis=1)
            assert np.all(np.diff(d) >= 0)

    def test_too_small(self):
        with pytest.raises(SizeError):
            build_neighborhood_index(SQUARE, 4)

    def test_duplicates_are_mutual_neighbours(self):
        pts = np.array([[0.0, 0, 0], [0, 0, 0], [1, 0, 0]])
        idx = build_neighborhood_index(pts, 1)
        assert idx.neighbors[:, 0].tolist() == [1, 0, 0]
        assert idx.sq_distances[0, 0] == 0.0

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(2, 512), K=st.integers(1, 10), seed=st.integers(0, 2**31),
           grid=st.booleans())
    def test_property_matches_brute_force(self, n, K, seed, grid):
        K = min(K, n - 1)
        r = np.random.default_rng(seed)
        pts = r.integers(0, 4, size=(n, 3)).astype(float) if grid else r.normal(size=(n, 3))
        idx = build_neighborhood_index(pts, K)
        d2 = ((pts[:, None] - pts[None]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        order = np.lexsort((np.broadcast_to(np.arange(n), d2.shape), d2), axis=-1)[:, :K]
        np.testing.assert_array_equal(idx.neighbors, order)


class TestOneNN:
    def test_two_points_swap(self):
        a, b = [0.0, 0, 0], [1.0, 2, 3]
        pts = np.array([a, b])
        out = one_nn_cloud(pts, build_neighborhood_index(pts, 1))
        np.testing.assert_array_equal(out.points, [b, a])

    def test_square_maps_to_lower_edge_neighbour(self):
        out = one_nn_cloud(SQUARE, build_neighborhood_index(SQUARE, 1))
        np.testing.assert_array_equal(out.points, SQUARE[[1, 0, 1, 0]])

    def test_far_outlier(self, rng):
        cluster = rng.normal(scale=0.1, size=(20, 3))
        o = np.array([[10.0, 0, 0]])
        pts = np.vstack([cluster, o])
        out = one_nn_cloud(pts, build_neighborhood_index(pts, 1)).points
        nearest = np.argmin(np.linalg.norm(cluster - o, axis=1))
        np.testing.assert_array_equal(out[-1], cluster[nearest])
        assert not np.any(np.all(out[:-1] == o, axis=1))

    def test_output_is_reindexable(self, rng):
        pts = rng.normal(size=(30, 3))
        out = one_nn_cloud(pts, build_neighborhood_index(pts, 3))
        assert build_neighborhood_index(out, 1).size == 30


class TestTransforms:
    def test_identity_bit_exact(self, rng):
        pts = rng.normal(size=(40, 3))
        out = apply_transform(RigidTransform.identity(), pts)
        assert np.array_equal(out.points, pts)

    def test_rot_z_90(self):
        out = apply_transform(RigidTransform(rot_z(90), np.zeros(3)), [[1.0, 0, 0]])
        np.testing.assert_allclose(out.points[0], [0, 1, 0], atol=1e-12)

    def test_compose_equals_sequential(self, rng):
        pts = rng.normal(size=(100, 3))
        T1, T2 = random_transform(rng), random_transform(rng)
        once = apply_transform(compose(T2, T1), pts).points
        twice = apply_transform(T2, apply_transform(T1, pts)).points
        assert np.max(np.abs(once - twice)) < 1e-12

    def test_compose_identity_and_inverse(self, rng):
        T = random_transform(rng)
        C = compose(T, RigidTransform.identity())
        np.testing.assert_array_equal(C.R, T.R)
        np.testing.assert_array_equal(C.t, T.t)
        Id = compose(T, T.inverse())
        np.testing.assert_allclose(Id.R, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(Id.t, 0, atol=1e-10)

    def test_associativity(self, rng):
        A, B, C = (random_transform(rng) for _ in range(3))
        left = compose(compose(A, B), C)
        right = compose(A, compose(B, C))
        np.testing.assert_allclose(left.R, right.R, atol=1e-10)
        np.testing.assert_allclose(left.t, right.t, atol=1e-10)

    def test_long_chain_stays_orthonormal(self, rng):
        T = RigidTransform.identity()
        for _ in range(2000):
            T = compose(random_transform(rng, 180.0), T)
        assert np.max(np.abs(T.R.T @ T.R - np.eye(3))) <= 1e-9

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_from_matrix_checks_bottom_row(self):
        M = np.eye(4)
        M[3, 0] = 0.5
        with pytest.raises(ValueError):
            RigidTransform.from_matrix(M)

    def test_isometry(self, rng):
        for _ in range(20):
            pts = rng.normal(size=(30, 3))
            out = apply_transform(RigidTransform(random_rotation(rng), rng.normal(size=3)), pts)
            assert np.max(np.abs(pairwise(out.points) - pairwise(pts))) < 1e-10


def trace_angle_deg(Ra, Rb):
    A = Ra.T @ Rb
    tr = A[0][0] + A[1][1] + A[2][2]
    c = max(-1.0, min(1.0, (tr - 1.0) / 2.0))
    return math.degrees(math.acos(c))


class TestMetrics:
    def test_identical_is_zero(self, rng):
        for _ in range(1000):
            T = RigidTransform(random_rotation(rng), rng.normal(size=3))
            m = compute_metrics(T, T)
            assert (m.mae_rot, m.mae_trans, m.mie_rot, m.mie_trans) == (0.0, 0.0, 0.0, 0.0)

    def test_constructed_ten_degrees(self, rng):
        gt = random_transform(rng)
        est = RigidTransform(gt.R @ rot_z(10.0), gt.t)
        m = compute_metrics(est, gt)
        assert abs(m.mie_rot - 10.0) < 1e-9
        assert m.mie_trans == 0.0

    def test_against_trace_formula(self, rng):
        for _ in range(200):
            a = RigidTransform(random_rotation(rng), np.zeros(3))
            b = RigidTransform(random_rotation(rng), np.zeros(3))
            # acos is ill-conditioned near 0 and 180 degrees; compare loosely there
            ref = trace_angle_deg(b.R, a.R)
            assert abs(compute_metrics(a, b).mie_rot - ref) < 1e-6

    def test_translation_metrics(self):
        gt = RigidTransform(rot_z(90.0), [0.0, 0.0, 0.0])
        est = RigidTransform(rot_z(90.0), [0.3, -0.4, 0.0])
        m = compute_metrics(est, gt)
        assert m.mie_trans == pytest.approx(0.5, abs=1e-15)
        assert m.mae_trans == pytest.approx(0.7 / 3, abs=1e-15)
        assert m.mae_rot == pytest.approx(0.0, abs=1e-12)

    def test_non_negative(self, rng):
        for _ in range(50):
            m = compute_metrics(random_transform(rng), random_transform(rng))
            assert min(m.as_dict().values()) >= 0
