import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualreg import autodiff as ad
from dualreg.data import ambiguity_scene
from dualreg.features import ExtractorConfig, extract_handcrafted
from dualreg.geometry import build_neighborhood_index, one_nn_cloud
from dualreg.matching import (build_matching_map, distance_graph, final_map_graph,
                              final_matching_map, fuse_dual_neighborhood, fuse_graph,
                              matching_scores, pairwise_distance, read_map, reference_copy,
                              write_map)
from dualreg.registration import PipelineConfig, forward


def loop_distances(A, B):
    out = np.zeros((len(A), len(B)))
    for i in range(len(A)):
        for j in range(len(B)):
            out[i, j] = math.sqrt(sum((a - b) ** 2 for a, b in zip(A[i], B[j])))
    return out


def uniform_case(rng, n=12, m=10, K=3):
    P, Q = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    iP, iQ = build_neighborhood_index(P, K), build_neighborhood_index(Q, K)
    Ph, Qh = one_nn_cloud(P, iP), one_nn_cloud(Q, iQ)
    return iP, iQ, build_neighborhood_index(Ph, K), build_neighborhood_index(Qh, K)


class TestPairwiseDistance:
    def test_zero_diagonal(self, rng):
        F = rng.normal(size=(7, 5))
        D = pairwise_distance(F, F)
        assert np.all(np.diag(D) == 0)
        assert np.all(D[~np.eye(7, dtype=bool)] > 0)

    def test_scalar_features(self):
        D = pairwise_distance(np.array([[0.0], [3.0]]), np.array([[4.0]]))
        np.testing.assert_array_equal(D, [[4.0], [1.0]])

    def test_loop_oracle(self, rng):
        A, B = rng.normal(size=(8, 16)), rng.normal(size=(9, 16))
        np.testing.assert_allclose(pairwise_distance(A, B), loop_distances(A, B), atol=1e-12, rtol=0)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            pairwise_distance(rng.normal(size=(3, 4)), rng.normal(size=(3, 5)))


class TestMatchingScores:
    def test_equal_row_uniform(self):
        np.testing.assert_allclose(matching_scores([[2.5, 2.5, 2.5]]), [[1 / 3] * 3], atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(matching_scores([[0.0, math.log(2.0)]]), [[2 / 3, 1 / 3]], atol=1e-15)

    def test_shift_invariance(self, rng):
        D = rng.uniform(0, 5, size=(4, 6))
        np.testing.assert_allclose(matching_scores(D + 1000.0), matching_scores(D), atol=1e-12)

    def test_large_distances_stay_finite(self):
        S = matching_scores([[1e5, 1e5 + 1, 2e5]])
        assert np.all(np.isfinite(S)) and abs(S.sum() - 1) < 1e-12


class TestFuse:
    def test_uniform_maps(self, rng):
        n, m, K = 12, 10, 3
        idx = uniform_case(rng, n, m, K)
        U = np.full((n, m), 1.0 / m)
        G = fuse_dual_neighborhood(U, U, *idx)
        np.testing.assert_allclose(G, 2 * K / m, atol=1e-14)

    def test_three_point_permutation(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
        idx = build_neighborhood_index(pts, 1)
        assert idx.neighbors[:, 0].tolist() == [1, 0, 1]
        I = np.eye(3)
        G = fuse_dual_neighborhood(I, I, idx, idx, idx, idx)
        # G[i, j] = 2 exactly when the unique neighbours of i and j are matched
        np.testing.assert_array_equal(G, [[2, 0, 2], [0, 2, 0], [2, 0, 2]])

    def test_zero_hat_halves(self, rng):
        idx = uniform_case(rng)
        M = matching_scores(rng.uniform(0, 3, size=(12, 10)))
        both = fuse_dual_neighborhood(M, M, *idx[:2], idx[0], idx[1])
        half = fuse_dual_neighborhood(M, np.zeros_like(M), *idx[:2], idx[0], idx[1])
        np.testing.assert_allclose(half, both / 2, atol=1e-15)

    def test_loop_oracle_and_k_squared(self, rng):
        n, m, K = 7, 6, 2
        iP, iQ, iPh, iQh = uniform_case(rng, n, m, K)
        M = matching_scores(rng.uniform(0, 3, size=(n, m)))
        Mh = matching_scores(rng.uniform(0, 3, size=(n, m)))
        ref = np.zeros((n, m))
        for i in range(n):
            for j in range(m):
                ref[i, j] = (sum(M[a, b] for a in iP.neighbors[i] for b in iQ.neighbors[j])
                             + sum(Mh[a, b] for a in iPh.neighbors[i] for b in iQh.neighbors[j])) / K
        np.testing.assert_allclose(fuse_dual_neighborhood(M, Mh, iP, iQ, iPh, iQh), ref, atol=1e-14)
        sq = fuse_dual_neighborhood(M, Mh, iP, iQ, iPh, iQh, normalization="k_squared")
        np.testing.assert_allclose(sq, ref / K, atol=1e-14)

    def test_k_mismatch(self, rng):
        P = rng.normal(size=(8, 3))
        with pytest.raises(ValueError):
            fuse_dual_neighborhood(np.eye(8), None, build_neighborhood_index(P, 2),
                                   build_neighborhood_index(P, 3))


class TestFinalMap:
    def test_constant_g_row(self, rng):
        D, Dh = rng.uniform(0, 2, (5, 7)), rng.uniform(0, 2, (5, 7))
        g = rng.uniform(0, 2, (5, 1))
        alpha = 0.3
        F = final_matching_map(D, Dh, np.broadcast_to(g, D.shape), alpha)
        c = np.exp(alpha - g)
        np.testing.assert_allclose(F, matching_scores(c * (D + Dh)), atol=1e-14)

    def test_alpha_equal_g(self, rng):
        D = np.sort(rng.uniform(0, 2, (3, 6)), axis=1)
        G = np.full(D.shape, 0.7)
        F = final_matching_map(D, D, G, alpha=0.7)
        np.testing.assert_allclose(F, matching_scores(2 * D), atol=1e-15)
        assert np.all(np.diff(F, axis=1) < 0)

    def test_monotone_in_g(self, rng):
        D, Dh = rng.uniform(0, 2, (1, 6)), rng.uniform(0, 2, (1, 6))
        G = rng.uniform(0, 2, (1, 6))
        prev = -1.0
        for g in np.linspace(0, 2, 21):
            G2 = G.copy()
            G2[0, 3] = g
            f = final_matching_map(D, Dh, G2)[0, 3]
            assert f > prev
            prev = f

    def test_shape_checks(self, rng):
        with pytest.raises(ValueError):
            final_matching_map(np.zeros((2, 3)), None, np.zeros((2, 2)))
        with pytest.raises(ValueError):
            final_matching_map(np.zeros((2, 3)), None, np.zeros((2, 3)), alpha=float("inf"))


class TestReferenceCopy:
    def test_identity(self, rng):
        Q = rng.normal(size=(6, 3))
        assert np.array_equal(reference_copy(np.eye(6), Q).points.points, Q)

    def test_uniform_gives_centroid(self, rng):
        Q = rng.normal(size=(6, 3))
        out = reference_copy(np.full((4, 6), 1 / 6), Q).points.points
        np.testing.assert_allclose(out, np.broadcast_to(Q.mean(0), (4, 3)), atol=1e-14)

    def test_permutation(self, rng):
        Q = rng.normal(size=(9, 3))
        perm = rng.permutation(9)
        out = reference_copy(np.eye(9)[perm], Q)
        assert np.array_equal(out.points.points, Q[perm])
        assert out.source_size == 9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(5, 20), m=st.integers(5, 20),
       scale=st.floats(0.01, 50.0), alpha=st.floats(-3, 3))
def test_map_properties(seed, n, m, scale, alpha):
    r = np.random.default_rng(seed)
    P, Q = r.normal(size=(n, 3)), r.normal(size=(m, 3))
    FP, FQ = scale * r.normal(size=(n, 4)), scale * r.normal(size=(m, 4))
    iP, iQ = build_neighborhood_index(P, 3), build_neighborhood_index(Q, 3)
    Ph, Qh = one_nn_cloud(P, iP), one_nn_cloud(Q, iQ)
    mm = build_matching_map(FP, FP[iP.neighbors[:, 0]], FQ, FQ[iQ.neighbors[:, 0]], iP, iQ,
                            build_neighborhood_index(Ph, 3), build_neighborhood_index(Qh, 3),
                            alpha=alpha)
    for S in (mm.M, mm.M_hat, mm.F):
        assert np.all(S >= 0)
        assert np.max(np.abs(S.sum(1) - 1)) < 1e-9
    assert mm.G.min() >= 0 and mm.G.max() <= 2 + 1e-12
    qt = reference_copy(mm.F, Q).points.points
    assert np.all(qt >= Q.min(0) - 1e-12) and np.all(qt <= Q.max(0) + 1e-12)


class TestGradients:
    def test_map_and_copy_against_finite_differences(self, rng):
        n, m, K, C = 8, 7, 3, 5
        P, Q = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        iP, iQ = build_neighborhood_index(P, K), build_neighborhood_index(Q, K)
        F0 = [rng.normal(size=(n, C)), rng.normal(size=(n, C)),
              rng.normal(size=(m, C)), rng.normal(size=(m, C))]
        wF, wQ = rng.normal(size=(n, m)), rng.normal(size=(n, 3))

        def build(feats):
            a, ah, b, bh = feats
            D, Dh = distance_graph(a, b), distance_graph(ah, bh)
            G = fuse_graph(ad.softmax(-D, 1), ad.softmax(-Dh, 1), iP, iQ, iP, iQ)
            F = final_map_graph(D, Dh, G, 0.2)
            return ad.sum(F * wF) + ad.sum((F @ Q) * wQ)

        leaves = [ad.leaf(f) for f in F0]
        grads = ad.grad(build(leaves), leaves)
        h = 1e-6
        for k in range(4):
            for ix in np.ndindex(F0[k].shape):
                plus = [f.copy() for f in F0]
                minus = [f.copy() for f in F0]
                plus[k][ix] += h
                minus[k][ix] -= h
                num = (build(plus).value - build(minus).value) / (2 * h)
                ana = grads[k][ix]
                assert abs(ana - num) / max(abs(ana), abs(num), 1e-6) < 1e-4


class TestAmbiguity:
    def F_rows(self, dual):
        scene = ambiguity_scene()
        cfg = PipelineConfig(K=4, n_iter=1, dual=dual,
                             features=ExtractorConfig(backend="handcrafted", K_feat=4))
        rec = forward(scene.P.points, scene.Q.points, cfg.init_params(), cfg)[0]
        return scene, rec.F.value

    def test_patches_look_alike_locally(self):
        scene = ambiguity_scene()
        q = scene.Q.points
        F = extract_handcrafted(q, build_neighborhood_index(q, 4)).values
        np.testing.assert_allclose(F[scene.correct], F[scene.decoy], atol=1e-12)

    def test_dual_prefers_correct_patch(self):
        scene, Fd = self.F_rows(True)
        _, Fs = self.F_rows(False)
        assert Fd[scene.query, scene.correct] > Fs[scene.query, scene.correct]
        assert Fd[scene.query, scene.correct] > Fd[scene.query, scene.decoy]


def test_map_dump_round_trip(tmp_path, rng):
    F = matching_scores(rng.uniform(0, 3, (4, 5)))
    write_map(F, tmp_path / "F.txt")
    text = (tmp_path / "F.txt").read_text().splitlines()
    assert text[0] == "# matching-map 4 5" and len(text) == 5
    assert np.array_equal(read_map(tmp_path / "F.txt"), F)
