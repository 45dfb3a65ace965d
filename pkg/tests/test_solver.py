import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import planted_pairs, random_transform
from zeroreg.errors import DegenerateError, InsufficientDataError, InvalidArgumentError
from zeroreg.geometry import RigidTransform, compose, inverse, is_rotation
from zeroreg.matching import CorrespondenceSet
from zeroreg.pipeline import rre
from zeroreg.solver import (CompatibilityGraph, build_compatibility_graph, consensus_maximize, count_inliers,
                            core_numbers, gnc_tls, kabsch_weighted, kiss_solver, max_kcore, ransac)


def horn_oracle(src, dst, w=None):
    """Weighted absolute orientation by Horn's unit-quaternion method; always a
    proper rotation, independent of the SVD route."""
    w = np.ones(len(src)) if w is None else np.asarray(w, float)
    w = w / w.sum()
    mp, mq = w @ src, w @ dst
    S = ((src - mp) * w[:, None]).T @ (dst - mq)
    (sxx, sxy, sxz), (syx, syy, syz), (szx, szy, szz) = S
    N = np.array([[sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
                  [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
                  [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
                  [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz]])
    q0, qx, qy, qz = np.linalg.eigh(N)[1][:, -1]
    R = np.array([[q0**2 + qx**2 - qy**2 - qz**2, 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
                  [2 * (qy * qx + q0 * qz), q0**2 - qx**2 + qy**2 - qz**2, 2 * (qy * qz - q0 * qx)],
                  [2 * (qz * qx - q0 * qy), 2 * (qz * qy + q0 * qx), q0**2 - qx**2 - qy**2 + qz**2]])
    return RigidTransform(R, mq - R @ mp)


def brute_core(adj):
    """Largest k with a nonempty k-core, by repeated deletion for each k."""
    n = len(adj)
    best = (0, list(range(n)))
    for k in range(1, n):
        alive = set(range(n))
        changed = True
        while changed:
            changed = False
            for v in list(alive):
                if sum(adj[v][u] for u in alive) < k:
                    alive.discard(v)
                    changed = True
        if not alive:
            break
        best = (k, sorted(alive))
    return best


def graph_of(edges, n):
    adj = np.zeros((n, n), dtype=bool)
    for a, b in edges:
        adj[a, b] = adj[b, a] = True
    return CompatibilityGraph(adj)


def planted_set(rng, n, outlier_frac, noise=0.0):
    src, dst, T, mask = planted_pairs(rng, n, outlier_frac, noise)
    return CorrespondenceSet(src, dst), T, mask


# ----------------------------------------------------------------- inliers / consensus

def test_count_inliers_examples(rng):
    D, T, _ = planted_set(rng, 20, 0.0)
    assert count_inliers(D, T, 1e-6).tolist() == list(range(20))
    D.dst[7] += [10e-6, 0, 0]
    assert 7 not in count_inliers(D, T, 1e-6) and len(count_inliers(D, T, 1e-6)) == 19
    with pytest.raises(InvalidArgumentError):
        count_inliers(D, T, 0.0)


def test_count_inliers_strict(rng):
    src = np.zeros((2, 3))
    dst = np.array([[1.0, 0, 0], [0.5, 0, 0]])
    assert count_inliers((src, dst), RigidTransform.identity(), 1.0).tolist() == [1]


def test_count_inliers_scan_oracle(rng):
    for _ in range(50):
        src, dst = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
        T, eps = random_transform(rng), rng.uniform(0.5, 3)
        expected = [i for i in range(100) if np.linalg.norm(T.rotation @ src[i] + T.translation - dst[i]) < eps]
        assert count_inliers((src, dst), T, eps).tolist() == expected


def test_consensus_picks_planted(rng):
    T = random_transform(rng)
    src = rng.normal(size=(6, 3))
    dst = T.apply(src)
    dst[5] += 5.0
    Rs = np.array([T.rotation] * 5 + [np.eye(3)])
    ts = np.array([T.translation] * 5 + [dst[5] - src[5]])
    D = CorrespondenceSet(src, dst, Rs, ts)
    idx, best, inl = consensus_maximize(D, eps=1e-6)
    assert idx == 0 and inl.tolist() == [0, 1, 2, 3, 4]
    assert np.allclose(best.as_matrix(), T.as_matrix())


def test_consensus_identical_hypotheses(rng):
    src = rng.normal(size=(10, 3))
    dst = src + rng.normal(scale=0.5, size=(10, 3))
    D = CorrespondenceSet(src, dst, np.tile(np.eye(3), (10, 1, 1)), np.zeros((10, 3)))
    idx, _, inl = consensus_maximize(D, eps=0.6)
    assert idx == 0
    assert inl.tolist() == np.flatnonzero(np.linalg.norm(dst - src, axis=1) < 0.6).tolist()


def test_consensus_errors():
    with pytest.raises(InsufficientDataError):
        consensus_maximize(CorrespondenceSet(), eps=1.0)


def exhaustive_consensus(src, dst, hyps, eps):
    best = None
    for k, T in enumerate(hyps):
        r = np.linalg.norm(src @ T.rotation.T + T.translation - dst, axis=1)
        inl = np.flatnonzero(r < eps)
        key = (-len(inl), r[inl].mean() if len(inl) else np.inf, k)
        if best is None or key < best[0]:
            best = (key, inl)
    return best[0][2], best[1]


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_consensus_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    n, h = rng.integers(1, 13), rng.integers(1, 37)
    src = rng.normal(size=(n, 3))
    T = random_transform(rng)
    dst = T.apply(src) + rng.normal(scale=0.3, size=(n, 3))
    hyps = [T if rng.uniform() < 0.3 else random_transform(rng) for _ in range(h)]
    idx, _, inl = consensus_maximize((src, dst), hyps, eps=0.5, chunk=int(rng.integers(1, 8)))
    e_idx, e_inl = exhaustive_consensus(src, dst, hyps, 0.5)
    assert idx == e_idx and inl.tolist() == e_inl.tolist()


# ----------------------------------------------------------------- kabsch

def test_kabsch_exact(rng):
    D, T, _ = planted_set(rng, 50, 0.0)
    assert np.allclose(kabsch_weighted(D).as_matrix(), T.as_matrix(), atol=1e-9)


def test_kabsch_zero_weight_outliers(rng):
    D, T, mask = planted_set(rng, 50, 0.4)
    assert np.allclose(kabsch_weighted(D, mask.astype(float)).as_matrix(), T.as_matrix(), atol=1e-9)


def test_kabsch_reflection_trap(rng):
    # planar source mirrored through its plane: the unconstrained optimum is a reflection
    src = np.c_[rng.normal(size=(30, 2)), np.zeros(30)]
    dst = src * [1, 1, -1] + rng.normal(scale=0.01, size=(30, 3))
    dst[:, 2] += rng.normal(scale=0.3, size=30)
    T = kabsch_weighted((src, dst))
    assert is_rotation(T.rotation)
    oracle = horn_oracle(src, dst)
    res = lambda X: np.sum((X.apply(src) - dst) ** 2)  # noqa: E731
    assert abs(res(T) - res(oracle)) < 1e-9


def test_kabsch_matches_horn_weighted(rng):
    for _ in range(30):
        src, dst = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        w = rng.uniform(0, 1, 20)
        assert np.allclose(kabsch_weighted((src, dst), w).as_matrix(), horn_oracle(src, dst, w).as_matrix(),
                           atol=1e-8)


def test_kabsch_degenerate():
    line = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
    with pytest.raises(DegenerateError):
        kabsch_weighted((line, line))
    with pytest.raises(InsufficientDataError):
        kabsch_weighted((line[:2], line[:2]))
    with pytest.raises(InvalidArgumentError):
        kabsch_weighted((line, line), np.zeros(5))


# ----------------------------------------------------------------- ransac

def test_ransac_all_inliers_stops_early(rng):
    D, T, _ = planted_set(rng, 30, 0.0)
    rep = ransac(D, 0.01, 50_000, seed=1)
    assert np.allclose(rep.transform.as_matrix(), T.as_matrix(), atol=1e-6)
    assert rep.inlier_count == 30 and rep.iterations < 1000


def test_ransac_sixty_percent_outliers(rng):
    D, T, mask = planted_set(rng, 100, 0.6)
    rep = ransac(D, 0.05, 50_000, seed=2)
    assert np.isin(np.flatnonzero(mask), rep.inliers).mean() >= 0.95
    assert rre(T.rotation, rep.transform.rotation) < 0.5
    assert np.linalg.norm(T.translation - rep.transform.translation) < 0.01


def test_ransac_pure_outliers_small_set(rng):
    D = CorrespondenceSet(rng.uniform(-5, 5, size=(200, 3)), rng.uniform(-5, 5, size=(200, 3)))
    rep = ransac(D, 0.1, 5000, seed=0)
    assert rep.inlier_count < 25


def test_ransac_deterministic_and_errors(rng):
    D, _, _ = planted_set(rng, 60, 0.5)
    a, b = ransac(D, 0.05, 2000, seed=4), ransac(D, 0.05, 2000, seed=4)
    assert np.array_equal(a.transform.as_matrix(), b.transform.as_matrix())
    with pytest.raises(InsufficientDataError):
        ransac(D.subset([0, 1]), 0.05)


def test_ransac_budget_without_adaptive_stop(rng):
    D, _, _ = planted_set(rng, 50, 0.0)
    assert ransac(D, 0.01, 640, seed=0, confidence=None).iterations == 640


# ----------------------------------------------------------------- graph / k-core

def test_graph_inliers_complete(rng):
    D, _, _ = planted_set(rng, 4, 0.0)
    g = build_compatibility_graph(D, 0.01)
    assert g.edges().tolist() == [list(e) for e in itertools.combinations(range(4), 2)]


def test_graph_displaced_pair_oracle(rng):
    D, _, _ = planted_set(rng, 12, 0.0, noise=0.0)
    beta = 0.05
    D.dst[3] += [5 * beta, 0, 0]
    g = build_compatibility_graph(D, beta)
    for i, j in itertools.permutations(range(12), 2):
        expect = abs(np.linalg.norm(D.dst[i] - D.dst[j]) - np.linalg.norm(D.src[i] - D.src[j])) <= 2 * beta
        assert g.adjacency[i, j] == expect
    assert not g.adjacency.diagonal().any()


def test_graph_single_vertex():
    g = build_compatibility_graph((np.zeros((1, 3)), np.zeros((1, 3))), 1.0)
    assert len(g) == 1 and len(g.edges()) == 0
    with pytest.raises(InvalidArgumentError):
        build_compatibility_graph((np.zeros((1, 3)), np.zeros((1, 3))), 0.0)


def test_kcore_triangle_with_pendant():
    assert max_kcore(graph_of([(0, 1), (1, 2), (0, 2), (2, 3)], 4)).tolist() == [0, 1, 2]


def test_kcore_complete():
    g = graph_of(itertools.combinations(range(5), 2), 5)
    assert max_kcore(g).tolist() == [0, 1, 2, 3, 4]
    assert core_numbers(g).tolist() == [4] * 5


def test_kcore_empty():
    assert len(max_kcore(CompatibilityGraph(np.zeros((0, 0), dtype=bool)))) == 0


@pytest.mark.parametrize("p", [0.1, 0.3, 0.5])
def test_kcore_random_matches_brute_force(p):
    rng = np.random.default_rng(int(p * 10))
    for _ in range(10):
        n = 30
        upper = np.triu(rng.uniform(size=(n, n)) < p, 1)
        adj = upper | upper.T
        k, verts = brute_core(adj.tolist())
        assert max_kcore(CompatibilityGraph(adj)).tolist() == verts


# ----------------------------------------------------------------- gnc / kiss

def test_gnc_planted_exact(rng):
    T = random_transform(rng)
    src = rng.uniform(-3, 3, size=(15, 3))
    dst = T.apply(src)
    dst[10:] = rng.uniform(-3, 3, size=(5, 3))
    rep = gnc_tls((src, dst), 0.05)
    assert np.allclose(rep.transform.as_matrix(), T.as_matrix(), atol=1e-6)
    assert rep.inliers.tolist() == list(range(10))


def test_gnc_no_outliers_is_kabsch(rng):
    src, dst, _, _ = planted_pairs(rng, 40, 0.0, noise=0.01)
    rep = gnc_tls((src, dst), 1.0)
    assert np.allclose(rep.transform.as_matrix(), kabsch_weighted((src, dst)).as_matrix(), atol=1e-9)


def test_gnc_seventy_percent_outliers(rng):
    c = 0.1
    src, dst, T, _ = planted_pairs(rng, 200, 0.7, noise=c / 5)
    rep = gnc_tls((src, dst), c)
    assert rre(T.rotation, rep.transform.rotation) < 1.0
    assert np.linalg.norm(T.translation - rep.transform.translation) < 2 * c


def test_gnc_rigid_equivariance(rng):
    src, dst, T, _ = planted_pairs(rng, 60, 0.3)
    G = random_transform(rng)
    a = gnc_tls((src, dst), 0.05).transform
    b = gnc_tls((G.apply(src), G.apply(dst)), 0.05).transform
    conj = compose(G, compose(a, inverse(G)))
    assert np.allclose(b.as_matrix(), conj.as_matrix(), atol=1e-6)


def test_kiss_all_inliers(rng):
    D, T, _ = planted_set(rng, 50, 0.0)
    rep = kiss_solver(D, 0.1)
    assert rep.inlier_count == 50
    assert np.allclose(rep.transform.as_matrix(), T.as_matrix(), atol=1e-9)


def test_kiss_pure_noise(rng):
    D = CorrespondenceSet(rng.uniform(-50, 50, size=(300, 3)), rng.uniform(-50, 50, size=(300, 3)))
    with pytest.raises(InsufficientDataError):
        kiss_solver(D, 0.05)


def test_kiss_deterministic(rng):
    D, _, _ = planted_set(rng, 300, 0.6, noise=0.01)
    a, b = kiss_solver(D, 0.05), kiss_solver(D, 0.05)
    assert np.array_equal(a.transform.as_matrix(), b.transform.as_matrix())
    assert np.array_equal(a.inliers, b.inliers)


def test_kiss_needs_three(rng):
    with pytest.raises(InsufficientDataError):
        kiss_solver((np.zeros((2, 3)), np.zeros((2, 3))), 0.1)
