"""Robust rigid pose estimation from correspondences.

* ``consensus_maximize``: pick the per-pair hypothesis with the most inliers.
* ``ransac``: 3-point hypothesize-and-verify baseline.
* ``kiss_solver``: compatibility graph -> maximum k-core -> GNC-TLS.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, InsufficientDataError, InvalidArgumentError
from .geometry import RigidTransform
from .matching import CorrespondenceSet


@dataclass
class SolverReport:
    transform: RigidTransform
    inliers: np.ndarray
    iterations: int = 0
    wall_time: float = 0.0
    converged: bool = True
    extra: dict = field(default_factory=dict)

    @property
    def inlier_count(self):
        return len(self.inliers)


def _pairs(D):
    if isinstance(D, CorrespondenceSet):
        return D.src, D.dst
    src, dst = D
    return np.asarray(src, dtype=np.float64).reshape(-1, 3), np.asarray(dst, dtype=np.float64).reshape(-1, 3)


def residuals(src, dst, T: RigidTransform):
    return np.linalg.norm(src @ T.rotation.T + T.translation - dst, axis=1)


def count_inliers(D, T: RigidTransform, eps):
    """Indices whose residual is strictly below ``eps``."""
    if not eps > 0:
        raise InvalidArgumentError("inlier threshold must be > 0")
    src, dst = _pairs(D)
    return np.flatnonzero(residuals(src, dst, T) < eps)


def consensus_maximize(D, hypotheses=None, eps=None, chunk=256):
    """Hypothesis with the largest inlier set.

    ``hypotheses`` is either a sequence of RigidTransform or a pair of stacked
    (rotations, translations); it defaults to the per-pair hypotheses stored in
    ``D``. Ties on inlier count go to the smallest mean inlier residual, then to
    the lowest index. Returns ``(index, transform, inlier indices)``.
    """
    src, dst = _pairs(D)
    if hypotheses is None:
        Rs, ts = D.rotations, D.translations
    elif isinstance(hypotheses, tuple) and len(hypotheses) == 2 and np.ndim(hypotheses[0]) == 3:
        Rs, ts = np.asarray(hypotheses[0], float), np.asarray(hypotheses[1], float)
    else:
        Rs = np.array([h.rotation for h in hypotheses]).reshape(-1, 3, 3)
        ts = np.array([h.translation for h in hypotheses]).reshape(-1, 3)
    if len(Rs) == 0 or len(src) == 0:
        raise InsufficientDataError("consensus_maximize needs at least one hypothesis and one pair")
    if eps is None or not eps > 0:
        raise InvalidArgumentError("inlier threshold must be > 0")

    best = (-1, math.inf, -1)  # (count, mean residual, index)
    best_mask = None
    for start in range(0, len(Rs), chunk):
        R = Rs[start:start + chunk]
        t = ts[start:start + chunk]
        # (h, n) residuals
        res = np.linalg.norm(np.einsum("hij,nj->hni", R, src) + t[:, None, :] - dst[None], axis=2)
        mask = res < eps
        counts = mask.sum(axis=1)
        sums = np.where(mask, res, 0.0).sum(axis=1)
        means = np.divide(sums, counts, out=np.full(len(counts), math.inf), where=counts > 0)
        top = counts.max()
        if top < best[0]:
            continue
        cand = np.flatnonzero(counts == top)
        k = cand[np.argmin(means[cand])]  # argmin keeps the lowest index on exact ties
        key = (int(top), float(means[k]), start + int(k))
        if key[0] > best[0] or (key[0] == best[0] and key[1] < best[1]):
            best, best_mask = key, mask[k]
    idx = best[2]
    return idx, RigidTransform(Rs[idx], ts[idx]), np.flatnonzero(best_mask)


def kabsch_weighted(D, weights=None) -> RigidTransform:
    """Closed-form minimizer of sum_n w_n ||R p_n + t - q_n||^2 over SE(3)."""
    src, dst = _pairs(D)
    if len(src) < 3:
        raise InsufficientDataError(f"kabsch needs >= 3 pairs, got {len(src)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not w.sum() > 0:
        raise InvalidArgumentError("weights must be nonnegative with positive sum")
    w = w / w.sum()
    mu_p = w @ src
    mu_q = w @ dst
    Pc = src - mu_p
    Qc = dst - mu_q
    H = (Pc * w[:, None]).T @ Qc
    # collinear / coincident source points leave a rotation about the line free
    sv = np.linalg.svd((Pc * np.sqrt(w)[:, None]), compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateError("degenerate (collinear) weighted point configuration")
    U, _, Vt = np.linalg.svd(H)
    s = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, s]) @ U.T
    return RigidTransform(R, mu_q - R @ mu_p)


def _kabsch_batch(P, Q):
    """Unweighted Kabsch for a (B, k, 3) stack of minimal samples."""
    mp = P.mean(axis=1, keepdims=True)
    mq = Q.mean(axis=1, keepdims=True)
    H = np.swapaxes(P - mp, 1, 2) @ (Q - mq)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    D = np.tile(np.eye(3), (len(P), 1, 1))
    D[:, 2, 2] = d
    R = V @ D @ Ut
    t = mq[:, 0] - np.einsum("bij,bj->bi", R, mp[:, 0])
    return R, t


def _triangle_heights(A, B, C):
    """Smallest altitude of each triangle (zero for collinear triples)."""
    ab, ac, bc = B - A, C - A, C - B
    area2 = np.linalg.norm(np.cross(ab, ac), axis=1)
    longest = np.max(np.stack([np.linalg.norm(x, axis=1) for x in (ab, ac, bc)]), axis=0)
    return np.divide(area2, longest, out=np.zeros_like(area2), where=longest > 0)


def ransac(D, eps, max_iter=50000, seed=0, confidence=0.999, batch=64) -> SolverReport:
    """3-point RANSAC with adaptive stopping, refined by Kabsch on the inliers.

    Samples are drawn and scored in batches of ``batch``; the stopping test
    runs after each batch, so the count reported can exceed the adaptive bound
    by less than one batch. ``confidence=None`` disables adaptive stopping and
    spends the whole ``max_iter`` budget.
    """
    t0 = time.perf_counter()
    src, dst = _pairs(D)
    n = len(src)
    if n < 3:
        raise InsufficientDataError(f"ransac needs >= 3 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    scene = max(float(np.ptp(src, axis=0).max()), 1e-12)
    best_count, best_R, best_t = -1, np.eye(3), np.zeros(3)
    needed = max_iter
    it = 0
    while it < min(needed, max_iter):
        b = min(batch, max_iter - it)
        idx = rng.integers(0, n, size=(b, 3))
        distinct = (idx[:, 0] != idx[:, 1]) & (idx[:, 0] != idx[:, 2]) & (idx[:, 1] != idx[:, 2])
        A, B, C = src[idx[:, 0]], src[idx[:, 1]], src[idx[:, 2]]
        ok = distinct & (_triangle_heights(A, B, C) >= 1e-6 * scene)
        it += b
        if not np.any(ok):
            continue
        idx = idx[ok]
        R, t = _kabsch_batch(src[idx], dst[idx])
        res = np.linalg.norm(np.einsum("bij,nj->bni", R, src) + t[:, None] - dst[None], axis=2)
        counts = (res < eps).sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_R, best_t = int(counts[k]), R[k], t[k]
            ratio = best_count / n
            if confidence is not None and ratio > 0:
                needed = 0 if ratio >= 1.0 else math.ceil(math.log(1 - confidence) / math.log(1 - ratio ** 3))
    T = RigidTransform(best_R, best_t)
    inliers = count_inliers((src, dst), T, eps)
    if len(inliers) >= 3:
        try:
            refined = kabsch_weighted((src[inliers], dst[inliers]))
            refined_inliers = count_inliers((src, dst), refined, eps)
            if len(refined_inliers) >= len(inliers):
                T, inliers = refined, refined_inliers
        except DegenerateError:
            pass
    return SolverReport(T, inliers, it, time.perf_counter() - t0)


@dataclass
class CompatibilityGraph:
    adjacency: np.ndarray  # dense symmetric bool, zero diagonal
    noise_bound: float = 0.0

    def __len__(self):
        return len(self.adjacency)

    @property
    def degrees(self):
        return self.adjacency.sum(axis=1)

    def neighbors(self, v):
        return np.flatnonzero(self.adjacency[v])

    def edges(self):
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return np.stack([i, j], axis=1)


def build_compatibility_graph(D, beta) -> CompatibilityGraph:
    """Edge (n, m) iff the source and target pair distances differ by <= 2*beta."""
    if not beta > 0:
        raise InvalidArgumentError("noise bound must be > 0")
    src, dst = _pairs(D)
    n = len(src)
    adj = np.zeros((n, n), dtype=bool)
    # row blocks bound the temporary (block, n) distance arrays
    block = max(1, 4_000_000 // max(n, 1))
    for a in range(0, n, block):
        dp = np.linalg.norm(src[a:a + block, None] - src[None], axis=2)
        dq = np.linalg.norm(dst[a:a + block, None] - dst[None], axis=2)
        adj[a:a + block] = np.abs(dq - dp) <= 2 * beta
    np.fill_diagonal(adj, False)
    return CompatibilityGraph(adj, float(beta))


def core_numbers(graph: CompatibilityGraph):
    """Core number of every vertex by batched min-degree peeling."""
    adj = graph.adjacency
    n = len(adj)
    core = np.zeros(n, dtype=np.intp)
    if n == 0:
        return core
    deg = adj.sum(axis=1).astype(np.intp)
    alive = np.ones(n, dtype=bool)
    k = 0
    while alive.any():
        k = max(k, int(deg[alive].min()))
        # nothing of degree <= k in the remaining graph can belong to the (k+1)-core
        drop = np.flatnonzero(alive & (deg <= k))
        core[drop] = k
        alive[drop] = False
        deg -= adj[drop].sum(axis=0)
    return core


def max_kcore(graph: CompatibilityGraph):
    """Vertices of the nonempty k-core with the largest k (sorted)."""
    core = core_numbers(graph)
    if len(core) == 0:
        return np.zeros(0, dtype=np.intp)
    return np.flatnonzero(core == core.max())


def gnc_tls(D, noise_bound, max_iter=100, factor=1.4, weight_tol=1e-3, cost_tol=1e-9) -> SolverReport:
    """Graduated non-convexity for the truncated least squares registration
    cost with residual bound ``noise_bound``.

    Alternates weighted Kabsch with the closed-form TLS weight update while
    the control parameter mu grows geometrically by ``factor``.
    """
    t0 = time.perf_counter()
    src, dst = _pairs(D)
    if len(src) < 3:
        raise InsufficientDataError(f"gnc_tls needs >= 3 pairs, got {len(src)}")
    c2 = noise_bound ** 2
    w = np.ones(len(src))
    T = kabsch_weighted((src, dst), w)
    r2 = residuals(src, dst, T) ** 2
    converged = True
    it = 0
    if r2.max() > c2:
        mu = c2 / max(2 * r2.max() - c2, 1e-12)
        prev_cost = math.inf
        converged = False
        for it in range(1, max_iter + 1):
            lo = mu / (mu + 1) * c2
            hi = (mu + 1) / mu * c2
            with np.errstate(divide="ignore"):
                mid = noise_bound * np.sqrt(mu * (mu + 1) / r2) - mu
            w = np.where(r2 <= lo, 1.0, np.where(r2 >= hi, 0.0, mid))
            if w.sum() <= 0 or np.count_nonzero(w) < 3:
                break
            try:
                T = kabsch_weighted((src, dst), w)
            except DegenerateError:
                break
            r2 = residuals(src, dst, T) ** 2
            cost = float(np.sum(w * r2))
            # uniformly tiny weights at small mu are not a converged binary pattern
            binary = (np.all((w < weight_tol) | (w > 1 - weight_tol))
                      and np.count_nonzero(w > 1 - weight_tol) >= 3)
            if binary or abs(cost - prev_cost) < cost_tol:
                converged = True
                break
            prev_cost = cost
            mu *= factor
    inliers = np.flatnonzero(r2 <= c2)
    if len(inliers) >= 3:
        try:
            T = kabsch_weighted((src[inliers], dst[inliers]))
            inliers = np.flatnonzero(residuals(src, dst, T) ** 2 <= c2)
        except DegenerateError:
            pass
    return SolverReport(T, inliers, it, time.perf_counter() - t0, converged)


def kiss_solver(D, voxel_size, noise_factor=1.5, max_iter=100, factor=1.4) -> SolverReport:
    """Deterministic k-core pruning followed by GNC-TLS with bound 1.5 * voxel."""
    t0 = time.perf_counter()
    src, dst = _pairs(D)
    if len(src) < 3:
        raise InsufficientDataError(f"kiss_solver needs >= 3 correspondences, got {len(src)}")
    beta = noise_factor * voxel_size
    graph = build_compatibility_graph((src, dst), beta)
    core = max_kcore(graph)
    if len(core) < 3:
        raise InsufficientDataError(f"maximum k-core has {len(core)} vertices; no consistent structure")
    report = gnc_tls((src[core], dst[core]), beta, max_iter=max_iter, factor=factor)
    inliers = core[report.inliers]
    if len(inliers) < 3:
        raise InsufficientDataError(f"only {len(inliers)} inliers survive GNC; no consistent structure")
    return SolverReport(report.transform, inliers, report.iterations, time.perf_counter() - t0,
                        report.converged, {"core_size": int(len(core)), "noise_bound": beta})
