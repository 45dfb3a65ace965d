"""Scene-adaptive resolution: voxel size from the cloud's principal spread and
per-scale search radii from a target neighborhood density."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientDataError, InvalidArgumentError
from .geometry import as_points

SCALES = ("l", "m", "g")


@dataclass(frozen=True)
class SceneShape:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns match eigenvalues
    sphericity: float
    spread: float

    @property
    def normal(self):
        return self.eigenvectors[:, 2]


@dataclass(frozen=True)
class ScaleRadii:
    local: float
    middle: float
    global_: float

    def __post_init__(self):
        if not 0 < self.local <= self.middle <= self.global_:
            raise InvalidArgumentError(f"radii must satisfy 0 < r_l <= r_m <= r_g, got {self.as_tuple()}")

    def as_tuple(self):
        return (self.local, self.middle, self.global_)

    def __getitem__(self, scale):
        return {"l": self.local, "m": self.middle, "g": self.global_}[scale]


class SpatialIndex:
    """Immutable kd-tree over a cloud; closed-ball radius queries."""

    def __init__(self, points, workers=1):
        self.points = np.ascontiguousarray(as_points(points))
        self.tree = cKDTree(self.points)
        self.workers = workers

    def __len__(self):
        return len(self.points)

    def radius_neighbors(self, query, r):
        """Indices of points with ``||p - query|| <= r``, sorted ascending."""
        query = np.asarray(query, dtype=np.float64)
        # pad the kd-tree radius, then apply the closed-ball test exactly
        idx = np.asarray(self.tree.query_ball_point(query, r * (1 + 1e-9) + 1e-12, return_sorted=True),
                         dtype=np.intp)
        if len(idx):
            idx = idx[np.linalg.norm(self.points[idx] - query, axis=1) <= r]
        return idx

    def batch_neighbors(self, queries, r):
        """Per-query neighbor index lists (kd-tree semantics, no exact recheck)."""
        return self.tree.query_ball_point(np.asarray(queries, dtype=np.float64), r,
                                          workers=self.workers, return_sorted=True)


def radius_neighbors(index: SpatialIndex, query, r):
    if r < 0:
        raise InvalidArgumentError("radius must be >= 0")
    return index.radius_neighbors(query, r)


def voxel_keys(points, voxel_size):
    return np.floor(points / voxel_size).astype(np.int64)


def voxel_downsample(cloud, voxel_size):
    """Replace the points of every occupied voxel (grid anchored at the origin)
    by their centroid. Output is ordered by voxel key."""
    if not voxel_size > 0:
        raise InvalidArgumentError(f"voxel size must be > 0, got {voxel_size}")
    pts = as_points(cloud)
    if len(pts) == 0:
        return pts.copy()
    keys = voxel_keys(pts, voxel_size)
    keys -= keys.min(axis=0)
    extent = keys.max(axis=0) + 1
    if float(extent[0]) * float(extent[1]) * float(extent[2]) < 2.0 ** 62:
        # row-major scalar key keeps the lexicographic voxel order
        flat = (keys[:, 0] * extent[1] + keys[:, 1]) * extent[2] + keys[:, 2]
        _, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
    else:
        _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sums = np.stack([np.bincount(inv, weights=pts[:, k], minlength=len(counts)) for k in range(3)], axis=1)
    return sums / counts[:, None]


def sample_fraction(n, fraction):
    return min(n, max(3, int(math.ceil(fraction * n))))


def scene_shape(cloud, delta_v=1.0, seed=0) -> SceneShape:
    """PCA of a seeded ``delta_v`` fraction of the cloud (at least 3 points)."""
    pts = as_points(cloud)
    k = sample_fraction(len(pts), delta_v)
    if k < 3 or len(pts) < 3:
        raise InsufficientDataError(f"scene_shape needs >= 3 points, got {len(pts)}")
    if k < len(pts):
        rng = np.random.default_rng(seed)
        pts = pts[np.sort(rng.choice(len(pts), size=k, replace=False))]
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    w, V = np.linalg.eigh(cov)
    w = np.clip(w[::-1], 0.0, None)
    V = V[:, ::-1]
    sphericity = 0.0 if w[0] < 1e-12 else float(min(1.0, w[2] / w[0]))
    proj = pts @ V[:, 2]
    return SceneShape(w, V, sphericity, float(proj.max() - proj.min()))


def voxel_size_from_shape(shape: SceneShape, cfg) -> float:
    kappa = cfg.kappa_spheric if shape.sphericity >= cfg.tau_v else cfg.kappa_disc
    return kappa * math.sqrt(shape.spread)


def estimate_voxel_size(P, Q, cfg, seed=None) -> float:
    """Voxel size from the larger of the two clouds."""
    P, Q = as_points(P), as_points(Q)
    larger = P if len(P) >= len(Q) else Q
    shape = scene_shape(larger, cfg.delta_v, cfg.seed if seed is None else seed)
    v = voxel_size_from_shape(shape, cfg)
    if not v > 0:
        raise InsufficientDataError("cloud has zero spread along its normal axis; cannot pick a voxel size")
    return v


def neighbor_fraction(tree: cKDTree, n, r):
    """Mean over all tree points of |closed ball(r)| / n (self included)."""
    return float(tree.count_neighbors(tree, r)) / (n * n)


def _smallest_radius_reaching(tree, n, target, lo, hi, rel_tol):
    """Smallest r in (lo, hi] (to ``rel_tol``) with neighbor_fraction >= target,
    given fraction(lo) < target <= fraction(hi)."""
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if neighbor_fraction(tree, n, mid) >= target:
            hi = mid
        else:
            lo = mid
    return lo, hi


def density_radius(sample, tau, rel_tol=1e-3, tree=None):
    """Radius whose mean neighbor fraction over ``sample`` is closest to ``tau``.

    Bisection over [min nonzero NN distance, diameter bound]. The fraction is a
    nondecreasing step function of r; among radii with the minimal gap the
    smallest is returned.
    """
    pts = as_points(sample)
    n = len(pts)
    if n == 0:
        raise InsufficientDataError("density_radius on an empty sample")
    if n == 1:
        raise InsufficientDataError("density_radius needs at least 2 distinct points")
    tree = tree or cKDTree(pts)
    d, _ = tree.query(pts, k=2)
    nonzero = d[:, 1][d[:, 1] > 0]
    if len(nonzero) == 0:
        raise InsufficientDataError("all sampled points coincide")
    r_min = float(nonzero.min())
    extent = pts.max(axis=0) - pts.min(axis=0)
    r_top = float(np.linalg.norm(extent)) * (1 + 1e-9) + 1e-12

    f_min = neighbor_fraction(tree, n, r_min)
    if f_min >= tau:
        return r_min
    lo, hi = _smallest_radius_reaching(tree, n, tau, r_min, r_top, rel_tol)
    f_lo = neighbor_fraction(tree, n, lo)
    f_hi = neighbor_fraction(tree, n, hi)
    if abs(f_lo - tau) <= abs(f_hi - tau):
        # the whole step below the crossing is better: locate where it starts
        if f_lo <= f_min:
            return r_min
        _, hi = _smallest_radius_reaching(tree, n, f_lo, r_min, lo, rel_tol)
    return hi


def estimate_radii(cloud, cfg, seed=None) -> ScaleRadii:
    """Local / middle / global radii for the (already voxelized) larger cloud,
    each capped at ``cfg.r_max``."""
    pts = as_points(cloud)
    if len(pts) == 0:
        raise InsufficientDataError("estimate_radii on an empty cloud")
    seed = cfg.seed if seed is None else seed
    if len(pts) > cfg.n_r:
        rng = np.random.default_rng(seed)
        pts = pts[np.sort(rng.choice(len(pts), size=cfg.n_r, replace=False))]
    tree = cKDTree(pts)
    radii = []
    for scale in SCALES:
        r = density_radius(pts, cfg.taus[scale], tree=tree)
        radii.append(min(r, cfg.r_max))
    # equal taus can still bisect to marginally different radii
    radii = np.maximum.accumulate(radii)
    return ScaleRadii(*map(float, radii))
