"""Keypoint selection by farthest point sampling and extraction of
scale-normalized local patches with a PCA reference frame."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .bootstrap import SpatialIndex
from .errors import DegenerateError, InsufficientDataError, InvalidArgumentError
from .geometry import as_points, rodrigues_align, rodrigues_align_batch

SCALE_IDS = {"l": 0, "m": 1, "g": 2}


@dataclass(frozen=True)
class Patch:
    center: np.ndarray
    radius: float
    points: np.ndarray  # (k, 3), (p - center) / radius
    frame: np.ndarray  # rotates the patch normal onto +z
    scale: str = "m"


def farthest_point_sampling(cloud, n, seed=None):
    """Greedy max-min subset of ``min(n, len(cloud))`` indices.

    The first pick is the point farthest from the centroid, so the result does
    not depend on ``seed`` (kept for interface symmetry).
    """
    pts = as_points(cloud)
    if len(pts) == 0:
        raise InsufficientDataError("farthest_point_sampling on an empty cloud")
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    m = min(int(n), len(pts))
    selected = np.empty(m, dtype=np.intp)
    centroid = pts.mean(axis=0)
    selected[0] = int(np.argmax(np.einsum("ij,ij->i", pts - centroid, pts - centroid)))
    d2 = np.einsum("ij,ij->i", pts - pts[selected[0]], pts - pts[selected[0]])
    tree = cKDTree(pts) if m > 64 else None
    for k in range(1, m):
        nxt = int(np.argmax(d2))
        selected[k] = nxt
        if tree is None:
            cand = slice(None)
        else:
            # only points closer to the new pick than the current max-min
            # distance can have their distance reduced
            cand = np.asarray(tree.query_ball_point(pts[nxt], math.sqrt(d2[nxt]) * (1 + 1e-9) + 1e-12),
                              dtype=np.intp)
        diff = pts[cand] - pts[nxt]
        d2[cand] = np.minimum(d2[cand], np.einsum("ij,ij->i", diff, diff))
    return selected


def _orient_normals(normals, centers, sensor_origin):
    """Flip each normal so it points toward the sensor; exact ties keep sign."""
    view = np.asarray(sensor_origin, dtype=np.float64) - centers
    s = np.einsum("ij,ij->i", normals, view)
    return np.where((s < 0)[:, None], -normals, normals)


def local_frame(points, sensor_origin=(0.0, 0.0, 0.0), center=None):
    """Rotation taking the smallest-variance axis of ``points`` onto +z, with
    the axis oriented toward ``sensor_origin``.

    ``center`` is the anchor for the orientation test (default: the centroid).
    """
    pts = as_points(points)
    if len(pts) < 3:
        raise DegenerateError(f"local_frame needs >= 3 points, got {len(pts)}")
    mean = pts.mean(axis=0)
    centered = pts - mean
    w, V = np.linalg.eigh(centered.T @ centered / len(pts))
    if w[1] <= 1e-12 * max(w[2], 1e-300):
        raise DegenerateError("collinear or coincident patch points; no reference plane")
    normal = V[:, 0]
    anchor = mean if center is None else np.asarray(center, dtype=np.float64)
    normal = _orient_normals(normal[None], anchor[None], sensor_origin)[0]
    return rodrigues_align(normal / np.linalg.norm(normal))


def _subsample(neigh, n_patch, seed, scale_id, key):
    if len(neigh) <= n_patch:
        return neigh
    rng = np.random.default_rng([seed, scale_id, key])
    return np.sort(rng.choice(neigh, size=n_patch, replace=False))


def extract_patch(cloud, index: SpatialIndex, center, r, n_patch, seed=0, scale="m",
                  sensor_origin=(0.0, 0.0, 0.0), key=0):
    """Patch around ``center`` or None when fewer than 3 neighbors (or a
    degenerate frame) make it unusable.

    The reference frame uses every neighbor; only the returned points are
    subsampled to ``n_patch``.
    """
    if not r > 0:
        raise InvalidArgumentError("patch radius must be > 0")
    pts = as_points(cloud)
    center = np.asarray(center, dtype=np.float64)
    neigh = index.radius_neighbors(center, r)
    if len(neigh) < 3:
        return None
    try:
        frame = local_frame(pts[neigh], sensor_origin, center=center)
    except DegenerateError:
        return None
    keep = _subsample(neigh, n_patch, seed, SCALE_IDS.get(scale, 0), key)
    normalized = (pts[keep] - center) / r
    return Patch(center, float(r), normalized, frame, scale)


def extract_patches(cloud, index: SpatialIndex, centers, r, n_patch, seed=0, scale="m",
                    sensor_origin=(0.0, 0.0, 0.0)):
    """Batched :func:`extract_patch` over many centers.

    Returns ``(kept, frames, patch_points)`` where ``kept`` indexes into
    ``centers``; ``patch_points[i]`` are the normalized points of ``kept[i]``.
    """
    pts = as_points(cloud)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    scale_id = SCALE_IDS.get(scale, 0)
    neighbors = index.batch_neighbors(centers, r * (1 + 1e-9) + 1e-12)
    counts = np.fromiter((len(x) for x in neighbors), dtype=np.intp, count=len(neighbors))
    if counts.sum() == 0:
        return np.zeros(0, dtype=np.intp), np.zeros((0, 3, 3)), []
    flat = np.concatenate([np.asarray(x, dtype=np.intp) for x in neighbors])
    seg = np.repeat(np.arange(len(centers)), counts)
    local = pts[flat] - centers[seg]  # center-relative for conditioning
    inside = np.einsum("ij,ij->i", local, local) <= r * r  # exact closed ball
    flat, seg, local = flat[inside], seg[inside], local[inside]
    counts = np.bincount(seg, minlength=len(centers))
    valid = np.flatnonzero(counts >= 3)
    if len(valid) == 0:
        return valid, np.zeros((0, 3, 3)), []
    keep_rows = counts[seg] >= 3
    flat, seg, local = flat[keep_rows], seg[keep_rows], local[keep_rows]
    cnt = counts[valid].astype(np.float64)
    starts = np.concatenate([[0], np.cumsum(counts[valid])[:-1]])

    # batched covariance of the full neighbor sets
    s1 = np.add.reduceat(local, starts, axis=0)
    s2 = np.add.reduceat(local[:, :, None] * local[:, None, :], starts, axis=0)
    mean = s1 / cnt[:, None]
    cov = s2 / cnt[:, None, None] - mean[:, :, None] * mean[:, None, :]
    w, V = np.linalg.eigh(cov)
    ok = w[:, 1] > 1e-12 * np.maximum(w[:, 2], 1e-300)
    normals = V[:, :, 0]
    normals = _orient_normals(normals, centers[valid], sensor_origin)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    frames = rodrigues_align_batch(normals)

    normalized = local / r
    patch_points = []
    for j in np.flatnonzero(ok):
        i = valid[j]
        lo, hi = starts[j], starts[j] + counts[i]
        if hi - lo > n_patch:
            keep = _subsample(np.arange(lo, hi), n_patch, seed, scale_id, int(i))
            patch_points.append(normalized[keep])
        else:
            patch_points.append(normalized[lo:hi])
    valid, frames = valid[ok], frames[ok]
    return valid, frames, patch_points
