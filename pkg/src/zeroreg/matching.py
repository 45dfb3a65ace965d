"""Mutual nearest-neighbor matching within a scale and one rigid-transform
hypothesis per matched keypoint pair."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError
from .geometry import RigidTransform, yaw_rotation


@dataclass
class CorrespondenceSet:
    """Matched points plus one (R, t) hypothesis per pair, all as arrays."""

    src: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    dst: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rotations: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    translations: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    scales: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype="<U1"))

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 3)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 3)
        n = len(self.src)
        if len(self.rotations) == 0 and n:
            self.rotations = np.tile(np.eye(3), (n, 1, 1))
            self.translations = self.dst - self.src
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        self.scales = np.asarray(self.scales)
        if len(self.scales) == 0 and n:
            self.scales = np.full(n, "m")
        if not (len(self.dst) == len(self.rotations) == len(self.translations) == len(self.scales) == n):
            raise ValueError("correspondence arrays must be aligned")

    def __len__(self):
        return len(self.src)

    def hypothesis(self, i) -> RigidTransform:
        return RigidTransform(self.rotations[i], self.translations[i])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return CorrespondenceSet(self.src[idx], self.dst[idx], self.rotations[idx],
                                 self.translations[idx], self.scales[idx])

    @classmethod
    def concat(cls, sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls()
        return cls(np.concatenate([s.src for s in sets]), np.concatenate([s.dst for s in sets]),
                   np.concatenate([s.rotations for s in sets]),
                   np.concatenate([s.translations for s in sets]),
                   np.concatenate([s.scales for s in sets]))


def _sq_dists(A, B):
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def mutual_match(F_P, F_Q):
    """(i, j) pairs that are each other's nearest neighbor (squared Euclidean;
    ties resolve to the lowest index). Sorted by i."""
    F_P = np.asarray(F_P, dtype=np.float64)
    F_Q = np.asarray(F_Q, dtype=np.float64)
    if len(F_P) == 0 or len(F_Q) == 0:
        return np.zeros((0, 2), dtype=np.intp)
    d = _sq_dists(F_P, F_Q)
    nn_pq = np.argmin(d, axis=1)
    nn_qp = np.argmin(d, axis=0)
    i = np.flatnonzero(nn_qp[nn_pq] == np.arange(len(F_P)))
    return np.stack([i, nn_pq[i]], axis=1).astype(np.intp)


def yaw_scores(c_p, c_q):
    """Circular cross-correlation over the sector axis.

    ``score[..., s] = sum_{h, w, d} c_p[..., h, w, d] * c_q[..., h, (w + s) % W, d]``
    """
    c_p = np.asarray(c_p, dtype=np.float64)
    c_q = np.asarray(c_q, dtype=np.float64)
    W = c_p.shape[-2]
    # correlation theorem along W, summed over the height and radial axes
    spec = np.conj(np.fft.rfft(c_p, axis=-2)) * np.fft.rfft(c_q, axis=-2)
    return np.fft.irfft(spec.sum(axis=(-3, -1)), n=W, axis=-1)


def _softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def yaw_offsets_from_scores(scores, mode="window", half_window=2):
    """Soft-argmax sector offsets in [0, W) for a (..., W) stack of scores.

    Returns (offsets, valid) where ``valid`` is False for flat score vectors.
    Temperature is 0.1 * std(scores), floored at 1e-6.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    W = scores.shape[-1]
    std = scores.std(axis=-1)
    scale = np.abs(scores).max(axis=-1)
    valid = (scale > 0) & (std > 1e-9 * np.maximum(scale, 1e-300))
    temp = np.maximum(0.1 * std, 1e-6)
    probs = _softmax(scores / temp[:, None])
    if mode == "literal":
        d = probs @ np.arange(W)
        return np.mod(d, W), valid
    peak = np.argmax(scores, axis=-1)
    offsets = np.arange(-half_window, half_window + 1)
    idx = (peak[:, None] + offsets[None, :]) % W
    p = np.take_along_axis(probs, idx, axis=-1)
    d = peak + (p * offsets).sum(-1) / p.sum(-1)
    return np.mod(d, W), valid


def estimate_yaw_offset(c_p, c_q, mode="window"):
    """Sector offset d such that rotating patch p by 2*pi*d/W about its normal
    best matches patch q."""
    d, valid = yaw_offsets_from_scores(yaw_scores(c_p, c_q)[None], mode)
    if not valid[0]:
        raise DegenerateError("flat yaw score: maps carry no orientation information")
    return float(d[0])


def pairwise_transform(p, q, R_p, R_q, d, n_sectors) -> RigidTransform:
    R = np.asarray(R_q).T @ yaw_rotation(d, n_sectors) @ np.asarray(R_p)
    return RigidTransform(R, np.asarray(q) - R @ np.asarray(p))


def pairwise_transforms(P, Q, R_p, R_q, d, n_sectors):
    """Batched :func:`pairwise_transform`; returns (rotations, translations)."""
    angles = 2 * np.pi * np.asarray(d) / n_sectors
    c, s = np.cos(angles), np.sin(angles)
    yaw = np.zeros((len(angles), 3, 3))
    yaw[:, 0, 0], yaw[:, 0, 1], yaw[:, 1, 0], yaw[:, 1, 1], yaw[:, 2, 2] = c, -s, s, c, 1.0
    R = np.transpose(R_q, (0, 2, 1)) @ yaw @ R_p
    t = Q - np.einsum("nij,nj->ni", R, P)
    return R, t


def match_scale(S_P, S_Q, cfg) -> CorrespondenceSet:
    """Mutual matches between two descriptor sets of the same scale, each
    turned into a transform hypothesis. Pairs with a flat yaw score are
    dropped."""
    pairs = mutual_match(S_P.features, S_Q.features)
    if len(pairs) == 0:
        return CorrespondenceSet()
    i, j = pairs[:, 0], pairs[:, 1]
    scores = yaw_scores(S_P.maps[i], S_Q.maps[j])
    d, valid = yaw_offsets_from_scores(scores, cfg.yaw_mode)
    i, j, d = i[valid], j[valid], d[valid]
    if len(i) == 0:
        return CorrespondenceSet()
    P, Q = S_P.keypoints[i], S_Q.keypoints[j]
    R, t = pairwise_transforms(P, Q, S_P.frames[i], S_Q.frames[j], d, cfg.n_sectors)
    return CorrespondenceSet(P, Q, R, t, np.full(len(i), S_P.scale))

