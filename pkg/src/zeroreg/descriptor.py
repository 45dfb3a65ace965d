"""Patch descriptors: a yaw-invariant feature vector plus an H x W x D
cylindrical map whose W axis shifts cyclically under rotation about the patch
normal.

Two hand-crafted backends share the cylindrical map and differ in the
feature vector. Other backends register themselves in ``BACKENDS`` and are
selected by ``PipelineConfig.descriptor_backend``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bootstrap import SpatialIndex
from .errors import InsufficientDataError
from .geometry import as_points
from .sampling import Patch, extract_patches


@dataclass
class DescriptorSet:
    keypoints: np.ndarray  # (M, 3)
    frames: np.ndarray  # (M, 3, 3)
    features: np.ndarray  # (M, F)
    maps: np.ndarray  # (M, H, W, D)
    scale: str = "m"
    source_index: np.ndarray | None = None  # position of each keypoint in the requested list

    def __post_init__(self):
        n = len(self.keypoints)
        if not (len(self.frames) == len(self.features) == len(self.maps) == n):
            raise ValueError("descriptor set sequences must have equal length")

    def __len__(self):
        return len(self.keypoints)


class CylindricalHistogram:
    """Per (height bin, yaw sector) cell, a soft histogram of radial distance
    over D channels, normalized by the patch's point count. The feature vector
    is the L2-normalized sum over height and yaw."""

    name = "cylindrical"

    def describe_many(self, patch_points, frames, n_height, n_sectors, n_channels):
        """Vectorized over patches: ``patch_points`` is a list of (k_i, 3)
        normalized arrays, ``frames`` an (M, 3, 3) stack."""
        M = len(patch_points)
        maps = np.zeros((M, n_height, n_sectors, n_channels))
        if M == 0:
            return np.zeros((0, n_channels)), maps
        counts = np.array([len(p) for p in patch_points])
        owner = np.repeat(np.arange(M), counts)
        pts = np.concatenate(patch_points, axis=0)
        # rotate through a zero-padded (M, K, 3) stack: one batched matmul
        starts = np.cumsum(counts) - counts
        slot = np.arange(len(pts)) - starts[owner]
        padded = np.zeros((M, int(counts.max()), 3))
        padded[owner, slot] = pts
        local = np.matmul(padded, np.swapaxes(frames, 1, 2))[owner, slot]
        x, y, z = local[:, 0], local[:, 1], local[:, 2]
        rho = np.clip(np.hypot(x, y), 0.0, 1.0)
        phi = np.mod(np.arctan2(y, x), 2 * np.pi)
        h = np.clip(np.floor((z + 1.0) * 0.5 * n_height).astype(np.intp), 0, n_height - 1)
        w = np.floor(phi * n_sectors / (2 * np.pi)).astype(np.intp) % n_sectors
        u = rho * n_channels
        k0 = np.minimum(np.floor(u).astype(np.intp), n_channels - 1)
        frac = np.where(k0 == n_channels - 1, 0.0, u - k0)
        k1 = np.minimum(k0 + 1, n_channels - 1)
        weight = 1.0 / counts[owner]

        cell = ((owner * n_height + h) * n_sectors + w) * n_channels
        size = M * n_height * n_sectors * n_channels
        flat = np.bincount(cell + k0, weights=weight * (1.0 - frac), minlength=size)
        flat += np.bincount(cell + k1, weights=weight * frac, minlength=size)
        maps = flat.reshape(M, n_height, n_sectors, n_channels)
        return self.features_from_maps(maps), maps

    @staticmethod
    def features_from_maps(maps):
        pooled = maps.sum(axis=(1, 2))
        norm = np.linalg.norm(pooled, axis=1, keepdims=True)
        return np.divide(pooled, norm, out=np.zeros_like(pooled), where=norm > 0)


class SpectralCylindricalHistogram(CylindricalHistogram):
    """Same cylindrical map, richer yaw-invariant feature: the square-rooted
    height x radius profile (C summed over yaw, radial channels pooled in
    groups of ``radial_group``) concatenated with the low-frequency DFT
    magnitudes, along yaw, of each height ring's square-rooted occupancy.
    Both parts are invariant to circular shifts along W."""

    name = "cylindrical-spectral"
    n_harmonics = 4
    radial_group = 4
    spectrum_weight = 2.0

    @classmethod
    def features_from_maps(cls, maps):
        M, H, W, D = maps.shape
        starts = np.arange(0, D, cls.radial_group)
        profile = np.sqrt(np.add.reduceat(maps.sum(axis=2), starts, axis=2)).reshape(M, -1)
        ring = np.sqrt(maps.sum(axis=3))
        k = min(cls.n_harmonics, W // 2)
        spectrum = np.abs(np.fft.rfft(ring, axis=2))[:, :, 1:k + 1].reshape(M, -1)
        feat = np.concatenate([profile, spectrum * (cls.spectrum_weight / np.sqrt(W))], axis=1)
        norm = np.linalg.norm(feat, axis=1, keepdims=True)
        return np.divide(feat, norm, out=np.zeros_like(feat), where=norm > 0)


BACKENDS = {b.name: b for b in (CylindricalHistogram, SpectralCylindricalHistogram)}


def get_backend(name):
    try:
        return BACKENDS[name]()
    except KeyError:
        raise ValueError(f"unknown descriptor backend {name!r}; available: {sorted(BACKENDS)}") from None


def describe(patch: Patch, cfg):
    """(feature vector, cylindrical map) for one patch."""
    backend = get_backend(cfg.descriptor_backend)
    F, C = backend.describe_many([np.asarray(patch.points, dtype=np.float64)], patch.frame[None],
                                 cfg.n_height, cfg.n_sectors, cfg.n_channels)
    return F[0], C[0]


def describe_set(cloud, keypoints, r, cfg, seed=None, scale="m", index=None) -> DescriptorSet:
    """Describe the patch around every keypoint; keypoints whose patch is
    unusable are dropped from all outputs."""
    pts = as_points(cloud)
    keypoints = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    index = index or SpatialIndex(pts)
    seed = cfg.seed if seed is None else seed
    kept, frames, patch_points = extract_patches(pts, index, keypoints, r, cfg.n_patch, seed=seed,
                                                 scale=scale, sensor_origin=cfg.sensor_origin)
    if len(kept) == 0:
        raise InsufficientDataError(f"no usable patches at scale {scale!r} (r = {r:.4g})")
    backend = get_backend(cfg.descriptor_backend)
    F, C = backend.describe_many(patch_points, frames, cfg.n_height, cfg.n_sectors, cfg.n_channels)
    return DescriptorSet(keypoints[kept], frames, F, C, scale, source_index=kept)
