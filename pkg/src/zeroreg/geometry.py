"""Point clouds, rigid transforms and the two rotation constructors used by the
pairwise pose step (principal-axis alignment and discrete yaw)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

Z_AXIS = np.array([0.0, 0.0, 1.0])

_UNIT_TOL = 1e-9
_AXIS_EPS = 1e-8


@dataclass(frozen=True)
class PointCloud:
    """Ordered (N, 3) float64 points in meters with an optional source tag."""

    points: np.ndarray
    source: str | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


def as_points(cloud) -> np.ndarray:
    """Accept a PointCloud or anything array-like and return (N, 3) float64."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def is_rotation(R, tol=1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    ortho = np.linalg.norm(R.T @ R - np.eye(3), ord="fro")
    return bool(ortho <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True)
class RigidTransform:
    """x -> rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise InvalidArgumentError("transform has non-finite entries")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> RigidTransform:
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        return as_points(points) @ self.rotation.T + self.translation

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return compose(self, other)
        return self.apply(other)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def apply(T: RigidTransform, cloud):
    """Apply ``T`` to a cloud; returns the same kind of object it was given."""
    moved = T.apply(cloud)
    if isinstance(cloud, PointCloud):
        return PointCloud(moved, cloud.source)
    return moved


def axis_angle_matrix(axis, angle) -> np.ndarray:
    """Rodrigues' formula for a unit axis."""
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rodrigues_align(v) -> np.ndarray:
    """Rotation taking the unit vector ``v`` onto +z.

    The rotation axis ``v x z`` is normalized before use. When ``v`` is
    antiparallel to z the axis is undefined and +x is used (a half turn).
    """
    v = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("rodrigues_align: non-finite vector")
    if abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
        raise InvalidArgumentError(f"rodrigues_align: expected a unit vector, got norm {np.linalg.norm(v)}")
    n = np.cross(v, Z_AXIS)
    sin_theta = np.linalg.norm(n)
    cos_theta = float(np.clip(v @ Z_AXIS, -1.0, 1.0))
    if sin_theta < _AXIS_EPS:
        if cos_theta > 0:
            return np.eye(3)
        return axis_angle_matrix(np.array([1.0, 0.0, 0.0]), np.pi)
    theta = np.arctan2(sin_theta, cos_theta)
    return axis_angle_matrix(n / sin_theta, theta)


def rodrigues_align_batch(V) -> np.ndarray:
    """Vectorized :func:`rodrigues_align` for (M, 3) unit vectors."""
    V = np.asarray(V, dtype=np.float64).reshape(-1, 3)
    n = np.cross(V, Z_AXIS)
    s = np.linalg.norm(n, axis=1)
    c = np.clip(V[:, 2], -1.0, 1.0)
    out = np.empty((len(V), 3, 3))
    regular = s >= _AXIS_EPS
    if np.any(regular):
        k = n[regular] / s[regular, None]
        K = np.zeros((len(k), 3, 3))
        K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
        K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
        K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
        # sin(theta) = s, cos(theta) = c for theta = atan2(s, c)
        out[regular] = np.eye(3) + s[regular, None, None] * K + (1.0 - c[regular, None, None]) * (K @ K)
    flip = np.diag([1.0, -1.0, -1.0])
    out[~regular & (c > 0)] = np.eye(3)
    out[~regular & (c <= 0)] = flip
    return out


def rot_z(angle) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_rotation(offset, n_sectors) -> np.ndarray:
    """Rotation about z by ``2*pi*offset/n_sectors``."""
    if int(n_sectors) != n_sectors or n_sectors < 2:
        raise InvalidArgumentError(f"yaw_rotation: sector count must be an integer >= 2, got {n_sectors}")
    if not np.isfinite(offset):
        raise InvalidArgumentError("yaw_rotation: non-finite offset")
    return rot_z(2.0 * np.pi * offset / n_sectors)


def random_rotation(rng, max_angle=np.pi) -> np.ndarray:
    """Rotation with uniformly distributed axis and angle drawn so that, for
    ``max_angle = pi``, the result is Haar-uniform on SO(3)."""
    if max_angle >= np.pi:
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis_angle_matrix(axis, rng.uniform(0.0, max_angle))
