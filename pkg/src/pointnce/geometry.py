"""Core point-cloud geometry: normalization, metrics, and rotations.

A point cloud is an ``(n, 3)`` float64 array of model-space coordinates.
Quaternions are ``(4,)`` float64 arrays ordered ``(w, x, y, z)``. All
functions here are pure and safe to call concurrently; randomized ones
take an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import numpy as np

METRICS = ("euclidean", "cosine", "chebyshev")

_UNIT_QUAT_TOL = 1e-8


def as_cloud(points) -> np.ndarray:
    """Validate and return ``points`` as an (n, 3) float64 array, n >= 1."""
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] < 1:
        raise ValueError(f"expected an (n, 3) point array, got shape {cloud.shape}")
    if not np.all(np.isfinite(cloud)):
        raise ValueError("point cloud contains non-finite coordinates")
    return cloud


def normalize_bounding_sphere(cloud) -> np.ndarray:
    """Center a cloud on its centroid and scale its farthest point to norm 1.

    The bounding sphere is approximated as (centroid, max distance to the
    centroid). Raises ``ValueError("zero-radius cloud")`` when all points
    coincide.
    """
    cloud = as_cloud(cloud)
    centered = cloud - cloud.mean(axis=0)
    radius = float(np.sqrt((centered * centered).sum(axis=1).max()))
    if radius == 0.0:
        raise ValueError("zero-radius cloud")
    return centered / radius


def distance(metric: str, p, q) -> float:
    """Distance between two 3-vectors under ``metric``.

    euclidean: ||p - q||_2; chebyshev: max per-axis |p - q|;
    cosine: 1 - p.q / (||p|| ||q||), defined only for nonzero vectors.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if metric == "euclidean":
        return float(np.linalg.norm(p - q))
    if metric == "chebyshev":
        return float(np.abs(p - q).max())
    if metric == "cosine":
        np_, nq = float(np.linalg.norm(p)), float(np.linalg.norm(q))
        if np_ == 0.0 or nq == 0.0:
            raise ValueError("cosine distance undefined for zero vector")
        return float(1.0 - float(p @ q) / (np_ * nq))
    raise ValueError(f"unknown metric {metric!r}")


def distances_to(metric: str, cloud: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Vectorized ``distance(metric, p, center)`` for every point p in ``cloud``."""
    cloud = as_cloud(cloud)
    center = np.asarray(center, dtype=np.float64)
    diff = cloud - center
    if metric == "euclidean":
        return np.sqrt((diff * diff).sum(axis=1))
    if metric == "chebyshev":
        return np.abs(diff).max(axis=1)
    if metric == "cosine":
        norms = np.sqrt((cloud * cloud).sum(axis=1))
        nc = float(np.linalg.norm(center))
        if nc == 0.0 or np.any(norms == 0.0):
            raise ValueError("cosine distance undefined for zero vector")
        return 1.0 - (cloud @ center) / (norms * nc)
    raise ValueError(f"unknown metric {metric!r}")


def random_unit_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Draw a rotation uniformly over SO(3), returned as a unit quaternion.

    Uses the two-angles-plus-radius-split construction (Shoemake): with
    u1, u2, u3 uniform on [0, 1), the four components below are uniform on
    the unit 3-sphere.
    """
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    t2, t3 = 2.0 * np.pi * u2, 2.0 * np.pi * u3
    return np.array(
        [b * np.cos(t3), a * np.sin(t2), a * np.cos(t2), b * np.sin(t3)],
        dtype=np.float64,
    )


def axis_angle_quaternion(axis, angle: float) -> np.ndarray:
    """Unit quaternion for a rotation of ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    n = float(np.linalg.norm(axis))
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = np.sin(half) * axis / n
    return q


def quaternion_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def rotation_matrix(q) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotate(cloud, q) -> np.ndarray:
    """Rotate every point of ``cloud`` by the unit quaternion ``q``."""
    cloud = as_cloud(cloud)
    q = np.asarray(q, dtype=np.float64)
    if abs(float(np.linalg.norm(q)) - 1.0) > _UNIT_QUAT_TOL:
        raise ValueError("rotation requires a unit quaternion")
    return cloud @ rotation_matrix(q).T


def pairwise_distances(cloud) -> np.ndarray:
    """(n, n) matrix of pairwise euclidean distances."""
    cloud = as_cloud(cloud)
    diff = cloud[:, None, :] - cloud[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))
