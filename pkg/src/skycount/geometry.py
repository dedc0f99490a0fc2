"""Low-level geometric primitives shared across the simulator.

Axis convention everywhere: right-handed, z-up, units in meters.
"""

from __future__ import annotations

import numpy as np

# Ray hit kinds (integer codes so batched queries stay in numpy).
HIT_NONE = 0
HIT_GROUND = 1
HIT_OBSTACLE = 2


def unit(v: np.ndarray) -> np.ndarray:
    """Normalize a vector; raises ValueError on zero input."""
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def point_in_box(p, box_min, box_max) -> bool:
    """Inclusive point-in-AABB test."""
    p = np.asarray(p, dtype=float)
    return bool(np.all(p >= np.asarray(box_min)) and np.all(p <= np.asarray(box_max)))


def ray_boxes(origin: np.ndarray, dirs: np.ndarray, box_min: np.ndarray,
              box_max: np.ndarray) -> np.ndarray:
    """Entry distances of rays against a set of AABBs (slab method).

    Args:
        origin: (3,) ray origin shared by all rays.
        dirs:   (N, 3) unit ray directions.
        box_min, box_max: (B, 3) box corners.

    Returns:
        (N, B) array of entry distances; np.inf where a ray misses a box.
        Origins inside a box report distance 0.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    n = dirs.shape[0]
    b = box_min.shape[0]
    if b == 0:
        return np.full((n, 1), np.inf)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs  # inf on zero components
        t1 = (box_min[None, :, :] - origin[None, None, :]) * inv[:, None, :]
        t2 = (box_max[None, :, :] - origin[None, None, :]) * inv[:, None, :]

    # Zero direction components: the slab is crossed for all t iff the
    # origin lies inside it, never otherwise.
    zero = dirs == 0.0  # (N, 3)
    if zero.any():
        inside = (origin[None, None, :] >= box_min[None, :, :]) & (
            origin[None, None, :] <= box_max[None, :, :]
        )  # (1, B, 3)
        zmask = zero[:, None, :] & np.ones((1, b, 1), dtype=bool)
        t1 = np.where(zmask, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(zmask, np.where(inside, np.inf, -np.inf), t2)

    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    tmin = lo.max(axis=2)
    tmax = hi.min(axis=2)
    entry = np.maximum(tmin, 0.0)
    hit = (tmax >= entry) & (tmax >= 0.0)
    return np.where(hit, entry, np.inf)


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from points to the segment [a, b], clamped projection.

    Args:
        points: (M, 3) query points.
        a, b:   segment endpoints.

    Returns:
        (M,) distances.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def orthonormal_basis(forward: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-handed camera basis (right, down, forward) for a boresight.

    Uses world +z as the up reference; falls back to +x when the
    boresight is (anti)parallel to +z so the result is always defined.
    """
    f = unit(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(float(f @ up)) > 1.0 - 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    right = unit(np.cross(f, up))
    down = np.cross(f, right)
    return right, down, f
