"""Queryable 3D world built from a scene.

Provides voxel occupancy, an obstacle surface point cloud, exact ray
casting against boxes and the ground plane, multi-camera depth/visibility
captures, and grid-based path planning.  A World is immutable after
construction; all queries are read-only.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import (
    HIT_GROUND,
    HIT_NONE,
    HIT_OBSTACLE,
    orthonormal_basis,
    ray_boxes,
    unit,
)
from .scene import Scene

log = logging.getLogger(__name__)

DEFAULT_VOXEL = 0.5
SURFACE_PITCH = 0.25
PERSON_HEIGHT = 1.7
# Platforms implied under elevated crowd blocks (floor slabs that occlude).
_PLATFORM_THICKNESS = 0.1

_KIND_NAMES = {HIT_NONE: "none", HIT_GROUND: "ground", HIT_OBSTACLE: "obstacle"}


@dataclass
class Pose:
    position: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)


@dataclass(frozen=True)
class RayHit:
    kind: str
    distance: float


@dataclass(frozen=True)
class CameraParams:
    fov_deg: float = 45.0
    width: int = 64
    height: int = 64
    max_range: float = 120.0


@dataclass(frozen=True)
class RigConfig:
    """Camera rig: evenly spaced horizontal cameras plus an optional nadir."""

    params: CameraParams = CameraParams()
    horizontal_count: int = 4
    include_nadir: bool = True


@dataclass
class CameraCapture:
    """One camera's output: a boresight-depth grid plus visible persons.

    ``depth[r, c]`` is the distance along the boresight axis to the first
    surface hit through that pixel (inf when nothing is hit within range).
    ``visible`` holds (person_index, (row, col), range) for every person
    inside the frustum, within range, and with clear line of sight.
    """

    origin: np.ndarray
    basis: np.ndarray  # columns: right, down, forward
    tan_half: float
    fov_deg: float
    max_range: float
    depth: np.ndarray
    visible: list[tuple[int, tuple[int, int], float]] = field(default_factory=list)

    @property
    def boresight(self) -> np.ndarray:
        return self.basis[:, 2]

    def back_project(self, row: int, col: int, depth: float) -> np.ndarray:
        """World point of a pixel at the given boresight depth."""
        h, w = self.depth.shape
        u = (2.0 * (col + 0.5) / w - 1.0) * self.tan_half
        v = (2.0 * (row + 0.5) / h - 1.0) * self.tan_half
        return self.origin + self.basis @ np.array([u, v, 1.0]) * depth


@dataclass
class Observation:
    pose: Pose
    captures: list[CameraCapture]

    def visible_counts(self) -> list[int]:
        return [len(c.visible) for c in self.captures]


class World:
    """Derived runtime geometry for a scene."""

    def __init__(self, scene: Scene, voxel: float = DEFAULT_VOXEL):
        self.scene = scene
        self.extent = np.asarray(scene.extent, dtype=float)
        self.voxel = float(voxel)
        self.persons = scene.persons

        boxes = [(np.array(b.min_corner), np.array(b.max_corner))
                 for b in scene.obstacles]
        for blk in scene.blocks:
            if blk.base_height > 0:
                x0, y0, x1, y1 = blk.region
                lo = np.array([x0, y0, max(0.0, blk.base_height - _PLATFORM_THICKNESS)])
                hi = np.array([x1, y1, blk.base_height])
                boxes.append((lo, hi))
        if boxes:
            self.box_min = np.array([b[0] for b in boxes])
            self.box_max = np.array([b[1] for b in boxes])
        else:
            self.box_min = np.zeros((0, 3))
            self.box_max = np.zeros((0, 3))

        self.dims = tuple(
            max(1, int(math.ceil(e / self.voxel - 1e-9))) for e in self.extent
        )
        self.occupancy = self._build_occupancy()
        self.surface_cloud = self._build_surface_cloud()
        self._inflated_cache: dict[float, np.ndarray] = {}

    # ------------------------------------------------------------------
    # construction helpers

    def _build_occupancy(self) -> np.ndarray:
        occ = np.zeros(self.dims, dtype=bool)
        v = self.voxel
        for lo, hi in zip(self.box_min, self.box_max):
            idx_lo = [max(0, int(math.floor(a / v))) for a in lo]
            idx_hi = [
                min(d - 1, int(math.ceil(b / v)) - 1)
                for b, d in zip(hi, self.dims)
            ]
            if all(l <= h for l, h in zip(idx_lo, idx_hi)):
                occ[idx_lo[0]:idx_hi[0] + 1,
                    idx_lo[1]:idx_hi[1] + 1,
                    idx_lo[2]:idx_hi[2] + 1] = True
        return occ

    def _build_surface_cloud(self) -> np.ndarray:
        """Points on every box face at SURFACE_PITCH spacing, edges included."""
        pts = []
        for lo, hi in zip(self.box_min, self.box_max):
            axes_pts = []
            for a, b in zip(lo, hi):
                n = max(1, int(math.ceil((b - a) / SURFACE_PITCH - 1e-9)))
                axes_pts.append(np.linspace(a, b, n + 1))
            for axis in range(3):
                u, w = [axes_pts[i] for i in range(3) if i != axis]
                gu, gw = np.meshgrid(u, w, indexing="ij")
                for value in (lo[axis], hi[axis]):
                    face = np.empty((gu.size, 3))
                    cols = [i for i in range(3) if i != axis]
                    face[:, cols[0]] = gu.ravel()
                    face[:, cols[1]] = gw.ravel()
                    face[:, axis] = value
                    pts.append(face)
        return np.vstack(pts) if pts else np.zeros((0, 3))

    # ------------------------------------------------------------------
    # voxel helpers

    def voxel_index(self, p) -> tuple[int, int, int]:
        p = np.asarray(p, dtype=float)
        idx = np.floor(p / self.voxel).astype(int)
        return tuple(int(np.clip(idx[i], 0, self.dims[i] - 1)) for i in range(3))

    def voxel_center(self, idx) -> np.ndarray:
        return (np.asarray(idx, dtype=float) + 0.5) * self.voxel

    def in_extent(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= 0.0) and np.all(p <= self.extent))

    def is_occupied(self, p) -> bool:
        return bool(self.occupancy[self.voxel_index(p)])

    def inflated_occupancy(self, clearance: float) -> np.ndarray:
        key = round(float(clearance), 6)
        if key not in self._inflated_cache:
            r = int(math.ceil(clearance / self.voxel - 1e-9))
            if r <= 0 or not self.occupancy.any():
                grid = self.occupancy
            else:
                grid = ndimage.maximum_filter(
                    self.occupancy.astype(np.uint8), size=2 * r + 1, mode="constant"
                ).astype(bool)
            self._inflated_cache[key] = grid
        return self._inflated_cache[key]

    def obstacle_top(self, xy: np.ndarray) -> np.ndarray:
        """Max box top over each (x, y) query point; 0 where nothing stands."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        tops = np.zeros(xy.shape[0])
        for lo, hi in zip(self.box_min, self.box_max):
            inside = (
                (xy[:, 0] >= lo[0]) & (xy[:, 0] <= hi[0])
                & (xy[:, 1] >= lo[1]) & (xy[:, 1] <= hi[1])
            )
            tops[inside] = np.maximum(tops[inside], hi[2])
        return tops

    # ------------------------------------------------------------------
    # ray queries

    def raycast_batch(self, origin, dirs, max_range: float):
        """Nearest hit per unit-direction ray.

        Returns (distance, kind) arrays; distance is inf where kind is
        HIT_NONE.  Ground hits only count inside the scene's xy extent.
        """
        origin = np.asarray(origin, dtype=float)
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = dirs.shape[0]
        dist = np.full(n, np.inf)
        kind = np.full(n, HIT_NONE, dtype=np.int8)

        if self.box_min.shape[0]:
            entry = ray_boxes(origin, dirs, self.box_min, self.box_max)
            t_box = entry.min(axis=1)
            hit = t_box <= max_range
            dist[hit] = t_box[hit]
            kind[hit] = HIT_OBSTACLE

        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_g = -origin[2] / dz
        ok = np.isfinite(t_g) & (t_g >= 0.0) & (t_g <= max_range)
        if ok.any():
            px = origin[0] + t_g * dirs[:, 0]
            py = origin[1] + t_g * dirs[:, 1]
            ok &= (px >= -1e-9) & (px <= self.extent[0] + 1e-9)
            ok &= (py >= -1e-9) & (py <= self.extent[1] + 1e-9)
            closer = ok & (t_g < dist)
            dist[closer] = t_g[closer]
            kind[closer] = HIT_GROUND
        return dist, kind

    def raycast(self, origin, direction, max_range: float = np.inf) -> RayHit:
        """First intersection with ground or any box along a ray."""
        direction = np.asarray(direction, dtype=float)
        d = unit(direction)  # raises on zero direction
        dist, kind = self.raycast_batch(origin, d[None, :], max_range)
        return RayHit(_KIND_NAMES[int(kind[0])], float(dist[0]))

    def obstacle_entry(self, origin, dirs) -> np.ndarray:
        """Distance to the nearest box along each ray (inf when clear)."""
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        if not self.box_min.shape[0]:
            return np.full(dirs.shape[0], np.inf)
        return ray_boxes(np.asarray(origin, float), dirs,
                         self.box_min, self.box_max).min(axis=1)

    def line_of_sight(self, a, b) -> bool:
        """True when no box blocks the open segment from a to b."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        d = b - a
        length = float(np.linalg.norm(d))
        if length < 1e-12:
            return True
        t = float(self.obstacle_entry(a, (d / length)[None, :])[0])
        return t >= length - 1e-6

    # ------------------------------------------------------------------
    # sensing

    def _capture_one(self, origin: np.ndarray, boresight: np.ndarray,
                     params: CameraParams) -> CameraCapture:
        right, down, forward = orthonormal_basis(boresight)
        basis = np.column_stack([right, down, forward])
        tan_half = math.tan(math.radians(params.fov_deg) / 2.0)
        w, h = params.width, params.height

        us = (2.0 * (np.arange(w) + 0.5) / w - 1.0) * tan_half
        vs = (2.0 * (np.arange(h) + 0.5) / h - 1.0) * tan_half
        uu, vv = np.meshgrid(us, vs)  # (h, w)
        cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        norms = np.linalg.norm(cam, axis=1)
        dirs = (cam @ basis.T) / norms[:, None]

        dist, _ = self.raycast_batch(origin, dirs, params.max_range)
        depth = (dist / norms).reshape(h, w)  # boresight depth; inf stays inf

        cap = CameraCapture(
            origin=origin.copy(),
            basis=basis,
            tan_half=tan_half,
            fov_deg=params.fov_deg,
            max_range=params.max_range,
            depth=depth,
        )
        if self.persons.shape[0]:
            heads = self.persons + np.array([0.0, 0.0, PERSON_HEIGHT])
            rel = heads - origin
            fwd = rel @ forward
            with np.errstate(divide="ignore", invalid="ignore"):
                u = (rel @ right) / fwd
                v = (rel @ down) / fwd
            rng = np.linalg.norm(rel, axis=1)
            cand = (
                (fwd > 1e-9)
                & (np.abs(u) <= tan_half)
                & (np.abs(v) <= tan_half)
                & (rng <= params.max_range)
            )
            idxs = np.nonzero(cand)[0]
            if idxs.size:
                seg_dirs = rel[idxs] / rng[idxs, None]
                entry = self.obstacle_entry(origin, seg_dirs)
                clear = entry >= rng[idxs] - 1e-6
                for k, pi in enumerate(idxs):
                    if not clear[k]:
                        continue
                    col = int(np.clip((u[pi] / tan_half + 1.0) / 2.0 * w, 0, w - 1))
                    row = int(np.clip((v[pi] / tan_half + 1.0) / 2.0 * h, 0, h - 1))
                    cap.visible.append((int(pi), (row, col), float(rng[pi])))
        return cap

    def capture(self, pose: Pose, rig: RigConfig = RigConfig()) -> Observation:
        """Multi-camera capture at a pose (horizontal ring plus nadir)."""
        captures = []
        n = rig.horizontal_count
        for k in range(n):
            az = pose.yaw + 2.0 * math.pi * k / max(1, n)
            captures.append(self._capture_one(
                pose.position, np.array([math.cos(az), math.sin(az), 0.0]),
                rig.params))
        if rig.include_nadir:
            captures.append(self._capture_one(
                pose.position, np.array([0.0, 0.0, -1.0]), rig.params))
        return Observation(pose=pose, captures=captures)

    def capture_aimed(self, position, boresight, params: CameraParams) -> Observation:
        """Single-camera capture aimed along an arbitrary direction."""
        pos = np.asarray(position, dtype=float)
        cap = self._capture_one(pos, unit(np.asarray(boresight, float)), params)
        return Observation(pose=Pose(pos), captures=[cap])

    # ------------------------------------------------------------------
    # path planning

    def segment_free(self, a, b, clearance: float = 0.0, step: float = 0.1) -> bool:
        """Sampled check that [a, b] stays in (inflated-)free space."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        grid = self.inflated_occupancy(clearance) if clearance > 0 else self.occupancy
        length = float(np.linalg.norm(b - a))
        n = max(2, int(math.ceil(length / step)) + 1)
        ts = np.linspace(0.0, 1.0, n)
        pts = a[None, :] + ts[:, None] * (b - a)[None, :]
        if np.any(pts < -1e-9) or np.any(pts > self.extent[None, :] + 1e-9):
            return False
        idx = np.clip(
            np.floor(pts / self.voxel).astype(int),
            0,
            np.array(self.dims) - 1,
        )
        return not bool(grid[idx[:, 0], idx[:, 1], idx[:, 2]].any())

    def plan_path(self, a, b, clearance: float = 1.0,
                  max_expansions: int = 400_000):
        """Collision-free polyline from a to b on the 26-connected voxel graph.

        Returns a list of waypoints (starting at a, ending at b) or None
        when b is unreachable.  Obstacles are inflated by ``clearance``.
        Costs are Euclidean edge lengths; ties break by voxel index.
        """
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if not self.in_extent(a):
            raise ValueError(f"start {a.tolist()} outside scene extent")
        if self.is_occupied(a):
            raise ValueError(f"start {a.tolist()} inside an obstacle")
        if not self.in_extent(b):
            return None
        inflated = self.inflated_occupancy(clearance)
        va = self.voxel_index(a)
        vb = self.voxel_index(b)
        if inflated[vb]:
            return None
        if va == vb:
            return [a] if np.array_equal(a, b) else [a, b]
        if self.segment_free(a, b, clearance):
            return [a, b]

        moves = [
            (np.array(off), self.voxel * math.sqrt(sum(o * o for o in off)))
            for off in itertools.product((-1, 0, 1), repeat=3)
            if off != (0, 0, 0)
        ]
        dims = np.array(self.dims)
        goal_center = self.voxel_center(vb)

        def h(idx):
            return float(np.linalg.norm(self.voxel_center(idx) - goal_center))

        start = va
        g = {start: 0.0}
        came: dict[tuple, tuple] = {}
        heap = [(h(start), start)]
        closed = set()
        found = False
        expansions = 0
        while heap:
            f, cur = heapq.heappop(heap)
            if cur in closed:
                continue
            closed.add(cur)
            if cur == vb:
                found = True
                break
            expansions += 1
            if expansions > max_expansions:
                log.warning("path search aborted after %d expansions", expansions)
                return None
            cur_arr = np.array(cur)
            for off, cost in moves:
                nxt_arr = cur_arr + off
                if np.any(nxt_arr < 0) or np.any(nxt_arr >= dims):
                    continue
                nxt = tuple(int(x) for x in nxt_arr)
                if inflated[nxt] or nxt in closed:
                    continue
                cand = g[cur] + cost
                if cand < g.get(nxt, np.inf):
                    g[nxt] = cand
                    came[nxt] = cur
                    heapq.heappush(heap, (cand + h(nxt), nxt))
        if not found:
            return None
        cells = [vb]
        while cells[-1] != start:
            cells.append(came[cells[-1]])
        cells.reverse()
        waypoints = [a] + [self.voxel_center(c) for c in cells] + [b]
        out = [waypoints[0]]
        for p in waypoints[1:]:
            if np.linalg.norm(p - out[-1]) > 1e-12:
                out.append(p)
        return out


def build_world(scene: Scene, voxel: float = DEFAULT_VOXEL) -> World:
    return World(scene, voxel=voxel)
