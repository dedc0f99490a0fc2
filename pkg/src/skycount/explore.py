"""Coarse-to-fine crowd exploration.

The agent sweeps the scene at a high altitude, scores each stop, and
descends for systematic low-altitude coverage wherever the score clears
the threshold.  Low-altitude captures deposit weighted density points
into a global cloud that later drives viewpoint planning.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .scorer import HeuristicScorer, ScorerInput, score_location, should_descend
from .world import Observation, Pose, RigConfig, World

log = logging.getLogger(__name__)

UNKNOWN, FREE, OCCUPIED = 0, 1, 2

HIGH_CELL = 2.0
LOW_CELL = 1.0
MERGE_RADIUS = 0.25

# Normalized 3x3 binomial blur applied around each person's image cell.
KERNEL3 = np.array([[1.0, 2.0, 1.0],
                    [2.0, 4.0, 2.0],
                    [1.0, 2.0, 1.0]]) / 16.0


class GridMap2D:
    """Explored/unknown map at a fixed flight altitude.

    Cells are marked only when they fall inside a capture footprint:
    FREE when the agent could hover there, OCCUPIED when an obstacle
    below reaches up to the flight altitude (minus a safety margin).
    """

    def __init__(self, world: World, cell: float, altitude: float,
                 regime: str, margin: float = 1.0):
        self.cell = float(cell)
        self.altitude = float(altitude)
        self.regime = regime
        self.margin = float(margin)
        ex, ey = world.extent[0], world.extent[1]
        self.shape = (
            max(1, int(math.ceil(ex / cell - 1e-9))),
            max(1, int(math.ceil(ey / cell - 1e-9))),
        )
        self.grid = np.full(self.shape, UNKNOWN, dtype=np.int8)
        xs = (np.arange(self.shape[0]) + 0.5) * cell
        ys = (np.arange(self.shape[1]) + 0.5) * cell
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        centers = np.column_stack([gx.ravel(), gy.ravel()])
        self.heights = world.obstacle_top(centers).reshape(self.shape)
        self._xs = xs
        self._ys = ys

    def _rect_slices(self, center_xy, half: float):
        cx, cy = float(center_xy[0]), float(center_xy[1])
        i0 = max(0, int(math.floor((cx - half) / self.cell)))
        i1 = min(self.shape[0] - 1, int(math.floor((cx + half) / self.cell)))
        j0 = max(0, int(math.floor((cy - half) / self.cell)))
        j1 = min(self.shape[1] - 1, int(math.floor((cy + half) / self.cell)))
        if i0 > i1 or j0 > j1:
            return None
        return slice(i0, i1 + 1), slice(j0, j1 + 1)

    def mark_footprint(self, center_xy, half: float):
        sl = self._rect_slices(center_xy, half)
        if sl is None:
            return
        blocked = self.heights[sl] >= self.altitude - self.margin
        self.grid[sl] = np.where(blocked, OCCUPIED, FREE)

    def obstacle_fraction(self, center_xy, half: float) -> float:
        sl = self._rect_slices(center_xy, half)
        if sl is None:
            return 0.0
        return float(np.mean(self.heights[sl] > 0.0))

    def has_unknown_in(self, center_xy, half: float) -> bool:
        sl = self._rect_slices(center_xy, half)
        if sl is None:
            return False
        return bool(np.any(self.grid[sl] == UNKNOWN))

    def known_cells(self) -> int:
        return int(np.count_nonzero(self.grid))

    def frontier_mask(self) -> np.ndarray:
        """FREE cells 4-adjacent to an UNKNOWN cell."""
        unknown = self.grid == UNKNOWN
        near = np.zeros_like(unknown)
        near[:-1, :] |= unknown[1:, :]
        near[1:, :] |= unknown[:-1, :]
        near[:, :-1] |= unknown[:, 1:]
        near[:, 1:] |= unknown[:, :-1]
        return (self.grid == FREE) & near

    def cell_center(self, idx) -> np.ndarray:
        return np.array([self._xs[idx[0]], self._ys[idx[1]]])

    def nearest_frontier(self, pos_xy, region=None, exclude=None):
        """Closest frontier cell (Euclidean on centers, ties by index).

        ``region`` restricts candidates to cells whose centers fall in a
        (center_xy, half) rectangle.  Returns an (i, j) tuple or None.
        """
        mask = self.frontier_mask()
        if region is not None:
            keep = np.zeros_like(mask)
            sl = self._rect_slices(region[0], region[1])
            if sl is not None:
                keep[sl] = True
            mask &= keep
        ii, jj = np.nonzero(mask)
        if exclude:
            drop = np.fromiter(
                ((int(i), int(j)) in exclude for i, j in zip(ii, jj)),
                dtype=bool, count=ii.size,
            )
            ii, jj = ii[~drop], jj[~drop]
        if ii.size == 0:
            return None
        dx = self._xs[ii] - float(pos_xy[0])
        dy = self._ys[jj] - float(pos_xy[1])
        order = np.lexsort((jj, ii, dx * dx + dy * dy))
        k = order[0]
        return (int(ii[k]), int(jj[k]))


class DensityCloud:
    """Weighted 3D density points with per-point viewpoint provenance."""

    def __init__(self):
        self.positions: list[np.ndarray] = []
        self.weights: list[float] = []
        self.origin: list[int] = []  # index into viewpoints per point
        self.viewpoints: list[np.ndarray] = []
        self.first_seen: list[set[int]] = []
        self._hash: dict[tuple[int, int, int], list[int]] = {}

    def __len__(self) -> int:
        return len(self.positions)

    def _cell(self, p) -> tuple[int, int, int]:
        return tuple(int(math.floor(v / MERGE_RADIUS)) for v in p)

    def _nearest_within(self, p: np.ndarray):
        cx, cy, cz = self._cell(p)
        best, best_d = None, MERGE_RADIUS + 1e-12
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for idx in self._hash.get((cx + dx, cy + dy, cz + dz), ()):
                        d = float(np.linalg.norm(self.positions[idx] - p))
                        if d <= best_d:
                            best, best_d = idx, d
        return best

    def add(self, points, weights, viewpoint) -> None:
        """Deposit a batch of weighted points seen from one viewpoint.

        Points landing within the merge radius of an existing point fold
        their weight into it; the earlier provenance is kept.
        """
        vp_index = len(self.viewpoints)
        self.viewpoints.append(np.asarray(viewpoint, dtype=float).copy())
        new_ids: set[int] = set()
        for p, w in zip(np.atleast_2d(points), np.atleast_1d(weights)):
            p = np.asarray(p, dtype=float)
            near = self._nearest_within(p)
            if near is not None:
                self.weights[near] += float(w)
                continue
            idx = len(self.positions)
            self.positions.append(p.copy())
            self.weights.append(float(w))
            self.origin.append(vp_index)
            self._hash.setdefault(self._cell(p), []).append(idx)
            new_ids.add(idx)
        self.first_seen.append(new_ids)

    def as_arrays(self):
        if not self.positions:
            return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int)
        return (
            np.array(self.positions),
            np.array(self.weights),
            np.array(self.origin, dtype=int),
        )

    def viewpoint_of(self, point_index: int) -> np.ndarray:
        return self.viewpoints[self.origin[point_index]]

    @property
    def total_weight(self) -> float:
        return float(sum(self.weights))


def update_distribution(cloud: DensityCloud, points, weights, viewpoint) -> DensityCloud:
    """Append weighted points from a viewpoint into the cloud (in place)."""
    cloud.add(points, weights, viewpoint)
    return cloud


def project_density(obs: Observation, kappa: float):
    """Turn one observation into weighted 3D density points.

    Each visible person splats a unit mass blurred by a 3x3 kernel into
    its camera's density grid; each grid is normalized by its own max,
    and cells at or above ``kappa`` are back-projected through the depth
    grid.  Cells without a depth hit are dropped.

    Returns (points (M, 3), weights (M,)).
    """
    if not (0.0 <= kappa <= 1.0):
        raise ValueError(f"density threshold {kappa} outside [0, 1]")
    pts, wts = [], []
    for cap in obs.captures:
        if not cap.visible:
            continue
        h, w = cap.depth.shape
        grid = np.zeros((h, w))
        for _, (r, c), _ in cap.visible:
            r0, r1 = max(0, r - 1), min(h, r + 2)
            c0, c1 = max(0, c - 1), min(w, c + 2)
            grid[r0:r1, c0:c1] += KERNEL3[
                r0 - (r - 1):3 - ((r + 2) - r1),
                c0 - (c - 1):3 - ((c + 2) - c1),
            ]
        peak = grid.max()
        if peak <= 0.0:
            continue
        norm = grid / peak
        rows, cols = np.nonzero((norm >= kappa) & (norm > 0.0))
        for r, c in zip(rows, cols):
            d = cap.depth[r, c]
            if not np.isfinite(d):
                continue
            pts.append(cap.back_project(int(r), int(c), float(d)))
            wts.append(float(norm[r, c]))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0)
    return np.array(pts), np.array(wts)


def summarize_observation(obs: Observation, obstacle_fraction: float) -> ScorerInput:
    counts = tuple(obs.visible_counts())
    return ScorerInput(
        visible_counts=counts,
        density_mass=float(sum(counts)),
        obstacle_fraction=float(obstacle_fraction),
        altitude=float(obs.pose.position[2]),
    )


def select_frontier(grid_map: GridMap2D, pose_xy, region=None, exclude=None):
    """Spec-level frontier query; thin wrapper over the map method."""
    return grid_map.nearest_frontier(pose_xy, region=region, exclude=exclude)


@dataclass
class ExplorationConfig:
    high_altitude: float = 80.0
    low_altitude: float = 10.0
    kappa: float = 0.7
    rig: RigConfig = field(default_factory=RigConfig)
    clearance: float = 1.0
    high_cell: float = HIGH_CELL
    low_cell: float = LOW_CELL
    no_high: bool = False
    no_low: bool = False
    start_xy: tuple[float, float] | None = None
    td_budget: float | None = None
    max_steps: int = 20000


@dataclass
class ExplorationResult:
    cloud: DensityCloud
    trajectory: list[np.ndarray]
    map_high: GridMap2D | None
    map_low: GridMap2D
    descents: list[np.ndarray] = field(default_factory=list)
    skipped_descents: int = 0
    truncated: bool = False
    steps: int = 0

    @property
    def travel_distance(self) -> float:
        t = self.trajectory
        return float(sum(np.linalg.norm(t[i + 1] - t[i]) for i in range(len(t) - 1)))

    @property
    def end_position(self) -> np.ndarray:
        return self.trajectory[-1]


class _BudgetExceeded(Exception):
    pass


class _Tracker:
    """Trajectory recorder with an optional travel-distance budget."""

    def __init__(self, start: np.ndarray, budget: float | None):
        self.points = [np.asarray(start, dtype=float).copy()]
        self.budget = budget
        self.length = 0.0

    def move_to(self, p: np.ndarray):
        p = np.asarray(p, dtype=float)
        self.length += float(np.linalg.norm(p - self.points[-1]))
        self.points.append(p.copy())
        if self.budget is not None and self.length > self.budget:
            raise _BudgetExceeded

    @property
    def position(self) -> np.ndarray:
        return self.points[-1]


def _footprint_half(altitude: float, rig: RigConfig) -> float:
    return altitude * math.tan(math.radians(rig.params.fov_deg) / 2.0)


def _travel(world: World, tracker: _Tracker, target: np.ndarray,
            clearance: float) -> bool:
    """Fly to the target, straight when clear, else planned; False if stuck."""
    cur = tracker.position
    if world.segment_free(cur, target, clearance):
        tracker.move_to(target)
        return True
    try:
        path = world.plan_path(cur, target, clearance)
    except ValueError:
        path = None
    if path is None:
        return False
    for wp in path[1:]:
        tracker.move_to(wp)
    return True


def _coverage_loop(world: World, cfg: ExplorationConfig, grid_map: GridMap2D,
                   cloud: DensityCloud, tracker: _Tracker, altitude: float,
                   region, on_observation, steps_left: int) -> int:
    """Frontier coverage at one altitude, projecting density at each stop."""
    half = _footprint_half(altitude, cfg.rig)
    blacklist: set[tuple[int, int]] = set()
    steps = 0
    while steps < steps_left:
        steps += 1
        obs = world.capture(Pose(tracker.position), cfg.rig)
        grid_map.mark_footprint(tracker.position[:2], half)
        if on_observation is not None:
            on_observation(obs)
        pts, wts = project_density(obs, cfg.kappa)
        cloud.add(pts, wts, tracker.position)
        while True:
            nxt = grid_map.nearest_frontier(
                tracker.position[:2], region=region, exclude=blacklist)
            if nxt is None:
                return steps
            target = np.append(grid_map.cell_center(nxt), altitude)
            if _travel(world, tracker, target, cfg.clearance):
                break
            blacklist.add(nxt)
    return steps


def run_exploration(world: World, cfg: ExplorationConfig, scorer=None,
                    on_observation=None) -> ExplorationResult:
    """Run the altitude-switching exploration loop.

    Returns the accumulated density cloud, full trajectory (including
    altitude transitions), and both coverage maps.  Deterministic given
    (world, cfg, scorer).
    """
    if scorer is None:
        scorer = HeuristicScorer()
    ex, ey = world.extent[0], world.extent[1]
    start_xy = cfg.start_xy if cfg.start_xy is not None else (ex / 2.0, ey / 2.0)

    cloud = DensityCloud()
    map_low = GridMap2D(world, cfg.low_cell, cfg.low_altitude, "low",
                        margin=cfg.clearance)

    if cfg.no_high:
        start = np.array([start_xy[0], start_xy[1], cfg.low_altitude])
        tracker = _Tracker(start, cfg.td_budget)
        truncated = False
        steps = 0
        try:
            steps = _coverage_loop(world, cfg, map_low, cloud, tracker,
                                   cfg.low_altitude, None, on_observation,
                                   cfg.max_steps)
        except _BudgetExceeded:
            truncated = True
        return ExplorationResult(cloud=cloud, trajectory=tracker.points,
                                 map_high=None, map_low=map_low,
                                 truncated=truncated, steps=steps)

    map_high = GridMap2D(world, cfg.high_cell, cfg.high_altitude, "high",
                         margin=cfg.clearance)
    start = np.array([start_xy[0], start_xy[1], cfg.high_altitude])
    tracker = _Tracker(start, cfg.td_budget)
    half_high = _footprint_half(cfg.high_altitude, cfg.rig)
    blacklist: set[tuple[int, int]] = set()
    descents: list[np.ndarray] = []
    skipped = 0
    truncated = False
    steps = 0
    try:
        while steps < cfg.max_steps:
            steps += 1
            obs = world.capture(Pose(tracker.position), cfg.rig)
            map_high.mark_footprint(tracker.position[:2], half_high)
            if on_observation is not None:
                on_observation(obs)

            if cfg.no_low:
                pts, wts = project_density(obs, cfg.kappa)
                if len(pts):
                    cloud.add(pts, wts, tracker.position)
            else:
                here = tracker.position[:2]
                inp = summarize_observation(
                    obs, map_high.obstacle_fraction(here, half_high))
                s = score_location(inp, scorer)
                region = (here.copy(), half_high)
                if should_descend(s) and map_low.has_unknown_in(here, half_high):
                    low_pos = np.array([here[0], here[1], cfg.low_altitude])
                    if world.segment_free(tracker.position, low_pos,
                                          cfg.clearance):
                        tracker.move_to(low_pos)
                        descents.append(low_pos.copy())
                        steps += _coverage_loop(
                            world, cfg, map_low, cloud, tracker,
                            cfg.low_altitude, region, on_observation,
                            cfg.max_steps - steps)
                        back_up = np.array([tracker.position[0],
                                            tracker.position[1],
                                            cfg.high_altitude])
                        tracker.move_to(back_up)
                    else:
                        skipped += 1
                        log.info("descent blocked at %s; continuing high",
                                 np.round(here, 2).tolist())

            moved = False
            while True:
                nxt = map_high.nearest_frontier(tracker.position[:2],
                                                exclude=blacklist)
                if nxt is None:
                    break
                target = np.append(map_high.cell_center(nxt), cfg.high_altitude)
                if _travel(world, tracker, target, cfg.clearance):
                    moved = True
                    break
                blacklist.add(nxt)
            if not moved:
                break
    except _BudgetExceeded:
        truncated = True

    return ExplorationResult(cloud=cloud, trajectory=tracker.points,
                             map_high=map_high, map_low=map_low,
                             descents=descents, skipped_descents=skipped,
                             truncated=truncated, steps=steps)
