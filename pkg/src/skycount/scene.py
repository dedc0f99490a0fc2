"""Procedural crowd-scene generation and persistence.

A scene is a static ground truth: a 3D extent, axis-aligned obstacle
boxes, rectangular crowd blocks, and the sampled person positions.
Person counts per block follow a Poisson law with intensity
``density * block_area``; positions are uniform inside the block at the
block's base height.  Generation is a pure function of (spec, seed).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

log = logging.getLogger(__name__)

# Above this intensity the sampler switches from CDF inversion to the
# normal approximation with continuity correction.
_NORMAL_APPROX_THRESHOLD = 50.0
_MAX_PLACEMENT_RETRIES = 100


class SceneFormatError(ValueError):
    """Raised when a scene file cannot be parsed; message names the field."""


@dataclass(frozen=True)
class CrowdBlock:
    """A rectangular walkable area that may hold a crowd.

    region: (x_min, y_min, x_max, y_max) in meters.
    base_height: z of the walking surface.
    density: expected persons per square meter.
    """

    region: tuple[float, float, float, float]
    density: float
    base_height: float = 0.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.region
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"block region {self.region} has no area")
        if self.density < 0:
            raise ValueError(f"block density {self.density} is negative")

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.region
        return (x1 - x0) * (y1 - y0)

    def contains_xy(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.region
        return x0 <= x <= x1 and y0 <= y <= y1


@dataclass(frozen=True)
class ObstacleBox:
    """Axis-aligned solid box."""

    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]

    def __post_init__(self):
        if not all(a < b for a, b in zip(self.min_corner, self.max_corner)):
            raise ValueError(
                f"box corners {self.min_corner}..{self.max_corner} not ordered"
            )

    def contains(self, p) -> bool:
        return all(a <= v <= b for v, a, b in zip(p, self.min_corner, self.max_corner))


@dataclass(frozen=True)
class SceneSpec:
    """Generation input: geometry without sampled persons."""

    extent: tuple[float, float, float]
    blocks: tuple[CrowdBlock, ...] = ()
    obstacles: tuple[ObstacleBox, ...] = ()

    def __post_init__(self):
        ex, ey, ez = self.extent
        if min(ex, ey, ez) <= 0:
            raise ValueError(f"extent {self.extent} must be positive")
        for blk in self.blocks:
            x0, y0, x1, y1 = blk.region
            if x0 < 0 or y0 < 0 or x1 > ex or y1 > ey:
                raise ValueError(f"block region {blk.region} outside extent")
            if not (0 <= blk.base_height <= ez):
                raise ValueError(f"block base height {blk.base_height} outside extent")
        for box in self.obstacles:
            if any(v < 0 for v in box.min_corner) or any(
                v > e for v, e in zip(box.max_corner, self.extent)
            ):
                raise ValueError(f"obstacle {box} outside extent")


@dataclass
class Scene:
    """A generated scene; ``persons`` is an (N, 3) float array."""

    extent: tuple[float, float, float]
    blocks: tuple[CrowdBlock, ...]
    obstacles: tuple[ObstacleBox, ...]
    persons: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    seed: int = 0

    @property
    def person_count(self) -> int:
        return int(self.persons.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.extent == other.extent
            and self.blocks == other.blocks
            and self.obstacles == other.obstacles
            and self.seed == other.seed
            and np.array_equal(self.persons, other.persons)
        )


def poisson_pmf(lambda_area: float, k: int) -> float:
    """P(N = k) for a Poisson law with intensity ``lambda_area``."""
    if lambda_area < 0 or not math.isfinite(lambda_area):
        raise ValueError(f"intensity must be finite and >= 0, got {lambda_area}")
    if k < 0 or int(k) != k:
        raise ValueError(f"count must be a nonnegative integer, got {k}")
    k = int(k)
    if lambda_area == 0.0:
        return 1.0 if k == 0 else 0.0
    return math.exp(k * math.log(lambda_area) - math.lgamma(k + 1) - lambda_area)


def sample_poisson(lambda_area: float, rng: np.random.Generator) -> int:
    """Draw one Poisson count from a single uniform variate.

    CDF inversion keeps the draw deterministic in the rng stream; large
    intensities use the normal approximation with continuity correction.
    """
    if lambda_area < 0 or not math.isfinite(lambda_area):
        raise ValueError(f"intensity must be finite and >= 0, got {lambda_area}")
    if lambda_area == 0.0:
        return 0
    u = float(rng.random())
    if lambda_area > _NORMAL_APPROX_THRESHOLD:
        z = NormalDist().inv_cdf(u)
        return max(0, math.ceil(lambda_area + math.sqrt(lambda_area) * z - 0.5))
    p = math.exp(-lambda_area)
    cdf = p
    k = 0
    # Bounded far beyond any mass the uniform draw can reach.
    limit = int(lambda_area + 40 * math.sqrt(lambda_area) + 40)
    while u > cdf and k < limit:
        k += 1
        p *= lambda_area / k
        cdf += p
    return k


def sample_block_count(block: CrowdBlock, rng: np.random.Generator) -> int:
    """Person count for one block: Poisson with intensity density * area."""
    return sample_poisson(block.density * block.area, rng)


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Sample a scene from a spec.

    Counts come from the block Poisson law; positions are uniform in the
    block region at its base height.  A position falling inside an
    obstacle is resampled up to 100 times, then dropped with a warning.
    Coordinates are rounded to 6 decimals so scene files round-trip
    exactly.
    """
    rng = np.random.default_rng(seed)
    persons: list[tuple[float, float, float]] = []
    for bi, blk in enumerate(spec.blocks):
        n = sample_block_count(blk, rng)
        x0, y0, x1, y1 = blk.region
        dropped = 0
        for _ in range(n):
            placed = False
            for _ in range(_MAX_PLACEMENT_RETRIES):
                x = x0 + (x1 - x0) * rng.random()
                y = y0 + (y1 - y0) * rng.random()
                p = (x, y, blk.base_height)
                if not any(box.contains(p) for box in spec.obstacles):
                    persons.append(
                        (round(x, 6), round(y, 6), round(blk.base_height, 6))
                    )
                    placed = True
                    break
            if not placed:
                dropped += 1
        if dropped:
            log.warning(
                "block %d: dropped %d of %d persons (no obstacle-free spot found)",
                bi, dropped, n,
            )
    arr = np.array(persons, dtype=float) if persons else np.zeros((0, 3))
    return Scene(
        extent=spec.extent,
        blocks=spec.blocks,
        obstacles=spec.obstacles,
        persons=arr,
        seed=int(seed),
    )


def _round3(seq) -> list[float]:
    return [round(float(v), 6) for v in seq]


def save_scene(scene: Scene, path) -> None:
    """Write a scene as UTF-8 JSON (coordinates at 6 fractional digits)."""
    doc = {
        "extent": _round3(scene.extent),
        "obstacles": [
            {"min": _round3(b.min_corner), "max": _round3(b.max_corner)}
            for b in scene.obstacles
        ],
        "blocks": [
            {
                "region": _round3(b.region),
                "base_height": round(float(b.base_height), 6),
                "density": round(float(b.density), 6),
            }
            for b in scene.blocks
        ],
        "persons": [_round3(p) for p in scene.persons],
        "seed": int(scene.seed),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise SceneFormatError(f"{path}: missing field '{key}'")
    return doc[key]


def _vec(raw, n: int, where: str) -> tuple:
    if not isinstance(raw, list) or len(raw) != n:
        raise SceneFormatError(f"{where}: expected {n} numbers")
    try:
        return tuple(float(v) for v in raw)
    except (TypeError, ValueError):
        raise SceneFormatError(f"{where}: expected {n} numbers") from None


def load_scene(path) -> Scene:
    """Parse a scene file; errors name the offending line or field."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(
                f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
                f"{exc.msg}"
            ) from None
    if not isinstance(doc, dict):
        raise SceneFormatError(f"{path}: top level must be an object")

    extent = _vec(_require(doc, "extent", str(path)), 3, "extent")
    obstacles = []
    for i, raw in enumerate(_require(doc, "obstacles", str(path))):
        where = f"obstacles[{i}]"
        if not isinstance(raw, dict):
            raise SceneFormatError(f"{where}: expected an object")
        try:
            obstacles.append(
                ObstacleBox(_vec(_require(raw, "min", where), 3, where + ".min"),
                            _vec(_require(raw, "max", where), 3, where + ".max"))
            )
        except ValueError as exc:
            raise SceneFormatError(f"{where}: {exc}") from None
    blocks = []
    for i, raw in enumerate(_require(doc, "blocks", str(path))):
        where = f"blocks[{i}]"
        if not isinstance(raw, dict):
            raise SceneFormatError(f"{where}: expected an object")
        try:
            blocks.append(
                CrowdBlock(
                    region=_vec(_require(raw, "region", where), 4, where + ".region"),
                    density=float(_require(raw, "density", where)),
                    base_height=float(_require(raw, "base_height", where)),
                )
            )
        except SceneFormatError:
            raise
        except (TypeError, ValueError) as exc:
            raise SceneFormatError(f"{where}: {exc}") from None
    persons_raw = _require(doc, "persons", str(path))
    if not isinstance(persons_raw, list):
        raise SceneFormatError("persons: expected a list")
    persons = [_vec(p, 3, f"persons[{i}]") for i, p in enumerate(persons_raw)]
    seed = _require(doc, "seed", str(path))
    if not isinstance(seed, int):
        raise SceneFormatError("seed: expected an integer")

    arr = np.array(persons, dtype=float) if persons else np.zeros((0, 3))
    return Scene(
        extent=extent,
        blocks=tuple(blocks),
        obstacles=tuple(obstacles),
        persons=arr,
        seed=seed,
    )
