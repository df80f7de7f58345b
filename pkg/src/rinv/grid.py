"""Polar bird's-eye-view sensing grid, synthetic scenes and point extraction.

Azimuth ``phi`` is measured from the forward axis; a point at range ``r``
sits at ``px = r sin(phi)``, ``py = r cos(phi)``.  Masks are stored
azimuth-major: ``values[i_az, j_rng]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "PolarGrid",
    "SceneMask",
    "PointSet",
    "SceneSpec",
    "make_grid",
    "generate_scene",
    "random_scene_spec",
    "mask_to_points",
    "points_to_mask",
    "downsample_mask",
    "segment_distance",
]


@dataclass(frozen=True)
class PolarGrid:
    n_az: int
    n_rng: int
    az_min_deg: float
    az_max_deg: float
    rng_max_m: float

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_az, self.n_rng)

    @property
    def az_step_deg(self) -> float:
        return (self.az_max_deg - self.az_min_deg) / self.n_az

    @property
    def rng_step_m(self) -> float:
        return self.rng_max_m / self.n_rng

    def az_centers_deg(self) -> np.ndarray:
        return self.az_min_deg + (np.arange(self.n_az) + 0.5) * self.az_step_deg

    def rng_centers_m(self) -> np.ndarray:
        return (np.arange(self.n_rng) + 0.5) * self.rng_step_m

    def cell_centers_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """Cartesian centers of every cell, each shaped ``(n_az, n_rng)``."""
        phi = np.deg2rad(self.az_centers_deg())[:, None]
        r = self.rng_centers_m()[None, :]
        return r * np.sin(phi), r * np.cos(phi) * np.ones_like(phi)

    def cell_index(self, px, py):
        """Return ``(i_az, j_rng, inside)`` for Cartesian coordinates."""
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        phi = np.degrees(np.arctan2(px, py))
        r = np.hypot(px, py)
        fi = (phi - self.az_min_deg) / self.az_step_deg
        fj = r / self.rng_step_m
        inside = (fi >= 0) & (fi < self.n_az) & (fj >= 0) & (fj < self.n_rng)
        i = np.clip(np.floor(fi).astype(int), 0, self.n_az - 1)
        j = np.clip(np.floor(fj).astype(int), 0, self.n_rng - 1)
        return i, j, inside

    def header(self) -> str:
        return (
            f"{self.n_az} {self.n_rng} {self.az_min_deg!r} {self.az_max_deg!r} "
            f"{self.rng_max_m!r}"
        )


def make_grid(
    n_az: int = 64,
    n_rng: int = 96,
    az_min_deg: float = -90.0,
    az_max_deg: float = 90.0,
    rng_max_m: float = 103.0,
) -> PolarGrid:
    problems = []
    if int(n_az) != n_az or n_az < 2:
        problems.append(f"n_az must be an integer >= 2, got {n_az!r}")
    if int(n_rng) != n_rng or n_rng < 2:
        problems.append(f"n_rng must be an integer >= 2, got {n_rng!r}")
    if not az_min_deg < az_max_deg:
        problems.append(
            f"az_min_deg ({az_min_deg}) must be below az_max_deg ({az_max_deg})"
        )
    if not rng_max_m > 0:
        problems.append(f"rng_max_m must be positive, got {rng_max_m!r}")
    if problems:
        raise ConfigError(problems)
    return PolarGrid(int(n_az), int(n_rng), float(az_min_deg), float(az_max_deg), float(rng_max_m))


@dataclass
class SceneMask:
    grid: PolarGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"mask shape {self.values.shape} does not match grid {self.grid.shape}"
            )

    @classmethod
    def zeros(cls, grid: PolarGrid) -> "SceneMask":
        return cls(grid, np.zeros(grid.shape))

    @property
    def occupied_fraction(self) -> float:
        return float(np.mean(self.values > 0.5))


@dataclass
class PointSet:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    n_walls: int = 3
    n_point_targets: int = 5
    wall_length_range_m: tuple[float, float] = (5.0, 30.0)
    clutter_density: float = 0.002

    def __post_init__(self):
        lo, hi = self.wall_length_range_m
        if self.n_walls < 0 or self.n_point_targets < 0:
            raise ConfigError(["scene counts must be >= 0"])
        if not 0 <= lo <= hi:
            raise ConfigError([f"wall_length_range_m must be ordered, got {(lo, hi)}"])
        if not 0 <= self.clutter_density < 1:
            raise ConfigError([f"clutter_density must be in [0, 1), got {self.clutter_density}"])


def random_scene_spec(seed: int, clutter_density: float = 0.002) -> SceneSpec:
    """Corpus-style spec: object counts drawn from ``seed`` itself."""
    rng = np.random.default_rng([seed, 1])
    return SceneSpec(
        seed=seed,
        n_walls=int(rng.integers(1, 5)),
        n_point_targets=int(rng.integers(2, 9)),
        wall_length_range_m=(5.0, 30.0),
        clutter_density=clutter_density,
    )


def segment_distance(px, py, a, b):
    """Euclidean distance from points ``(px, py)`` to the segment ``a``-``b``."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom == 0.0:
        return np.hypot(px - ax, py - ay)
    s = np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0.0, 1.0)
    return np.hypot(px - (ax + s * dx), py - (ay + s * dy))


def _half_cell_diagonal(grid: PolarGrid) -> np.ndarray:
    r = grid.rng_centers_m()[None, :]
    arc = r * math.radians(grid.az_step_deg)
    return 0.5 * np.hypot(grid.rng_step_m, arc) * np.ones((grid.n_az, 1))


def rasterize_segment(grid: PolarGrid, a, b) -> np.ndarray:
    """Boolean mask of cells whose center lies within half a cell diagonal of ``a``-``b``."""
    cx, cy = grid.cell_centers_xy()
    return segment_distance(cx, cy, a, b) <= _half_cell_diagonal(grid)


def generate_scene(spec: SceneSpec, grid: PolarGrid) -> SceneMask:
    """Binary scene of straight walls, point targets and random clutter.

    Everything is drawn from ``numpy.random.default_rng(spec.seed)`` so the
    mask is a pure function of ``(spec, grid)``.
    """
    rng = np.random.default_rng(spec.seed)
    out = np.zeros(grid.shape, dtype=bool)
    az_lo, az_hi = np.deg2rad(grid.az_min_deg), np.deg2rad(grid.az_max_deg)
    # keep objects off the very edge of the field of view
    r_lo, r_hi = 0.08 * grid.rng_max_m, 0.9 * grid.rng_max_m
    span = az_hi - az_lo
    phi_lo, phi_hi = az_lo + 0.1 * span, az_hi - 0.1 * span

    for _ in range(spec.n_walls):
        r = rng.uniform(r_lo, r_hi)
        phi = rng.uniform(phi_lo, phi_hi)
        length = rng.uniform(*spec.wall_length_range_m)
        heading = rng.uniform(0.0, math.pi)
        cx, cy = r * math.sin(phi), r * math.cos(phi)
        hx, hy = 0.5 * length * math.cos(heading), 0.5 * length * math.sin(heading)
        out |= rasterize_segment(grid, (cx - hx, cy - hy), (cx + hx, cy + hy))

    for _ in range(spec.n_point_targets):
        margin = round(0.1 * grid.n_az)
        i = int(rng.integers(margin, grid.n_az - margin))
        j = min(int(rng.uniform(r_lo, r_hi) / grid.rng_step_m), grid.n_rng - 1)
        out[i, j] = True

    if spec.clutter_density > 0:
        out |= rng.random(grid.shape) < spec.clutter_density

    return SceneMask(grid, out.astype(float))


def mask_to_points(mask: SceneMask, threshold: float = 0.01) -> PointSet:
    """Cells strictly above ``threshold`` as Cartesian cell centers, row-major."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    cx, cy = mask.grid.cell_centers_xy()
    sel = mask.values > threshold
    return PointSet(np.column_stack([cx[sel], cy[sel]]))


def points_to_mask(points: PointSet, grid: PolarGrid, return_dropped: bool = False):
    """Binary mask of the cells hit by ``points``.

    Points outside the grid extent are dropped; pass ``return_dropped=True``
    to get ``(mask, n_dropped)``.
    """
    pts = points.points
    out = np.zeros(grid.shape)
    dropped = 0
    if len(pts):
        i, j, inside = grid.cell_index(pts[:, 0], pts[:, 1])
        out[i[inside], j[inside]] = 1.0
        dropped = int(np.count_nonzero(~inside))
    mask = SceneMask(grid, out)
    return (mask, dropped) if return_dropped else mask


def downsample_mask(mask: SceneMask, factor: int) -> SceneMask:
    g = mask.grid
    if factor < 1 or g.n_az % factor or g.n_rng % factor:
        raise ValueError(f"factor {factor} does not divide grid shape {g.shape}")
    if factor == 1:
        return SceneMask(g, mask.values.copy())
    coarse = PolarGrid(g.n_az // factor, g.n_rng // factor, g.az_min_deg, g.az_max_deg, g.rng_max_m)
    v = mask.values.reshape(coarse.n_az, factor, coarse.n_rng, factor).mean(axis=(1, 3))
    return SceneMask(coarse, v)
