"""Occupancy-grid belief and next-best-view selection by expected entropy reduction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import GeometryError, as_cloud

P_HIT = 0.7
P_MISS = 0.4
L_HIT = float(np.log(P_HIT / (1.0 - P_HIT)))      # 0.8473 nats
L_MISS = float(np.log(P_MISS / (1.0 - P_MISS)))   # -0.4055 nats
L_CLAMP = 3.5

# per-cell flags written by the ray kernel
_MISS, _HIT = 1, 2


@dataclass
class OccupancyGrid:
    """Dense log-odds voxel grid; cell ``(i, j, k)`` spans ``origin + [i, i+1) * resolution``."""
    origin: np.ndarray
    resolution: float
    dims: tuple
    log_odds: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.resolution <= 0 or any(d < 1 for d in self.dims):
            raise GeometryError("grid needs positive resolution and dims")
        if self.log_odds is None:
            self.log_odds = np.zeros(self.dims)
        else:
            self.log_odds = np.asarray(self.log_odds, dtype=float).reshape(self.dims)

    @classmethod
    def around(cls, points, margin: float = 0.15, resolution: float = 0.005) -> "OccupancyGrid":
        """Unknown grid covering the bounds of ``points`` plus ``margin`` per side."""
        pts = as_cloud(points)
        if len(pts) == 0:
            raise GeometryError("cannot crop a grid around an empty cloud")
        lo = pts.min(axis=0) - margin
        hi = pts.max(axis=0) + margin
        dims = np.maximum(1, np.ceil((hi - lo) / resolution - 1e-9)).astype(int)
        return cls(lo, resolution, tuple(dims))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.resolution

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    def probabilities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.log_odds))

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.origin) and np.all(p <= self.upper))

    def cell_of(self, point) -> tuple:
        idx = np.floor((np.asarray(point, dtype=float) - self.origin) / self.resolution).astype(int)
        return tuple(np.clip(idx, 0, np.asarray(self.dims) - 1))

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.origin.copy(), self.resolution, self.dims, self.log_odds.copy())

    def to_dict(self) -> dict:
        return {"origin": self.origin.tolist(), "resolution": self.resolution,
                "dims": list(self.dims), "probabilities": self.probabilities().ravel().tolist()}

    def dump_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


@dataclass(frozen=True)
class SensorModel:
    hfov: float = 60.0      # degrees
    vfov: float = 45.0
    ray_cols: int = 64
    ray_rows: int = 48
    d_ray: float = 1.5      # m

    def __post_init__(self):
        if not (0 < self.hfov < 180 and 0 < self.vfov < 180):
            raise ValueError("field of view must lie in (0, 180) degrees")
        if self.ray_cols < 1 or self.ray_rows < 1 or self.d_ray <= 0:
            raise ValueError("ray counts must be >= 1 and d_ray positive")

    def ray_directions(self) -> np.ndarray:
        """Unit directions in the camera frame (boresight +z), one per pixel, row-major."""
        u = (2.0 * (np.arange(self.ray_cols) + 0.5) / self.ray_cols - 1.0) * np.tan(np.deg2rad(self.hfov) / 2)
        v = (2.0 * (np.arange(self.ray_rows) + 0.5) / self.ray_rows - 1.0) * np.tan(np.deg2rad(self.vfov) / 2)
        uu, vv = np.meshgrid(u, v)
        d = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=1)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class Viewpoint:
    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))   # camera-to-world

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise GeometryError("viewpoint orientation must be a proper rotation")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", R)

    @property
    def boresight(self) -> np.ndarray:
        return self.rotation[:, 2]

    def world_rays(self, sensor: SensorModel) -> np.ndarray:
        return sensor.ray_directions() @ self.rotation.T

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "rotation": self.rotation.tolist()}


# ----------------------------------------------------------------------------
# entropy
# ----------------------------------------------------------------------------

def binary_entropy(p) -> np.ndarray:
    """Entropy in bits of Bernoulli(p), with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(p < 1, (1 - p) * np.log2(1 - p), 0.0))
    return h


def grid_entropy(grid: OccupancyGrid) -> float:
    """Total Shannon entropy of the grid in bits."""
    return float(binary_entropy(grid.probabilities()).sum())


# ----------------------------------------------------------------------------
# voxel traversal
# ----------------------------------------------------------------------------

def _clip_segments(starts, ends, lo, hi):
    """Slab clipping of segments to the box; returns (t0, t1) with t0 > t1 for misses."""
    d = ends - starts
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - starts) / d
        tb = (hi - starts) / d
    tmin = np.where(d == 0, -np.inf, np.minimum(ta, tb))
    tmax = np.where(d == 0, np.inf, np.maximum(ta, tb))
    inside = (starts >= lo) & (starts <= hi)
    tmin = np.where((d == 0) & ~inside, np.inf, tmin)
    tmax = np.where((d == 0) & ~inside, -np.inf, tmax)
    t0 = np.maximum(0.0, tmin.max(axis=1))
    t1 = np.minimum(1.0, tmax.min(axis=1))
    return t0, t1


@njit(cache=True)
def _trace_kernel(log_odds, origin, res, starts, ends, terminal_hit, stop_on_occupied, flags):
    nx, ny, nz = log_odds.shape
    dims = np.array([nx, ny, nz])
    cell = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    t_max = np.empty(3)
    t_delta = np.empty(3)
    for r in range(starts.shape[0]):
        for a in range(3):
            d = ends[r, a] - starts[r, a]
            c = int(np.floor((starts[r, a] - origin[a]) / res))
            c = min(max(c, 0), dims[a] - 1)
            cell[a] = c
            if d > 0:
                step[a] = 1
                t_max[a] = (origin[a] + (c + 1) * res - starts[r, a]) / d
                t_delta[a] = res / d
            elif d < 0:
                step[a] = -1
                t_max[a] = (origin[a] + c * res - starts[r, a]) / d
                t_delta[a] = -res / d
            else:
                step[a] = 0
                t_max[a] = np.inf
                t_delta[a] = np.inf
        while True:
            i, j, k = cell[0], cell[1], cell[2]
            if stop_on_occupied and log_odds[i, j, k] > 0.0:
                flags[i, j, k] = _HIT
                break
            if flags[i, j, k] < _MISS:
                flags[i, j, k] = _MISS
            a = 0
            if t_max[1] < t_max[a]:
                a = 1
            if t_max[2] < t_max[a]:
                a = 2
            if t_max[a] > 1.0:
                if terminal_hit[r]:
                    flags[i, j, k] = _HIT
                break
            cell[a] += step[a]
            if cell[a] < 0 or cell[a] >= dims[a]:
                break
            t_max[a] += t_delta[a]


def _trace(grid: OccupancyGrid, starts, ends, terminal_hit, stop_on_occupied: bool) -> np.ndarray:
    """Flag array (0 untouched, 1 miss, 2 hit) for segments already clipped to the grid."""
    flags = np.zeros(grid.dims, dtype=np.int8)
    if len(starts):
        _trace_kernel(grid.log_odds, grid.origin, float(grid.resolution),
                      np.ascontiguousarray(starts, dtype=float), np.ascontiguousarray(ends, dtype=float),
                      np.ascontiguousarray(terminal_hit, dtype=np.bool_), stop_on_occupied, flags)
    return flags


def traverse(grid: OccupancyGrid, start, end) -> list[tuple]:
    """Cells crossed by the segment start→end (clipped to the grid), in visiting order."""
    s = np.asarray(start, dtype=float).reshape(1, 3)
    e = np.asarray(end, dtype=float).reshape(1, 3)
    t0, t1 = _clip_segments(s, e, grid.origin, grid.upper)
    if t0[0] > t1[0]:
        return []
    d = e - s
    a, b = s + t0[0] * d, s + t1[0] * d
    out = []
    cell = np.array(grid.cell_of(a[0]))
    direction = b[0] - a[0]
    step = np.sign(direction).astype(int)
    with np.errstate(divide="ignore"):
        nxt = grid.origin + (cell + (step > 0)) * grid.resolution
        t_max = np.where(step != 0, (nxt - a[0]) / direction, np.inf)
        t_delta = np.where(step != 0, grid.resolution / np.abs(direction), np.inf)
    while True:
        out.append(tuple(int(c) for c in cell))
        ax = int(np.argmin(t_max))
        if t_max[ax] > 1.0:
            return out
        cell[ax] += step[ax]
        if not 0 <= cell[ax] < grid.dims[ax]:
            return out
        t_max[ax] += t_delta[ax]


def _apply_flags(grid: OccupancyGrid, flags: np.ndarray, log_odds=None) -> np.ndarray:
    l = grid.log_odds if log_odds is None else log_odds
    upd = np.where(flags == _HIT, L_HIT, np.where(flags == _MISS, L_MISS, 0.0))
    np.clip(l + upd, -L_CLAMP, L_CLAMP, out=l)
    return l


def integrate_measurement(grid: OccupancyGrid, sensor_origin, hits, clip_origin: bool = False) -> OccupancyGrid:
    """Log-odds update of ``grid`` in place for rays from ``sensor_origin`` to each hit.

    Traversed cells receive the miss update and the cell holding the hit the
    hit update; a cell touched by several rays is updated once, with hit
    taking priority over miss. Hits outside the grid truncate the ray at the
    boundary without a hit update. A sensor outside the grid is rejected
    unless ``clip_origin`` is set, in which case rays start where they enter.
    """
    origin = np.asarray(sensor_origin, dtype=float).reshape(3)
    if not clip_origin and not grid.contains(origin):
        raise GeometryError("sensor origin lies outside the grid")
    pts = as_cloud(hits)
    if len(pts) == 0:
        return grid
    starts = np.broadcast_to(origin, pts.shape)
    t0, t1 = _clip_segments(starts, pts, grid.origin, grid.upper)
    keep = t0 <= t1
    d = pts - starts
    seg_a = starts[keep] + t0[keep, None] * d[keep]
    seg_b = starts[keep] + t1[keep, None] * d[keep]
    terminal = t1[keep] >= 1.0
    _apply_flags(grid, _trace(grid, seg_a, seg_b, terminal, False))
    return grid


# ----------------------------------------------------------------------------
# viewpoints
# ----------------------------------------------------------------------------

def _axis_angle_rotmat(axis, angle: float) -> np.ndarray:
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def view_axis_angle(p_view, centroid) -> tuple[np.ndarray, float]:
    """Axis ``e = h x Z / |h x Z|`` and angle ``acos(h . Z)`` for ``h`` pointing from centroid to view."""
    h = np.asarray(p_view, dtype=float) - np.asarray(centroid, dtype=float)
    n = np.linalg.norm(h)
    if n < 1e-12:
        raise GeometryError("viewpoint coincides with the centroid")
    h /= n
    theta = float(np.arccos(np.clip(h[2], -1.0, 1.0)))
    e = np.cross(h, [0.0, 0.0, 1.0])
    en = np.linalg.norm(e)
    if en < 1e-12:
        # looking straight along Z; any axis works at theta = 0
        return np.array([1.0, 0.0, 0.0]), theta
    return e / en, theta


def view_orientation(p_view, centroid) -> np.ndarray:
    """Camera-to-world rotation whose +z boresight points from ``p_view`` at ``centroid``.

    The axis-angle rotation takes ``h`` onto world Z, so its transpose takes Z
    onto ``h``; a half turn about the camera x axis flips the boresight to
    ``-h``.
    """
    e, theta = view_axis_angle(p_view, centroid)
    return _axis_angle_rotmat(e, theta).T @ np.diag([1.0, -1.0, -1.0])


def make_viewpoint(p_view, centroid) -> Viewpoint:
    return Viewpoint(np.asarray(p_view, dtype=float), view_orientation(p_view, centroid))


def sample_viewpoints(centroid, radius: float = 0.5, n: int = 32, seed: int = 0,
                      workspace=None, max_draws: int = 100_000) -> list[Viewpoint]:
    """Uniform samples on the upper hemisphere around ``centroid``, each looking at it.

    ``workspace`` is an optional ``(lo, hi)`` pair of corners; samples outside
    it are redrawn.
    """
    if n < 1 or radius <= 0:
        raise ValueError("need n >= 1 and radius > 0")
    c = np.asarray(centroid, dtype=float)
    rng = np.random.default_rng(seed)
    out = []
    draws = 0
    while len(out) < n:
        if draws >= max_draws:
            raise GeometryError("workspace excludes the sampling hemisphere")
        draws += 1
        cos_t = rng.random()
        phi = 2 * np.pi * rng.random()
        sin_t = np.sqrt(1.0 - cos_t * cos_t)
        p = c + radius * np.array([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t])
        if workspace is not None:
            lo, hi = (np.asarray(w, dtype=float) for w in workspace)
            if np.any(p < lo) or np.any(p > hi):
                continue
        out.append(make_viewpoint(p, c))
    return out


# ----------------------------------------------------------------------------
# information gain
# ----------------------------------------------------------------------------

def predicted_flags(grid: OccupancyGrid, view: Viewpoint, sensor: SensorModel) -> np.ndarray:
    """Cells a predicted scan would update: rays stop at the first occupied cell
    (p > 0.5) as a hit, otherwise run ``d_ray`` as misses."""
    dirs = view.world_rays(sensor)
    starts = np.broadcast_to(view.position, dirs.shape)
    ends = starts + sensor.d_ray * dirs
    t0, t1 = _clip_segments(starts, ends, grid.origin, grid.upper)
    keep = t0 <= t1
    d = ends - starts
    seg_a = starts[keep] + t0[keep, None] * d[keep]
    seg_b = starts[keep] + t1[keep, None] * d[keep]
    return _trace(grid, seg_a, seg_b, np.zeros(len(seg_a), dtype=bool), True)


@njit(cache=True)
def _bits(l):
    p = 1.0 / (1.0 + np.exp(-l))
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -(p * np.log2(p) + (1.0 - p) * np.log2(1.0 - p))


@njit(cache=True)
def _gain_kernel(log_odds, flags, l_hit, l_miss, clamp):
    lo = log_odds.ravel()
    fl = flags.ravel()
    total = 0.0
    for i in range(fl.shape[0]):
        if fl[i] == 0:
            continue
        post = lo[i] + (l_hit if fl[i] == _HIT else l_miss)
        post = min(max(post, -clamp), clamp)
        total += _bits(lo[i]) - _bits(post)
    return total


def expected_info_gain(grid: OccupancyGrid, view: Viewpoint, sensor: SensorModel = SensorModel()) -> float:
    """Entropy drop in bits from integrating the predicted scan at ``view``; ``grid`` is not modified."""
    flags = predicted_flags(grid, view, sensor)
    return float(_gain_kernel(np.ascontiguousarray(grid.log_odds), flags, L_HIT, L_MISS, L_CLAMP))


def select_nbv(grid: OccupancyGrid, candidates, sensor: SensorModel = SensorModel()) -> tuple[Viewpoint, float]:
    """Candidate with the largest expected gain; ties go to the lowest index."""
    if not candidates:
        raise ValueError("no candidate viewpoints")
    gains = np.array([expected_info_gain(grid, v, sensor) for v in candidates])
    best = int(np.argmax(gains))
    return candidates[best], float(gains[best])
