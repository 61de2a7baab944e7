"""Synthetic Manhattan-world buildings, robot trajectories and range scans.

Coordinates are centimetres with the origin at the lower-left corner of
cell (0, 0); ``grid[iy, ix]`` is True for wall cells. Odometry is expressed
in the global frame and composes additively with poses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .errors import MapError, TrajectoryError
from .gaussian import wrap_angle

N_BEAMS = 56
FOV = math.radians(60.0)
MAX_RANGE = 1000.0


class Pose(NamedTuple):
    x: float
    y: float
    theta: float


class Odometry(NamedTuple):
    dx: float
    dy: float
    dtheta: float


def compose(pose: Pose, u: Odometry) -> Pose:
    return Pose(pose.x + u.dx, pose.y + u.dy, wrap_angle(pose.theta + u.dtheta))


Room = tuple  # (x0, y0, x1, y1): half-open range of interior cell indices


@dataclass(frozen=True, eq=False)
class WallMap:
    grid: np.ndarray
    cell_size: float = 10.0
    rooms: tuple = ()

    def __post_init__(self):
        grid = np.array(self.grid, dtype=bool)
        if grid.ndim != 2:
            raise MapError("wall grid must be two-dimensional")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "rooms", tuple(tuple(int(v) for v in r) for r in self.rooms))

    @property
    def shape(self):
        return self.grid.shape

    @property
    def width_cm(self) -> float:
        return self.grid.shape[1] * self.cell_size

    @property
    def height_cm(self) -> float:
        return self.grid.shape[0] * self.cell_size

    def cell_of(self, x, y):
        return int(math.floor(x / self.cell_size)), int(math.floor(y / self.cell_size))

    def cell_center(self, ix, iy):
        return (np.asarray(ix) + 0.5) * self.cell_size, (np.asarray(iy) + 0.5) * self.cell_size

    def in_bounds(self, ix, iy) -> bool:
        return 0 <= iy < self.grid.shape[0] and 0 <= ix < self.grid.shape[1]

    def is_free(self, x, y) -> bool:
        ix, iy = self.cell_of(x, y)
        return self.in_bounds(ix, iy) and not self.grid[iy, ix]

    def free_cells(self) -> np.ndarray:
        """(N, 2) array of free cell indices (ix, iy)."""
        iy, ix = np.nonzero(~self.grid)
        return np.stack([ix, iy], axis=1)

    @property
    def free_area_m2(self) -> float:
        return float((~self.grid).sum()) * self.cell_size**2 / 1e4

    @property
    def room_area_m2(self) -> float:
        return sum((r[2] - r[0]) * (r[3] - r[1]) for r in self.rooms) * self.cell_size**2 / 1e4

    @cached_property
    def clearance(self) -> np.ndarray:
        """Distance (cm) from each cell centre to the nearest wall cell centre."""
        return ndimage.distance_transform_edt(~self.grid) * self.cell_size

    def room_of(self, x, y) -> Optional[int]:
        ix, iy = self.cell_of(x, y)
        for k, (x0, y0, x1, y1) in enumerate(self.rooms):
            if x0 <= ix < x1 and y0 <= iy < y1:
                return k
        return None

    def nearest_room(self, x, y) -> int:
        if not self.rooms:
            raise MapError("map has no room index")
        k = self.room_of(x, y)
        if k is not None:
            return k
        cs = self.cell_size

        def dist(r):
            cx = min(max(x, r[0] * cs), r[2] * cs)
            cy = min(max(y, r[1] * cs), r[3] * cs)
            return math.hypot(x - cx, y - cy)

        return min(range(len(self.rooms)), key=lambda k: dist(self.rooms[k]))

    def is_connected(self) -> bool:
        labels, n = ndimage.label(~self.grid)
        return n == 1

    # -- text format -------------------------------------------------------

    def to_text(self) -> str:
        h, w = self.grid.shape
        lines = [f"cell_size_cm {self.cell_size:g}", f"width {w}", f"height {h}", f"rooms {len(self.rooms)}"]
        lines += [" ".join(str(v) for v in r) for r in self.rooms]
        lines += ["".join("#" if c else "." for c in row) for row in self.grid]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "WallMap":
        lines = text.splitlines()
        header = {}
        for i in range(4):
            key, val = lines[i].split()
            header[key] = val
        n_rooms = int(header["rooms"])
        rooms = [tuple(int(v) for v in lines[4 + k].split()) for k in range(n_rooms)]
        rows = lines[4 + n_rooms: 4 + n_rooms + int(header["height"])]
        grid = np.array([[c == "#" for c in row] for row in rows], dtype=bool)
        if grid.shape != (int(header["height"]), int(header["width"])):
            raise MapError("map body does not match its header")
        return cls(grid, float(header["cell_size_cm"]), rooms)

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "WallMap":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class MapSpec:
    """Generator settings. Ranges are inclusive (lo, hi)."""

    rooms: tuple = (4, 7)
    room_area_m2: tuple = (32.0, 42.0)
    aspect: tuple = (1.0, 1.6)
    cell_size: float = 10.0
    door_width_cm: float = 100.0
    min_room_side_cm: float = 250.0


def _split_room(room, rng, cells_min, door_cells):
    x0, y0, x1, y1 = room
    w, h = x1 - x0, y1 - y0
    axes = ["x", "y"] if w >= h else ["y", "x"]
    for axis in axes:
        lo, hi = (x0, x1) if axis == "x" else (y0, y1)
        span = hi - lo
        if span < 2 * cells_min + 1:
            continue
        cut = lo + int(round(rng.uniform(0.35, 0.65) * span))
        cut = min(max(cut, lo + cells_min), hi - cells_min - 1)
        other_lo, other_hi = (y0, y1) if axis == "x" else (x0, x1)
        if other_hi - other_lo < door_cells + 2:
            continue
        d0 = int(rng.integers(other_lo + 1, other_hi - door_cells))
        if axis == "x":
            children = [(x0, y0, cut, y1), (cut + 1, y0, x1, y1)]
            door = (slice(d0, d0 + door_cells), slice(cut, cut + 1))
        else:
            children = [(x0, y0, x1, cut), (x0, cut + 1, x1, y1)]
            door = (slice(cut, cut + 1), slice(d0, d0 + door_cells))
        return children, door
    return None


def generate_map(spec: MapSpec = MapSpec(), seed: int = 0) -> WallMap:
    """Axis-aligned rooms carved out of one rectangle by recursive splitting.

    Every split wall receives a door, so all rooms are mutually reachable;
    connectivity is re-checked by flood fill before returning.
    """
    rng = np.random.default_rng(seed)
    cs = spec.cell_size
    cells_min = int(math.ceil(spec.min_room_side_cm / cs))
    door_cells = max(1, int(round(spec.door_width_cm / cs)))
    for _ in range(200):
        n = int(rng.integers(spec.rooms[0], spec.rooms[1] + 1))
        area_cm2 = rng.uniform(*spec.room_area_m2, size=n).sum() * 1e4
        aspect = rng.uniform(*spec.aspect)
        if rng.random() < 0.5:
            aspect = 1.0 / aspect
        wc = max(1, int(round(math.sqrt(area_cm2 * aspect) / cs)))
        hc = max(1, int(round(area_cm2 / (wc * cs * cs))))
        rooms = [(1, 1, wc + 1, hc + 1)]
        doors = []
        ok = True
        while len(rooms) < n:
            rooms.sort(key=lambda r: (r[2] - r[0]) * (r[3] - r[1]), reverse=True)
            split = _split_room(rooms[0], rng, cells_min, door_cells)
            if split is None:
                ok = False
                break
            children, door = split
            rooms = children + rooms[1:]
            doors.append(door)
        if not ok:
            continue
        grid = np.ones((hc + 2, wc + 2), dtype=bool)
        for x0, y0, x1, y1 in rooms:
            grid[y0:y1, x0:x1] = False
        for door in doors:
            grid[door] = False
        rooms.sort(key=lambda r: (r[1], r[0]))
        wall_map = WallMap(grid, cs, rooms)
        if wall_map.is_connected():
            return wall_map
    raise MapError(f"could not lay out a building for {spec}")


def room_map(width_cm: float, height_cm: float, cell_size: float = 10.0) -> WallMap:
    """A single empty rectangular room surrounded by a one-cell wall."""
    wc, hc = int(round(width_cm / cell_size)), int(round(height_cm / cell_size))
    grid = np.ones((hc + 2, wc + 2), dtype=bool)
    grid[1:-1, 1:-1] = False
    return WallMap(grid, cell_size, [(1, 1, wc + 1, hc + 1)])


# ---------------------------------------------------------------------------
# trajectories and odometry
# ---------------------------------------------------------------------------

P_FORWARD = 0.8
FORWARD_RANGE = (20.0, 80.0)
TURN_RANGE = (math.radians(15.0), math.radians(60.0))
CLEARANCE = 30.0


def sample_action(rng: np.random.Generator):
    """('forward', distance_cm) with probability 0.8, else ('turn', signed angle)."""
    if rng.random() < P_FORWARD:
        return "forward", float(rng.uniform(*FORWARD_RANGE))
    return "turn", _turn(rng)


def _turn(rng):
    return float(rng.choice([-1.0, 1.0]) * rng.uniform(*TURN_RANGE))


def _path_clear(wall_map: WallMap, x0, y0, x1, y1, clearance) -> bool:
    n = max(2, int(math.ceil(math.hypot(x1 - x0, y1 - y0) / 5.0)) + 1)
    xs, ys = np.linspace(x0, x1, n), np.linspace(y0, y1, n)
    ix = np.floor(xs / wall_map.cell_size).astype(int)
    iy = np.floor(ys / wall_map.cell_size).astype(int)
    h, w = wall_map.shape
    if ix.min() < 0 or iy.min() < 0 or ix.max() >= w or iy.max() >= h:
        return False
    return bool(np.all(wall_map.clearance[iy, ix] >= clearance))


def random_free_pose(wall_map: WallMap, rng, clearance: float = CLEARANCE) -> Pose:
    iy, ix = np.nonzero(wall_map.clearance >= clearance)
    if ix.size == 0:
        raise MapError("no free cell with the required clearance")
    k = int(rng.integers(ix.size))
    x, y = wall_map.cell_center(ix[k], iy[k])
    return Pose(float(x), float(y), float(rng.uniform(-math.pi, math.pi)))


def generate_trajectory(wall_map: WallMap, steps: int = 100, seed=0, start: Optional[Pose] = None):
    """Random walk of ``steps`` moves: a list of ``steps + 1`` (pose, odometry) pairs.

    Entry 0 holds the start pose with zero odometry. A forward move that
    would bring the robot closer than ``CLEARANCE`` to a wall is replaced by a
    turn.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pose = random_free_pose(wall_map, rng) if start is None else start
    out = [(pose, Odometry(0.0, 0.0, 0.0))]
    blocked = 0
    for _ in range(steps):
        kind, amount = sample_action(rng)
        if kind == "forward":
            u = Odometry(amount * math.cos(pose.theta), amount * math.sin(pose.theta), 0.0)
            if _path_clear(wall_map, pose.x, pose.y, pose.x + u.dx, pose.y + u.dy, CLEARANCE):
                blocked = 0
            else:
                blocked += 1
                if blocked >= 100:
                    raise TrajectoryError("robot is trapped: 100 consecutive blocked moves")
                u = Odometry(0.0, 0.0, _turn(rng))
        else:
            u = Odometry(0.0, 0.0, amount)
        pose = compose(pose, u)
        out.append((pose, u))
    return out


def _sqrt_factor(cov) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, float))
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def noisy_odometry(true_u: Odometry, cov, rng: np.random.Generator) -> Odometry:
    noise = _sqrt_factor(cov) @ rng.standard_normal(3)
    return Odometry(*(np.asarray(true_u, float) + noise))


TRAJECTORY_COLUMNS = ("step", "true_x_cm", "true_y_cm", "true_theta_rad", "odo_dx", "odo_dy", "odo_dtheta", "seed")


def trajectory_to_csv(trajectory, seed: int) -> str:
    """CSV text of a trajectory: one row per step, odometry leading into that pose."""
    lines = [",".join(TRAJECTORY_COLUMNS)]
    for step, (p, u) in enumerate(trajectory):
        lines.append(",".join([str(step)] + [f"{v:.9f}" for v in (*p, *u)] + [str(seed)]))
    return "\n".join(lines) + "\n"


def trajectory_from_csv(text: str):
    """Inverse of :func:`trajectory_to_csv`; returns ``(trajectory, seed)``."""
    rows = [line.split(",") for line in text.strip().splitlines()]
    if tuple(rows[0]) != TRAJECTORY_COLUMNS:
        raise ValueError(f"unexpected trajectory header {rows[0]}")
    traj = [(Pose(*map(float, r[1:4])), Odometry(*map(float, r[4:7]))) for r in rows[1:]]
    return traj, int(rows[1][7]) if len(rows) > 1 else 0


# ---------------------------------------------------------------------------
# range scans
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DepthScan:
    ranges: np.ndarray
    angles: np.ndarray = field(default_factory=lambda: beam_angles())
    max_range: float = MAX_RANGE

    @property
    def hits(self) -> np.ndarray:
        return self.ranges < self.max_range


def beam_angles(n: int = N_BEAMS, fov: float = FOV) -> np.ndarray:
    """Beam directions relative to the heading, spanning heading +/- fov/2."""
    return np.linspace(-fov / 2.0, fov / 2.0, n)


def cast_rays(wall_map: WallMap, x: float, y: float, angles, max_range: float = MAX_RANGE) -> np.ndarray:
    """Exact grid traversal: distance to the first wall-cell boundary along each ray."""
    cs = wall_map.cell_size
    grid = wall_map.grid
    h, w = grid.shape
    ix0, iy0 = wall_map.cell_of(x, y)
    if not wall_map.in_bounds(ix0, iy0) or grid[iy0, ix0]:
        raise MapError(f"pose ({x:.1f}, {y:.1f}) lies inside a wall or outside the map")
    angles = np.asarray(angles, float)
    dx, dy = np.cos(angles), np.sin(angles)
    n = angles.size
    ix = np.full(n, ix0)
    iy = np.full(n, iy0)
    step_x = np.where(dx > 0, 1, -1)
    step_y = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore"):
        t_delta_x = np.where(dx != 0, cs / np.abs(dx), np.inf)
        t_delta_y = np.where(dy != 0, cs / np.abs(dy), np.inf)
        t_max_x = np.where(dx != 0, ((ix0 + (dx > 0)) * cs - x) / dx, np.inf)
        t_max_y = np.where(dy != 0, ((iy0 + (dy > 0)) * cs - y) / dy, np.inf)
    ranges = np.full(n, max_range)
    active = np.ones(n, dtype=bool)
    while active.any():
        a = np.flatnonzero(active)
        use_x = t_max_x[a] <= t_max_y[a]
        t = np.where(use_x, t_max_x[a], t_max_y[a])
        ax, ay = a[use_x], a[~use_x]
        ix[ax] += step_x[ax]
        t_max_x[ax] += t_delta_x[ax]
        iy[ay] += step_y[ay]
        t_max_y[ay] += t_delta_y[ay]
        too_far = t >= max_range
        outside = (ix[a] < 0) | (ix[a] >= w) | (iy[a] < 0) | (iy[a] >= h)
        hit = np.zeros(a.size, dtype=bool)
        inside = ~outside & ~too_far
        hit[inside] = grid[iy[a][inside], ix[a][inside]]
        ranges[a[hit]] = t[hit]
        active[a[hit | outside | too_far]] = False
    return ranges


def simulate_scan(wall_map: WallMap, pose: Pose, n_beams: int = N_BEAMS, fov: float = FOV,
                  max_range: float = MAX_RANGE) -> DepthScan:
    rel = beam_angles(n_beams, fov)
    ranges = cast_rays(wall_map, pose.x, pose.y, pose.theta + rel, max_range)
    return DepthScan(ranges, rel, max_range)
