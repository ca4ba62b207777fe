"""Manhattan-grid random-turn mobility and RSU placement.

A vehicle's motion is an anchor point, the time it was there, a heading and
the next intersection ahead. Positions between intersections are a pure
function of time, so querying at arbitrary instants never changes a
trajectory, and a state rebuilt from a recorded position reproduces that
position exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import D_MIN

HEADINGS = {"N": (0, 1), "S": (0, -1), "E": (1, 0), "W": (-1, 0)}
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
_ORDER = ("N", "E", "S", "W")


@dataclass(frozen=True)
class RoadGrid:
    extent: float = 2000.0
    block_length: float = 250.0
    rsu_coords: tuple = (250.0, 750.0, 1250.0, 1750.0)

    @property
    def n_nodes(self):
        """Intersections per axis (9 for the default 2 km / 250 m grid)."""
        return int(round(self.extent / self.block_length)) + 1

    @property
    def rsu_positions(self):
        """RSU lattice in row-major order (y outer, x inner)."""
        return [(x, y) for y in self.rsu_coords for x in self.rsu_coords]

    def legal_headings(self, ix, iy, heading=None):
        out = []
        for h in _ORDER:
            dx, dy = HEADINGS[h]
            if 0 <= ix + dx < self.n_nodes and 0 <= iy + dy < self.n_nodes:
                out.append(h)
        if heading is not None and len(out) > 1:
            out = [h for h in out if h != OPPOSITE[heading]]
        return out


@dataclass
class VehicleKinematics:
    vehicle_id: int
    x0: float  # anchor position, occupied at anchor_time
    y0: float
    heading: str
    speed: float
    anchor_time: float
    nx: int  # intersection ahead
    ny: int
    block_length: float = 250.0
    clock: float = None  # latest time the state was advanced to

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError("speed must be > 0")
        if self.clock is None:
            self.clock = self.anchor_time

    @property
    def arrival_time(self):
        gap = abs(self.nx * self.block_length - self.x0) + abs(self.ny * self.block_length - self.y0)
        return self.anchor_time + gap / self.speed

    def position_at(self, t):
        """Position at ``t``; valid up to the next intersection."""
        dx, dy = HEADINGS[self.heading]
        s = self.speed * (t - self.anchor_time)
        return (self.x0 + dx * s, self.y0 + dy * s)

    @property
    def position(self):
        return self.position_at(self.clock)


def advance(v: VehicleKinematics, grid: RoadGrid, t: float, rng) -> VehicleKinematics:
    """Move ``v`` forward to time ``t``, drawing one turn per intersection crossed."""
    while v.arrival_time <= t:
        v.anchor_time = v.arrival_time
        v.x0, v.y0 = v.nx * grid.block_length, v.ny * grid.block_length
        options = grid.legal_headings(v.nx, v.ny, v.heading)
        v.heading = options[int(rng.integers(len(options)))]
        dx, dy = HEADINGS[v.heading]
        v.nx += dx
        v.ny += dy
    v.clock = max(v.clock, t)
    return v


def position(v: VehicleKinematics, grid: RoadGrid, t: float, rng):
    advance(v, grid, t, rng)
    return v.position_at(t)


def place_on_edge(vehicle_id, grid, rng, speed, now=0.0):
    """Uniformly random point on a random grid edge, random direction along it."""
    n, b = grid.n_nodes, grid.block_length
    offset = None
    if rng.random() < 0.5:
        ix, iy = int(rng.integers(n - 1)), int(rng.integers(n))
        offset = float(rng.random()) * b
        pos = (ix * b + offset, iy * b)
    else:
        ix, iy = int(rng.integers(n)), int(rng.integers(n - 1))
        offset = float(rng.random()) * b
        pos = (ix * b, iy * b + offset)
    return kinematics_from_position(vehicle_id, pos, speed, grid, rng, now)


def spawn_vehicles(count, rng, grid=None, speed_range=(8.0, 14.0), now=0.0, first_id=0):
    grid = grid or RoadGrid()
    out = []
    for k in range(count):
        speed = float(rng.uniform(*speed_range))
        out.append(place_on_edge(first_id + k, grid, rng, speed, now))
    return out


def kinematics_from_position(vehicle_id, pos, speed, grid, rng, now):
    """Kinematic state located exactly at ``pos`` at time ``now``.

    The direction of travel along the edge is drawn from ``rng``; at an
    intersection any legal heading may be chosen.
    """
    b = grid.block_length
    x, y = float(pos[0]), float(pos[1])
    fx, fy = x / b, y / b
    on_vertical = abs(fx - round(fx)) < 1e-9
    on_horizontal = abs(fy - round(fy)) < 1e-9
    if on_vertical and on_horizontal:
        ix, iy = int(round(fx)), int(round(fy))
        options = grid.legal_headings(ix, iy)
        heading = options[int(rng.integers(len(options)))]
        dx, dy = HEADINGS[heading]
        nx, ny = ix + dx, iy + dy
    elif on_horizontal:
        ny = int(round(fy))
        heading = "E" if rng.random() < 0.5 else "W"
        nx = math.floor(fx) + 1 if heading == "E" else math.floor(fx)
    else:
        nx = int(round(fx))
        heading = "N" if rng.random() < 0.5 else "S"
        ny = math.floor(fy) + 1 if heading == "N" else math.floor(fy)
    return VehicleKinematics(vehicle_id, x, y, heading, speed, now, nx, ny, b, now)


def step(vehicles, dt, rng, grid=None):
    """Advance every vehicle ``dt`` seconds past its own clock."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt!r}")
    grid = grid or RoadGrid()
    for v in vehicles:
        advance(v, grid, v.clock + dt, rng)
    return vehicles


def distance(vehicle_pos, server_pos):
    return max(math.dist(vehicle_pos, server_pos), D_MIN)


def distances(vehicle_pos, server_positions: np.ndarray) -> np.ndarray:
    diff = server_positions - np.asarray(vehicle_pos, dtype=float)
    return np.maximum(np.hypot(diff[:, 0], diff[:, 1]), D_MIN)
