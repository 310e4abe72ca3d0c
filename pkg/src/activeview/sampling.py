"""Discrete viewpoint map: voxel-grid camera locations x Fibonacci orientations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from .scene import LandmarkCloud, Pose, rot_x, rot_y

GRID_FORMAT = "activeview-grid"
GRID_VERSION = 1


@dataclass(frozen=True)
class DirectionSet:
    """Camera rotations with zero roll about the optical axis.

    ``thetas`` are polar angles of the forward vector measured from the world
    +y axis, ``phis`` the azimuths about it.
    """

    thetas: np.ndarray
    phis: np.ndarray
    rotations: np.ndarray  # (n, 3, 3)
    kind: str = "fibonacci"

    @property
    def n(self) -> int:
        return self.rotations.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def forwards(self) -> np.ndarray:
        return self.rotations[:, :, 2]

    def pose(self, index: int, translation) -> Pose:
        return Pose(self.rotations[index], translation)


def _rotation_for(theta: float, phi: float) -> np.ndarray:
    # x-rotation lifts the optical axis to elevation (theta - pi/2), then the
    # y-rotation applies the azimuth; forward = (sin t sin p, cos t, sin t cos p).
    return rot_y(phi) @ rot_x(theta - math.pi / 2)


def directions_from_angles(thetas, phis, kind: str) -> DirectionSet:
    thetas = np.asarray(thetas, dtype=np.float64)
    phis = np.asarray(phis, dtype=np.float64)
    R = np.stack([_rotation_for(t, p) for t, p in zip(thetas, phis)])
    return DirectionSet(thetas, phis, R, kind)


def fibonacci_directions(n: int) -> DirectionSet:
    """Spherical Fibonacci lattice of ``n`` camera orientations."""
    if n < 1:
        raise ValueError("direction count must be >= 1")
    i = np.arange(n, dtype=np.float64)
    thetas = np.arccos(1.0 - 2.0 * (i + 0.5) / n)
    phis = np.mod(i * math.pi * (1.0 + math.sqrt(5.0)), 2.0 * math.pi)
    return directions_from_angles(thetas, phis, "fibonacci")


def azimuth_elevation_directions(n: int) -> DirectionSet:
    """Classic equal-angle grid with about ``n`` samples, for comparison only."""
    if n < 1:
        raise ValueError("direction count must be >= 1")
    n_el = max(1, int(round(math.sqrt(n / 2.0))))
    n_az = int(math.ceil(n / n_el))
    thetas, phis = [], []
    for a in range(n_el):
        for b in range(n_az):
            if len(thetas) == n:
                break
            thetas.append(math.pi * (a + 0.5) / n_el)
            phis.append(2.0 * math.pi * b / n_az)
    return directions_from_angles(thetas, phis, "azimuth-elevation")


@dataclass(frozen=True)
class Candidate:
    direction: int
    pose: Pose
    visible: int = 0
    score: Optional[float] = None


@dataclass(frozen=True)
class VoxelCell:
    index: tuple[int, int, int]
    cell_id: int
    center: np.ndarray
    candidates: tuple[Candidate, ...] = ()

    def best(self) -> Optional[Candidate]:
        return self.candidates[0] if self.candidates else None


def sort_candidates(cands, key: str) -> tuple[Candidate, ...]:
    if key == "score":
        return tuple(sorted(cands, key=lambda c: (-(c.score if c.score is not None else -1.0), c.direction)))
    return tuple(sorted(cands, key=lambda c: (-c.visible, c.direction)))


@dataclass
class VoxelGrid:
    origin: np.ndarray
    resolution: tuple[int, int, int]
    cell_size: np.ndarray
    table: dict = field(default_factory=dict)
    n_directions: int = 0
    sort_key: str = "visible"

    @property
    def extent(self) -> np.ndarray:
        return self.cell_size * np.asarray(self.resolution)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.extent

    def __len__(self) -> int:
        return len(self.table)

    def cells(self) -> list[VoxelCell]:
        """Cells in ascending cell-id order."""
        return sorted(self.table.values(), key=lambda c: c.cell_id)

    def cell_id(self, index) -> int:
        nx, ny, nz = self.resolution
        i, j, k = index
        return (i * ny + j) * nz + k

    def index_of(self, cell_id: int) -> tuple[int, int, int]:
        nx, ny, nz = self.resolution
        return (cell_id // (ny * nz), (cell_id // nz) % ny, cell_id % nz)

    def by_id(self, cell_id: int) -> VoxelCell:
        return self.table[self.index_of(cell_id)]

    def with_cells(self, cells, sort_key: Optional[str] = None) -> "VoxelGrid":
        table = {c.index: c for c in cells}
        return replace(self, table=table, sort_key=sort_key or self.sort_key)


def build_grid(cloud: LandmarkCloud, resolution=(8, 8, 8), margin: float = 0.0) -> VoxelGrid:
    """Split the cloud's bounding box (inflated by ``margin``) into cells."""
    res = tuple(int(r) for r in resolution)
    if len(res) != 3 or min(res) < 1:
        raise ValueError("resolution must be three integers >= 1")
    lo = cloud.aabb[0] - margin
    hi = cloud.aabb[1] + margin
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValueError("degenerate bounding box; increase the margin")
    cell = extent / np.asarray(res, dtype=np.float64)
    grid = VoxelGrid(lo.copy(), res, cell)
    for i in range(res[0]):
        for j in range(res[1]):
            for k in range(res[2]):
                idx = (i, j, k)
                center = lo + (np.array(idx, dtype=np.float64) + 0.5) * cell
                grid.table[idx] = VoxelCell(idx, grid.cell_id(idx), center)
    return grid


def cell_index(grid: VoxelGrid, position) -> Optional[tuple[int, int, int]]:
    q = np.floor((np.asarray(position, dtype=np.float64) - grid.origin) / grid.cell_size).astype(np.int64)
    if np.any(q < 0) or np.any(q >= np.asarray(grid.resolution)):
        return None
    return (int(q[0]), int(q[1]), int(q[2]))


def cell_lookup(grid: VoxelGrid, position) -> Optional[VoxelCell]:
    """Cell whose half-open bounds contain ``position``."""
    idx = cell_index(grid, position)
    return None if idx is None else grid.table.get(idx)


def nearest_cell(grid: VoxelGrid, position) -> VoxelCell:
    cells = grid.cells()
    centers = np.stack([c.center for c in cells])
    d = np.linalg.norm(centers - np.asarray(position), axis=1)
    return cells[int(np.argmin(d))]


def enumerate_viewpoints(grid: VoxelGrid, directions: DirectionSet) -> Iterator[tuple[int, int, Pose]]:
    """Stream every (cell id, direction index, pose) combination."""
    for cell in grid.cells():
        for d in range(directions.n):
            yield cell.cell_id, d, Pose(directions.rotations[d], cell.center)


# ----------------------------------------------------------- serialization


def grid_to_dict(grid: VoxelGrid) -> dict:
    cells = []
    for c in grid.cells():
        cells.append({
            "index": list(c.index),
            "center": c.center.tolist(),
            "candidates": [[cd.direction, cd.visible, cd.score] for cd in c.candidates],
        })
    return {
        "format": GRID_FORMAT,
        "version": GRID_VERSION,
        "origin": grid.origin.tolist(),
        "resolution": list(grid.resolution),
        "cell_size": grid.cell_size.tolist(),
        "n_directions": grid.n_directions,
        "sort_key": grid.sort_key,
        "cells": cells,
    }


def grid_from_dict(d: dict, directions: Optional[DirectionSet] = None) -> VoxelGrid:
    if d.get("format") != GRID_FORMAT:
        raise ValueError("not a grid file")
    if d.get("version") != GRID_VERSION:
        raise ValueError(f"unsupported grid version {d.get('version')}")
    n_dir = int(d["n_directions"])
    if directions is None and n_dir > 0:
        directions = fibonacci_directions(n_dir)
    grid = VoxelGrid(
        np.array(d["origin"], dtype=np.float64),
        tuple(d["resolution"]),
        np.array(d["cell_size"], dtype=np.float64),
        n_directions=n_dir,
        sort_key=d["sort_key"],
    )
    for rec in d["cells"]:
        idx = tuple(rec["index"])
        center = np.array(rec["center"], dtype=np.float64)
        cands = tuple(
            Candidate(int(di), Pose(directions.rotations[di], center), int(vis), score)
            for di, vis, score in rec["candidates"]
        )
        grid.table[idx] = VoxelCell(idx, grid.cell_id(idx), center, cands)
    return grid


def dump_grid(grid: VoxelGrid) -> str:
    return json.dumps(grid_to_dict(grid), separators=(",", ":")) + "\n"


def parse_grid(text: str) -> VoxelGrid:
    return grid_from_dict(json.loads(text))
