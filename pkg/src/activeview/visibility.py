"""Visible-landmark sets per viewpoint, occlusion handling and orientation ranking."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .sampling import Candidate, DirectionSet, VoxelGrid, sort_candidates
from .scene import LandmarkCloud, PinholeCamera, Pose, project_points, transform_into_camera

OCCLUSION_MODES = ("none", "hpr", "occupancy")


@dataclass(frozen=True)
class VisibilityRecord:
    """Landmarks seen from one viewpoint, as parallel arrays."""

    cell_id: int
    direction: int
    ids: np.ndarray  # (k,)
    pixels: np.ndarray  # (k, 2)
    depths: np.ndarray  # (k,)
    points_cam: np.ndarray  # (k, 3)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def visible(self) -> list[tuple[int, np.ndarray, float, np.ndarray]]:
        return [(int(i), p, float(d), q) for i, p, d, q in zip(self.ids, self.pixels, self.depths, self.points_cam)]

    def subset(self, keep) -> "VisibilityRecord":
        keep = np.asarray(keep)
        return replace(
            self,
            ids=self.ids[keep],
            pixels=self.pixels[keep],
            depths=self.depths[keep],
            points_cam=self.points_cam[keep],
        )

    @classmethod
    def empty(cls, cell_id: int = -1, direction: int = -1) -> "VisibilityRecord":
        return cls(cell_id, direction, np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))


def visible_landmarks_unoccluded(
    cloud: LandmarkCloud, camera: PinholeCamera, pose: Pose, cell_id: int = -1, direction: int = -1
) -> VisibilityRecord:
    """Frustum test only: every landmark that projects inside the image."""
    pc = transform_into_camera(pose, cloud.positions)
    pix, ok = project_points(camera, pc)
    return VisibilityRecord(cell_id, direction, cloud.ids[ok], pix[ok], pc[ok, 2], pc[ok])


def hpr_filter(record: VisibilityRecord, gamma: float = 100.0) -> VisibilityRecord:
    """Hidden point removal by spherical flipping and a convex hull.

    The flip radius is ``gamma`` times the largest point distance. Inputs
    that give a degenerate hull (fewer than 4 points, coplanar) pass through.
    """
    n = len(record)
    if n < 4:
        return record
    p = record.points_cam
    norms = np.linalg.norm(p, axis=1)
    radius = gamma * norms.max()
    flipped = p + 2.0 * (radius - norms)[:, None] * p / norms[:, None]
    try:
        hull = ConvexHull(np.vstack([flipped, np.zeros((1, 3))]))
    except (QhullError, ValueError):
        return record
    keep = np.unique(hull.vertices[hull.vertices < n])
    return record.subset(keep)


# --------------------------------------------------------------- occupancy


@dataclass(frozen=True)
class OccupancyMap:
    """Set of occupied voxels on the lattice ``floor(p / cell_edge)``."""

    cell_edge: float
    occupied: frozenset

    def __post_init__(self):
        if not self.cell_edge > 0:
            raise ValueError("cell_edge must be positive")

    def __len__(self) -> int:
        return len(self.occupied)

    def __contains__(self, key) -> bool:
        return key in self.occupied

    def key(self, point) -> tuple[int, int, int]:
        q = np.floor(np.asarray(point, dtype=np.float64) / self.cell_edge)
        return (int(q[0]), int(q[1]), int(q[2]))

    def is_occupied(self, point) -> bool:
        return self.key(point) in self.occupied

    def inflate(self, radius: float) -> "OccupancyMap":
        """Dilate by every voxel whose center offset lies within ``radius``."""
        r = int(math.ceil(radius / self.cell_edge - 1e-12))
        if r <= 0 or not self.occupied:
            return self
        offs = [
            (a, b, c)
            for a in range(-r, r + 1)
            for b in range(-r, r + 1)
            for c in range(-r, r + 1)
            if (a * a + b * b + c * c) * self.cell_edge**2 <= (radius + self.cell_edge) ** 2
        ]
        out = {(i + a, j + b, k + c) for (i, j, k) in self.occupied for (a, b, c) in offs}
        return OccupancyMap(self.cell_edge, frozenset(out))

    def to_dict(self) -> dict:
        return {"format": "activeview-occupancy", "version": 1, "cell_edge": self.cell_edge,
                "occupied": [list(k) for k in sorted(self.occupied)]}

    @classmethod
    def from_dict(cls, d: dict) -> "OccupancyMap":
        return cls(float(d["cell_edge"]), frozenset(tuple(int(v) for v in k) for k in d["occupied"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"


def build_occupancy(points, cell_edge: float) -> OccupancyMap:
    """Mark the voxel containing each input point (a cloud or an (n, 3) array)."""
    if cell_edge <= 0:
        raise ValueError("cell_edge must be positive")
    P = points.positions if isinstance(points, LandmarkCloud) else np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if P.shape[0] == 0:
        raise ValueError("no points to build occupancy from")
    keys = np.floor(P / cell_edge).astype(np.int64)
    return OccupancyMap(float(cell_edge), frozenset(map(tuple, np.unique(keys, axis=0).tolist())))


def traverse(p0, p1, edge: float) -> list[tuple[int, int, int]]:
    """Voxels pierced by the segment p0 -> p1, in order (3D DDA)."""
    out: list[tuple[int, int, int]] = []
    _walk(p0, p1, edge, lambda key: out.append(key) or False)
    return out


def _walk(p0, p1, edge, visit) -> bool:
    # Amanatides-Woo traversal in lattice units; stops early when visit() is True.
    # An axis only advances while it has not reached the endpoint's index, so the
    # walk always ends in the endpoint's voxel; crossing times just order the steps.
    a = (float(p0[0]) / edge, float(p0[1]) / edge, float(p0[2]) / edge)
    b = (float(p1[0]) / edge, float(p1[1]) / edge, float(p1[2]) / edge)
    cur = [math.floor(a[0]), math.floor(a[1]), math.floor(a[2])]
    end = (math.floor(b[0]), math.floor(b[1]), math.floor(b[2]))
    d = (b[0] - a[0], b[1] - a[1], b[2] - a[2])
    step = [1 if end[ax] > cur[ax] else -1 for ax in range(3)]

    def crossing(ax):
        if cur[ax] == end[ax] or d[ax] == 0.0:
            return math.inf
        return ((cur[ax] + 1 if step[ax] > 0 else cur[ax]) - a[ax]) / d[ax]

    while True:
        key = (cur[0], cur[1], cur[2])
        if visit(key):
            return True
        if key == end:
            return False
        tx, ty, tz = crossing(0), crossing(1), crossing(2)
        if tx <= ty and tx <= tz and cur[0] != end[0]:
            cur[0] += step[0]
        elif ty <= tz and cur[1] != end[1]:
            cur[1] += step[1]
        else:
            ax = 2 if cur[2] != end[2] else (0 if cur[0] != end[0] else 1)
            cur[ax] += step[ax]


def ray_blocked(occupancy: OccupancyMap, origin, target, exempt_terminal: bool = True) -> bool:
    """True if an occupied voxel lies on the segment (excluding the target's voxel if exempt)."""
    occ = occupancy.occupied
    if not occ:
        return False
    edge = occupancy.cell_edge
    terminal = occupancy.key(target) if exempt_terminal else None
    return _walk(origin, target, edge, lambda key: key != terminal and key in occ)


def segment_free(occupancy: OccupancyMap, a, b) -> bool:
    return not ray_blocked(occupancy, a, b, exempt_terminal=False)


def occlusion_filter(record: VisibilityRecord, occupancy: OccupancyMap, pose: Pose) -> VisibilityRecord:
    """Keep landmarks whose sight line from the camera center is unobstructed."""
    if not occupancy.occupied or len(record) == 0:
        return record
    world = pose.apply(record.points_cam)
    c = pose.translation
    keep = [k for k in range(len(record)) if not ray_blocked(occupancy, c, world[k])]
    return record.subset(np.array(keep, dtype=np.int64))


# ----------------------------------------------------------------- ranking


@dataclass(frozen=True)
class ViewContext:
    """Read-only scene data needed to build a visibility record for any viewpoint."""

    cloud: LandmarkCloud
    camera: PinholeCamera
    directions: DirectionSet
    mode: str = "none"
    occupancy: Optional[OccupancyMap] = None
    gamma: float = 100.0

    def __post_init__(self):
        if self.mode not in OCCLUSION_MODES:
            raise ValueError(f"unknown occlusion mode {self.mode!r}")
        if self.mode == "occupancy" and self.occupancy is None:
            raise ValueError("occupancy mode needs an occupancy map")

    def record(self, cell_id: int, direction: int, center) -> VisibilityRecord:
        pose = Pose(self.directions.rotations[direction], center)
        rec = visible_landmarks_unoccluded(self.cloud, self.camera, pose, cell_id, direction)
        return self.occlude(rec, pose)

    def occlude(self, rec: VisibilityRecord, pose: Pose) -> VisibilityRecord:
        if self.mode == "hpr":
            return hpr_filter(rec, self.gamma)
        if self.mode == "occupancy":
            return occlusion_filter(rec, self.occupancy, pose)
        return rec

    def counts(self, center) -> np.ndarray:
        """Post-occlusion visible count for every direction at one location."""
        rel = self.cloud.positions - np.asarray(center)
        cam = self.camera
        out = np.zeros(self.directions.n, dtype=np.int64)
        for d, R in enumerate(self.directions.rotations):
            pc = rel @ R
            pix, ok = project_points(cam, pc)
            if self.mode == "none" or not ok.any():
                out[d] = int(ok.sum())
                continue
            rec = VisibilityRecord(-1, d, self.cloud.ids[ok], pix[ok], pc[ok, 2], pc[ok])
            out[d] = len(self.occlude(rec, Pose(R, center)))
        return out


_WORKER_CTX: Optional[ViewContext] = None


def _init_worker(ctx: ViewContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _counts_chunk(centers: np.ndarray) -> list[np.ndarray]:
    return [_WORKER_CTX.counts(c) for c in centers]


def default_workers() -> int:
    return int(os.environ.get("ACTIVEVIEW_WORKERS", "1"))


def visibility_counts(ctx: ViewContext, centers: np.ndarray, workers: int = 1, chunk: int = 4) -> np.ndarray:
    """(n_cells, n_directions) visible counts, computed by a process pool."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if workers <= 1 or centers.shape[0] <= 1:
        return np.stack([ctx.counts(c) for c in centers]) if len(centers) else np.zeros((0, ctx.directions.n), int)
    chunks = [centers[i:i + chunk] for i in range(0, centers.shape[0], chunk)]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as ex:
        parts = list(ex.map(_counts_chunk, chunks))
    return np.stack([row for part in parts for row in part])


def rank_orientations(
    grid: VoxelGrid,
    cloud: LandmarkCloud,
    camera: PinholeCamera,
    directions: DirectionSet,
    mode: str = "none",
    keep_k: int = 10,
    occupancy: Optional[OccupancyMap] = None,
    gamma: float = 100.0,
    workers: int = 1,
) -> VoxelGrid:
    """Keep, per cell, the ``keep_k`` directions seeing the most landmarks.

    Ties go to the lower direction index, so the ranking does not depend on
    the worker count.
    """
    ctx = ViewContext(cloud, camera, directions, mode, occupancy, gamma)
    cells = grid.cells()
    counts = visibility_counts(ctx, np.stack([c.center for c in cells]), workers)
    ranked = []
    for cell, row in zip(cells, counts):
        order = np.lexsort((np.arange(row.shape[0]), -row))[:keep_k]
        cands = tuple(Candidate(int(d), directions.pose(int(d), cell.center), int(row[d])) for d in order)
        ranked.append(replace(cell, candidates=cands))
    out = grid.with_cells(ranked, sort_key="visible")
    out.n_directions = directions.n
    return out


def cell_records(ctx: ViewContext, cell) -> list[VisibilityRecord]:
    return [ctx.record(cell.cell_id, c.direction, cell.center) for c in cell.candidates]


def resort(grid: VoxelGrid, key: str) -> VoxelGrid:
    return grid.with_cells([replace(c, candidates=sort_candidates(c.candidates, key)) for c in grid.cells()], key)


def records_for(ctx: ViewContext, grid: VoxelGrid) -> Iterable[tuple[object, list[VisibilityRecord]]]:
    for cell in grid.cells():
        yield cell, cell_records(ctx, cell)
