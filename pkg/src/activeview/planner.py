"""Position-space RRT* over an occupancy map, with orientations attached from a scored grid."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .io import atomic_write_text
from .sampling import VoxelGrid, _rotation_for, cell_lookup, nearest_cell
from .scene import Pose, rotation_angle_deg
from .visibility import OccupancyMap, segment_free

BEST_SCORE = "best-score"
TURN_BUDGET = "turn-budget"


class PlanningError(ValueError):
    pass


@dataclass(frozen=True)
class PlannerParams:
    step: float = 0.5
    rewire_radius: float = 1.5
    max_iterations: int = 5000
    goal_bias: float = 0.05
    goal_tolerance: float = 0.25
    seed: int = 0
    inflation: float = 0.1

    def __post_init__(self):
        if not (self.step > 0 and self.rewire_radius > 0 and self.goal_tolerance > 0):
            raise ValueError("step, rewire radius and goal tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal bias must be in [0, 1]")
        if self.inflation < 0:
            raise ValueError("inflation must be >= 0")


@dataclass
class PlanProblem:
    start: np.ndarray
    goal: np.ndarray
    occupancy: Optional[OccupancyMap] = None
    grid: Optional[VoxelGrid] = None
    params: PlannerParams = field(default_factory=PlannerParams)
    bounds: Optional[tuple] = None  # (lower, upper); defaults to the grid volume

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64).reshape(3)
        self.goal = np.asarray(self.goal, dtype=np.float64).reshape(3)
        if self.bounds is None:
            if self.grid is None:
                raise ValueError("need a grid or explicit bounds to sample from")
            self.bounds = (self.grid.origin.copy(), self.grid.upper.copy())
        lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in self.bounds)
        if np.any(hi <= lo):
            raise ValueError("bounds must have positive extent")
        self.bounds = (lo, hi)

    def collision_map(self) -> Optional[OccupancyMap]:
        if self.occupancy is None or not self.occupancy.occupied:
            return None
        return self.occupancy.inflate(self.params.inflation)


# ---------------------------------------------------------------- RRT*


def _free_point(occ: Optional[OccupancyMap], p) -> bool:
    return occ is None or not occ.is_occupied(p)


def _free_segment(occ: Optional[OccupancyMap], a, b) -> bool:
    return occ is None or segment_free(occ, a, b)


class _Tree:
    def __init__(self, root: np.ndarray, capacity: int):
        self.pos = np.empty((capacity, 3))
        self.cost = np.empty(capacity)
        self.parent = np.full(capacity, -1, dtype=np.int64)
        self.children: list[list[int]] = []
        self.n = 0
        self.add(root, -1, 0.0)

    def add(self, p, parent: int, cost: float) -> int:
        i = self.n
        self.pos[i] = p
        self.cost[i] = cost
        self.parent[i] = parent
        self.children.append([])
        if parent >= 0:
            self.children[parent].append(i)
        self.n += 1
        return i

    def rewire(self, node: int, new_parent: int, new_cost: float) -> None:
        old = int(self.parent[node])
        self.children[old].remove(node)
        self.children[new_parent].append(node)
        self.parent[node] = new_parent
        delta = new_cost - self.cost[node]
        stack = [node]
        while stack:  # push the saving down the subtree
            k = stack.pop()
            self.cost[k] += delta
            stack.extend(self.children[k])

    def path_to(self, node: int) -> list[np.ndarray]:
        out = []
        while node >= 0:
            out.append(self.pos[node].copy())
            node = int(self.parent[node])
        return out[::-1]


def _radius_scale(lo: np.ndarray, hi: np.ndarray) -> float:
    # shrinking-ball constant for a 3D volume (unit-ball volume 4/3 pi)
    vol = float(np.prod(hi - lo))
    return 2.0 * (1.0 + 1.0 / 3.0) ** (1.0 / 3.0) * (vol / (4.0 / 3.0 * math.pi)) ** (1.0 / 3.0)


def plan_path(problem: PlanProblem) -> Optional[list[np.ndarray]]:
    """RRT* over positions; returns waypoints from start to goal, or None."""
    prm = problem.params
    occ = problem.collision_map()
    start, goal = problem.start, problem.goal
    if not _free_point(occ, start):
        raise PlanningError("start position is in collision")
    if not _free_point(occ, goal):
        raise PlanningError("goal position is in collision")
    if np.array_equal(start, goal):
        return [start.copy()]
    lo, hi = problem.bounds
    rng = np.random.default_rng(prm.seed)
    tree = _Tree(start, prm.max_iterations + 1)
    gamma = _radius_scale(lo, hi)
    best_goal, best_cost = -1, math.inf

    def try_goal(i: int):
        nonlocal best_goal, best_cost
        d = float(np.linalg.norm(tree.pos[i] - goal))
        if d <= prm.goal_tolerance and tree.cost[i] + d < best_cost and _free_segment(occ, tree.pos[i], goal):
            best_goal, best_cost = i, tree.cost[i] + d

    if float(np.linalg.norm(goal - start)) <= prm.goal_tolerance:
        try_goal(0)
    for _ in range(prm.max_iterations):
        target = goal if rng.random() < prm.goal_bias else rng.uniform(lo, hi)
        P = tree.pos[:tree.n]
        d2 = np.sum((P - target) ** 2, axis=1)
        near_i = int(np.argmin(d2))
        dist = math.sqrt(d2[near_i])
        if dist < 1e-12:
            continue
        new = target if dist <= prm.step else P[near_i] + (target - P[near_i]) * (prm.step / dist)
        if not _free_point(occ, new):
            continue
        n = tree.n
        radius = min(prm.rewire_radius, gamma * (math.log(n + 1) / (n + 1)) ** (1.0 / 3.0))
        radius = max(radius, prm.step)
        dn = np.sqrt(np.sum((P - new) ** 2, axis=1))
        near = np.flatnonzero(dn <= radius)
        if near_i not in near:
            near = np.append(near, near_i)
        # choose parent: cheapest first, collision-check lazily
        via = tree.cost[near] + dn[near]
        parent = -1
        for k in np.argsort(via, kind="stable"):
            if _free_segment(occ, P[near[k]], new):
                parent, new_cost = int(near[k]), float(via[k])
                break
        if parent < 0:
            continue
        j = tree.add(new, parent, new_cost)
        # rewire neighbours that get cheaper through the new node
        through = new_cost + dn[near]
        for k, c in zip(near[through < tree.cost[near] - 1e-12], through[through < tree.cost[near] - 1e-12]):
            # costs may have dropped from an earlier rewire in this loop
            if k != parent and c < tree.cost[k] - 1e-12 and _free_segment(occ, new, tree.pos[k]):
                tree.rewire(int(k), j, float(c))
        try_goal(j)
        if best_goal >= 0:
            best_cost = tree.cost[best_goal] + float(np.linalg.norm(tree.pos[best_goal] - goal))
    if best_goal < 0:
        return None
    # rewiring may have improved other goal-reaching nodes; pick the cheapest at the end
    P = tree.pos[:tree.n]
    dg = np.linalg.norm(P - goal, axis=1)
    cands = np.flatnonzero(dg <= prm.goal_tolerance)
    order = np.argsort(tree.cost[cands] + dg[cands], kind="stable")
    for k in cands[order]:
        if _free_segment(occ, P[k], goal):
            best_goal = int(k)
            break
    path = tree.path_to(best_goal)
    if not np.array_equal(path[-1], goal):
        path.append(goal.copy())
    return path


def path_length(positions: Sequence[np.ndarray]) -> float:
    if len(positions) < 2:
        return 0.0
    P = np.asarray(positions)
    return float(np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1)))


# ----------------------------------------------------------- attachment


@dataclass(frozen=True, eq=False)
class Waypoint:
    position: np.ndarray
    pose: Pose
    score: float
    cell_id: int = -1
    outside_grid: bool = False


@dataclass(eq=False)
class Trajectory:
    waypoints: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.waypoints)

    @property
    def positions(self) -> np.ndarray:
        return np.array([w.position for w in self.waypoints]).reshape(-1, 3)

    @property
    def length(self) -> float:
        return path_length(list(self.positions))


def _scored(cands):
    if any(c.score is None for c in cands):
        raise ValueError("grid is not scored; run score_grid first")
    return sorted(cands, key=lambda c: (-c.score, c.direction))


def attach_viewpoints(positions: Sequence, grid: VoxelGrid, policy: str = BEST_SCORE,
                      max_turn_deg: float = math.inf) -> Trajectory:
    """Give each waypoint the orientation its cell scores highest.

    Under ``turn-budget`` the best orientation within ``max_turn_deg`` of the
    previous waypoint's orientation is taken, or the best overall if none fits.
    """
    if policy not in (BEST_SCORE, TURN_BUDGET):
        raise ValueError(f"unknown attachment policy {policy!r}")
    out = []
    prev = None
    for p in positions:
        p = np.asarray(p, dtype=np.float64)
        cell = cell_lookup(grid, p)
        outside = cell is None or not cell.candidates
        if outside:
            scored = [c for c in grid.cells() if c.candidates]
            if not scored:
                raise ValueError("grid has no candidates")
            cell = nearest_cell(grid.with_cells(scored), p)
        ranked = _scored(cell.candidates)
        pick = ranked[0]
        if policy == TURN_BUDGET and prev is not None:
            for c in ranked:
                if rotation_angle_deg(prev, c.pose.rotation) <= max_turn_deg + 1e-9:
                    pick = c
                    break
        rot = pick.pose.rotation
        out.append(Waypoint(p, Pose(rot, p), float(pick.score), cell.cell_id, outside))
        prev = rot
    return Trajectory(out)


def plan(problem: PlanProblem, policy: str = BEST_SCORE, max_turn_deg: float = math.inf) -> Optional[Trajectory]:
    if problem.grid is None:
        raise ValueError("planning with attachment needs a scored grid")
    path = plan_path(problem)
    if path is None:
        return None
    return attach_viewpoints(path, problem.grid, policy, max_turn_deg)


def heading_rotation(forward) -> np.ndarray:
    """Zero-roll camera rotation whose optical axis points along ``forward``."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    theta = math.acos(max(-1.0, min(1.0, f[1])))
    phi = math.atan2(f[0], f[2])
    return _rotation_for(theta, phi)


def forward_facing_poses(positions: Sequence) -> list[Pose]:
    """Poses looking along the direction of travel (the last one keeps the previous heading)."""
    P = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    out = []
    R = np.eye(3)
    for i in range(P.shape[0]):
        if i + 1 < P.shape[0] and np.linalg.norm(P[i + 1] - P[i]) > 1e-12:
            R = heading_rotation(P[i + 1] - P[i])
        out.append(Pose(R, P[i]))
    return out


# -------------------------------------------------------------- file I/O


def trajectory_to_text(traj: Trajectory) -> str:
    lines = []
    for w in traj.waypoints:
        lines.append(json.dumps({
            "position": [float(v) for v in w.position],
            "rotation": [float(v) for v in w.pose.rotation.reshape(-1)],
            "score": float(w.score),
            "cell": int(w.cell_id),
            "outside_grid": bool(w.outside_grid),
        }, separators=(",", ":")))
    return "".join(ln + "\n" for ln in lines)


def trajectory_from_text(text: str) -> Trajectory:
    out = []
    for ln in text.splitlines():
        if not ln.strip():
            continue
        d = json.loads(ln)
        p = np.array(d["position"], dtype=np.float64)
        R = np.array(d["rotation"], dtype=np.float64).reshape(3, 3)
        score = float(d["score"])
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"waypoint score {score} outside [0, 1]")
        out.append(Waypoint(p, Pose(R, p), score, int(d.get("cell", -1)), bool(d.get("outside_grid", False))))
    return Trajectory(out)


def export_trajectory(traj: Trajectory, path) -> None:
    atomic_write_text(path, trajectory_to_text(traj))


def import_trajectory(path) -> Trajectory:
    with open(path, encoding="utf-8") as fh:
        return trajectory_from_text(fh.read())


# ------------------------------------------------------------ test scene


def gap_wall_occupancy(edge: float = 0.1, size=(4.0, 4.0, 2.0), wall_x: float = 2.0,
                       gap_center=(2.0, 1.0), gap_size: float = 0.6) -> OccupancyMap:
    """A one-voxel-thick wall across the x midplane with a single square opening."""
    nx = int(round(wall_x / edge))
    ny, nz = int(round(size[1] / edge)), int(round(size[2] / edge))
    gy, gz = gap_center
    half = gap_size / 2.0
    occ = set()
    for j in range(ny):
        for k in range(nz):
            cy, cz = (j + 0.5) * edge, (k + 0.5) * edge
            if abs(cy - gy) < half and abs(cz - gz) < half:
                continue
            occ.add((nx, j, k))
    return OccupancyMap(edge, frozenset(occ))
