"""Independent brute-force references used by several test modules."""

from __future__ import annotations

import math

import numpy as np

from activeview.model import init_params
from activeview.scene import LandmarkCloud, PinholeCamera, Pose, so3_exp, unproject
from activeview.visibility import OccupancyMap, visible_landmarks_unoccluded


def frustum_ids(cloud, camera: PinholeCamera, pose: Pose) -> set[int]:
    """Per-point loop over the pinhole model, no vectorization."""
    out = set()
    R, c = pose.rotation, pose.translation
    for lid, p in zip(cloud.ids, cloud.positions):
        x, y, z = R.T @ (p - c)
        if not camera.near <= z <= camera.far:
            continue
        u = camera.fx * x / z + camera.cx
        v = camera.fy * y / z + camera.cy
        if 0 <= u < camera.width and 0 <= v < camera.height:
            out.add(int(lid))
    return out


def segment_hits_box(a, b, lo, hi) -> bool:
    """Slab test: does the closed segment a-b pass through the open box (lo, hi)?"""
    t0, t1 = 0.0, 1.0
    for ax in range(3):
        d = b[ax] - a[ax]
        if d == 0.0:
            if not lo[ax] < a[ax] < hi[ax]:
                return False
            continue
        ta, tb = (lo[ax] - a[ax]) / d, (hi[ax] - a[ax]) / d
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 >= t1:
            return False
    return True


def slab_blocked(occ: OccupancyMap, origin, target) -> bool:
    """Exact occlusion: any occupied voxel other than the target's own crossed by the segment."""
    terminal = occ.key(target)
    e = occ.cell_edge
    for key in occ.occupied:
        if key == terminal:
            continue
        lo = np.asarray(key, dtype=float) * e
        if segment_hits_box(origin, target, lo, lo + e):
            return True
    return False


def march_keys(origin, target, edge: float, step_fraction: float = 0.25) -> set:
    """Voxels containing samples taken every ``step_fraction`` cell along the segment."""
    a, b = np.asarray(origin, float), np.asarray(target, float)
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / (step_fraction * edge))))
    ts = np.linspace(0.0, 1.0, n + 1)
    pts = a[None] + ts[:, None] * (b - a)[None]
    return set(map(tuple, np.floor(pts / edge).astype(np.int64).tolist()))


def march_blocked(occ: OccupancyMap, origin, target) -> bool:
    terminal = occ.key(target)
    return any(k != terminal and k in occ.occupied for k in march_keys(origin, target, occ.cell_edge))


def random_occupancy_scene(rng: np.random.Generator, size=(20, 20, 20), edge: float = 0.1, density=0.04):
    """Random occupied voxels on a lattice of at most ``prod(size)`` voxels."""
    shape = np.asarray(size)
    keys = np.argwhere(rng.random(size) < density)
    return OccupancyMap(edge, frozenset(map(tuple, keys.tolist()))), shape * edge


def numeric_gradient(f, params, h: float = 1e-5):
    """Central differences of the scalar ``f()`` with respect to every entry of ``params``."""
    out = []
    for arr in params.as_list():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.shape[0]):
            keep = flat[i]
            flat[i] = keep + h
            up = f()
            flat[i] = keep - h
            down = f()
            flat[i] = keep
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor: float = 1e-7) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def gradient_draw(seed: int):
    """A small random network, batch, weights and L2 strength for a gradient check."""
    rng = np.random.default_rng(seed)
    d, hidden, n = int(rng.integers(2, 7)), int(rng.integers(2, 7)), int(rng.integers(1, 9))
    params = init_params(d, hidden, seed)
    params.b1[:] = rng.normal(0, 0.1, hidden)
    params.b2[:] = rng.normal(0, 0.1, hidden)
    params.b3[:] = rng.normal(0, 0.1, 1)
    X = rng.normal(size=(n, d))
    y = (rng.random(n) < 0.5).astype(float)
    w = rng.uniform(0.5, 2.0, n)
    lam = float(rng.choice([0.0, 1e-3, 0.1]))
    return params, X, y, w, lam


def spread_view(seed: int, n: int = 100, camera: PinholeCamera = PinholeCamera(), patch=None):
    """Random camera pose with ``n`` landmarks placed at random pixels and depths in front of it.

    ``patch`` = (u0, v0, size) concentrates the pixels in one square region.
    Returns ``(cloud, pose, record)``.
    """
    r = np.random.default_rng(seed)
    pose = Pose(so3_exp(r.normal(size=3)), r.uniform(-2, 2, 3))
    if patch is None:
        u, v = r.uniform(20, camera.width - 20, n), r.uniform(20, camera.height - 20, n)
    else:
        u0, v0, size = patch
        u, v = r.uniform(u0, u0 + size, n), r.uniform(v0, v0 + size, n)
    d = r.uniform(2, 6, n)
    pc = np.stack([unproject(camera, (a, b), z) for a, b, z in zip(u, v, d)])
    cloud = LandmarkCloud(pose.apply(pc))
    return cloud, pose, visible_landmarks_unoccluded(cloud, camera, pose)


def segment_samples_hit(occ: OccupancyMap, a, b, spacing: float = 0.05) -> bool:
    """Sample the segment every ``spacing`` meters (both ends included) and test each sample's voxel."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / spacing)))
    pts = a[None] + np.linspace(0.0, 1.0, n + 1)[:, None] * (b - a)[None]
    return any(occ.is_occupied(p) for p in pts)


def path_hits(occ: OccupancyMap, positions, spacing: float = 0.05) -> bool:
    return any(segment_samples_hit(occ, p, q, spacing) for p, q in zip(positions, positions[1:]))
