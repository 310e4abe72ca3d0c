"""Geometric localization oracle: noisy 2D-3D registration with RANSAC + DLT.

Stands in for registering a rendered image against a reconstruction: the
record's true projections are perturbed with pixel noise and outliers, a pose
is recovered from the corrupted correspondences and compared to the truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .scene import LandmarkCloud, PinholeCamera, Pose, orthonormalize, pose_error, so3_exp
from .visibility import VisibilityRecord

MIN_SAMPLE = 6


@dataclass(frozen=True)
class OracleConfig:
    pixel_noise: float = 1.0
    outlier_fraction: float = 0.2
    ransac_iterations: int = 500
    inlier_threshold: float = 2.0
    min_correspondences: int = 6
    success_translation: float = 0.05
    success_rotation: float = 0.4
    refine_iterations: int = 20
    reselect_rounds: int = 2
    confidence: float = 0.999
    ransac_batch: int = 50
    local_iterations: int = 5

    def __post_init__(self):
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier fraction must be in [0, 1)")
        if self.pixel_noise < 0:
            raise ValueError("pixel noise must be >= 0")
        if not (self.inlier_threshold > 0 and self.success_translation > 0 and self.success_rotation > 0):
            raise ValueError("thresholds must be positive")
        if self.ransac_iterations < 1 or self.min_correspondences < MIN_SAMPLE:
            raise ValueError(f"need >= 1 RANSAC iteration and >= {MIN_SAMPLE} min correspondences")


@dataclass(frozen=True)
class OracleResult:
    pose: Optional[Pose]
    translation_error: float
    rotation_error: float
    inliers: int
    correspondences: int

    @property
    def recovered(self) -> bool:
        return self.pose is not None

    def within(self, translation: float, rotation: float) -> bool:
        return self.pose is not None and self.translation_error <= translation and self.rotation_error <= rotation

    def success(self, config: OracleConfig) -> bool:
        return (self.pose is not None and self.translation_error < config.success_translation
                and self.rotation_error < config.success_rotation)


def _normalization(X: np.ndarray) -> np.ndarray:
    mean = X.mean(axis=0)
    spread = np.sqrt(((X - mean) ** 2).sum(axis=1)).mean()
    s = np.sqrt(3.0) / spread if spread > 0 else 1.0
    T = np.eye(4)
    T[:3, :3] *= s
    T[:3, 3] = -s * mean
    return T


def dlt_poses(X: np.ndarray, xn: np.ndarray, samples: np.ndarray):
    """World-to-camera ``(R, t, ok)`` for each row of ``samples`` (indices into X / xn).

    ``xn`` are normalized image coordinates (K^-1 applied). Any number >= 6 of
    points per sample is accepted; the linear solution is projected onto SO(3).
    """
    T = _normalization(X)
    Xh = np.hstack([X, np.ones((X.shape[0], 1))]) @ T.T
    S = Xh[samples]  # (I, m, 4)
    u = xn[samples, 0][..., None]
    v = xn[samples, 1][..., None]
    zeros = np.zeros_like(S)
    r1 = np.concatenate([S, zeros, -u * S], axis=2)
    r2 = np.concatenate([zeros, S, -v * S], axis=2)
    A = np.concatenate([r1, r2], axis=1)
    # null vector of A = eigenvector of A^T A with the smallest eigenvalue
    _, vecs = np.linalg.eigh(np.matmul(A.transpose(0, 2, 1), A))
    P = vecs[:, :, 0].reshape(-1, 3, 4) @ T
    M = P[:, :, :3]
    det = np.linalg.det(M)
    P = P * np.where(det < 0, -1.0, 1.0)[:, None, None]
    U, sv, Vt = np.linalg.svd(P[:, :, :3])
    R = U @ Vt
    scale = sv.mean(axis=1)
    ok = np.isfinite(scale) & (scale > 1e-12) & (np.abs(det) > 1e-300)
    t = P[:, :, 3] / np.where(ok, scale, 1.0)[:, None]
    flip = np.linalg.det(R) < 0
    if flip.any():
        ok &= ~flip
    return R, t, ok


def reprojection_errors(R, t, X, pixels, camera: PinholeCamera):
    """Pixel error of every point under every hypothesis; (I, n), inf behind the camera."""
    Xc = np.matmul(X, R.transpose(0, 2, 1)) + t[:, None, :]
    z = Xc[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    du = camera.fx * Xc[..., 0] / zs + camera.cx - pixels[None, :, 0]
    dv = camera.fy * Xc[..., 1] / zs + camera.cy - pixels[None, :, 1]
    err = np.sqrt(du * du + dv * dv)
    return np.where(front, err, np.inf)


def refine_pose(R, t, X, pixels, camera: PinholeCamera, iterations: int = 20):
    """Gauss-Newton on reprojection error; left-perturbation of the world-to-camera pose."""
    fx, fy, cx, cy = camera.fx, camera.fy, camera.cx, camera.cy

    def residuals(R, t):
        Xc = X @ R.T + t
        z = Xc[:, 2]
        r = np.stack([fx * Xc[:, 0] / z + cx - pixels[:, 0], fy * Xc[:, 1] / z + cy - pixels[:, 1]], axis=1)
        return Xc, r

    Xc, r = residuals(R, t)
    if np.any(Xc[:, 2] <= 0):
        return R, t
    cost = float(np.sum(r * r))
    for _ in range(iterations):
        x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        iz = 1.0 / z
        # d(pixel)/d(point_cam)
        ju = np.stack([fx * iz, np.zeros_like(z), -fx * x * iz * iz], axis=1)
        jv = np.stack([np.zeros_like(z), fy * iz, -fy * y * iz * iz], axis=1)
        # d(point_cam)/d(omega) = -[Xc]_x ; rows are cross(J_row, Xc) pattern
        J = np.empty((X.shape[0] * 2, 6))
        J[0::2, :3] = np.cross(Xc, ju)
        J[1::2, :3] = np.cross(Xc, jv)
        J[0::2, 3:] = ju
        J[1::2, 3:] = jv
        g = J.T @ r.reshape(-1)
        H = J.T @ J
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        improved = False
        for _ in range(8):
            dR = so3_exp(step * delta[:3])
            Rn, tn = dR @ R, dR @ t + step * delta[3:]
            Xn, rn = residuals(Rn, tn)
            if np.all(Xn[:, 2] > 0):
                cn = float(np.sum(rn * rn))
                if cn <= cost:
                    improved = True
                    break
            step *= 0.5
        if not improved:
            break
        done = np.linalg.norm(step * delta) < 1e-14 or cost - cn <= 1e-15 * max(cost, 1e-300)
        R, t, Xc, r, cost = Rn, tn, Xn, rn, cn
        if done:
            break
    return orthonormalize(R), t


def corrupt(pixels: np.ndarray, camera: PinholeCamera, config: OracleConfig, rng: np.random.Generator):
    """Gaussian pixel noise, then a fraction of observations replaced by uniform in-image pixels."""
    n = pixels.shape[0]
    obs = pixels + rng.normal(0.0, config.pixel_noise, size=(n, 2)) if config.pixel_noise > 0 else pixels.copy()
    k = int(round(config.outlier_fraction * n))
    if k > 0:
        idx = rng.choice(n, size=k, replace=False)
        obs[idx, 0] = rng.uniform(0.0, camera.width, size=k)
        obs[idx, 1] = rng.uniform(0.0, camera.height, size=k)
    return obs


def _iterations_needed(inlier_ratio: float, config: OracleConfig) -> int:
    """Standard RANSAC stopping bound, capped at the configured iteration count."""
    if config.confidence >= 1.0:
        return config.ransac_iterations
    good = inlier_ratio**MIN_SAMPLE
    if good <= 0.0:
        return config.ransac_iterations
    if good >= 1.0:
        return 1
    k = np.log(1.0 - config.confidence) / np.log(1.0 - good)
    return int(min(config.ransac_iterations, np.ceil(k)))


def localize_oracle(record: VisibilityRecord, cloud: LandmarkCloud, camera: PinholeCamera, truth: Pose,
                    config: OracleConfig, rng) -> OracleResult:
    """Try to recover ``truth`` from the record's corrupted correspondences."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = len(record)
    fail = OracleResult(None, float("inf"), float("inf"), 0, n)
    if n < config.min_correspondences or n < MIN_SAMPLE:
        return fail
    X = cloud.positions[cloud.indices_of(record.ids)]
    obs = corrupt(record.pixels, camera, config, rng)
    xn = np.stack([(obs[:, 0] - camera.cx) / camera.fx, (obs[:, 1] - camera.cy) / camera.fy], axis=1)
    best_count, best = -1, None
    needed, done = config.ransac_iterations, 0
    with np.errstate(all="ignore"):
        while done < needed:
            m = min(config.ransac_batch, needed - done)
            samples = rng.random((m, n)).argpartition(MIN_SAMPLE - 1, axis=1)[:, :MIN_SAMPLE]
            R, t, ok = dlt_poses(X, xn, samples)
            err = reprojection_errors(R, t, X, obs, camera)
            counts = np.where(ok, np.sum(err < config.inlier_threshold, axis=1), -1)
            k = int(np.argmax(counts))
            if counts[k] > best_count:
                Rk, tk, inl = R[k], t[k], err[k] < config.inlier_threshold
                if config.local_iterations > 0:
                    # polish the new best on its own support and recount before bounding
                    Rl, tl = refine_pose(Rk, tk, X[inl], obs[inl], camera, config.local_iterations)
                    again = reprojection_errors(Rl[None], tl[None], X, obs, camera)[0] < config.inlier_threshold
                    if again.sum() > inl.sum():
                        Rk, tk, inl = Rl, tl, again
                best_count, best = max(int(counts[k]), int(inl.sum())), (Rk, tk, inl)
                needed = max(done + m, min(needed, _iterations_needed(best_count / n, config)))
            done += m
    if best_count < MIN_SAMPLE:
        return OracleResult(None, float("inf"), float("inf"), max(best_count, 0), n)
    Rr, tr, inl = best
    with np.errstate(all="ignore"):
        for _ in range(config.reselect_rounds + 1):
            Rr, tr = refine_pose(Rr, tr, X[inl], obs[inl], camera, config.refine_iterations)
            again = reprojection_errors(Rr[None], tr[None], X, obs, camera)[0] < config.inlier_threshold
            if again.sum() < MIN_SAMPLE or np.array_equal(again, inl):
                break
            inl = again
    if not (np.all(np.isfinite(Rr)) and np.all(np.isfinite(tr))):
        return OracleResult(None, float("inf"), float("inf"), int(inl.sum()), n)
    pose = Pose(Rr.T, -Rr.T @ tr)
    te, re = pose_error(pose, truth)
    return OracleResult(pose, te, re, int(inl.sum()), n)
