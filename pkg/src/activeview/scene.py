"""Landmarks, poses and the pinhole camera shared by every other module.

Camera frame convention: z forward, x right, y down. A ``Pose`` maps camera
coordinates into the world, ``p_world = R @ p_cam + t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .io import atomic_write_text

ROTATION_TOL = 1e-9


class CloudFormatError(ValueError):
    """Raised when a landmark file cannot be parsed."""


class EmptyCloudError(ValueError):
    """Raised when a landmark cloud would contain no points."""


@dataclass(frozen=True)
class Landmark:
    id: int
    position: np.ndarray


class LandmarkCloud:
    """Sparse landmark map stored column-wise (ids, positions)."""

    def __init__(self, positions, ids=None):
        positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        if positions.shape[0] == 0:
            raise EmptyCloudError("landmark cloud is empty")
        if not np.all(np.isfinite(positions)):
            raise ValueError("landmark positions must be finite")
        if ids is None:
            ids = np.arange(positions.shape[0], dtype=np.int64)
        else:
            ids = np.array(ids, dtype=np.int64).reshape(-1)
        if ids.shape[0] != positions.shape[0]:
            raise ValueError("ids and positions differ in length")
        if np.unique(ids).shape[0] != ids.shape[0]:
            raise ValueError("landmark ids must be unique")
        positions.setflags(write=False)
        ids.setflags(write=False)
        self.positions = positions
        self.ids = ids
        self.aabb = (positions.min(axis=0), positions.max(axis=0))
        self._index = None

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __iter__(self) -> Iterator[Landmark]:
        for i, p in zip(self.ids, self.positions):
            yield Landmark(int(i), p.copy())

    @property
    def landmarks(self) -> list[Landmark]:
        return list(self)

    def indices_of(self, ids) -> np.ndarray:
        """Row indices for the given landmark ids."""
        if self._index is None:
            self._index = {int(i): k for k, i in enumerate(self.ids)}
        return np.array([self._index[int(i)] for i in ids], dtype=np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LandmarkCloud):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and np.array_equal(self.positions, other.positions)

    def __repr__(self) -> str:
        return f"LandmarkCloud(n={len(self)}, aabb={self.aabb[0].tolist()}..{self.aabb[1].tolist()})"


def _check_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> None:
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.linalg.norm(R.T @ R - np.eye(3)) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("rotation is not special orthogonal")


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(R)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def apply(self, p_cam) -> np.ndarray:
        """Camera-frame point(s) to world frame."""
        return np.asarray(p_cam) @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"])


@dataclass(frozen=True)
class PinholeCamera:
    fx: float = 320.0
    fy: float = 320.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    near: float = 0.1
    far: float = 8.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height", "near", "far")}


def project_points(camera: PinholeCamera, points_cam) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(pixels, in_frustum_mask)``.

    Pixels are computed for every row; rows outside the frustum carry
    meaningless values and must be masked by the caller.
    """
    P = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    z = P[:, 2]
    valid = (z >= camera.near) & (z <= camera.far)
    safe_z = np.where(valid, z, 1.0)
    u = camera.fx * P[:, 0] / safe_z + camera.cx
    v = camera.fy * P[:, 1] / safe_z + camera.cy
    valid &= (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return np.stack([u, v], axis=1), valid


def project(camera: PinholeCamera, point_cam) -> Optional[np.ndarray]:
    """Pixel of a camera-frame point, or ``None`` outside the frustum."""
    pix, ok = project_points(camera, point_cam)
    return pix[0] if ok[0] else None


def unproject(camera: PinholeCamera, pixel, depth: float) -> np.ndarray:
    u, v = pixel
    return np.array([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth])


def transform_into_camera(pose: Pose, world_point) -> np.ndarray:
    """``R^T (p - t)``; accepts a single point or an (n, 3) array."""
    return (np.asarray(world_point, dtype=np.float64) - pose.translation) @ pose.rotation


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation error in meters, geodesic rotation error in degrees)."""
    return float(np.linalg.norm(a.translation - b.translation)), rotation_angle_deg(a.rotation, b.rotation)


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues' formula for a rotation vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    W = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-12:
        return np.eye(3) + W
    A = math.sin(theta) / theta
    B = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + A * W + B * (W @ W)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


# ---------------------------------------------------------------- file I/O


def _parse_ply(text: str) -> LandmarkCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError("missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for k, raw in enumerate(lines[1:], start=1):
        tok = raw.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise CloudFormatError("only ASCII PLY is supported")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = k + 1
            break
    if body_start is None or n_vertex is None:
        raise CloudFormatError("malformed PLY header")
    if not {"x", "y", "z"} <= set(props):
        raise CloudFormatError("PLY vertex element lacks x/y/z")
    if n_vertex == 0:
        raise EmptyCloudError("PLY file has no vertices")
    rows = [ln.split() for ln in lines[body_start:body_start + n_vertex]]
    if len(rows) != n_vertex or any(len(r) != len(props) for r in rows):
        raise CloudFormatError("PLY body does not match header")
    try:
        data = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise CloudFormatError(str(exc)) from exc
    cols = [props.index(c) for c in ("x", "y", "z")]
    ids = data[:, props.index("id")].astype(np.int64) if "id" in props else None
    return LandmarkCloud(data[:, cols], ids)


def _parse_jsonl(text: str) -> LandmarkCloud:
    ids, pts = [], []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            ids.append(int(obj["id"]))
            pts.append([float(obj["x"]), float(obj["y"]), float(obj["z"])])
        except (ValueError, KeyError, TypeError) as exc:
            raise CloudFormatError(f"line {n}: {exc}") from exc
    if not pts:
        raise EmptyCloudError("JSON-lines cloud has no points")
    return LandmarkCloud(pts, ids)


def load_cloud(path) -> LandmarkCloud:
    """Read an ASCII PLY (``.ply``) or JSON-lines (``.jsonl``) landmark file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".ply":
        return _parse_ply(text)
    return _parse_jsonl(text)


def cloud_to_text(cloud: LandmarkCloud, fmt: str = "ply") -> str:
    if fmt == "ply":
        head = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(cloud)}",
            "property double x",
            "property double y",
            "property double z",
            "property int id",
            "end_header",
        ]
        body = [f"{x!r} {y!r} {z!r} {i}" for (x, y, z), i in zip(cloud.positions.tolist(), cloud.ids.tolist())]
        return "\n".join(head + body) + "\n"
    return "".join(
        json.dumps({"id": i, "x": x, "y": y, "z": z}) + "\n"
        for (x, y, z), i in zip(cloud.positions.tolist(), cloud.ids.tolist())
    )


def save_cloud(cloud: LandmarkCloud, path) -> None:
    path = Path(path)
    fmt = "ply" if path.suffix.lower() == ".ply" else "jsonl"
    atomic_write_text(path, cloud_to_text(cloud, fmt))


def stack_poses(poses: Sequence[Pose]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses])
