"""Self-supervised labels: synthetic scenes, oracle runs per viewpoint, dataset files."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .features import Channels, EncodedFeature, EncodingConfig, encode
from .oracle import OracleConfig, OracleResult, localize_oracle
from .sampling import VoxelGrid
from .scene import LandmarkCloud, Pose
from .visibility import ViewContext

SCENE_KINDS = ("room-box", "cluster-field", "wall-corridor")

# Seeds below EVAL_SEED_BASE are reserved for labeling/training, the rest for evaluation.
EVAL_SEED_BASE = 1_000_000
STAGE_LABEL = 0
STAGE_EVAL = 1

DATASET_FORMAT = "activeview-dataset"
REPORT_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "samples", "positives", "negatives", "positive_fraction",
                 "oracle_failures", "failure_rate", "rebalanced"],
    "properties": {
        "format": {"const": "activeview-label-report"},
        "version": {"const": 1},
        "samples": {"type": "integer", "minimum": 0},
        "positives": {"type": "integer", "minimum": 0},
        "negatives": {"type": "integer", "minimum": 0},
        "positive_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "oracle_failures": {"type": "integer", "minimum": 0},
        "failure_rate": {"type": "number", "minimum": 0, "maximum": 1},
        "rebalanced": {"type": "boolean"},
        "before_rebalance": {"type": "object"},
    },
    "additionalProperties": False,
}


def is_eval_seed(seed: int) -> bool:
    return seed >= EVAL_SEED_BASE


def check_train_seed(seed: int) -> None:
    if is_eval_seed(seed):
        raise ValueError(f"seed {seed} lies in the evaluation range (>= {EVAL_SEED_BASE})")


def check_eval_seed(seed: int) -> None:
    if not is_eval_seed(seed):
        raise ValueError(f"evaluation seed {seed} lies in the training range (< {EVAL_SEED_BASE})")


def viewpoint_rng(seed: int, stage: int, cell_id: int, direction: int) -> np.random.Generator:
    """Generator derived from (seed, stage, cell, direction); independent of visiting order."""
    return np.random.default_rng([seed, stage, cell_id, direction])


# ------------------------------------------------------------------ scenes


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "cluster-field"
    landmarks: int = 600
    extent: tuple = (8.0, 8.0, 3.0)
    clusters: int = 6
    cluster_sigma: tuple = (0.05, 0.6)
    background: float = 0.15
    concentration: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.landmarks < 4:
            raise ValueError("a scene needs at least 4 landmarks")
        ext = np.broadcast_to(np.asarray(self.extent, dtype=np.float64), (3,))
        if np.any(ext <= 0):
            raise ValueError("extent must be positive")
        object.__setattr__(self, "extent", tuple(float(e) for e in ext))


@dataclass
class Scene:
    cloud: LandmarkCloud
    dense: Optional[np.ndarray] = None
    spec: Optional[SceneSpec] = None


def _cluster_field(spec: SceneSpec, rng) -> np.ndarray:
    ext = np.array(spec.extent)
    n_bg = int(round(spec.background * spec.landmarks))
    n_cl = spec.landmarks - n_bg
    pts = [rng.uniform(0, ext, size=(n_bg, 3))]
    k = max(1, spec.clusters)
    weights = rng.dirichlet(np.full(k, spec.concentration))
    sizes = rng.multinomial(n_cl, weights)
    for size in sizes:
        center = rng.uniform(0.1 * ext, 0.9 * ext)
        sigma = rng.uniform(*spec.cluster_sigma)
        pts.append(center + rng.normal(0.0, sigma, size=(size, 3)))
    return _reflect_into(np.vstack(pts), ext)


def _reflect_into(p: np.ndarray, ext: np.ndarray) -> np.ndarray:
    # Mirror at the walls; clamping would pile points onto exactly planar faces.
    period = 2.0 * ext
    q = np.mod(p, period)
    return np.where(q > ext, period - q, q)


def _face_samples(ext, axis, side, u, v):
    p = np.zeros((u.shape[0], 3))
    others = [a for a in range(3) if a != axis]
    p[:, axis] = side * ext[axis]
    p[:, others[0]] = u
    p[:, others[1]] = v
    return p


def _room_box(spec: SceneSpec, rng, walls_only=False):
    ext = np.array(spec.extent)
    faces = [(a, s) for a in range(3) for s in (0, 1)]
    if walls_only:
        faces = [(1, 0), (1, 1)]
    w = rng.dirichlet(np.full(len(faces), spec.concentration))
    counts = rng.multinomial(spec.landmarks, w)
    pts, dense = [], []
    for (axis, side), cnt in zip(faces, counts):
        others = [a for a in range(3) if a != axis]
        eu, ev = ext[others[0]], ext[others[1]]
        n_patch = int(round((1.0 - spec.background) * cnt))
        cu, cv = rng.uniform(0, eu), rng.uniform(0, ev)
        sig = rng.uniform(*spec.cluster_sigma)
        u = np.concatenate([rng.uniform(0, eu, cnt - n_patch), cu + rng.normal(0, sig, n_patch)])
        v = np.concatenate([rng.uniform(0, ev, cnt - n_patch), cv + rng.normal(0, sig, n_patch)])
        p = _face_samples(ext, axis, side, np.clip(u, 0, eu), np.clip(v, 0, ev))
        # small inward jitter so a face is not exactly planar
        p[:, axis] += (1 - 2 * side) * rng.uniform(0.0, 0.1, cnt)
        pts.append(p)
        gu, gv = np.meshgrid(np.arange(0.05, eu, 0.1), np.arange(0.05, ev, 0.1), indexing="ij")
        dense.append(_face_samples(ext, axis, side, gu.ravel(), gv.ravel()))
    return np.clip(np.vstack(pts), 0.0, ext), np.vstack(dense)


def generate_scene(spec: SceneSpec) -> Scene:
    """Deterministic synthetic landmark map with deliberately uneven density."""
    rng = np.random.default_rng([spec.seed, 7919])
    if spec.kind == "cluster-field":
        return Scene(LandmarkCloud(_cluster_field(spec, rng)), None, spec)
    pts, dense = _room_box(spec, rng, walls_only=spec.kind == "wall-corridor")
    return Scene(LandmarkCloud(pts), dense, spec)


# ---------------------------------------------------------------- labeling


@dataclass(eq=False)
class LabeledSample:
    feature: EncodedFeature
    label: int
    truth: Pose
    recovered: Optional[Pose]
    translation_error: float
    rotation_error: float
    visible: int
    cell_id: int
    direction: int
    scene: int = 0


def label_from(result: OracleResult, config: OracleConfig) -> int:
    return int(result.success(config))


def _label_cell(ctx: ViewContext, cell, oracle: OracleConfig, encoding: EncodingConfig, seed: int,
                stage: int, scene: int) -> list[LabeledSample]:
    out = []
    for cand in cell.candidates:
        pose = Pose(ctx.directions.rotations[cand.direction], cell.center)
        rec = ctx.record(cell.cell_id, cand.direction, cell.center)
        res = localize_oracle(rec, ctx.cloud, ctx.camera, pose, oracle,
                              viewpoint_rng(seed, stage, cell.cell_id, cand.direction))
        out.append(LabeledSample(encode(rec, encoding), label_from(res, oracle), pose, res.pose,
                                 res.translation_error, res.rotation_error, len(rec), cell.cell_id,
                                 cand.direction, scene))
    return out


_LABEL_STATE = None


def _label_init(state):
    global _LABEL_STATE
    _LABEL_STATE = state


def _label_chunk(cells):
    ctx, oracle, encoding, seed, stage, scene = _LABEL_STATE
    return [_label_cell(ctx, c, oracle, encoding, seed, stage, scene) for c in cells]


def label_dataset(grid: VoxelGrid, ctx: ViewContext, oracle: OracleConfig, encoding: EncodingConfig,
                  seed: int = 0, workers: int = 1, scene: int = 0, rebalance: bool = False):
    """Label every kept (cell, direction) of a ranked grid with the oracle.

    Returns ``(samples, report)``. Results are independent of ``workers``
    because every viewpoint draws from its own derived generator.
    """
    check_train_seed(seed)
    cells = grid.cells()
    if workers <= 1:
        parts = [_label_cell(ctx, c, oracle, encoding, seed, STAGE_LABEL, scene) for c in cells]
    else:
        chunks = [cells[i:i + 4] for i in range(0, len(cells), 4)]
        state = (ctx, oracle, encoding, seed, STAGE_LABEL, scene)
        with ProcessPoolExecutor(max_workers=workers, initializer=_label_init, initargs=(state,)) as ex:
            parts = [p for chunk in ex.map(_label_chunk, chunks) for p in chunk]
    samples = [s for part in parts for s in part]
    report = class_report(samples)
    if rebalance:
        before = report
        samples = rebalance_samples(samples, seed)
        report = class_report(samples, rebalanced=True)
        report["before_rebalance"] = {k: before[k] for k in ("samples", "positives", "negatives")}
    return samples, report


def class_report(samples: Sequence[LabeledSample], rebalanced: bool = False) -> dict:
    n = len(samples)
    pos = sum(s.label for s in samples)
    fails = sum(s.recovered is None for s in samples)
    return {
        "format": "activeview-label-report",
        "version": 1,
        "samples": n,
        "positives": pos,
        "negatives": n - pos,
        "positive_fraction": pos / n if n else 0.0,
        "oracle_failures": fails,
        "failure_rate": fails / n if n else 0.0,
        "rebalanced": rebalanced,
    }


def rebalance_samples(samples: Sequence[LabeledSample], seed: int = 0) -> list[LabeledSample]:
    """Subsample the majority class down to the minority count; keeps original order."""
    labels = np.array([s.label for s in samples])
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        return list(samples)
    rng = np.random.default_rng([seed, 104729])
    if len(pos) > len(neg):
        pos = rng.choice(pos, size=len(neg), replace=False)
    else:
        neg = rng.choice(neg, size=len(pos), replace=False)
    keep = np.sort(np.concatenate([pos, neg]))
    return [samples[i] for i in keep]


# ------------------------------------------------------------ dataset file


def _num(x: float):
    return None if not np.isfinite(x) else float(x)


def sample_to_json(s: LabeledSample) -> str:
    f = s.feature
    bins = np.flatnonzero(f.mask)
    return json.dumps({
        "scene": s.scene,
        "cell": s.cell_id,
        "direction": s.direction,
        "label": s.label,
        "visible": s.visible,
        "t_err": _num(s.translation_error),
        "r_err": _num(s.rotation_error),
        "pose": s.truth.to_dict(),
        "recovered": s.recovered.to_dict() if s.recovered is not None else None,
        "bins": bins.tolist(),
        "values": f.per_bin[bins].tolist(),
    }, separators=(",", ":"))


def sample_from_json(line: str, encoding: EncodingConfig) -> LabeledSample:
    d = json.loads(line)
    c = encoding.channels.size
    per_bin = np.zeros((encoding.n_bins, c))
    mask = np.zeros(encoding.n_bins, dtype=bool)
    bins = np.array(d["bins"], dtype=np.int64)
    if bins.size:
        per_bin[bins] = np.array(d["values"], dtype=np.float64).reshape(-1, c)
        mask[bins] = True
    inf = float("inf")
    return LabeledSample(
        EncodedFeature(per_bin.reshape(-1), mask, encoding.channels),
        int(d["label"]),
        Pose.from_dict(d["pose"]),
        Pose.from_dict(d["recovered"]) if d["recovered"] is not None else None,
        inf if d["t_err"] is None else d["t_err"],
        inf if d["r_err"] is None else d["r_err"],
        int(d["visible"]),
        int(d["cell"]),
        int(d["direction"]),
        int(d["scene"]),
    )


def dump_dataset(samples: Iterable[LabeledSample], encoding: EncodingConfig) -> str:
    head = json.dumps({"format": DATASET_FORMAT, "version": 1, "encoding": encoding.to_dict()},
                      separators=(",", ":"))
    return "".join([head + "\n"] + [sample_to_json(s) + "\n" for s in samples])


def parse_dataset(text: str) -> tuple[list[LabeledSample], EncodingConfig]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty dataset file")
    head = json.loads(lines[0])
    if head.get("format") != DATASET_FORMAT:
        raise ValueError("not a dataset file")
    encoding = EncodingConfig(**head["encoding"])
    return [sample_from_json(ln, encoding) for ln in lines[1:]], encoding


def select_channels(samples: Sequence[LabeledSample], channels: Channels) -> list[LabeledSample]:
    """Copies of P2D_3D samples restricted to a smaller channel set."""
    out = []
    for s in samples:
        t = LabeledSample(**{k: getattr(s, k) for k in s.__dataclass_fields__})
        t.feature = s.feature.select(channels)
        out.append(t)
    return out
