"""Localization-score evaluation: threshold tiers, selection policies, ablations, desk suite."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .features import Channels, EncodingConfig, bin_index, encode
from .model import ModelBundle, TrainConfig, score_features, train
from .oracle import OracleConfig, localize_oracle
from .sampling import VoxelCell, VoxelGrid, build_grid, fibonacci_directions
from .scene import PinholeCamera, Pose
from .supervision import (EVAL_SEED_BASE, STAGE_EVAL, SceneSpec, check_eval_seed, check_train_seed,
                          generate_scene, label_dataset, select_channels, viewpoint_rng)
from .visibility import ViewContext, VisibilityRecord, rank_orientations

REPORT_FORMAT = "activeview-eval-report"
RANDOM_STREAM = 3  # keeps the random policy's draws apart from oracle draws


@dataclass(frozen=True)
class ThresholdTiers:
    """Nested (translation m, rotation deg) success thresholds, finest first."""

    tiers: tuple = ((0.05, 0.4), (0.25, 2.0), (0.5, 5.0), (5.0, 10.0))

    def __post_init__(self):
        tiers = tuple((float(t), float(r)) for t, r in self.tiers)
        if not tiers:
            raise ValueError("need at least one tier")
        for (t0, r0), (t1, r1) in zip(tiers, tiers[1:]):
            if not (t1 > t0 and r1 > r0):
                raise ValueError("tiers must be strictly increasing in both components")
        if tiers[0][0] <= 0 or tiers[0][1] <= 0:
            raise ValueError("thresholds must be positive")
        object.__setattr__(self, "tiers", tiers)

    def __len__(self) -> int:
        return len(self.tiers)

    @property
    def labels(self) -> list[str]:
        return [f"{t:g}m/{r:g}deg" for t, r in self.tiers]

    def hits(self, translation_error: float, rotation_error: float) -> np.ndarray:
        t = np.array([a for a, _ in self.tiers])
        r = np.array([b for _, b in self.tiers])
        return (translation_error <= t) & (rotation_error <= r)


# ---------------------------------------------------------------- policies

RANDOM = "random"
BINS = "reprojection-with-bins"
LEARNED = "learned"
TOP_N = "top-n"
POLICY_KINDS = (RANDOM, BINS, LEARNED, TOP_N)


@dataclass(frozen=True, eq=False)
class Policy:
    kind: str
    seed: int = 0
    bundle: Optional[ModelBundle] = None
    n: int = 1
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    label: Optional[str] = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind in (LEARNED, TOP_N) and self.bundle is None:
            raise ValueError(f"policy {self.kind!r} needs a model bundle")
        if self.n < 1:
            raise ValueError("top-N needs N >= 1")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == TOP_N:
            return f"top-{self.n}"
        return self.kind

    @classmethod
    def random(cls, seed: int = 0) -> "Policy":
        return cls(RANDOM, seed=seed)

    @classmethod
    def bins(cls, encoding: Optional[EncodingConfig] = None) -> "Policy":
        return cls(BINS, encoding=encoding or EncodingConfig())

    @classmethod
    def learned(cls, bundle: ModelBundle, label: Optional[str] = None) -> "Policy":
        return cls(LEARNED, bundle=bundle, label=label)

    @classmethod
    def top_n(cls, bundle: ModelBundle, n: int, label: Optional[str] = None) -> "Policy":
        return cls(TOP_N, bundle=bundle, n=n, label=label)


def occupied_bins(record: VisibilityRecord, encoding: EncodingConfig) -> int:
    if len(record) == 0:
        return 0
    return int(np.unique(bin_index(record.pixels, encoding)).shape[0])


def candidate_scores(policy: Policy, records: Sequence[VisibilityRecord]) -> np.ndarray:
    if policy.kind == BINS:
        return np.array([occupied_bins(r, policy.encoding) for r in records], dtype=np.float64)
    if policy.kind in (LEARNED, TOP_N):
        enc = policy.bundle.encoding
        return score_features(policy.bundle, [encode(r, enc) for r in records])
    raise ValueError("the random policy has no scores")


def select_viewpoint(policy: Policy, cell: VoxelCell, records: Sequence[VisibilityRecord]):
    """Direction index picked in ``cell`` (a list of them for top-N).

    ``records`` align with ``cell.candidates``. Ties go to the earlier candidate.
    """
    if not cell.candidates:
        raise ValueError(f"cell {cell.cell_id} has no candidates")
    if len(records) != len(cell.candidates):
        raise ValueError("one record per candidate expected")
    dirs = [c.direction for c in cell.candidates]
    if policy.kind == RANDOM:
        rng = np.random.default_rng([policy.seed, RANDOM_STREAM, cell.cell_id])
        return dirs[int(rng.integers(len(dirs)))]
    scores = candidate_scores(policy, records)
    if policy.kind == TOP_N:
        order = np.argsort(-scores, kind="stable")[:min(policy.n, len(dirs))]
        return [dirs[i] for i in order]
    return dirs[int(np.argmax(scores))]


# ----------------------------------------------------------------- reports


@dataclass
class EvalReport:
    policy: str
    tiers: ThresholdTiers
    successes: np.ndarray  # per tier
    total: int = 0

    @classmethod
    def empty(cls, policy: str, tiers: ThresholdTiers) -> "EvalReport":
        return cls(policy, tiers, np.zeros(len(tiers), dtype=np.int64), 0)

    @property
    def percentages(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros(len(self.tiers))
        return 100.0 * self.successes / self.total

    @property
    def finest(self) -> float:
        return float(self.percentages[0])

    def add(self, hits: np.ndarray) -> None:
        self.successes = self.successes + np.asarray(hits, dtype=np.int64)
        self.total += 1

    def merge(self, other: "EvalReport") -> "EvalReport":
        if other.tiers != self.tiers:
            raise ValueError("cannot merge reports over different tiers")
        return EvalReport(self.policy, self.tiers, self.successes + other.successes, self.total + other.total)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "evaluated": self.total,
            "tiers": [{"translation_m": t, "rotation_deg": r, "label": lab, "successes": int(s),
                       "percentage": float(p)}
                      for (t, r), lab, s, p in zip(self.tiers.tiers, self.tiers.labels, self.successes,
                                                   self.percentages)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        tiers = ThresholdTiers(tuple((x["translation_m"], x["rotation_deg"]) for x in d["tiers"]))
        return cls(d["policy"], tiers, np.array([x["successes"] for x in d["tiers"]], dtype=np.int64),
                   int(d["evaluated"]))


def reports_to_json(reports: Mapping[str, EvalReport], extra: Optional[dict] = None) -> str:
    doc = {"format": REPORT_FORMAT, "version": 1, "policies": [r.to_dict() for r in reports.values()]}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def reports_to_csv(reports: Mapping[str, EvalReport]) -> str:
    """One row per (tier, policy): plot-ready long format."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tier", "policy", "percentage"])
    for rep in reports.values():
        for lab, p in zip(rep.tiers.labels, rep.percentages):
            w.writerow([lab, rep.policy, f"{p:.4f}"])
    return buf.getvalue()


# -------------------------------------------------------------- evaluation


class OutcomeCache:
    """Oracle errors per (cell, direction), drawn with evaluation-stage generators.

    Each viewpoint's generator depends only on (seed, cell, direction), so an
    outcome is the same whichever policy asks for it first.
    """

    def __init__(self, ctx: ViewContext, oracle: OracleConfig, seed: int):
        check_eval_seed(seed)
        self.ctx, self.oracle, self.seed = ctx, oracle, seed
        self.errors: dict[tuple[int, int], tuple[float, float]] = {}

    def fill(self, wanted: Sequence[tuple[VoxelCell, int]], workers: int = 1) -> None:
        todo = [(c.cell_id, tuple(c.center), d) for c, d in wanted if (c.cell_id, d) not in self.errors]
        todo = list(dict.fromkeys(todo))
        if not todo:
            return
        if workers <= 1 or len(todo) < 8:
            out = [_outcome(self.ctx, self.oracle, self.seed, *job) for job in todo]
        else:
            chunks = [todo[i:i + 16] for i in range(0, len(todo), 16)]
            with ProcessPoolExecutor(max_workers=workers, initializer=_eval_init,
                                     initargs=((self.ctx, self.oracle, self.seed),)) as ex:
                out = [e for part in ex.map(_eval_chunk, chunks) for e in part]
        for (cid, _, d), err in zip(todo, out):
            self.errors[(cid, d)] = err

    def get(self, cell_id: int, direction: int) -> tuple[float, float]:
        return self.errors[(cell_id, direction)]


def _outcome(ctx: ViewContext, oracle: OracleConfig, seed: int, cell_id: int, center, direction: int):
    pose = Pose(ctx.directions.rotations[direction], np.asarray(center))
    rec = ctx.record(cell_id, direction, np.asarray(center))
    res = localize_oracle(rec, ctx.cloud, ctx.camera, pose, oracle,
                          viewpoint_rng(seed, STAGE_EVAL, cell_id, direction))
    return res.translation_error, res.rotation_error


_EVAL_STATE = None


def _eval_init(state):
    global _EVAL_STATE
    _EVAL_STATE = state


def _eval_chunk(jobs):
    ctx, oracle, seed = _EVAL_STATE
    return [_outcome(ctx, oracle, seed, *job) for job in jobs]


def evaluate_policies(policies: Sequence[Policy], grid: VoxelGrid, ctx: ViewContext,
                      oracle: OracleConfig = OracleConfig(), tiers: ThresholdTiers = ThresholdTiers(),
                      seed: int = EVAL_SEED_BASE, workers: int = 1,
                      cache: Optional[OutcomeCache] = None) -> dict[str, EvalReport]:
    """Score several policies on one ranked grid, sharing oracle outcomes."""
    check_eval_seed(seed)
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ValueError("policy names must be unique")
    cache = cache if cache is not None else OutcomeCache(ctx, oracle, seed)
    cells = [c for c in grid.cells() if c.candidates]
    picks = {p.name: [] for p in policies}
    for cell in cells:
        records = [ctx.record(cell.cell_id, c.direction, cell.center) for c in cell.candidates]
        for p in policies:
            chosen = select_viewpoint(p, cell, records)
            picks[p.name].append(chosen if isinstance(chosen, list) else [chosen])
    wanted = [(cell, d) for p in policies for cell, ds in zip(cells, picks[p.name]) for d in ds]
    cache.fill(wanted, workers)
    reports = {}
    for p in policies:
        rep = EvalReport.empty(p.name, tiers)
        for cell, ds in zip(cells, picks[p.name]):
            hit = np.zeros(len(tiers), dtype=bool)
            for d in ds:  # any of the picks localizing counts
                hit |= tiers.hits(*cache.get(cell.cell_id, d))
            rep.add(hit)
        reports[p.name] = rep
    return reports


def evaluate(policy: Policy, grid: VoxelGrid, ctx: ViewContext, oracle: OracleConfig = OracleConfig(),
             tiers: ThresholdTiers = ThresholdTiers(), seed: int = EVAL_SEED_BASE,
             workers: int = 1) -> EvalReport:
    return evaluate_policies([policy], grid, ctx, oracle, tiers, seed, workers)[policy.name]


def merge_reports(parts: Sequence[Mapping[str, EvalReport]]) -> dict[str, EvalReport]:
    out: dict[str, EvalReport] = {}
    for part in parts:
        for name, rep in part.items():
            out[name] = out[name].merge(rep) if name in out else rep
    return out


# ---------------------------------------------------------------- ablation


@dataclass
class EvalScene:
    grid: VoxelGrid
    ctx: ViewContext
    seed: int


def ablation_run(datasets: Mapping[str, tuple], train_config: TrainConfig, scenes: Sequence[EvalScene],
                 oracle: OracleConfig = OracleConfig(), tiers: ThresholdTiers = ThresholdTiers(),
                 workers: int = 1) -> dict[str, EvalReport]:
    """Train one bundle per channel configuration and evaluate all on the same scenes.

    ``datasets`` maps a row name to ``(samples, encoding)``.
    """
    bundles = {name: train([s.feature for s in samples], [s.label for s in samples], train_config, enc)
               for name, (samples, enc) in datasets.items()}
    policies = [Policy.learned(b, label=name) for name, b in bundles.items()]
    parts = [evaluate_policies(policies, sc.grid, sc.ctx, oracle, tiers, sc.seed, workers) for sc in scenes]
    return merge_reports(parts)


# -------------------------------------------------------------- desk suite


@dataclass(frozen=True)
class SuiteConfig:
    train_scenes: int = 16
    eval_scenes: int = 20
    scene: SceneSpec = SceneSpec(kind="room-box", landmarks=300)
    resolution: tuple = (5, 5, 4)
    n_directions: int = 64
    keep_k: int = 10
    encoding: EncodingConfig = EncodingConfig(bins_u=10, bins_v=10)
    oracle: OracleConfig = OracleConfig(inlier_threshold=4.0)
    training: TrainConfig = TrainConfig(epochs=20, l2=1e-2)
    tiers: ThresholdTiers = ThresholdTiers()
    train_seed: int = 0
    eval_seed: int = EVAL_SEED_BASE
    random_seed: int = 0
    top_n: tuple = (1, 5, 10)
    workers: int = 1


@dataclass
class SuiteResult:
    policies: dict[str, EvalReport]
    ablation: dict[str, EvalReport]
    top_n: dict[int, EvalReport]
    bundles: dict[str, ModelBundle]
    train_report: dict
    timings: dict

    def to_json(self) -> str:
        extra = {
            "ablation": [r.to_dict() for r in self.ablation.values()],
            "top_n": {str(n): r.to_dict() for n, r in self.top_n.items()},
            "train_report": self.train_report,
            "timings": self.timings,
        }
        return reports_to_json(self.policies, extra)


def _scene_setup(spec: SceneSpec, cfg: SuiteConfig, camera: PinholeCamera, directions):
    scene = generate_scene(spec)
    grid = build_grid(scene.cloud, cfg.resolution)
    grid = rank_orientations(grid, scene.cloud, camera, directions, keep_k=cfg.keep_k)
    return grid, ViewContext(scene.cloud, camera, directions)


def run_desk_suite(cfg: SuiteConfig = SuiteConfig(), camera: Optional[PinholeCamera] = None,
                   log=None) -> SuiteResult:
    """Label training scenes, train one bundle per channel set, evaluate every policy.

    Training scenes use seeds ``train_seed + i``; evaluation scenes and oracle
    draws live entirely in the evaluation seed range.
    """
    check_train_seed(cfg.train_seed + max(cfg.train_scenes - 1, 0))
    check_eval_seed(cfg.eval_seed)
    camera = camera or PinholeCamera()
    directions = fibonacci_directions(cfg.n_directions)
    full = EncodingConfig(cfg.encoding.bins_u, cfg.encoding.bins_v, Channels.P2D_3D,
                          camera.width, camera.height)
    say = log or (lambda msg: None)
    t0 = time.perf_counter()

    samples = []
    for i in range(cfg.train_scenes):
        spec = SceneSpec(**{**cfg.scene.__dict__, "seed": cfg.train_seed + i})
        grid, ctx = _scene_setup(spec, cfg, camera, directions)
        part, _ = label_dataset(grid, ctx, cfg.oracle, full, seed=cfg.train_seed + i, scene=spec.seed,
                                workers=cfg.workers)
        samples += part
        say(f"labeled training scene {i + 1}/{cfg.train_scenes}")
    labels = [s.label for s in samples]
    train_report = {"samples": len(samples), "positives": int(sum(labels))}
    t_label = time.perf_counter()

    bundles = {}
    for ch in (Channels.P2D, Channels.P2D_Z, Channels.P2D_3D):
        enc = EncodingConfig(full.bins_u, full.bins_v, ch, full.width, full.height)
        sub = select_channels(samples, ch)
        bundles[ch.value] = train([s.feature for s in sub], labels, cfg.training, enc)
        say(f"trained {ch.value}")
    t_train = time.perf_counter()

    main = bundles[Channels.P2D_3D.value]
    policies = [Policy.random(cfg.random_seed), Policy.bins(full), Policy.learned(main)]
    ablation = [Policy.learned(b, label=name) for name, b in bundles.items()]
    tops = [Policy.top_n(main, n) for n in cfg.top_n]
    parts = []
    for i in range(cfg.eval_scenes):
        seed = cfg.eval_seed + i
        spec = SceneSpec(**{**cfg.scene.__dict__, "seed": seed})
        grid, ctx = _scene_setup(spec, cfg, camera, directions)
        parts.append(evaluate_policies(policies + ablation + tops, grid, ctx, cfg.oracle, cfg.tiers, seed,
                                       cfg.workers))
        say(f"evaluated scene {i + 1}/{cfg.eval_scenes}")
    merged = merge_reports(parts)
    t_eval = time.perf_counter()
    return SuiteResult(
        policies={p.name: merged[p.name] for p in policies},
        ablation={p.name: merged[p.name] for p in ablation},
        top_n={p.n: merged[p.name] for p in tops},
        bundles=bundles,
        train_report=train_report,
        timings={"label_s": t_label - t0, "train_s": t_train - t_label, "eval_s": t_eval - t_train,
                 "total_s": t_eval - t0},
    )
