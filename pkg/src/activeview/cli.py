"""Command line: sample, label, train, eval, plan, info.

Every command reads a YAML run configuration (the bundled default when none is
given), accepts ``--set section.key=value`` overrides and writes its outputs
atomically, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .evaluation import (BINS, LEARNED, POLICY_KINDS, RANDOM, TOP_N, Policy, ThresholdTiers,
                         evaluate_policies, reports_to_csv, reports_to_json)
from .features import Channels, EncodingConfig
from .io import atomic_write_bytes, atomic_write_text
from .model import TrainConfig, bundle_to_bytes, load_bundle, read_bundle_header, score_grid, train
from .oracle import OracleConfig
from .planner import BEST_SCORE, TURN_BUDGET, PlannerParams, PlanProblem, plan, trajectory_to_text
from .sampling import build_grid, dump_grid, fibonacci_directions, parse_grid
from .scene import LandmarkCloud, PinholeCamera, load_cloud
from .supervision import (EVAL_SEED_BASE, check_eval_seed, check_train_seed, dump_dataset, label_dataset,
                          parse_dataset, select_channels)
from .visibility import OCCLUSION_MODES, ViewContext, build_occupancy, default_workers, rank_orientations

DEMO_CLOUD = "demo_scene.ply"
DEFAULT_CONFIG = "default_config.yaml"


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclasses.dataclass(frozen=True)
class SceneSection:
    cloud: Optional[str] = None  # None: the bundled demo scene


@dataclasses.dataclass(frozen=True)
class GridSection:
    resolution: tuple = (8, 8, 8)
    margin: float = 0.0
    directions: int = 64
    keep_k: int = 10
    visibility: str = "none"
    gamma: float = 100.0
    occupancy_edge: float = 0.1

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        if len(res) != 3 or min(res) < 1:
            raise ValueError("grid.resolution must be three integers >= 1")
        object.__setattr__(self, "resolution", res)
        if self.directions < 1 or self.keep_k < 1:
            raise ValueError("grid.directions and grid.keep_k must be >= 1")
        if self.visibility not in OCCLUSION_MODES:
            raise ValueError(f"grid.visibility must be one of {OCCLUSION_MODES}")
        if not (self.gamma > 0 and self.occupancy_edge > 0) or self.margin < 0:
            raise ValueError("grid.gamma and grid.occupancy_edge must be positive, margin >= 0")


@dataclasses.dataclass(frozen=True)
class EvalSection:
    seed: int = EVAL_SEED_BASE
    random_seed: int = 0
    policies: tuple = (RANDOM, BINS, LEARNED)
    top_n: tuple = (1, 5, 10)
    tiers: tuple = ThresholdTiers().tiers

    def __post_init__(self):
        check_eval_seed(self.seed)
        object.__setattr__(self, "policies", tuple(self.policies))
        object.__setattr__(self, "top_n", tuple(int(n) for n in self.top_n))
        object.__setattr__(self, "tiers", ThresholdTiers(tuple(tuple(t) for t in self.tiers)).tiers)
        for p in self.policies:
            if p not in POLICY_KINDS or p == TOP_N:
                raise ValueError(f"eval.policies entries must be among {RANDOM}, {BINS}, {LEARNED}")
        if any(n < 1 for n in self.top_n):
            raise ValueError("eval.top_n entries must be >= 1")


@dataclasses.dataclass(frozen=True)
class PlanSection:
    start: Optional[tuple] = None  # None: center of the first grid cell
    goal: Optional[tuple] = None  # None: center of the last grid cell
    policy: str = BEST_SCORE
    max_turn_deg: float = 180.0

    def __post_init__(self):
        for name in ("start", "goal"):
            v = getattr(self, name)
            if v is not None:
                v = tuple(float(x) for x in v)
                if len(v) != 3:
                    raise ValueError(f"plan.{name} must be three numbers")
                object.__setattr__(self, name, v)
        if self.policy not in (BEST_SCORE, TURN_BUDGET):
            raise ValueError(f"plan.policy must be {BEST_SCORE} or {TURN_BUDGET}")
        if self.max_turn_deg < 0:
            raise ValueError("plan.max_turn_deg must be >= 0")


SECTIONS = {
    "scene": SceneSection,
    "grid": GridSection,
    "camera": PinholeCamera,
    "encoding": EncodingConfig,
    "oracle": OracleConfig,
    "training": TrainConfig,
    "eval": EvalSection,
    "planner": PlannerParams,
    "plan": PlanSection,
}
TOP_LEVEL = ("seed", "workers")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    scene: SceneSection = SceneSection()
    grid: GridSection = GridSection()
    camera: PinholeCamera = PinholeCamera()
    encoding: EncodingConfig = EncodingConfig()
    oracle: OracleConfig = OracleConfig()
    training: TrainConfig = TrainConfig()
    eval: EvalSection = EvalSection()
    planner: PlannerParams = PlannerParams()
    plan: PlanSection = PlanSection()


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(raw: dict, overrides) -> dict:
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) == 1 and parts[0] in TOP_LEVEL:
            raw[parts[0]] = _parse_scalar(value)
        elif len(parts) == 2 and parts[0] in SECTIONS:
            raw.setdefault(parts[0], {})
            if raw[parts[0]] is None:
                raw[parts[0]] = {}
            raw[parts[0]][parts[1]] = _parse_scalar(value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return raw


def build_config(raw: Optional[dict]) -> RunConfig:
    """Validate a parsed config mapping; unknown keys are errors."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - set(SECTIONS) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, cls in SECTIONS.items():
        body = raw.get(name) or {}
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        allowed = {f.name for f in dataclasses.fields(cls)}
        bad = set(body) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {name}: {', '.join(sorted(bad))}")
        body = {k: (tuple(v) if isinstance(v, list) and k != "tiers" else v) for k, v in body.items()}
        if name == "training" and body.get("class_weights") is not None:
            body["class_weights"] = tuple(float(x) for x in body["class_weights"])
        try:
            kwargs[name] = cls(**body)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} section: {exc}") from exc
    try:
        seed = int(raw.get("seed", 0))
        workers = int(raw.get("workers", default_workers()))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid top-level value: {exc}") from exc
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    try:
        check_train_seed(seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig(seed=seed, workers=workers, **kwargs)
    if (cfg.encoding.width, cfg.encoding.height) != (cfg.camera.width, cfg.camera.height):
        raise ConfigError("encoding image size must match the camera")
    return cfg


def default_config_text() -> str:
    return resources.files("activeview").joinpath("data", DEFAULT_CONFIG).read_text()


def load_config(path: Optional[str], overrides=()) -> RunConfig:
    try:
        text = Path(path).read_text() if path else default_config_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return build_config(apply_overrides(raw or {}, overrides))


def demo_cloud_path() -> Path:
    return Path(str(resources.files("activeview").joinpath("data", DEMO_CLOUD)))


# ------------------------------------------------------------- pipeline


def _cloud(cfg: RunConfig, override: Optional[str]) -> LandmarkCloud:
    path = override or cfg.scene.cloud or demo_cloud_path()
    if not Path(path).exists():
        raise ConfigError(f"cloud file not found: {path}")
    return load_cloud(path)


def _context(cfg: RunConfig, cloud: LandmarkCloud) -> ViewContext:
    dirs = fibonacci_directions(cfg.grid.directions)
    occ = build_occupancy(cloud, cfg.grid.occupancy_edge) if cfg.grid.visibility == "occupancy" else None
    return ViewContext(cloud, cfg.camera, dirs, cfg.grid.visibility, occ, cfg.grid.gamma)


def _read_grid(path: str, cfg: RunConfig):
    try:
        grid = parse_grid(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read grid: {exc}") from exc
    if grid.n_directions != cfg.grid.directions:
        raise ConfigError(f"grid was sampled with {grid.n_directions} directions, config says {cfg.grid.directions}")
    return grid


def grid_stats(grid) -> dict:
    cells = grid.cells()
    visible = np.array([c.visible for cell in cells for c in cell.candidates], dtype=np.int64)
    edges = [0, 1, 6, 20, 50, 100, 200, 500, 1000]
    hist = np.histogram(visible, bins=edges + [max(int(visible.max(initial=0)) + 1, 1001)])[0]
    return {
        "cells": len(cells),
        "candidates": int(visible.shape[0]),
        "directions": grid.n_directions,
        "visible_histogram": {"edges": edges, "counts": hist.tolist()},
        "visible_mean": float(visible.mean()) if visible.size else 0.0,
    }


def cmd_sample(cfg: RunConfig, out: str, cloud_path: Optional[str] = None, stats_path: Optional[str] = None) -> dict:
    cloud = _cloud(cfg, cloud_path)
    ctx = _context(cfg, cloud)
    grid = build_grid(cloud, cfg.grid.resolution, cfg.grid.margin)
    grid = rank_orientations(grid, cloud, cfg.camera, ctx.directions, cfg.grid.visibility, cfg.grid.keep_k,
                             ctx.occupancy, cfg.grid.gamma, cfg.workers)
    stats = grid_stats(grid)
    atomic_write_text(out, dump_grid(grid))
    if stats_path:
        atomic_write_text(stats_path, json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return stats


def cmd_label(cfg: RunConfig, grid_path: str, out: str, report_path: Optional[str] = None,
              cloud_path: Optional[str] = None, rebalance: bool = False) -> dict:
    cloud = _cloud(cfg, cloud_path)
    grid = _read_grid(grid_path, cfg)
    ctx = _context(cfg, cloud)
    full = dataclasses.replace(cfg.encoding, channels=Channels.P2D_3D)
    samples, report = label_dataset(grid, ctx, cfg.oracle, full, seed=cfg.seed, workers=cfg.workers,
                                    rebalance=rebalance)
    atomic_write_text(out, dump_dataset(samples, full))
    if report_path:
        atomic_write_text(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def cmd_train(cfg: RunConfig, dataset_path: str, out: str) -> dict:
    try:
        samples, enc = parse_dataset(Path(dataset_path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read dataset: {exc}") from exc
    ch = cfg.encoding.channels
    if ch != enc.channels:
        samples = select_channels(samples, ch)
    enc = dataclasses.replace(enc, channels=ch)
    bundle = train([s.feature for s in samples], [s.label for s in samples], cfg.training, enc)
    atomic_write_bytes(out, bundle_to_bytes(bundle))
    hist = bundle.metadata["loss_history"]
    return {"samples": len(samples), "positives": int(sum(s.label for s in samples)),
            "initial_loss": hist[0] if hist else None, "final_loss": hist[-1] if hist else None}


def cmd_eval(cfg: RunConfig, model_path: str, grid_path: str, out: str, csv_path: Optional[str] = None,
             cloud_path: Optional[str] = None) -> dict:
    bundle = load_bundle(model_path)
    cloud = _cloud(cfg, cloud_path)
    grid = _read_grid(grid_path, cfg)
    ctx = _context(cfg, cloud)
    tiers = ThresholdTiers(cfg.eval.tiers)
    policies = []
    for kind in cfg.eval.policies:
        if kind == RANDOM:
            policies.append(Policy.random(cfg.eval.random_seed))
        elif kind == BINS:
            policies.append(Policy.bins(bundle.encoding))
        else:
            policies.append(Policy.learned(bundle))
    policies += [Policy.top_n(bundle, n) for n in cfg.eval.top_n]
    reports = evaluate_policies(policies, grid, ctx, cfg.oracle, tiers, cfg.eval.seed, cfg.workers)
    atomic_write_text(out, reports_to_json(reports))
    if csv_path:
        atomic_write_text(csv_path, reports_to_csv(reports))
    return {name: [round(float(p), 4) for p in rep.percentages] for name, rep in reports.items()}


def cmd_plan(cfg: RunConfig, model_path: str, grid_path: str, out: str, cloud_path: Optional[str] = None) -> dict:
    bundle = load_bundle(model_path)
    cloud = _cloud(cfg, cloud_path)
    grid = _read_grid(grid_path, cfg)
    ctx = _context(cfg, cloud)
    scored = score_grid(bundle, grid, ctx)
    cells = scored.cells()
    start = cfg.plan.start if cfg.plan.start is not None else cells[0].center
    goal = cfg.plan.goal if cfg.plan.goal is not None else cells[-1].center
    occ = build_occupancy(cloud, cfg.grid.occupancy_edge)
    problem = PlanProblem(start, goal, occ, scored, cfg.planner)
    traj = plan(problem, cfg.plan.policy, cfg.plan.max_turn_deg)
    if traj is None:
        raise PlanFailed(f"no path found within {cfg.planner.max_iterations} iterations")
    atomic_write_text(out, trajectory_to_text(traj))
    return {"waypoints": len(traj), "length_m": traj.length,
            "mean_score": float(np.mean([w.score for w in traj.waypoints]))}


class PlanFailed(RuntimeError):
    pass


def file_info(path: str) -> dict:
    """Format and headline metadata of any file this tool writes or reads."""
    p = Path(path)
    data = p.read_bytes()
    if data.startswith(b"AVMODEL\0"):
        head, _ = read_bundle_header(data)
        meta = head.get("metadata", {})
        return {"format": "activeview-model", "encoding": head.get("encoding"),
                "arrays": {a["name"]: a["shape"] for a in head["arrays"]}, "seed": meta.get("seed"), "epochs": meta.get("epochs"),
                "final_loss": meta.get("final_loss"), "n_samples": meta.get("n_samples")}
    if p.suffix.lower() == ".ply" or data.startswith(b"ply"):
        cloud = load_cloud(p)
        lo, hi = cloud.aabb
        return {"format": "ply-cloud", "landmarks": len(cloud), "aabb": [lo.tolist(), hi.tolist()]}
    text = data.decode("utf-8")
    first = text.split("\n", 1)[0]
    if not first.strip():
        return {"format": "empty"}
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict) and doc.get("format") == "activeview-grid":
        grid = parse_grid(text)
        return {"format": "activeview-grid", **grid_stats(grid)}
    if isinstance(doc, dict) and "format" in doc:
        return {"format": doc["format"], "version": doc.get("version"),
                "keys": sorted(k for k in doc if k not in ("format", "version"))}
    head = json.loads(first)
    if head.get("format") == "activeview-dataset":
        samples, enc = parse_dataset(text)
        return {"format": "activeview-dataset", "encoding": enc.to_dict(), "samples": len(samples),
                "positives": int(sum(s.label for s in samples))}
    if "position" in head and "rotation" in head:
        n = sum(1 for ln in text.splitlines() if ln.strip())
        return {"format": "trajectory", "waypoints": n}
    if {"x", "y", "z"} <= set(head):
        cloud = load_cloud(p)
        return {"format": "jsonl-cloud", "landmarks": len(cloud)}
    raise ConfigError(f"unrecognised file format: {path}")


# ---------------------------------------------------------------- argparse


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="activeview", description="Learned viewpoint scoring for active localization.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, cloud=True):
        p.add_argument("--config", help="YAML run configuration (default: bundled demo config)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")
        if cloud:
            p.add_argument("--cloud", help="landmark cloud (.ply or .jsonl); overrides scene.cloud")

    p = sub.add_parser("sample", help="build the voxel grid and rank orientations per cell")
    common(p)
    p.add_argument("--out", required=True, help="grid file to write")
    p.add_argument("--stats", help="optional JSON summary of cells, candidates and visibility")

    p = sub.add_parser("label", help="label every kept viewpoint with the localization oracle")
    common(p)
    p.add_argument("--grid", required=True, help="grid file from 'sample'")
    p.add_argument("--out", required=True, help="dataset file to write (JSON lines)")
    p.add_argument("--report", help="optional class-balance report (JSON)")
    p.add_argument("--rebalance", action="store_true", help="subsample the majority class")

    p = sub.add_parser("train", help="fit the scoring network on a labeled dataset")
    common(p, cloud=False)
    p.add_argument("--dataset", required=True, help="dataset file from 'label'")
    p.add_argument("--out", required=True, help="model bundle to write")

    p = sub.add_parser("eval", help="localization scores of the selection policies")
    common(p)
    p.add_argument("--model", required=True, help="model bundle from 'train'")
    p.add_argument("--grid", required=True, help="grid file from 'sample'")
    p.add_argument("--out", required=True, help="JSON report to write")
    p.add_argument("--csv", help="optional long-format CSV (tier, policy, percentage)")

    p = sub.add_parser("plan", help="plan a path and attach the best-scored orientation per waypoint")
    common(p)
    p.add_argument("--model", required=True, help="model bundle used to score the grid")
    p.add_argument("--grid", required=True, help="grid file from 'sample'")
    p.add_argument("--out", required=True, help="trajectory file to write (JSON lines)")

    p = sub.add_parser("info", help="print metadata of a grid, dataset, model, report or trajectory file")
    p.add_argument("path", help="file to inspect")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "info":
            result = file_info(args.path)
        else:
            cfg = load_config(args.config, args.overrides)
            cloud = getattr(args, "cloud", None)
            if args.command == "sample":
                result = cmd_sample(cfg, args.out, cloud, args.stats)
            elif args.command == "label":
                result = cmd_label(cfg, args.grid, args.out, args.report, cloud, args.rebalance)
            elif args.command == "train":
                result = cmd_train(cfg, args.dataset, args.out)
            elif args.command == "eval":
                result = cmd_eval(cfg, args.model, args.grid, args.out, args.csv, cloud)
            else:
                result = cmd_plan(cfg, args.model, args.grid, args.out, cloud)
    except (ConfigError, PlanFailed, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
