"""Three-layer MLP viewpoint scorer: training, inference and bundle persistence."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .io import atomic_write_bytes
from .features import EncodedFeature, EncodingConfig, StandardizationStats, encode, fit_stats, standardize
from .sampling import VoxelGrid, sort_candidates
from .visibility import ViewContext, VisibilityRecord

PROB_EPS = 1e-12
# largest open interval inside (0, 1) representable in float64
P_MIN, P_MAX = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)
BUNDLE_MAGIC = b"AVMODEL\0"
BUNDLE_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass(eq=False)
class MlpParameters:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def as_list(self) -> list[np.ndarray]:
        return [getattr(self, k) for k in PARAM_NAMES]

    @classmethod
    def from_list(cls, arrays) -> "MlpParameters":
        return cls(*arrays)

    @property
    def weights(self) -> list[np.ndarray]:
        return [self.W1, self.W2, self.W3]

    @property
    def input_size(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def copy(self) -> "MlpParameters":
        return MlpParameters.from_list([a.copy() for a in self.as_list()])

    def __eq__(self, other) -> bool:
        if not isinstance(other, MlpParameters):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.as_list(), other.as_list()))


def init_params(input_size: int, hidden: int = 300, seed: int = 0) -> MlpParameters:
    """He-uniform (fan-in) weights, zero biases."""
    rng = np.random.default_rng(seed)

    def he(fan_in, fan_out):
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    return MlpParameters(
        he(input_size, hidden), np.zeros(hidden),
        he(hidden, hidden), np.zeros(hidden),
        he(hidden, 1), np.zeros(1),
    )


def zero_params(input_size: int, hidden: int = 300) -> MlpParameters:
    return MlpParameters(np.zeros((input_size, hidden)), np.zeros(hidden), np.zeros((hidden, hidden)),
                         np.zeros(hidden), np.zeros((hidden, 1)), np.zeros(1))


def dropout_masks(rng: np.random.Generator, n: int, hidden: int, p: float):
    """Inverted-dropout masks for both hidden layers (values 0 or 1/(1-p))."""
    if p <= 0:
        return None
    keep = 1.0 - p
    m1 = (rng.random((n, hidden)) < keep) / keep
    m2 = (rng.random((n, hidden)) < keep) / keep
    return m1, m2


def _as_batch(X):
    if sp.issparse(X):
        return X
    X = np.asarray(X, dtype=np.float64)
    return X[None, :] if X.ndim == 1 else X


def _forward(params: MlpParameters, X, masks=None):
    if X.shape[1] != params.input_size:
        raise ValueError(f"input length {X.shape[1]} != layer-1 size {params.input_size}")
    a1 = X @ params.W1 + params.b1
    h1 = np.maximum(a1, 0.0)
    if masks is not None:
        h1 = h1 * masks[0]
    a2 = h1 @ params.W2 + params.b2
    h2 = np.maximum(a2, 0.0)
    if masks is not None:
        h2 = h2 * masks[1]
    z = (h2 @ params.W3 + params.b3)[:, 0]
    return a1, h1, a2, h2, np.clip(expit(z), P_MIN, P_MAX)


def forward(params: MlpParameters, x, dropout: float = 0.0, seed: Optional[int] = None):
    """Probability for one feature vector or a batch.

    With ``dropout > 0`` and a ``seed`` the pass is a training pass with
    seeded inverted dropout; otherwise it is a plain evaluation pass.
    """
    X = _as_batch(x)
    masks = None
    if dropout > 0 and seed is not None:
        masks = dropout_masks(np.random.default_rng(seed), X.shape[0], params.hidden, dropout)
    p = _forward(params, X, masks)[-1]
    return float(p[0]) if (not sp.issparse(x) and np.ndim(x) == 1) else p


def _check_batch(y, w):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] == 0:
        raise ValueError("empty batch")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    w = np.ones_like(y) if w is None else np.broadcast_to(np.asarray(w, dtype=np.float64), y.shape)
    return y, w


def bce_term(p, y, w, eps: float = PROB_EPS) -> float:
    pc = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(w * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))


def l2_term(params: MlpParameters, lam: float) -> float:
    return float(lam * sum(np.sum(W * W) for W in params.weights))


def loss(params: MlpParameters, X, y, w=None, lam: float = 0.0, masks=None, eps: float = PROB_EPS) -> float:
    """Mean weighted binary cross-entropy plus ``lam * sum ||W||^2`` over weight matrices."""
    y, w = _check_batch(y, w)
    p = _forward(params, _as_batch(X), masks)[-1]
    return bce_term(p, y, w, eps) + l2_term(params, lam)


def backward(params: MlpParameters, X, y, w=None, lam: float = 0.0, masks=None, eps: float = PROB_EPS):
    """Loss and its exact gradient (same layout as ``params``) for fixed dropout masks."""
    y, w = _check_batch(y, w)
    X = _as_batch(X)
    a1, h1, a2, h2, p = _forward(params, X, masks)
    n = y.shape[0]
    inside = (p > eps) & (p < 1.0 - eps)
    # d/dz of -[y log p + (1-y) log(1-p)] is p - y while the clamp is inactive
    dz = (w * (p - y) * inside / n)[:, None]
    gW3 = h2.T @ dz + 2.0 * lam * params.W3
    gb3 = dz.sum(axis=0)
    dh2 = dz @ params.W3.T
    if masks is not None:
        dh2 = dh2 * masks[1]
    da2 = dh2 * (a2 > 0)
    gW2 = h1.T @ da2 + 2.0 * lam * params.W2
    gb2 = da2.sum(axis=0)
    dh1 = da2 @ params.W2.T
    if masks is not None:
        dh1 = dh1 * masks[0]
    da1 = dh1 * (a1 > 0)
    gW1 = np.asarray(X.T @ da1) + 2.0 * lam * params.W1
    gb1 = da1.sum(axis=0)
    value = bce_term(p, y, w, eps) + l2_term(params, lam)
    return value, MlpParameters(gW1, gb1, gW2, gb2, gW3, gb3)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 256
    dropout: float = 0.5
    l2: float = 1e-4
    hidden: int = 300
    class_weights: Optional[tuple[float, float]] = None  # (negative, positive)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.l2 < 0:
            raise ValueError("l2 strength must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")


@dataclass(eq=False)
class ModelBundle:
    params: MlpParameters
    encoding: EncodingConfig
    stats: StandardizationStats
    class_weights: tuple[float, float] = (1.0, 1.0)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoding.length != self.params.input_size:
            raise ValueError("encoding length does not match the layer-1 input size")
        if self.encoding.channels != self.stats.channels:
            raise ValueError("stats and encoding disagree on channels")


class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for P, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            P -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def inverse_frequency_weights(y: np.ndarray) -> tuple[float, float]:
    n = y.shape[0]
    n_pos = int(y.sum())
    n_neg = n - n_pos
    return n / (2.0 * n_neg), n / (2.0 * n_pos)


def design_matrix(X):
    """Sparse CSR when most entries are zero (binned features usually are)."""
    if sp.issparse(X):
        return X.tocsr()
    X = np.asarray(X, dtype=np.float64)
    if X.size and np.count_nonzero(X) < 0.25 * X.size:
        return sp.csr_matrix(X)
    return X


def fit(X, y, config: TrainConfig, params: Optional[MlpParameters] = None, callback=None):
    """Adam over shuffled mini-batches on a ready (standardized) design matrix.

    Returns ``(params, class_weights, loss_history)``; the history holds the
    sample-weighted mean mini-batch loss of each epoch.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.min() == y.max():
        raise ValueError("training data must contain both classes")
    X = design_matrix(X)
    n = y.shape[0]
    cw = config.class_weights or inverse_frequency_weights(y)
    w = np.where(y > 0.5, cw[1], cw[0])
    if params is None:
        params = init_params(X.shape[1], config.hidden, config.seed)
    else:
        params = params.copy()
    rng = np.random.default_rng(config.seed + 1)
    plist = params.as_list()
    opt = Adam([a.shape for a in plist], config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            masks = dropout_masks(rng, idx.shape[0], params.hidden, config.dropout)
            value, grads = backward(params, X[idx], y[idx], w[idx], config.l2, masks)
            opt.step(plist, grads.as_list())
            total += value * idx.shape[0]
        history.append(total / n)
        if callback is not None:
            callback(epoch, history[-1])
    return params, (float(cw[0]), float(cw[1])), history


def train(features: Sequence[EncodedFeature], labels, config: TrainConfig,
          encoding: EncodingConfig, callback=None) -> ModelBundle:
    """Fit standardization statistics, then the MLP, into a self-contained bundle."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(features) != y.shape[0]:
        raise ValueError("features and labels differ in length")
    if y.shape[0] == 0 or y.min() == y.max():
        raise ValueError("training data must contain both classes")
    stats = fit_stats(features)
    X = np.stack([standardize(f, stats).values for f in features])
    params, cw, history = fit(X, y, config, callback=callback)
    meta = {
        "seed": config.seed,
        "epochs": config.epochs,
        "final_loss": history[-1] if history else None,
        "loss_history": history,
        "n_samples": int(y.shape[0]),
        "n_positive": int(y.sum()),
        "train_config": {k: getattr(config, k) for k in
                         ("learning_rate", "epochs", "batch_size", "dropout", "l2", "hidden", "seed")},
    }
    return ModelBundle(params, encoding, stats, cw, meta)


# --------------------------------------------------------------- inference


def score_features(bundle: ModelBundle, features: Sequence[EncodedFeature]) -> np.ndarray:
    if not features:
        return np.zeros(0)
    X = np.stack([standardize(f, bundle.stats).values for f in features])
    return _forward(bundle.params, X)[-1]


def score_viewpoint(bundle: ModelBundle, record: VisibilityRecord) -> float:
    """encode -> standardize -> evaluation-mode forward pass."""
    f = standardize(encode(record, bundle.encoding), bundle.stats)
    return float(_forward(bundle.params, f.values[None, :])[-1][0])


def score_records(bundle: ModelBundle, records: Sequence[VisibilityRecord]) -> np.ndarray:
    return score_features(bundle, [encode(r, bundle.encoding) for r in records])


def score_grid(bundle: ModelBundle, grid: VoxelGrid, ctx: ViewContext) -> VoxelGrid:
    """Attach learned scores to every candidate and re-sort cells by score."""
    cells = []
    for cell in grid.cells():
        recs = [ctx.record(cell.cell_id, c.direction, cell.center) for c in cell.candidates]
        s = score_records(bundle, recs)
        cands = [replace(c, score=float(v)) for c, v in zip(cell.candidates, s)]
        cells.append(replace(cell, candidates=sort_candidates(cands, "score")))
    return grid.with_cells(cells, sort_key="score")


# ------------------------------------------------------------- persistence


def bundle_to_bytes(bundle: ModelBundle) -> bytes:
    arrays = bundle.params.as_list()
    header = {
        "format": "activeview-model",
        "version": BUNDLE_VERSION,
        "encoding": bundle.encoding.to_dict(),
        "stats": bundle.stats.to_dict(),
        "class_weights": list(bundle.class_weights),
        "metadata": bundle.metadata,
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in zip(PARAM_NAMES, arrays)],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blobs = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return BUNDLE_MAGIC + struct.pack("<IQ", BUNDLE_VERSION, len(head)) + head + blobs


def read_bundle_header(data: bytes) -> tuple[dict, int]:
    if data[:8] != BUNDLE_MAGIC:
        raise ValueError("not a model bundle")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    return json.loads(data[20:20 + hlen]), 20 + hlen


def bundle_from_bytes(data: bytes) -> ModelBundle:
    header, off = read_bundle_header(data)
    arrays = []
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
        off += 8 * count
    if off != len(data):
        raise ValueError("trailing bytes in model bundle")
    return ModelBundle(
        MlpParameters.from_list(arrays),
        EncodingConfig(**header["encoding"]),
        StandardizationStats.from_dict(header["stats"]),
        tuple(header["class_weights"]),
        header["metadata"],
    )


def save_bundle(bundle: ModelBundle, path) -> None:
    atomic_write_bytes(path, bundle_to_bytes(bundle))


def load_bundle(path) -> ModelBundle:
    return bundle_from_bytes(Path(path).read_bytes())
