"""Image binning of a visibility record into a fixed-length feature vector."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .visibility import VisibilityRecord

STD_FLOOR = 1e-8


class Channels(str, Enum):
    P2D = "P2D"  # pixel u, v
    P2D_Z = "P2D_Z"  # + camera depth
    P2D_3D = "P2D_3D"  # + camera-frame x, y, z

    @property
    def size(self) -> int:
        return {"P2D": 2, "P2D_Z": 3, "P2D_3D": 5}[self.value]

    @property
    def from_full(self) -> list[int]:
        """Columns of the P2D_3D layout (u, v, x, y, z) this channel set keeps."""
        return {"P2D": [0, 1], "P2D_Z": [0, 1, 4], "P2D_3D": [0, 1, 2, 3, 4]}[self.value]


@dataclass(frozen=True)
class EncodingConfig:
    bins_u: int = 30
    bins_v: int = 30
    channels: Channels = Channels.P2D_3D
    width: int = 640
    height: int = 480

    def __post_init__(self):
        object.__setattr__(self, "channels", Channels(self.channels))
        if self.bins_u < 1 or self.bins_v < 1:
            raise ValueError("bin counts must be >= 1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def n_bins(self) -> int:
        return self.bins_u * self.bins_v

    @property
    def length(self) -> int:
        return self.n_bins * self.channels.size

    def to_dict(self) -> dict:
        return {"bins_u": self.bins_u, "bins_v": self.bins_v, "channels": self.channels.value,
                "width": self.width, "height": self.height}


@dataclass(frozen=True, eq=False)
class EncodedFeature:
    """``values`` is bin-major: bin ``b`` occupies ``values[b*c:(b+1)*c]``."""

    values: np.ndarray
    mask: np.ndarray
    channels: Channels

    @property
    def per_bin(self) -> np.ndarray:
        return self.values.reshape(self.mask.shape[0], self.channels.size)

    def select(self, channels: Channels) -> "EncodedFeature":
        """Derive a smaller channel layout from a P2D_3D feature."""
        channels = Channels(channels)
        if channels == self.channels:
            return self
        if self.channels != Channels.P2D_3D:
            raise ValueError("channel selection needs a P2D_3D source feature")
        return EncodedFeature(self.per_bin[:, channels.from_full].reshape(-1), self.mask, channels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EncodedFeature):
            return NotImplemented
        return (self.channels == other.channels and np.array_equal(self.values, other.values)
                and np.array_equal(self.mask, other.mask))


def bin_index(pixels: np.ndarray, config: EncodingConfig) -> np.ndarray:
    iu = np.floor(pixels[:, 0] / config.width * config.bins_u).astype(np.int64)
    iv = np.floor(pixels[:, 1] / config.height * config.bins_v).astype(np.int64)
    iu = np.clip(iu, 0, config.bins_u - 1)
    iv = np.clip(iv, 0, config.bins_v - 1)
    return iu * config.bins_v + iv


def encode(record: VisibilityRecord, config: EncodingConfig) -> EncodedFeature:
    """Per-bin mean of pixel (and depth / camera-frame point) of the visible landmarks."""
    c = config.channels.size
    nb = config.n_bins
    if len(record) == 0:
        return EncodedFeature(np.zeros(nb * c), np.zeros(nb, dtype=bool), config.channels)
    full = np.hstack([record.pixels, record.points_cam])[:, config.channels.from_full]
    b = bin_index(record.pixels, config)
    counts = np.bincount(b, minlength=nb).astype(np.float64)
    sums = np.zeros((nb, c))
    np.add.at(sums, b, full)
    mask = counts > 0
    sums[mask] /= counts[mask, None]
    return EncodedFeature(sums.reshape(-1), mask, config.channels)


@dataclass(frozen=True, eq=False)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    channels: Channels

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "channels": Channels(self.channels).value}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64), Channels(d["channels"]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, StandardizationStats):
            return NotImplemented
        return (self.channels == other.channels and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.std, other.std))


def fit_stats(features: Sequence[EncodedFeature]) -> StandardizationStats:
    """Per-channel population mean / std over occupied bins only."""
    if len(features) == 0:
        raise ValueError("cannot fit statistics on an empty dataset")
    channels = features[0].channels
    c = channels.size
    occupied = []
    for f in features:
        if f.channels != channels:
            raise ValueError("mixed channel configurations")
        occupied.append(f.per_bin[f.mask])
    n = sum(o.shape[0] for o in occupied)
    if n == 0:
        return StandardizationStats(np.zeros(c), np.ones(c), channels)
    # accumulate around a shift so identical inputs give an exact mean
    shift = next(o[0] for o in occupied if o.shape[0])
    mean = shift + sum(((o - shift).sum(axis=0) for o in occupied), np.zeros(c)) / n
    total_sq = sum((((o - mean) ** 2).sum(axis=0) for o in occupied), np.zeros(c))
    std = np.maximum(np.sqrt(total_sq / n), STD_FLOOR)
    return StandardizationStats(mean, std, channels)


def standardize(feature: EncodedFeature, stats: StandardizationStats) -> EncodedFeature:
    """``(x - mean) / std`` on occupied bins; empty bins stay exactly zero."""
    if feature.channels != stats.channels:
        raise ValueError(f"stats fitted for {stats.channels.value}, feature is {feature.channels.value}")
    z = np.zeros_like(feature.per_bin)
    z[feature.mask] = (feature.per_bin[feature.mask] - stats.mean) / stats.std
    return EncodedFeature(z.reshape(-1), feature.mask, feature.channels)


def destandardize(feature: EncodedFeature, stats: StandardizationStats) -> EncodedFeature:
    x = np.zeros_like(feature.per_bin)
    x[feature.mask] = feature.per_bin[feature.mask] * stats.std + stats.mean
    return EncodedFeature(x.reshape(-1), feature.mask, feature.channels)


def standardized_matrix(features: Sequence[EncodedFeature], stats: StandardizationStats) -> np.ndarray:
    """Stack standardized features into an (n, length) design matrix."""
    if not features:
        return np.zeros((0, 0))
    return np.stack([standardize(f, stats).values for f in features])
