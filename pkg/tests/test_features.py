from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activeview.features import (Channels, EncodedFeature, EncodingConfig, StandardizationStats, destandardize,
                                 encode, fit_stats, standardize)
from activeview.visibility import VisibilityRecord


def make_record(pixels, points=None) -> VisibilityRecord:
    pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
    pts = np.asarray(points, dtype=float).reshape(-1, 3) if points is not None else np.ones((len(pix), 3))
    return VisibilityRecord(0, 0, np.arange(len(pix)), pix, pts[:, 2], pts)


def random_record(seed: int, n: int = 40, width=640, height=480) -> VisibilityRecord:
    rng = np.random.default_rng(seed)
    pix = rng.uniform((0, 0), (width, height), size=(n, 2))
    pts = rng.uniform((-2, -2, 0.2), (2, 2, 8), size=(n, 3))
    return make_record(pix, pts)


SQUARE = EncodingConfig(bins_u=30, bins_v=30, channels=Channels.P2D, width=480, height=480)


class TestEncode:
    @pytest.mark.parametrize("channels,size", [("P2D", 2), ("P2D_Z", 3), ("P2D_3D", 5)])
    def test_empty_record_is_zero(self, channels, size):
        cfg = EncodingConfig(channels=channels)
        f = encode(VisibilityRecord.empty(), cfg)
        assert f.values.shape == (30 * 30 * size,)
        assert not f.values.any() and not f.mask.any()

    def test_full_length_is_4500(self):
        assert EncodingConfig().length == 4500

    def test_single_landmark_binning(self):
        f = encode(make_record([[16, 16]]), SQUARE)
        bins = f.per_bin
        assert np.array_equal(bins[1 * 30 + 1], (16, 16))
        others = np.delete(bins, 31, axis=0)
        assert not others.any()
        assert f.mask.sum() == 1

    def test_mean_of_two(self):
        f = encode(make_record([[10, 10], [12, 14]]), EncodingConfig(bins_u=2, bins_v=2, channels="P2D",
                                                                   width=40, height=40))
        assert np.array_equal(f.per_bin[0], (11, 12))
        f = encode(make_record([[10, 10], [20, 20]]), EncodingConfig(bins_u=1, bins_v=1, channels="P2D"))
        assert np.array_equal(f.per_bin[0], (15, 15))

    def test_channel_layout(self):
        rec = make_record([[100, 50]], [[0.5, -0.25, 3.0]])
        cfg = EncodingConfig(bins_u=1, bins_v=1)
        assert encode(rec, cfg).values.tolist() == [100, 50, 0.5, -0.25, 3.0]
        assert encode(rec, EncodingConfig(bins_u=1, bins_v=1, channels="P2D_Z")).values.tolist() == [100, 50, 3.0]

    def test_select_matches_direct_encoding(self):
        rec = random_record(5)
        full = encode(rec, EncodingConfig())
        for ch in ("P2D", "P2D_Z"):
            assert full.select(ch) == encode(rec, EncodingConfig(channels=ch))

    @settings(max_examples=40)
    @given(st.integers(0, 10_000), st.integers(1, 60))
    def test_permutation_invariant(self, seed, n):
        rec = random_record(seed, n)
        perm = np.random.default_rng(seed + 1).permutation(n)
        shuffled = rec.subset(perm)
        a, b = encode(rec, EncodingConfig()), encode(shuffled, EncodingConfig())
        assert np.allclose(a.values, b.values, rtol=1e-12, atol=1e-12)
        assert np.array_equal(a.mask, b.mask)

    @settings(max_examples=40)
    @given(st.integers(0, 10_000))
    def test_adding_landmark_changes_only_its_bin(self, seed):
        rec = random_record(seed, 20)
        cfg = EncodingConfig(bins_u=8, bins_v=6)
        extra = random_record(seed + 7, 1)
        grown = make_record(np.vstack([rec.pixels, extra.pixels]), np.vstack([rec.points_cam, extra.points_cam]))
        a, b = encode(rec, cfg).per_bin, encode(grown, cfg).per_bin
        changed = np.flatnonzero(np.any(a != b, axis=1))
        target = int(np.floor(extra.pixels[0, 0] / 640 * 8)) * 6 + int(np.floor(extra.pixels[0, 1] / 480 * 6))
        assert set(changed.tolist()) <= {target}


class TestStats:
    def test_hand_statistics(self):
        cfg = EncodingConfig(bins_u=1, bins_v=1, channels="P2D")
        feats = [encode(make_record([[1, 1]]), cfg), encode(make_record([[3, 3]]), cfg)]
        stats = fit_stats(feats)
        assert np.array_equal(stats.mean, (2, 2))
        assert np.array_equal(stats.std, (1, 1))

    def test_identical_features_floor_std(self):
        cfg = EncodingConfig(bins_u=4, bins_v=4, channels="P2D_3D")
        f = encode(random_record(1, 1), cfg)
        stats = fit_stats([f, f, f])
        assert np.all(stats.std == 1e-8)
        assert not standardize(f, stats).values.any()

    def test_ignores_empty_bins(self):
        cfg = EncodingConfig(bins_u=10, bins_v=10, channels="P2D")
        f = encode(make_record([[100, 100]]), cfg)
        assert np.array_equal(fit_stats([f]).mean, (100, 100))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            fit_stats([])

    def test_serialization_bit_exact(self):
        feats = [encode(random_record(s), EncodingConfig()) for s in range(5)]
        stats = fit_stats(feats)
        assert StandardizationStats.from_dict(stats.to_dict()) == stats


class TestStandardize:
    def stats(self):
        return StandardizationStats(np.array([3.0, -1.0]), np.array([2.0, 0.5]), Channels.P2D)

    def test_mean_maps_to_zero_and_mean_plus_std_to_one(self):
        mask = np.array([True, False, True])
        at_mean = EncodedFeature(np.array([3.0, -1.0, 0.0, 0.0, 3.0, -1.0]), mask, Channels.P2D)
        assert np.array_equal(standardize(at_mean, self.stats()).values, np.zeros(6))
        plus = EncodedFeature(np.array([5.0, -0.5, 0.0, 0.0, 5.0, -0.5]), mask, Channels.P2D)
        assert np.array_equal(standardize(plus, self.stats()).values, [1, 1, 0, 0, 1, 1])

    def test_channel_mismatch(self):
        f = encode(random_record(0), EncodingConfig(channels="P2D_Z"))
        with pytest.raises(ValueError):
            standardize(f, self.stats())

    @settings(max_examples=40)
    @given(st.integers(0, 10_000))
    def test_zero_preservation_and_inverse(self, seed):
        cfg = EncodingConfig(bins_u=12, bins_v=9)
        feats = [encode(random_record(seed + i, 15), cfg) for i in range(4)]
        stats = fit_stats(feats)
        for f in feats:
            z = standardize(f, stats)
            assert not z.per_bin[~f.mask].any()
            back = destandardize(z, stats)
            assert np.allclose(back.values, f.values, atol=1e-9)
