from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activeview.sampling import (Candidate, azimuth_elevation_directions, build_grid, cell_lookup, dump_grid,
                                 enumerate_viewpoints, fibonacci_directions, nearest_cell, parse_grid)
from activeview.scene import LandmarkCloud, Pose


def unit_cube(offset=(0.0, 0.0, 0.0)) -> LandmarkCloud:
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    return LandmarkCloud(corners + np.asarray(offset))


def nn_geodesic(forwards: np.ndarray) -> np.ndarray:
    cos = np.clip(forwards @ forwards.T, -1.0, 1.0)
    np.fill_diagonal(cos, -2.0)
    return np.arccos(np.clip(cos.max(axis=1), -1.0, 1.0))


def spread_ratio(forwards: np.ndarray) -> float:
    d = nn_geodesic(forwards)
    return float(d.max() / d.min())


class TestFibonacci:
    def test_single_direction(self):
        dirs = fibonacci_directions(1)
        assert dirs.thetas[0] == pytest.approx(math.pi / 2)
        assert dirs.phis[0] == 0.0
        assert np.allclose(dirs.forwards[0], (0, 0, 1))

    def test_two_directions(self):
        dirs = fibonacci_directions(2)
        assert np.degrees(dirs.thetas) == pytest.approx([60.0, 120.0])

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            fibonacci_directions(0)

    @settings(max_examples=25)
    @given(st.integers(1, 400))
    def test_rotations_valid(self, n):
        dirs = fibonacci_directions(n)
        R = dirs.rotations
        eye = np.broadcast_to(np.eye(3), R.shape)
        assert np.allclose(np.matmul(R.transpose(0, 2, 1), R), eye, atol=1e-9)
        assert np.allclose(np.linalg.det(R), 1.0)
        assert np.allclose(np.linalg.norm(dirs.forwards, axis=1), 1.0, atol=1e-9)
        assert np.all(dirs.phis >= 0) and np.all(dirs.phis < 2 * math.pi)

    @settings(max_examples=25)
    @given(st.integers(2, 400))
    def test_forwards_distinct(self, n):
        assert nn_geodesic(fibonacci_directions(n).forwards).min() > 1e-6

    def test_zero_roll(self):
        # the camera x axis stays horizontal (perpendicular to world y)
        dirs = fibonacci_directions(64)
        assert np.allclose(dirs.rotations[:, 1, 0], 0.0, atol=1e-12)

    def test_forward_matches_polar_angles(self):
        dirs = fibonacci_directions(50)
        f = dirs.forwards
        assert np.allclose(f[:, 1], np.cos(dirs.thetas))
        assert np.allclose(np.arctan2(f[:, 0], f[:, 2]) % (2 * math.pi), dirs.phis % (2 * math.pi), atol=1e-9)

    def test_uniformity_beats_equal_angle_grid(self):
        fib = spread_ratio(fibonacci_directions(1000).forwards)
        grid = spread_ratio(azimuth_elevation_directions(1000).forwards)
        assert fib < 2.0
        assert fib < grid


class TestGrid:
    def test_unit_cube_two_per_axis(self):
        grid = build_grid(unit_cube((1, 2, 3)), (2, 2, 2))
        assert len(grid) == 8
        centers = sorted(tuple(np.round(c.center - (1.5, 2.5, 3.5), 12)) for c in grid.cells())
        expected = sorted((x, y, z) for x in (-0.25, 0.25) for y in (-0.25, 0.25) for z in (-0.25, 0.25))
        assert centers == expected

    def test_single_cell_at_center(self):
        grid = build_grid(unit_cube(), (1, 1, 1))
        assert len(grid) == 1
        assert np.allclose(grid.cells()[0].center, (0.5, 0.5, 0.5))

    def test_default_has_512_cells(self):
        assert len(build_grid(unit_cube())) == 512

    def test_degenerate_box(self):
        flat = LandmarkCloud([[0, 0, 0], [1, 1, 0]])
        with pytest.raises(ValueError):
            build_grid(flat, (2, 2, 2))
        grid = build_grid(flat, (2, 2, 2), margin=0.5)
        assert np.allclose(grid.extent, (2, 2, 1))

    def test_bad_resolution(self):
        with pytest.raises(ValueError):
            build_grid(unit_cube(), (0, 2, 2))

    def test_lookup_center_and_outside(self):
        grid = build_grid(unit_cube(), (3, 4, 5), margin=0.1)
        for cell in grid.cells():
            assert cell_lookup(grid, cell.center) is cell
        assert cell_lookup(grid, (5.0, 0.5, 0.5)) is None
        assert cell_lookup(grid, (-0.11, 0.5, 0.5)) is None

    def test_shared_face_goes_to_upper_cell(self):
        grid = build_grid(LandmarkCloud([[0, 0, 0], [2, 1, 1]]), (2, 1, 1))
        assert cell_lookup(grid, (1.0, 0.5, 0.5)).index == (1, 0, 0)
        assert cell_lookup(grid, (np.nextafter(1.0, 0), 0.5, 0.5)).index == (0, 0, 0)
        # the upper bound itself is outside the half-open cells
        assert cell_lookup(grid, (2.0, 0.5, 0.5)) is None

    def test_partition(self):
        grid = build_grid(unit_cube(), (4, 3, 5), margin=0.2)
        rng = np.random.default_rng(0)
        pts = rng.uniform(grid.origin, grid.upper, size=(10_000, 3))
        lo = np.stack([c.center - grid.cell_size / 2 for c in grid.cells()])
        hi = lo + grid.cell_size
        for p in pts:
            members = np.all((p >= lo) & (p < hi), axis=1)
            assert members.sum() == 1
            assert cell_lookup(grid, p).cell_id == int(np.argmax(members))

    def test_nearest_cell(self):
        grid = build_grid(unit_cube(), (2, 2, 2))
        assert nearest_cell(grid, (10, 10, 10)).index == (1, 1, 1)

    def test_cell_id_round_trip(self):
        grid = build_grid(unit_cube(), (3, 4, 5))
        ids = [c.cell_id for c in grid.cells()]
        assert ids == list(range(60))
        for c in grid.cells():
            assert grid.index_of(c.cell_id) == c.index
            assert grid.by_id(c.cell_id) is c


class TestEnumerate:
    def test_product_cardinality(self):
        grid = build_grid(unit_cube(), (2, 2, 2))
        dirs = fibonacci_directions(32)
        views = list(enumerate_viewpoints(grid, dirs))
        assert len(views) == 256
        for cell_id, d, pose in views:
            assert isinstance(pose, Pose)
            assert np.array_equal(pose.translation, grid.by_id(cell_id).center)
            assert np.array_equal(pose.rotation, dirs.rotations[d])

    def test_streams_at_benchmark_scale(self):
        grid = build_grid(unit_cube(), (9, 9, 8))
        stream = enumerate_viewpoints(grid, fibonacci_directions(64))
        assert len(grid) == 648
        assert sum(1 for _ in stream) == 648 * 64


class TestSerialization:
    def test_round_trip_scores_bit_exact(self):
        grid = build_grid(unit_cube(), (2, 3, 2), margin=0.05)
        dirs = fibonacci_directions(16)
        rng = np.random.default_rng(4)
        cells = []
        for cell in grid.cells():
            cands = tuple(Candidate(int(d), dirs.pose(int(d), cell.center), int(rng.integers(0, 50)), float(rng.random()))
                          for d in rng.choice(16, 3, replace=False))
            cells.append(replace(cell, candidates=cands))
        grid = grid.with_cells(cells, sort_key="score")
        grid.n_directions = 16
        back = parse_grid(dump_grid(grid))
        assert back.resolution == grid.resolution
        assert np.array_equal(back.origin, grid.origin) and np.array_equal(back.cell_size, grid.cell_size)
        for a, b in zip(grid.cells(), back.cells()):
            assert np.array_equal(a.center, b.center)
            assert [(c.direction, c.visible, c.score) for c in a.candidates] == \
                   [(c.direction, c.visible, c.score) for c in b.candidates]
            for c, d in zip(a.candidates, b.candidates):
                assert np.array_equal(c.pose.rotation, d.pose.rotation)
        assert dump_grid(back) == dump_grid(grid)

    def test_rejects_foreign_json(self):
        with pytest.raises(ValueError):
            parse_grid('{"format": "other"}')
