import math

import numpy as np
import pytest

from sarfe import numcore, roipool
from sarfe.cloudgeom import PointCloud
from sarfe.errors import ShapeError
from sarfe.numcore import Tape, backward
from sarfe.roipool import (
    Box3D,
    gather_neighborhoods,
    generate_grid_points,
    init_set_abstraction_mlp,
    multi_radius_pool,
    set_abstraction,
    wrap_angle,
)


def make_mlp(seed, in_width=4, hidden=6, out=6):
    return init_set_abstraction_mlp(np.random.default_rng(seed), in_width, hidden, out)


class TestWrapAngle:
    def test_sweep_against_modular_oracle(self):
        for raw in np.linspace(-10.0, 10.0, 400):
            wrapped = wrap_angle(raw)
            assert -math.pi < wrapped <= math.pi
            # same angle modulo 2*pi
            assert abs(math.remainder(wrapped - raw, 2.0 * math.pi)) < 1e-12

    def test_pi_maps_to_pi(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)


class TestBox3D:
    def test_rejects_bad_size(self):
        with pytest.raises(ValueError):
            Box3D((0, 0, 0), (1.0, 0.0, 1.0), 0.0)

    def test_rejects_out_of_range_yaw(self):
        with pytest.raises(ValueError):
            Box3D((0, 0, 0), (1, 1, 1), 3.5)

    def test_contains_axis_aligned(self):
        box = Box3D((0.0, 0.0, 0.0), (2.0, 4.0, 6.0), 0.0)
        pts = np.array([[0.9, 1.9, 2.9], [1.1, 0.0, 0.0]])
        assert box.contains(pts).tolist() == [True, False]

    def test_contains_respects_rotation(self):
        box = Box3D((0.0, 0.0, 0.0), (4.0, 1.0, 1.0), math.pi / 2)
        # long axis now along y
        assert box.contains(np.array([[0.0, 1.8, 0.0]]))[0]
        assert not box.contains(np.array([[1.8, 0.0, 0.0]]))[0]


class TestGenerateGridPoints:
    def test_single_cell_is_center(self):
        box = Box3D((3.0, -2.0, 1.5), (2.0, 1.0, 3.0), 0.77)
        grid = generate_grid_points(box, 1)
        assert np.allclose(grid.points[0], [3.0, -2.0, 1.5], atol=1e-12)

    def test_unit_cube_g2_corners(self):
        box = Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
        grid = generate_grid_points(box, 2)
        expected = {
            (sx * 0.25, sy * 0.25, sz * 0.25)
            for sx in (-1, 1)
            for sy in (-1, 1)
            for sz in (-1, 1)
        }
        got = {tuple(np.round(p, 12)) for p in grid.points}
        assert got == expected

    def test_x_major_ordering(self):
        box = Box3D((0.0, 0.0, 0.0), (2.0, 2.0, 2.0), 0.0)
        pts = generate_grid_points(box, 3).points
        # z varies fastest, x slowest
        assert pts[0, 2] < pts[1, 2]
        assert pts[0, 0] == pytest.approx(pts[8, 0])
        assert pts[0, 0] < pts[9, 0]

    def test_token_count(self):
        box = Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
        assert generate_grid_points(box, 6).points.shape == (216, 3)

    def test_rigid_motion_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            size = tuple(rng.uniform(0.5, 4.0, size=3))
            yaw = float(rng.uniform(-math.pi, math.pi * 0.999))
            center = tuple(rng.uniform(-10.0, 10.0, size=3))
            g = int(rng.integers(1, 5))
            base = generate_grid_points(Box3D((0.0, 0.0, 0.0), size, 0.0), g)
            moved = generate_grid_points(Box3D(center, size, yaw), g)
            c, s = math.cos(yaw), math.sin(yaw)
            rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
            expected = base.points @ rot.T + np.asarray(center)
            assert np.max(np.abs(moved.points - expected)) < 1e-12

    def test_all_points_inside_box(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            box = Box3D(
                tuple(rng.uniform(-5, 5, size=3)),
                tuple(rng.uniform(0.5, 3.0, size=3)),
                float(rng.uniform(-math.pi, math.pi * 0.999)),
            )
            grid = generate_grid_points(box, 4)
            assert box.contains(grid.points, slack=1e-9).all()


class TestGatherNeighborhoods:
    def test_rows_are_feature_then_offset(self):
        source = PointCloud(np.array([[0.2, 0.0, 0.0]]), np.array([[5.0]]))
        box = Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
        grid = generate_grid_points(box, 1)
        ns = gather_neighborhoods(grid, source, 1.0, max_neighbors=None)
        assert ns.rows[0].shape == (1, 4)
        assert np.allclose(ns.rows[0], [[5.0, 0.2, 0.0, 0.0]])

    def test_strict_radius(self):
        source = PointCloud(np.array([[0.5, 0.0, 0.0]]), np.array([[1.0]]))
        box = Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
        grid = generate_grid_points(box, 1)
        ns = gather_neighborhoods(grid, source, 0.5, max_neighbors=None)
        assert ns.indices[0].size == 0


class TestSetAbstraction:
    def test_no_points_in_radius_gives_zeros(self):
        source = PointCloud(np.array([[50.0, 50.0, 0.0]]), np.ones((1, 1)))
        box = Box3D((0.0, 0.0, 0.0), (2.0, 2.0, 2.0), 0.0)
        grid = generate_grid_points(box, 3)
        out = set_abstraction(grid, source, 0.5, make_mlp(0))
        assert out.shape == (27, 6)
        assert np.array_equal(out.data, np.zeros((27, 6)))

    def test_zero_feature_zero_bias_neighbor_gives_zero(self):
        box = Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
        grid = generate_grid_points(box, 1)
        source = PointCloud(grid.points.copy(), np.zeros((1, 1)))
        mlp = make_mlp(1)
        mlp.b1.values[...] = 0.0
        mlp.b2.values[...] = 0.0
        out = set_abstraction(grid, source, 0.5, mlp)
        assert np.array_equal(out.data, np.zeros((1, 6)))

    def test_duplicate_neighbor_leaves_output_unchanged(self):
        rng = np.random.default_rng(2)
        box = Box3D((0.0, 0.0, 0.0), (2.0, 2.0, 2.0), 0.3)
        grid = generate_grid_points(box, 2)
        xyz = rng.uniform(-1.2, 1.2, size=(40, 3))
        feats = rng.uniform(size=(40, 1))
        source = PointCloud(xyz, feats)
        dup = PointCloud(np.vstack([xyz, xyz[7:8]]), np.vstack([feats, feats[7:8]]))
        mlp = make_mlp(3)
        a = set_abstraction(grid, source, 1.0, mlp, max_neighbors=None)
        b = set_abstraction(grid, dup, 1.0, mlp, max_neighbors=None)
        assert np.max(np.abs(a.data - b.data)) < 1e-15

    def test_source_permutation_invariant(self):
        rng = np.random.default_rng(3)
        box = Box3D((0.0, 0.0, 0.0), (2.0, 2.0, 2.0), -0.6)
        grid = generate_grid_points(box, 2)
        xyz = rng.uniform(-1.2, 1.2, size=(50, 3))
        feats = rng.uniform(size=(50, 1))
        perm = rng.permutation(50)
        mlp = make_mlp(4)
        a = set_abstraction(grid, PointCloud(xyz, feats), 1.0, mlp)
        b = set_abstraction(grid, PointCloud(xyz[perm], feats[perm]), 1.0, mlp)
        assert np.array_equal(a.data, b.data)

    def test_translation_invariance(self):
        rng = np.random.default_rng(4)
        box = Box3D((1.0, -2.0, 0.5), (2.0, 1.5, 1.8), 0.9)
        grid = generate_grid_points(box, 3)
        source = PointCloud(rng.uniform(-2, 3, size=(80, 3)), rng.uniform(size=(80, 1)))
        mlp = make_mlp(5)
        base = set_abstraction(grid, source, 0.8, mlp)
        for _ in range(5):
            shift = rng.uniform(-30, 30, size=3)
            moved_box = Box3D(tuple(np.asarray(box.center) + shift), box.size, box.yaw)
            moved_grid = generate_grid_points(moved_box, 3)
            moved = set_abstraction(moved_grid, source.translated(shift), 0.8, mlp)
            assert np.max(np.abs(moved.data - base.data)) < 1e-12

    def test_feature_width_mismatch_rejected(self):
        source = PointCloud(np.zeros((3, 3)), np.zeros((3, 2)))
        box = Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
        grid = generate_grid_points(box, 1)
        with pytest.raises(ShapeError):
            set_abstraction(grid, source, 0.5, make_mlp(6, in_width=4))

    def test_gradients_flow_to_mlp(self):
        rng = np.random.default_rng(7)
        box = Box3D((0.0, 0.0, 0.0), (2.0, 2.0, 2.0), 0.0)
        grid = generate_grid_points(box, 2)
        source = PointCloud(rng.uniform(-1, 1, size=(30, 3)), rng.uniform(size=(30, 1)))
        mlp = make_mlp(8)
        with Tape() as tape:
            loss = numcore.sum_all(set_abstraction(grid, source, 1.5, mlp))
        backward(loss, tape)
        assert np.abs(mlp.w1.grad).max() > 0


class TestMultiRadiusPool:
    def test_single_radius_equals_set_abstraction(self):
        rng = np.random.default_rng(9)
        box = Box3D((0.0, 0.0, 0.0), (2.0, 2.0, 2.0), 0.2)
        grid = generate_grid_points(box, 2)
        source = PointCloud(rng.uniform(-1, 1, size=(40, 3)), rng.uniform(size=(40, 1)))
        mlp = make_mlp(10)
        single = set_abstraction(grid, source, 0.9, mlp)
        pooled = multi_radius_pool(grid, source, [0.9], [mlp])
        assert np.array_equal(single.data, pooled.data)

    def test_tiny_second_radius_block_zero(self):
        rng = np.random.default_rng(11)
        box = Box3D((0.0, 0.0, 0.0), (2.0, 2.0, 2.0), 0.0)
        grid = generate_grid_points(box, 2)
        # points far from every grid point relative to the small radius
        source = PointCloud(
            np.array([[0.9, 0.9, 0.9], [-0.9, -0.9, 0.9]]), rng.uniform(size=(2, 1))
        )
        mlps = [make_mlp(12), make_mlp(13)]
        out = multi_radius_pool(grid, source, [2.0, 1e-3], mlps)
        assert out.shape == (8, 12)
        assert np.array_equal(out.data[:, 6:], np.zeros((8, 6)))
        assert np.abs(out.data[:, :6]).max() > 0

    def test_blocks_match_independent_runs(self):
        rng = np.random.default_rng(14)
        box = Box3D((0.5, 0.5, 0.0), (2.5, 2.0, 1.5), -0.4)
        grid = generate_grid_points(box, 3)
        source = PointCloud(rng.uniform(-2, 2, size=(60, 3)), rng.uniform(size=(60, 1)))
        mlps = [make_mlp(15), make_mlp(16), make_mlp(17)]
        radii = [0.4, 0.8, 1.6]
        pooled = multi_radius_pool(grid, source, radii, mlps)
        for k, (r, mlp) in enumerate(zip(radii, mlps)):
            block = pooled.data[:, 6 * k : 6 * (k + 1)]
            solo = set_abstraction(grid, source, r, mlp)
            assert np.array_equal(block, solo.data)

    def test_radii_mlps_length_mismatch(self):
        box = Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
        grid = generate_grid_points(box, 1)
        source = PointCloud(np.zeros((1, 3)), np.zeros((1, 1)))
        with pytest.raises(ValueError):
            multi_radius_pool(grid, source, [0.4, 0.8], [make_mlp(18)])
