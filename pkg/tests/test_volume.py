"""
Tests for grids, normalization frames, trilinear sampling and mask dilation.
"""

import itertools

import numpy as np
import pytest

from myoreg.errors import EmptyMaskError, GeometryMismatchError
from myoreg.volume import (
    Grid3,
    NormFrame,
    dilate_mask,
    normalized_to_world,
    trilinear_gradient,
    trilinear_sample,
    world_to_normalized,
)

from conftest import make_grid


class TestGrid3:
    """Construction and geometry helpers."""

    def test_rejects_small_dims(self):
        """Test that a grid with fewer than two voxels on an axis is rejected."""
        with pytest.raises(GeometryMismatchError):
            Grid3(values=np.zeros((1, 4, 4)), spacing=(1, 1, 1))

    def test_rejects_non_positive_spacing(self):
        """Test that zero spacing is rejected."""
        with pytest.raises(GeometryMismatchError):
            Grid3(values=np.zeros((3, 3, 3)), spacing=(1, 0, 1))

    def test_voxel_centers_follow_origin_and_spacing(self):
        """Test that voxel centers start at the origin and step by the spacing."""
        grid = make_grid(np.zeros((2, 3, 4)), spacing=(0.5, 1.0, 2.0), origin=(10.0, 20.0, 30.0))
        centers = grid.voxel_centers()
        assert centers.shape == (24, 3)
        np.testing.assert_allclose(centers[0], [10.0, 20.0, 30.0])
        np.testing.assert_allclose(centers[-1], [10.5, 22.0, 36.0])
        # C order: the last axis varies fastest
        np.testing.assert_allclose(centers[1], [10.0, 20.0, 32.0])

    def test_same_geometry(self):
        """Test geometry comparison against matching and mismatching grids."""
        a = make_grid(np.zeros((3, 3, 3)), spacing=(1, 1, 2))
        assert a.same_geometry(a.with_values(np.ones((3, 3, 3))))
        assert not a.same_geometry(make_grid(np.zeros((3, 3, 3)), spacing=(1, 1, 1)))
        with pytest.raises(GeometryMismatchError):
            a.require_same_geometry(make_grid(np.zeros((3, 3, 4)), spacing=(1, 1, 2)))


class TestNormFrame:
    """World <-> normalized coordinates."""

    def test_center_maps_to_origin(self):
        """Test that the grid center maps to the normalized origin."""
        grid = make_grid(np.zeros((5, 7, 9)), spacing=(0.5, 0.5, 2.0), origin=(-3.0, 1.0, 4.0))
        frame = NormFrame.from_grid(grid)
        np.testing.assert_allclose(world_to_normalized(frame, frame.center), [0.0, 0.0, 0.0], atol=1e-15)

    def test_bounding_box_corners_map_to_unit_cube(self):
        """Test that the bounding box corners map to -1 and +1."""
        grid = make_grid(np.zeros((5, 7, 9)), spacing=(0.5, 0.5, 2.0), origin=(-3.0, 1.0, 4.0))
        frame = NormFrame.from_grid(grid)
        np.testing.assert_allclose(world_to_normalized(frame, grid.bbox_min), [-1.0, -1.0, -1.0])
        np.testing.assert_allclose(world_to_normalized(frame, grid.bbox_max), [1.0, 1.0, 1.0])

    def test_round_trip(self, rng):
        """Test that world -> normalized -> world is the identity."""
        frame = NormFrame(center=(12.0, -4.0, 100.0), half_extent=(31.5, 31.5, 62.0))
        points = rng.uniform(-200, 200, size=(1000, 3))
        back = normalized_to_world(frame, world_to_normalized(frame, points))
        assert np.max(np.abs(back - points) / np.maximum(np.abs(points), 1.0)) <= 1e-9

    def test_degenerate_frame_rejected(self):
        """Test that a zero half-extent is rejected."""
        with pytest.raises(GeometryMismatchError):
            NormFrame(center=(0, 0, 0), half_extent=(1.0, 0.0, 1.0))


class TestTrilinearSample:
    """Interpolation values."""

    def test_exact_at_nodes(self, rng):
        """Test that sampling at a voxel center returns the stored value."""
        grid = make_grid(rng.normal(size=(5, 5, 5)), spacing=(1.0, 2.0, 0.5), origin=(1.0, 2.0, 3.0))
        for index in [(1, 2, 3), (2, 2, 2), (3, 1, 1)]:
            p = grid.index_to_world(index)
            assert trilinear_sample(grid, p) == pytest.approx(grid.values[index], abs=1e-12)

    def test_midpoint(self):
        """Test that the midpoint between 0 and 2 interpolates to 1."""
        values = np.zeros((3, 3, 3))
        values[2, 1, 1] = 2.0
        grid = make_grid(values)
        assert trilinear_sample(grid, (1.5, 1.0, 1.0)) == pytest.approx(1.0)

    def test_reproduces_linear_field_along_x(self, rng):
        """Test that a field linear in x is reproduced exactly."""
        spacing = (0.7, 1.0, 2.0)
        origin = (5.0, -1.0, 2.0)
        i = np.arange(6)[:, None, None] * np.ones((6, 6, 6))
        grid = make_grid(i * spacing[0], spacing=spacing, origin=origin)
        points = grid.bbox_min + rng.uniform(0, 1, size=(50, 3)) * (grid.bbox_max - grid.bbox_min)
        np.testing.assert_allclose(trilinear_sample(grid, points), points[:, 0] - origin[0], atol=1e-12)

    def test_exact_on_random_affine_fields(self, rng):
        """Test that random affine fields are reproduced on random grids."""
        for _ in range(10):
            spacing = tuple(rng.uniform(0.5, 2.0, size=3))
            origin = tuple(rng.uniform(-10, 10, size=3))
            a, c = rng.normal(size=3), rng.normal()
            grid = make_grid(np.zeros((6, 7, 8)), spacing=spacing, origin=origin)
            field = (grid.voxel_centers() @ a + c).reshape(grid.dims)
            grid = grid.with_values(field)
            points = grid.bbox_min + rng.uniform(0, 1, size=(100, 3)) * (grid.bbox_max - grid.bbox_min)
            expected = points @ a + c
            rel = np.abs(trilinear_sample(grid, points) - expected) / np.maximum(np.abs(expected), 1.0)
            assert rel.max() <= 1e-9

    def test_within_cell_corner_range(self, rng):
        """Test that interpolated values stay between the cell's corner values."""
        grid = make_grid(rng.normal(size=(6, 6, 6)))
        points = rng.uniform(0, 5, size=(200, 3))
        values = trilinear_sample(grid, points)
        for p, v in zip(points, values):
            i0 = np.minimum(np.floor(p).astype(int), 4)
            cell = grid.values[i0[0] : i0[0] + 2, i0[1] : i0[1] + 2, i0[2] : i0[2] + 2]
            assert cell.min() - 1e-12 <= v <= cell.max() + 1e-12

    def test_out_of_bounds_is_border_clamped(self, rng):
        """Test that points outside the grid take the nearest border value."""
        grid = make_grid(rng.normal(size=(4, 4, 4)))
        assert trilinear_sample(grid, (-5.0, 1.0, 2.0)) == pytest.approx(grid.values[0, 1, 2])
        assert trilinear_sample(grid, (3.0, 9.0, 12.0)) == pytest.approx(grid.values[3, 3, 3])

    def test_batch_and_single_agree(self, rng):
        """Test that batched and single-point sampling agree."""
        grid = make_grid(rng.normal(size=(4, 4, 4)))
        points = rng.uniform(0, 3, size=(5, 3))
        batch = trilinear_sample(grid, points)
        for p, v in zip(points, batch):
            assert trilinear_sample(grid, p) == v


class TestTrilinearGradient:
    """Analytic gradients of the interpolant."""

    def test_constant_grid(self):
        """Test that a constant grid has zero gradient."""
        grid = make_grid(np.full((4, 4, 4), 7.0))
        np.testing.assert_array_equal(trilinear_gradient(grid, (1.3, 2.2, 0.4)), [0.0, 0.0, 0.0])

    def test_linear_field(self):
        """Test that f = x has gradient (1, 0, 0)."""
        spacing = (0.5, 1.0, 2.0)
        grid = make_grid(np.zeros((5, 5, 5)), spacing=spacing)
        grid = grid.with_values(grid.voxel_centers()[:, 0].reshape(grid.dims))
        np.testing.assert_allclose(trilinear_gradient(grid, (1.1, 2.3, 3.7)), [1.0, 0.0, 0.0], atol=1e-12)

    def test_matches_finite_differences(self, rng):
        """Test that the analytic gradient matches central differences."""
        grid = make_grid(rng.normal(size=(8, 8, 8)), spacing=(1.0, 0.8, 1.5), origin=(2.0, -1.0, 0.5))
        lo, hi = grid.bbox_min + 0.05, grid.bbox_max - 0.05
        points = lo + rng.uniform(0, 1, size=(100, 3)) * (hi - lo)
        h = 1e-4
        grads = trilinear_gradient(grid, points)
        for p, g in zip(points, grads):
            # stay inside the cell so the finite difference sees one polynomial
            index = grid.world_to_index(p)
            if np.any(np.abs(index - np.round(index)) < 1e-3):
                continue
            fd = np.empty(3)
            for axis in range(3):
                step = np.zeros(3)
                step[axis] = h
                fd[axis] = (trilinear_sample(grid, p + step) - trilinear_sample(grid, p - step)) / (2 * h)
            assert np.max(np.abs(fd - g)) <= 1e-6 * max(np.max(np.abs(g)), 1.0)

    def test_zero_along_clamped_axis(self, rng):
        """Test that the gradient vanishes along an axis where the point is clamped."""
        grid = make_grid(rng.normal(size=(4, 4, 4)))
        g = trilinear_gradient(grid, (-2.0, 1.5, 1.5))
        assert g[0] == 0.0
        assert g[1] != 0.0


class TestDilateMask:
    """Physical-distance dilation."""

    def test_radius_zero_is_identity(self, cube_mask):
        """Test that a zero radius leaves the mask unchanged."""
        out = dilate_mask(cube_mask, 0.0)
        np.testing.assert_array_equal(out.as_mask(), cube_mask.as_mask())

    def test_single_voxel_anisotropic_matches_brute_force(self):
        """Test that dilating one voxel with anisotropic spacing matches a brute-force ball."""
        values = np.zeros((7, 7, 7))
        values[3, 3, 3] = 1
        grid = make_grid(values, spacing=(1.0, 1.0, 2.0))
        out = dilate_mask(grid, 2.0)
        expected = np.zeros((7, 7, 7), dtype=bool)
        for i, j, k in itertools.product(range(7), repeat=3):
            d = np.sqrt((i - 3) ** 2 + (j - 3) ** 2 + (2 * (k - 3)) ** 2)
            expected[i, j, k] = d <= 2.0
        np.testing.assert_array_equal(out.as_mask(), expected)
        # x +- 2 reached, z +- 1 reached (2 mm), z +- 2 not
        assert out.values[5, 3, 3] and out.values[3, 3, 4] and not out.values[3, 3, 5]

    def test_large_radius_fills_grid(self, cube_mask):
        """Test that a huge radius sets every voxel."""
        out = dilate_mask(cube_mask, 1000.0)
        assert out.as_mask().all()

    def test_monotone(self, cube_mask):
        """Test that a larger radius gives a superset of a smaller one."""
        small = dilate_mask(cube_mask, 2.0).as_mask()
        large = dilate_mask(cube_mask, 4.5).as_mask()
        assert np.all(small[cube_mask.as_mask()])
        assert np.all(large[small])
        assert large.sum() > small.sum()

    def test_empty_mask_rejected(self):
        """Test that dilating an empty mask raises EmptyMaskError."""
        with pytest.raises(EmptyMaskError):
            dilate_mask(make_grid(np.zeros((4, 4, 4))), 2.0)

    def test_negative_radius_rejected(self, cube_mask):
        """Test that a negative radius raises ValueError."""
        with pytest.raises(ValueError):
            dilate_mask(cube_mask, -1.0)
