import numpy as np
import pytest

from dtjrd.errors import ContractError
from dtjrd.resample import bicubic_resize_2d, bilinear_resize_2d


def cubic_weight(t, a=-0.5):
    t = abs(t)
    if t < 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def bicubic_reference(grid, new_h, new_w):
    """Naive per-pixel Catmull-Rom resize: half-pixel mapping, clamped taps."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[:2]
    out = np.zeros((new_h, new_w) + grid.shape[2:])
    for oy in range(new_h):
        sy = (oy + 0.5) * h / new_h - 0.5
        y0 = int(np.floor(sy))
        for ox in range(new_w):
            sx = (ox + 0.5) * w / new_w - 0.5
            x0 = int(np.floor(sx))
            acc = 0.0
            for dy in range(-1, 3):
                wy = cubic_weight(sy - (y0 + dy))
                yy = min(max(y0 + dy, 0), h - 1)
                for dx in range(-1, 3):
                    wx = cubic_weight(sx - (x0 + dx))
                    xx = min(max(x0 + dx, 0), w - 1)
                    acc = acc + wy * wx * grid[yy, xx]
            out[oy, ox] = acc
    return out


class TestBicubic:
    def test_matches_reference_upsample(self):
        rng = np.random.default_rng(0)
        grid = rng.normal(size=(7, 7))
        got = bicubic_resize_2d(grid, 12, 12)
        want = bicubic_reference(grid, 12, 12)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_matches_reference_downsample(self):
        rng = np.random.default_rng(1)
        grid = rng.normal(size=(9, 13))
        got = bicubic_resize_2d(grid, 5, 4)
        want = bicubic_reference(grid, 5, 4)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_matches_reference_channels(self):
        rng = np.random.default_rng(2)
        grid = rng.normal(size=(6, 5, 3))
        got = bicubic_resize_2d(grid, 8, 9)
        want = bicubic_reference(grid, 8, 9)
        assert got.shape == (8, 9, 3)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_identity_is_exact(self):
        rng = np.random.default_rng(3)
        grid = rng.normal(size=(7, 7))
        assert np.array_equal(bicubic_resize_2d(grid, 7, 7), grid)

    def test_constant_grid_stays_constant(self):
        grid = np.full((5, 5), 3.25)
        out = bicubic_resize_2d(grid, 11, 4)
        assert np.max(np.abs(out - 3.25)) < 1e-12

    def test_linear_ramp_preserved_in_interior(self):
        # Catmull-Rom reproduces degree-1 polynomials away from clamped borders.
        grid = np.outer(np.arange(10, dtype=np.float64), np.ones(10))
        out = bicubic_resize_2d(grid, 19, 10)
        ramp = (np.arange(19) + 0.5) * 10 / 19 - 0.5
        interior = slice(4, 15)
        assert np.max(np.abs(out[interior, 0] - ramp[interior])) < 1e-10

    def test_rejects_tiny_source(self):
        with pytest.raises(ContractError):
            bicubic_resize_2d(np.ones((1, 5)), 3, 3)

    def test_rejects_empty_target(self):
        with pytest.raises(ContractError):
            bicubic_resize_2d(np.ones((5, 5)), 0, 3)


class TestBilinear:
    def test_matches_manual_two_pixel(self):
        grid = np.array([[0.0, 1.0]])
        out = bilinear_resize_2d(grid, 1, 4)
        # dst centers at src coords -0.25, 0.25, 0.75, 1.25 (clamped)
        assert np.allclose(out, [[0.0, 0.25, 0.75, 1.0]])

    def test_single_pixel_source(self):
        out = bilinear_resize_2d(np.array([[5.0]]), 3, 3)
        assert np.array_equal(out, np.full((3, 3), 5.0))

    def test_identity_is_exact(self):
        rng = np.random.default_rng(4)
        grid = rng.normal(size=(6, 8, 3))
        assert np.array_equal(bilinear_resize_2d(grid, 6, 8), grid)

    def test_box_average_on_2x_downsample(self):
        # Exact 2x downsample with half-pixel mapping lands on 2x2 box means.
        rng = np.random.default_rng(5)
        grid = rng.normal(size=(8, 8))
        out = bilinear_resize_2d(grid, 4, 4)
        want = grid.reshape(4, 2, 4, 2).mean(axis=(1, 3))
        assert np.max(np.abs(out - want)) < 1e-12
