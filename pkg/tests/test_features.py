import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lucc.features import (FeatureSpace, SingularCovarianceError, Whitening,
                           apply_whitening, distance_to_state, fit_whitening,
                           slope_from_elevation)
from lucc.raster import CATEGORICAL, CONTINUOUS, RasterGrid


def categorical(values, cell=1.0):
    return RasterGrid(np.asarray(values), cell, -9999, CATEGORICAL)


def brute_force_distance(target: np.ndarray, cell: float) -> np.ndarray:
    """All-pairs nearest-target distance, the slow oracle."""
    rows, cols = np.nonzero(target)
    h, w = target.shape
    out = np.empty((h, w))
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for i in range(h):
        for j in range(w):
            d2 = (rows - i) ** 2 + (cols - j) ** 2
            out[i, j] = np.sqrt(d2.min())
    return out * cell


class TestDistanceToState:
    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            vals = rng.choice([1, 2], (16, 16), p=[0.9, 0.1])
            if not (vals == 2).any():
                vals[0, 0] = 2
            g = categorical(vals, cell=7.5)
            expect = brute_force_distance(vals == 2, 7.5)
            got = distance_to_state(g, 2).values
            assert np.array_equal(got, expect)

    def test_target_pixels_are_zero(self):
        g = categorical([[2, 1], [1, 1]])
        assert distance_to_state(g, 2).values[0, 0] == 0.0

    def test_scales_with_cell_size(self):
        vals = [[2, 1, 1], [1, 1, 1], [1, 1, 1]]
        d1 = distance_to_state(categorical(vals, 1.0), 2).values
        d30 = distance_to_state(categorical(vals, 30.0), 2).values
        assert np.allclose(d30, 30.0 * d1)

    def test_missing_target_raises(self):
        with pytest.raises(ValueError):
            distance_to_state(categorical([[1, 1], [1, 1]]), 2)

    def test_continuous_input_raises(self):
        g = RasterGrid(np.ones((2, 2)), 1.0, -9999, CONTINUOUS)
        with pytest.raises(ValueError):
            distance_to_state(g, 1)

    def test_nodata_carried_through(self):
        g = categorical([[2, -9999], [1, 1]])
        d = distance_to_state(g, 2)
        assert d.mask[0, 1]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_one_lipschitz_between_neighbors(self, seed):
        # moving one pixel changes the distance by at most one cell diagonal
        rng = np.random.default_rng(seed)
        vals = rng.choice([1, 2], (12, 12), p=[0.85, 0.15])
        if not (vals == 2).any():
            vals[3, 3] = 2
        d = distance_to_state(categorical(vals), 2).values
        step = np.sqrt(2.0) + 1e-12
        assert np.all(np.abs(np.diff(d, axis=0)) <= step)
        assert np.all(np.abs(np.diff(d, axis=1)) <= step)


def horn_slope_oracle(z: np.ndarray, cell: float) -> np.ndarray:
    """Independent per-pixel recomputation of the interior slope stencil."""
    h, w = z.shape
    out = np.full((h, w), np.nan)
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            dzdx = ((z[i - 1, j + 1] + 2 * z[i, j + 1] + z[i + 1, j + 1])
                    - (z[i - 1, j - 1] + 2 * z[i, j - 1] + z[i + 1, j - 1])) / (8 * cell)
            dzdy = ((z[i + 1, j - 1] + 2 * z[i + 1, j] + z[i + 1, j + 1])
                    - (z[i - 1, j - 1] + 2 * z[i - 1, j] + z[i - 1, j + 1])) / (8 * cell)
            out[i, j] = np.degrees(np.arctan(np.hypot(dzdx, dzdy)))
    return out


class TestSlope:
    def test_interior_matches_oracle(self):
        rng = np.random.default_rng(1)
        z = rng.normal(100, 10, (12, 15))
        dem = RasterGrid(z, 30.0, -9999, CONTINUOUS)
        got = slope_from_elevation(dem).values
        expect = horn_slope_oracle(z, 30.0)
        assert np.allclose(got[1:-1, 1:-1], expect[1:-1, 1:-1])

    def test_flat_surface_is_zero(self):
        dem = RasterGrid(np.full((5, 5), 42.0), 10.0, -9999, CONTINUOUS)
        assert np.allclose(slope_from_elevation(dem).values, 0.0)

    def test_known_ramp(self):
        # plane z = x: gradient 1, slope 45 degrees everywhere
        x = np.tile(np.arange(6, dtype=float), (6, 1))
        dem = RasterGrid(x, 1.0, -9999, CONTINUOUS)
        assert np.allclose(slope_from_elevation(dem).values, 45.0)

    def test_range(self):
        rng = np.random.default_rng(2)
        dem = RasterGrid(rng.normal(0, 50, (20, 20)), 5.0, -9999, CONTINUOUS)
        s = slope_from_elevation(dem).values
        assert np.all((s >= 0) & (s < 90))

    def test_too_small_raises(self):
        dem = RasterGrid(np.ones((2, 5)), 1.0, -9999, CONTINUOUS)
        with pytest.raises(ValueError):
            slope_from_elevation(dem)

    def test_categorical_raises(self):
        with pytest.raises(ValueError):
            slope_from_elevation(categorical([[1, 2], [3, 4]]))


class TestWhitening:
    def test_whitened_covariance_is_identity(self):
        rng = np.random.default_rng(3)
        cov = np.array([[4.0, 1.2, 0.3], [1.2, 2.0, -0.5], [0.3, -0.5, 1.0]])
        x = rng.multivariate_normal([1, -2, 5], cov, size=20000)
        w = fit_whitening(x)
        z = w.transform(x)
        assert np.allclose(np.cov(z, rowvar=False, ddof=1), np.eye(3),
                           atol=1e-10)
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-10)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(500, 2)) @ np.array([[2.0, 0.3], [0.0, 0.5]])
        w = fit_whitening(x)
        assert np.allclose(w.inverse_transform(w.transform(x)), x)

    def test_matrix_is_symmetric(self):
        rng = np.random.default_rng(5)
        w = fit_whitening(rng.normal(size=(300, 3)) * [1.0, 3.0, 0.2])
        assert np.allclose(w.matrix, w.matrix.T)

    def test_singular_covariance_raises(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=500)
        x = np.column_stack([a, 2 * a])  # perfectly collinear
        with pytest.raises(SingularCovarianceError):
            fit_whitening(x)

    def test_too_few_samples_raises(self):
        with pytest.raises(ValueError):
            fit_whitening(np.ones((3, 3)))

    def test_dict_round_trip(self):
        rng = np.random.default_rng(7)
        w = fit_whitening(rng.normal(size=(100, 2)))
        back = Whitening.from_dict(w.to_dict())
        assert np.allclose(back.mean, w.mean)
        assert np.allclose(back.matrix, w.matrix)

    def test_apply_whitening_matches_transform(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(50, 2))
        w = fit_whitening(x)
        assert np.allclose(apply_whitening(w.mean, w.matrix, x), w.transform(x))


class TestFeatureSpace:
    def test_from_grids(self):
        g1 = RasterGrid(np.arange(6.0).reshape(2, 3), 1.0, -9999, CONTINUOUS)
        g2 = RasterGrid(np.arange(6.0).reshape(2, 3) * 2, 1.0, -9999, CONTINUOUS)
        fs = FeatureSpace.from_grids([("a", g1), ("b", g2)])
        assert fs.d == 2 and fs.values.shape == (6, 2)
        assert np.allclose(fs.values[:, 1], 2 * fs.values[:, 0])

    def test_shape_mismatch_raises(self):
        g1 = RasterGrid(np.ones((2, 3)), 1.0, -9999, CONTINUOUS)
        g2 = RasterGrid(np.ones((3, 2)), 1.0, -9999, CONTINUOUS)
        with pytest.raises(ValueError):
            FeatureSpace.from_grids([("a", g1), ("b", g2)])

    def test_values_readonly(self):
        fs = FeatureSpace(("a",), np.ones((4, 1)))
        with pytest.raises(ValueError):
            fs.values[0, 0] = 2
