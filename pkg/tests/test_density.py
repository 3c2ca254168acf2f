import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lucc.density import (BinnedKde, KernelSpec, estimate_density,
                          fit_binned_kde, terrell_bandwidth)

KERNELS = [KernelSpec("box"), KernelSpec("triangle"), KernelSpec("gaussian")]


def naive_binned_estimate(kde: BinnedKde, y: np.ndarray) -> np.ndarray:
    """Direct sum of the product kernel over occupied bin centers."""
    centers = kde.centers
    out = np.zeros(len(y))
    k = kde.kernel
    for j, point in enumerate(y):
        t = (point - centers) / kde.h
        w = np.ones(len(centers))
        for dim in range(kde.d):
            w *= k.profile(t[:, dim])
        out[j] = np.sum(w * kde.counts) / (kde.n * kde.h ** kde.d)
    return out


class TestKernelSpec:
    def test_unknown_shape_rejected(self):
        with pytest.raises(ValueError):
            KernelSpec("epanechnikov")

    def test_default_support(self):
        assert KernelSpec("box").support_radius == 1.0
        assert KernelSpec("gaussian").support_radius == 4.0

    @pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.shape)
    def test_profile_integrates_to_one(self, kernel):
        t = np.linspace(-kernel.support_radius, kernel.support_radius, 200001)
        assert np.trapezoid(kernel.profile(t), t) == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.shape)
    def test_profile_symmetric(self, kernel):
        t = np.linspace(0, kernel.support_radius, 100)
        assert np.allclose(kernel.profile(t), kernel.profile(-t))

    def test_roughness_constants(self):
        assert KernelSpec("box").roughness(1) == pytest.approx(0.5)
        assert KernelSpec("triangle").roughness(1) == pytest.approx(2 / 3)
        assert KernelSpec("gaussian").roughness(1) == pytest.approx(
            1 / (2 * math.sqrt(math.pi)))

    def test_roughness_is_power_in_d(self):
        for k in KERNELS:
            assert k.roughness(3) == pytest.approx(k.roughness(1) ** 3)

    @pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.shape)
    def test_mass_fraction_full_support_is_one(self, kernel):
        c = np.array([0.0, 0.3, -0.2])
        f = kernel.mass_fraction(c, -100.0, 100.0, 1.0)
        assert np.allclose(f, 1.0)

    def test_box_mass_fraction_half(self):
        f = KernelSpec("box").mass_fraction(np.array([0.0]), 0.0, 10.0, 1.0)
        assert f[0] == pytest.approx(0.5)

    def test_dict_round_trip(self):
        k = KernelSpec("gaussian", 3.0)
        assert KernelSpec.from_dict(k.to_dict()) == k


class TestTerrellBandwidth:
    def test_matches_high_precision_closed_form(self):
        # d=1, gaussian kernel, n=1000, evaluated with 50-digit arithmetic
        mpmath.mp.dps = 50
        d, n = 1, 1000
        rough = 1 / (2 * mpmath.sqrt(mpmath.pi))
        num = mpmath.mpf(d + 8) ** (mpmath.mpf(d + 6) / 2) \
            * mpmath.pi ** (mpmath.mpf(d) / 2) * rough
        den = 16 * n * (d + 2) * mpmath.gamma(mpmath.mpf(d + 8) / 2)
        expect = (num / den) ** (mpmath.mpf(1) / (d + 4))
        got = terrell_bandwidth(n, d, KernelSpec("gaussian"))
        assert abs(got - float(expect)) / float(expect) < 1e-12

    @pytest.mark.parametrize("d", [1, 2, 3])
    @pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.shape)
    def test_matches_oracle_all_dims(self, d, kernel):
        mpmath.mp.dps = 50
        n = 4321
        rough = mpmath.mpf(repr(kernel.roughness(1))) ** d
        num = mpmath.mpf(d + 8) ** (mpmath.mpf(d + 6) / 2) \
            * mpmath.pi ** (mpmath.mpf(d) / 2) * rough
        den = 16 * n * (d + 2) * mpmath.gamma(mpmath.mpf(d + 8) / 2)
        expect = float((num / den) ** (mpmath.mpf(1) / (d + 4)))
        assert terrell_bandwidth(n, d, kernel) == pytest.approx(expect, rel=1e-12)

    def test_doubling_ratio(self):
        for d in (1, 2, 3):
            h1 = terrell_bandwidth(5000, d, KernelSpec("box"))
            h2 = terrell_bandwidth(10000, d, KernelSpec("box"))
            assert h2 / h1 == pytest.approx(2 ** (-1 / (d + 4)), rel=1e-14)

    def test_decreasing_in_n(self):
        hs = [terrell_bandwidth(n, 2, KernelSpec("box"))
              for n in (10, 100, 1000, 10000)]
        assert all(a > b for a, b in zip(hs, hs[1:]))

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            terrell_bandwidth(1, 1, KernelSpec("box"))
        with pytest.raises(ValueError):
            terrell_bandwidth(100, 0, KernelSpec("box"))


class TestFitBinnedKde:
    def test_bin_assignment_floor(self):
        kde = fit_binned_kde(np.array([[0.26], [0.24], [-0.01]]), 1.0, 4 + 1)
        # bin width 0.2: 0.26 -> bin 1, 0.24 -> bin 1, -0.01 -> bin -1
        rows = {tuple(r) for r in kde.bin_indices.tolist()}
        assert rows == {(1,), (-1,)}

    def test_tie_goes_to_upper_bin(self):
        kde = fit_binned_kde(np.array([[0.2]]), 1.0, 5)
        assert kde.bin_indices.tolist() == [[1]]

    def test_counts_sum_to_n(self):
        rng = np.random.default_rng(0)
        kde = fit_binned_kde(rng.normal(size=(500, 2)), 0.7, 11)
        assert kde.counts.sum() == 500

    def test_even_q_rejected(self):
        with pytest.raises(ValueError):
            fit_binned_kde(np.zeros((10, 1)), 1.0, 10)

    def test_nonpositive_h_rejected(self):
        with pytest.raises(ValueError):
            fit_binned_kde(np.zeros((10, 1)), 0.0, 5)

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        kde = fit_binned_kde(rng.normal(size=(300, 3)), 0.5, 7,
                             KernelSpec("triangle"))
        p = tmp_path / "model.kde"
        kde.to_file(p)
        back = BinnedKde.from_file(p)
        assert back.d == kde.d and back.h == kde.h and back.q == kde.q
        assert np.array_equal(back.bin_indices, kde.bin_indices)
        assert np.array_equal(back.counts, kde.counts)
        y = rng.normal(size=(50, 3))
        assert np.allclose(back.estimate(y), kde.estimate(y))


class TestEstimate:
    @pytest.mark.parametrize("d", [1, 2, 3])
    @pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.shape)
    def test_matches_naive_bin_sum(self, d, kernel):
        rng = np.random.default_rng(10 * d)
        pts = rng.normal(size=(400, d))
        kde = fit_binned_kde(pts, 0.8, 5, kernel)
        y = rng.normal(size=(60, d))
        got = kde.estimate(y, correct_boundary=False)
        expect = naive_binned_estimate(kde, y)
        assert np.allclose(got, expect, atol=1e-12)

    def test_integrates_to_one_2d(self):
        rng = np.random.default_rng(2)
        kde = fit_binned_kde(rng.normal(size=(4000, 2)), 0.6, 11)
        g = np.linspace(-5, 5, 121)
        xx, yy = np.meshgrid(g, g)
        vals = kde.estimate(np.column_stack([xx.reshape(-1), yy.reshape(-1)]),
                            correct_boundary=False)
        step = g[1] - g[0]
        assert vals.sum() * step * step == pytest.approx(1.0, abs=0.02)

    def test_boundary_correction_recovers_halved_mass(self):
        # data folded to [0, inf): uncorrected estimate at 0 sees half the
        # kernel mass, correction divides it back out
        rng = np.random.default_rng(3)
        pts = np.abs(rng.normal(size=(20000, 1)))
        kde = fit_binned_kde(pts, 0.3, 21)
        at0 = kde.estimate(np.array([[0.0]]), correct_boundary=True)[0]
        raw = kde.estimate(np.array([[0.0]]), correct_boundary=False)[0]
        assert at0 == pytest.approx(2 * raw, rel=0.05)
        # true half-normal density at 0 is 2*phi(0)
        assert at0 == pytest.approx(2 / math.sqrt(2 * math.pi), rel=0.1)

    def test_single_point_query(self):
        kde = fit_binned_kde(np.zeros((10, 2)), 1.0, 5)
        val = kde.estimate(np.array([0.0, 0.0]))
        assert isinstance(val, float) and val > 0

    def test_dimension_mismatch_raises(self):
        kde = fit_binned_kde(np.zeros((10, 2)), 1.0, 5)
        with pytest.raises(ValueError):
            kde.estimate(np.zeros((4, 3)))

    def test_far_query_is_zero(self):
        kde = fit_binned_kde(np.zeros((10, 1)), 1.0, 5)
        assert kde.estimate(np.array([[50.0]]), correct_boundary=False) == 0.0

    def test_estimate_density_alias(self):
        rng = np.random.default_rng(4)
        kde = fit_binned_kde(rng.normal(size=(100, 1)), 0.5, 5)
        y = np.array([[0.1], [0.2]])
        assert np.allclose(estimate_density(kde, y), kde.estimate(y))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_translation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(200, 2))
        q = 5
        h = 0.9
        # shifting by whole bins shifts the estimate exactly
        shift = h / q * 3
        a = fit_binned_kde(pts, h, q).estimate(pts[:20], correct_boundary=False)
        b = fit_binned_kde(pts + shift, h, q).estimate(
            pts[:20] + shift, correct_boundary=False)
        assert np.allclose(a, b, atol=1e-12)

    def test_mixture_linearity(self):
        # estimate of concatenated samples = weighted mixture of estimates
        rng = np.random.default_rng(5)
        a = rng.normal(0, 1, (300, 1))
        b = rng.normal(4, 1, (100, 1))
        y = rng.uniform(-2, 6, (40, 1))
        h, q = 0.7, 7
        est_ab = fit_binned_kde(np.vstack([a, b]), h, q).estimate(
            y, correct_boundary=False)
        est_a = fit_binned_kde(a, h, q).estimate(y, correct_boundary=False)
        est_b = fit_binned_kde(b, h, q).estimate(y, correct_boundary=False)
        assert np.allclose(est_ab, 0.75 * est_a + 0.25 * est_b, atol=1e-12)

    def test_larger_q_closer_to_unbinned(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(2000, 1))
        y = rng.normal(size=(200, 1))
        h = 0.5

        def unbinned(y):
            t = (y[:, None, 0] - pts[None, :, 0]) / h
            return np.where(np.abs(t) <= 1, 0.5, 0.0).sum(axis=1) / (2000 * h)

        exact = unbinned(y)
        errs = []
        for q in (3, 11, 51):
            est = fit_binned_kde(pts, h, q).estimate(y, correct_boundary=False)
            errs.append(np.abs(est - exact).max())
        assert errs[0] >= errs[1] * 0.95 and errs[1] >= errs[2] * 0.95
