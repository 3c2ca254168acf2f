"""Evaluation harness: exactly-known Gaussian transition probabilities on a
synthetic landscape, forged reference maps, and the two comparison protocols
(calibration error, and error after a full calibrate + allocate round trip).
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .allocation import PatchParams, PruningConfig, allocate, lcm_style_allocate
from .calibration import KdeConfig, TransitionModel, calibrate
from .features import FeatureSpace, distance_to_state, slope_from_elevation
from .raster import (CATEGORICAL, CONTINUOUS, RasterGrid, StateLegend,
                     TransitionMatrix)

# benchmark Gaussian parameters: diagonal variances (25^2, 10^2, 10^2) with
# correlations 0.6, 0.5 and -0.163 between (elevation, slope) and
# (elevation, distance) and (slope, distance)
BENCHMARK_MU = np.array([150.0, 0.0, 0.0])
BENCHMARK_SIGMA = np.array([[625.0, 150.0, 130.0],
                            [150.0, 100.0, -16.3],
                            [130.0, -16.3, 100.0]])
# historical parameter set whose (0,1) minor is negative; it fails the
# positive-definiteness check by construction and is kept for that error path
BENCHMARK_SIGMA_UNCORRECTED = np.array([[625.0, 843.0, 325.0],
                                        [843.0, 100.0, 25.0],
                                        [325.0, 25.0, 100.0]])
BENCHMARK_DOMAIN = np.array([[0.0, 616.0], [0.0, 15.0], [0.0, 60.0]])


@dataclass(frozen=True)
class SyntheticGroundTruth:
    """Exactly-known transition probability: amplitude-scaled Gaussian density
    restricted to a box domain, zero outside."""

    mu: np.ndarray
    sigma: np.ndarray
    domain: np.ndarray  # (d, 2) per-dimension [lo, hi]
    amplitude: float = 1.0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        domain = np.asarray(self.domain, dtype=np.float64)
        d = mu.size
        if sigma.shape != (d, d):
            raise ValueError(f"sigma must be ({d}, {d}), got {sigma.shape}")
        if not np.allclose(sigma, sigma.T):
            raise ValueError("sigma must be symmetric")
        if domain.shape != (d, 2) or np.any(domain[:, 0] >= domain[:, 1]):
            raise ValueError("domain must be (d, 2) with lo < hi per dimension")
        lam = np.linalg.eigvalsh(sigma)
        if lam[0] <= 0:
            raise ValueError(
                f"sigma is not positive definite: eigenvalue {lam[0]:.6g} <= 0")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "_inv", np.linalg.inv(sigma))
        object.__setattr__(self, "_norm",
                           (2 * np.pi) ** (-d / 2) / np.sqrt(np.linalg.det(sigma)))

    @property
    def d(self) -> int:
        return self.mu.size

    def probability(self, y: np.ndarray) -> np.ndarray:
        """P*(y) for one point or an (m, d) batch; clamped at 1 with a warning."""
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        if single:
            y = y[None, :]
        if y.shape[1] != self.d:
            raise ValueError(f"expected {self.d}-vectors, got shape {y.shape}")
        dy = y - self.mu
        quad = np.einsum("ij,jk,ik->i", dy, self._inv, dy)
        p = self.amplitude * self._norm * np.exp(-0.5 * quad)
        inside = np.all((y >= self.domain[:, 0]) & (y <= self.domain[:, 1]), axis=1)
        p = np.where(inside, p, 0.0)
        if np.any(p > 1.0):
            warnings.warn("ground-truth probability exceeds 1; clamping")
            p = np.minimum(p, 1.0)
        return float(p[0]) if single else p


def benchmark_ground_truth(peak: float = 0.5,
                           amplitude: float | None = None) -> SyntheticGroundTruth:
    """The default three-variable benchmark (elevation, slope, distance).

    peak sets the probability at the Gaussian mode; pass amplitude to scale
    the raw density directly instead.
    """
    if amplitude is None:
        d = len(BENCHMARK_MU)
        mode_density = ((2 * np.pi) ** (-d / 2)
                        / np.sqrt(np.linalg.det(BENCHMARK_SIGMA)))
        amplitude = peak / mode_density
    return SyntheticGroundTruth(BENCHMARK_MU, BENCHMARK_SIGMA,
                                BENCHMARK_DOMAIN, amplitude)


def ground_truth_probability(gt: SyntheticGroundTruth, y: np.ndarray):
    """Functional alias for SyntheticGroundTruth.probability."""
    return gt.probability(y)


def generate_synthetic_landscape(seed: int, width: int, height: int,
                                 cell_size: float = 5.0,
                                 legend: StateLegend | None = None,
                                 elevation_mean: float = 150.0,
                                 elevation_std: float = 20.0,
                                 relief_scale: float = 40.0,
                                 blob_scale: float = 1.5,
                                 active_fraction: float = 0.12
                                 ) -> tuple[RasterGrid, FeatureSpace]:
    """Seed-deterministic blob landscape with the three benchmark variables.

    The categorical map holds two states (1 inert, 2 active blobs). Elevation
    is smoothed noise rescaled to (elevation_mean, elevation_std); slope comes
    from the elevation raster; distance is to the nearest active pixel.
    relief_scale sets the smoothing length in pixels (larger = gentler slopes).
    """
    if width < 64 or height < 64:
        raise ValueError("landscape must be at least 64x64")
    legend = legend or StateLegend(((1, "inert"), (2, "active")))
    rng = np.random.default_rng(seed)

    elev = ndimage.gaussian_filter(rng.normal(size=(height, width)),
                                   relief_scale, mode="wrap")
    elev = elevation_mean + elevation_std * (elev - elev.mean()) / elev.std()
    np.clip(elev, 0.0, 616.0, out=elev)

    blob = ndimage.gaussian_filter(rng.normal(size=(height, width)),
                                   blob_scale, mode="wrap")
    thresh = np.quantile(blob, 1.0 - active_fraction)
    codes = [c for c, _ in legend.states]
    values = np.full((height, width), codes[0], dtype=np.int32)
    values[blob > thresh] = codes[1]
    if not (values == codes[1]).any():
        values[0, 0] = codes[1]

    map_t0 = RasterGrid(values, cell_size, -9999.0, CATEGORICAL)
    dem = RasterGrid(elev, cell_size, -9999.0, CONTINUOUS)
    slope = slope_from_elevation(dem)
    dist = distance_to_state(map_t0, codes[1])
    feats = FeatureSpace(("elevation", "slope", "distance"),
                         np.column_stack([elev.reshape(-1),
                                          slope.values.reshape(-1),
                                          dist.values.reshape(-1)]))
    return map_t0, feats


def ground_truth_model(map_t0: RasterGrid, features: FeatureSpace,
                       gt: SyntheticGroundTruth, u: int, v: int,
                       legend: StateLegend | None = None) -> TransitionModel:
    """Model whose probability map is P* itself, bypassing calibration.

    No densities or whitening are attached, so allocation runs without the
    periodic density refresh.
    """
    legend = legend or StateLegend(((u, f"state {u}"), (v, f"state {v}")))
    in_u = ((map_t0.values == u) & ~map_t0.mask).reshape(-1)
    if not in_u.any():
        raise ValueError(f"no pixel in state {u}")
    pstar = np.zeros(map_t0.values.size)
    pstar[in_u] = gt.probability(features.values[in_u])
    rate = float(pstar[in_u].mean())
    codes = [c for c, _ in legend.states]
    mat = np.eye(len(codes))
    iu, iv = codes.index(u), codes.index(v)
    mat[iu, iu] = 1.0 - rate
    mat[iu, iv] = rate
    prob_grid = RasterGrid(pstar.reshape(map_t0.values.shape), map_t0.cell_size,
                           -9999.0, CONTINUOUS, map_t0.xllcorner, map_t0.yllcorner)
    return TransitionModel(legend, TransitionMatrix(legend, mat), [(u, v)],
                           features.names, KdeConfig(), {}, {}, {},
                           {(u, v): prob_grid})


def forge_reference_map(map_t0: RasterGrid, features: FeatureSpace,
                        gt: SyntheticGroundTruth, u: int, v: int,
                        patch_params: PatchParams | None = None,
                        seed: int = 0) -> RasterGrid:
    """Produce a later map whose u->v transitions follow P* exactly, using the
    unpruned allocation path."""
    model = ground_truth_model(map_t0, features, gt, u, v)
    if not model.global_matrix.prob(u, v) > 0:
        return map_t0.with_values(map_t0.values.copy())
    params = {(u, v): patch_params or PatchParams()}
    return allocate(model, map_t0, features, params, seed=seed)


def mean_absolute_error(exact: np.ndarray, estimated: np.ndarray) -> float:
    exact = np.asarray(exact, dtype=np.float64)
    estimated = np.asarray(estimated, dtype=np.float64)
    if exact.shape != estimated.shape or exact.size < 1:
        raise ValueError(
            f"series shapes differ: {exact.shape} vs {estimated.shape}")
    return float(np.abs(exact - estimated).mean())


def default_calibrator(legend: StateLegend, u: int, v: int,
                       kde_config: KdeConfig | None = None):
    """Calibrator closure for the comparison protocols: maps a dated pair to
    the estimated probability raster for u->v (and the fitted model)."""
    cfg = kde_config or KdeConfig()

    def run(map_a: RasterGrid, map_b: RasterGrid, features: FeatureSpace):
        model = calibrate(map_a, map_b, features, legend, [(u, v)], cfg)
        return model.prob_maps[(u, v)], model
    return run


def run_calibration_comparison(map_t0: RasterGrid, map_t1: RasterGrid,
                               features: FeatureSpace, gt: SyntheticGroundTruth,
                               calibrator, u: int, v: int):
    """Mean absolute error of the calibrated estimate against P* over all
    state-u pixels of map_t0. Returns (error, prob_map_hat, model)."""
    in_u = ((map_t0.values == u) & ~map_t0.mask).reshape(-1)
    if not in_u.any():
        raise ValueError(f"no pixel in state {u}")
    prob_hat, model = calibrator(map_t0, map_t1, features)
    exact = gt.probability(features.values[in_u])
    eps = mean_absolute_error(exact, prob_hat.values.reshape(-1)[in_u])
    return eps, prob_hat, model


def patch_allocator(u: int, v: int, patch_params: PatchParams | None = None,
                    pruning: PruningConfig | None = None,
                    pruning_model: TransitionModel | None = None):
    """Allocator closure (map_in, prob_map, features, seed) -> map_out that
    enforces the given probability raster with the patch loop.

    Strategies that rank by p(y|u,v) need the fitted model that owns those
    densities (pruning_model)."""
    pruning = pruning or PruningConfig()

    def run(map_in: RasterGrid, prob_map: RasterGrid, features: FeatureSpace,
            seed: int) -> RasterGrid:
        in_u = ((map_in.values == u) & ~map_in.mask).reshape(-1)
        rate = float(prob_map.values.reshape(-1)[in_u].mean())
        if pruning.strategy == "lcm_rank":
            if pruning_model is None:
                raise ValueError("lcm_rank needs the fitted model")
            target = int(round(rate * in_u.sum()))
            return lcm_style_allocate(pruning_model, map_in, features, u, v, target)
        if pruning.strategy == "unbiased_sample" and pruning_model is None:
            raise ValueError("unbiased_sample needs the fitted model")
        model = _model_with_prob(map_in, features, prob_map, u, v, rate,
                                 pruning_model)
        params = {(u, v): patch_params or PatchParams()}
        return allocate(model, map_in, features, params, pruning=pruning,
                        seed=seed)
    return run


def _model_with_prob(map_in, features, prob_map, u, v, rate, donor):
    legend = donor.legend if donor is not None else \
        StateLegend(((u, f"state {u}"), (v, f"state {v}")))
    codes = [c for c, _ in legend.states]
    mat = np.eye(len(codes))
    iu, iv = codes.index(u), codes.index(v)
    mat[iu, iu] = 1.0 - rate
    mat[iu, iv] = rate
    return TransitionModel(
        legend, TransitionMatrix(legend, mat), [(u, v)], features.names,
        donor.kde_config if donor is not None else KdeConfig(),
        donor.whitening if donor is not None else {},
        donor.density_u if donor is not None else {},
        donor.density_uv if donor is not None else {},
        {(u, v): prob_map})


def derived_seed(base_seed: int, i: int) -> int:
    return int(np.random.SeedSequence((base_seed, i)).generate_state(1)[0])


def run_full_comparison(map_t1: RasterGrid, prob_map_hat: RasterGrid,
                        features: FeatureSpace, gt: SyntheticGroundTruth,
                        allocator, calibrator, R: int, u: int, v: int,
                        base_seed: int = 0, return_reps: bool = False):
    """Allocate t1 -> t2 under the calibrated probabilities, re-calibrate from
    the pair, and score the post-allocation estimate against P*.

    Errors are taken over the state-u pixels of map_t1. eps_tot is the first
    repetition's error; eps_tot_R is the error of the estimate averaged over
    all R repetitions.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    in_u = ((map_t1.values == u) & ~map_t1.mask).reshape(-1)
    exact = gt.probability(features.values[in_u])
    acc = np.zeros(int(in_u.sum()))
    eps_tot = None
    reps = []
    for i in range(R):
        t2 = allocator(map_t1, prob_map_hat, features, derived_seed(base_seed, i))
        p_post, _ = calibrator(map_t1, t2, features)
        vals = p_post.values.reshape(-1)[in_u]
        acc += vals
        eps_i = mean_absolute_error(exact, vals)
        if i == 0:
            eps_tot = eps_i
        if return_reps:
            reps.append(eps_i)
    eps_tot_r = mean_absolute_error(exact, acc / R)
    if return_reps:
        return eps_tot, eps_tot_r, reps
    return eps_tot, eps_tot_r


def one_dimensional_cut(prob_fn, fixed: dict[int, float], axis: int,
                        grid: np.ndarray) -> np.ndarray:
    """Evaluate prob_fn along one variable with the others pinned.

    fixed maps dimension index -> pinned value for every dimension but axis.
    Returns an (len(grid), 2) array of (abscissa, probability).
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("grid must be non-empty")
    d = len(fixed) + 1
    if not 0 <= axis < d:
        raise ValueError(f"axis {axis} out of range for d={d}")
    if axis in fixed:
        raise ValueError(f"axis {axis} is also pinned")
    if sorted(set(fixed) | {axis}) != list(range(d)):
        raise ValueError("fixed must pin every dimension except axis")
    y = np.empty((len(grid), d))
    for k, val in fixed.items():
        y[:, k] = val
    y[:, axis] = grid
    p = np.asarray(prob_fn(y), dtype=np.float64)
    return np.column_stack([grid, p])


@dataclass
class EvaluationReport:
    """Bundle of comparison scores, diagnostics and runtimes."""

    epsilon_calib: float
    epsilon_tot: float
    epsilon_tot_r: float
    r: int
    m: int
    max_abs_diff: float
    n_within_tol: int
    runtimes: dict = field(default_factory=dict)
    cuts: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("epsilon_calib", "epsilon_tot", "epsilon_tot_r"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_json(self) -> str:
        obj = {
            "epsilon_calib": self.epsilon_calib,
            "epsilon_tot": self.epsilon_tot,
            "epsilon_tot_R": self.epsilon_tot_r,
            "R": self.r,
            "m": self.m,
            "max_abs_diff": self.max_abs_diff,
            "n_within_tol": self.n_within_tol,
            "runtimes_s": self.runtimes,
            "cuts": [{"axis": c["axis"], "fixed": c["fixed"],
                      "series": np.asarray(c["series"]).tolist()}
                     for c in self.cuts],
        }
        return json.dumps(obj, indent=1)


def evaluate_pipeline(seed: int, width: int = 256, height: int = 256,
                      peak: float = 0.5, r: int = 20,
                      patch_params: PatchParams | None = None,
                      kde_config: KdeConfig | None = None,
                      cut_specs: list | None = None) -> EvaluationReport:
    """End-to-end run of both comparison protocols on a fresh landscape."""
    gt = benchmark_ground_truth(peak)
    t_start = time.perf_counter()
    map_t0, feats = generate_synthetic_landscape(seed, width, height)
    u, v = 1, 2
    legend = StateLegend(((1, "inert"), (2, "active")))
    t1 = forge_reference_map(map_t0, feats, gt, u, v,
                             patch_params, derived_seed(seed, 1000))
    t_forge = time.perf_counter()
    calibrator = default_calibrator(legend, u, v, kde_config)
    eps_calib, prob_hat, model = run_calibration_comparison(
        map_t0, t1, feats, gt, calibrator, u, v)
    t_calib = time.perf_counter()
    allocator = patch_allocator(u, v, patch_params)
    eps_tot, eps_tot_r = run_full_comparison(
        t1, prob_hat, feats, gt, allocator, calibrator, r, u, v, seed)
    t_full = time.perf_counter()

    in_u = ((map_t0.values == u) & ~map_t0.mask).reshape(-1)
    exact = gt.probability(feats.values[in_u])
    est = prob_hat.values.reshape(-1)[in_u]
    diffs = np.abs(exact - est)

    cuts = []
    for spec in cut_specs or []:
        fixed, axis, grid = spec["fixed"], spec["axis"], np.asarray(spec["grid"])
        series_exact = one_dimensional_cut(gt.probability, fixed, axis, grid)
        wh = model.whitening[u]

        def est_fn(y):
            zw = wh.transform(y)
            p_uv = model.density_uv[(u, v)].estimate(zw)
            p_u = model.density_u[u].estimate(zw)
            from .calibration import bayes_transition_probability
            return bayes_transition_probability(
                model.global_matrix.prob(u, v), p_uv, p_u)
        series_est = one_dimensional_cut(est_fn, fixed, axis, grid)
        cuts.append({"axis": axis, "fixed": fixed,
                     "series": np.column_stack([grid, series_exact[:, 1],
                                                series_est[:, 1]])})

    return EvaluationReport(
        eps_calib, eps_tot, eps_tot_r, r, int(in_u.sum()),
        float(diffs.max()), int((diffs <= 1e-3).sum()),
        {"forge": t_forge - t_start, "calibrate": t_calib - t_forge,
         "full_comparison": t_full - t_calib}, cuts)
