"""Per-pixel transition probability estimation: whitened hybrid binned KDE for
p(y|u) and p(y|u,v), combined through Bayes rule with the global rate P(v|u)."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .density import BinnedKde, KernelSpec, fit_binned_kde, terrell_bandwidth
from .features import FeatureSpace, Whitening, fit_whitening
from .raster import (CONTINUOUS, RasterGrid, StateLegend, TransitionMatrix,
                     GridDimensionError, observed_transition_matrix,
                     read_ascii_grid, read_matrix_csv, write_ascii_grid,
                     write_matrix_csv)

DENSITY_FLOOR = 1e-12


@dataclass(frozen=True)
class CalibrationSet:
    """Feature tuples of the pixels that transited u -> v and of all state-u pixels."""

    u: int
    v: int
    z_transited: np.ndarray  # (n, d)
    z_state_u: np.ndarray    # (N, d)

    @property
    def n(self) -> int:
        return len(self.z_transited)

    @property
    def N(self) -> int:
        return len(self.z_state_u)


@dataclass(frozen=True)
class KdeConfig:
    q: int = 51
    kernel: KernelSpec = field(default_factory=KernelSpec)
    bandwidth_override: float | None = None

    def __post_init__(self):
        if self.q < 3 or self.q % 2 == 0:
            raise ValueError(f"q must be an odd integer >= 3, got {self.q}")


def extract_calibration_set(map_t0: RasterGrid, map_t1: RasterGrid,
                            features: FeatureSpace, u: int, v: int) -> CalibrationSet:
    """Collect feature tuples of u->v transited pixels and of all u pixels at t0;
    nodata pixels on either map are excluded."""
    if map_t0.values.shape != map_t1.values.shape:
        raise GridDimensionError("calibration maps are not aligned")
    if features.values.shape[0] != map_t0.values.size:
        raise GridDimensionError("features are not row-aligned with the maps")
    valid = ~(map_t0.mask | map_t1.mask)
    in_u = (map_t0.values == u) & valid
    if not in_u.any():
        raise ValueError(f"no pixel in state {u} at t0")
    transited = in_u & (map_t1.values == v)
    return CalibrationSet(u, v,
                          features.values[transited.reshape(-1)],
                          features.values[in_u.reshape(-1)])


def bayes_transition_probability(p_vu, p_y_uv, p_y_u,
                                 density_floor: float = DENSITY_FLOOR):
    """clamp(P(v|u) * p(y|u,v) / p(y|u), 0, 1); zero where p(y|u) is unsupported."""
    p_vu = np.asarray(p_vu, dtype=np.float64)
    p_y_uv = np.asarray(p_y_uv, dtype=np.float64)
    p_y_u = np.asarray(p_y_u, dtype=np.float64)
    if np.any(p_vu < 0) or np.any(p_vu > 1):
        raise ValueError("P(v|u) must lie in [0, 1]")
    if np.any(p_y_uv < 0) or np.any(p_y_u < 0):
        raise ValueError("densities must be non-negative")
    supported = p_y_u > density_floor
    ratio = np.divide(p_y_uv, p_y_u, out=np.zeros_like(p_y_u + p_y_uv),
                      where=supported)
    out = np.where(supported, np.clip(p_vu * ratio, 0.0, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class TransitionModel:
    """Calibrated model: global matrix, per-state densities and whitening, and
    per-transition probability rasters over all evaluation pixels."""

    legend: StateLegend
    global_matrix: TransitionMatrix
    transitions: list[tuple[int, int]]
    feature_names: tuple[str, ...]
    kde_config: KdeConfig
    whitening: dict[int, Whitening]
    density_u: dict[int, BinnedKde]
    density_uv: dict[tuple[int, int], BinnedKde]
    prob_maps: dict[tuple[int, int], RasterGrid]

    def states_of_interest(self) -> list[int]:
        return sorted({u for u, _ in self.transitions})

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_matrix_csv(self.global_matrix, directory / "matrix.csv")
        for u, kde in self.density_u.items():
            kde.to_file(directory / f"density_u_{u}.kde")
        for (u, v), kde in self.density_uv.items():
            kde.to_file(directory / f"density_uv_{u}_{v}.kde")
        for (u, v), grid in self.prob_maps.items():
            write_ascii_grid(grid, directory / f"prob_{u}_{v}.asc")
        manifest = {
            "legend": [[c, l] for c, l in self.legend.states],
            "transitions": [list(t) for t in self.transitions],
            "feature_names": list(self.feature_names),
            "kde": {"q": self.kde_config.q,
                    "kernel": self.kde_config.kernel.to_dict(),
                    "bandwidth_override": self.kde_config.bandwidth_override},
            "whitening": {str(u): w.to_dict() for u, w in self.whitening.items()},
        }
        with open(directory / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=1)

    @classmethod
    def load(cls, directory) -> "TransitionModel":
        directory = Path(directory)
        with open(directory / "manifest.json") as f:
            manifest = json.load(f)
        legend = StateLegend(tuple((c, l) for c, l in manifest["legend"]))
        transitions = [tuple(t) for t in manifest["transitions"]]
        kde_cfg = KdeConfig(manifest["kde"]["q"],
                            KernelSpec.from_dict(manifest["kde"]["kernel"]),
                            manifest["kde"]["bandwidth_override"])
        whitening = {int(u): Whitening.from_dict(w)
                     for u, w in manifest["whitening"].items()}
        density_u = {}
        density_uv = {}
        prob_maps = {}
        for u in {t[0] for t in transitions}:
            p = directory / f"density_u_{u}.kde"
            if p.exists():
                density_u[u] = BinnedKde.from_file(p)
        for u, v in transitions:
            p = directory / f"density_uv_{u}_{v}.kde"
            if p.exists():
                density_uv[(u, v)] = BinnedKde.from_file(p)
            prob_maps[(u, v)] = read_ascii_grid(
                directory / f"prob_{u}_{v}.asc", kind=CONTINUOUS)
        matrix = read_matrix_csv(directory / "matrix.csv", legend)
        return cls(legend, matrix, transitions, tuple(manifest["feature_names"]),
                   kde_cfg, whitening, density_u, density_uv, prob_maps)


def transited_sample_bandwidth(zw: np.ndarray, q_cfg: KdeConfig) -> float:
    """Terrell bandwidth for a whitened sample, scaled by the sample's own
    spread (geometric-mean per-dimension standard deviation)."""
    n, d = zw.shape
    h = terrell_bandwidth(n, d, q_cfg.kernel)
    stds = zw.std(axis=0, ddof=1)
    scale = float(np.exp(np.mean(np.log(np.maximum(stds, 1e-12)))))
    if not np.isfinite(scale) or scale < 1e-6:
        scale = 1.0
    return h * scale


def calibrate(map_t0: RasterGrid, map_t1: RasterGrid, features: FeatureSpace,
              legend: StateLegend, transitions: list[tuple[int, int]],
              kde_config: KdeConfig | None = None,
              scenario_matrix: TransitionMatrix | None = None) -> TransitionModel:
    """Fit the full transition model from two dated maps.

    For each initial state u: whitening is fitted on the state-u pixel features
    and reused for both densities; bandwidths follow the Terrell rule at each
    estimator's own sample size; Bayes rule is evaluated at every state-u pixel
    and per-pixel sums over v are renormalized to stay <= 1.
    """
    cfg = kde_config or KdeConfig()
    matrix = scenario_matrix or observed_transition_matrix(map_t0, map_t1, legend)
    d = features.d
    valid = ~(map_t0.mask | map_t1.mask)

    whitening: dict[int, Whitening] = {}
    density_u: dict[int, BinnedKde] = {}
    density_uv: dict[tuple[int, int], BinnedKde] = {}
    prob_maps: dict[tuple[int, int], RasterGrid] = {}
    shape = map_t0.values.shape

    by_state: dict[int, list[int]] = {}
    for u, v in transitions:
        by_state.setdefault(u, []).append(v)

    for u, vs in by_state.items():
        in_u = (map_t0.values == u) & valid
        if not in_u.any():
            raise ValueError(f"no pixel in state {u} at t0")
        flat_u = in_u.reshape(-1)
        z_u = features.values[flat_u]
        wh = fit_whitening(z_u)
        whitening[u] = wh
        zw_u = wh.transform(z_u)
        n_state = len(zw_u)
        h_u = cfg.bandwidth_override or terrell_bandwidth(n_state, d, cfg.kernel)
        kde_u = fit_binned_kde(zw_u, h_u, cfg.q, cfg.kernel)
        density_u[u] = kde_u
        p_u = kde_u.estimate(zw_u)

        probs_v = {}
        for v in vs:
            transited = in_u & (map_t1.values == v)
            z_uv = features.values[transited.reshape(-1)]
            n = len(z_uv)
            if n < 2:
                warnings.warn(f"transition {u}->{v} has {n} transited pixels; "
                              f"probability map is all zero")
                probs_v[v] = np.zeros(n_state)
                continue
            zw_uv = wh.transform(z_uv)
            h_uv = cfg.bandwidth_override or transited_sample_bandwidth(zw_uv, cfg)
            # the transited cloud lives on the same whitened support as the
            # full state-u sample; reusing those bounds keeps the boundary
            # correction from treating the cloud's own edge as a hard border
            kde_uv = fit_binned_kde(zw_uv, h_uv, cfg.q, cfg.kernel,
                                    bounds=kde_u.bounds)
            density_uv[(u, v)] = kde_uv
            p_uv = kde_uv.estimate(zw_u)
            probs_v[v] = bayes_transition_probability(matrix.prob(u, v), p_uv, p_u)

        # per-pixel renormalization so the off-diagonal sum stays <= 1
        if len(probs_v) > 1:
            total = np.sum(list(probs_v.values()), axis=0)
            excess = total > 1.0
            if excess.any():
                scale = np.where(excess, 1.0 / np.maximum(total, 1.0), 1.0)
                probs_v = {v: p * scale for v, p in probs_v.items()}

        for v, p in probs_v.items():
            grid = np.zeros(shape[0] * shape[1])
            grid[flat_u] = p
            prob_maps[(u, v)] = RasterGrid(grid.reshape(shape), map_t0.cell_size,
                                           -9999.0, CONTINUOUS,
                                           map_t0.xllcorner, map_t0.yllcorner)

    return TransitionModel(legend, matrix, list(transitions), features.names,
                           cfg, whitening, density_u, density_uv, prob_maps)
