"""Explanatory-variable rasters (distance-to-state, slope) and the whitening
transform that maps per-pixel feature tuples to zero mean / identity covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.linalg import eigh

from .raster import CATEGORICAL, CONTINUOUS, RasterGrid


class SingularCovarianceError(ValueError):
    """Raised when the feature covariance is numerically singular."""


def distance_to_state(grid: RasterGrid, target_state: int) -> RasterGrid:
    """Exact Euclidean distance (in length units) to the nearest target_state pixel.

    Uses the exact two-pass envelope distance transform; target pixels get 0 and
    nodata pixels are carried through as nodata.
    """
    if grid.kind != CATEGORICAL:
        raise ValueError("distance_to_state requires a categorical grid")
    target = grid.values == target_state
    if not target.any():
        raise ValueError(f"no pixel holds state {target_state}")
    # pixel-unit transform first, then scale: keeps sqrt(integer) exact so the
    # result matches the all-pairs brute force bit for bit
    dist = ndimage.distance_transform_edt(~target)
    dist = np.asarray(dist, dtype=np.float64) * grid.cell_size
    nodata = -9999.0
    dist[grid.mask] = nodata
    return RasterGrid(dist, grid.cell_size, nodata, CONTINUOUS,
                      grid.xllcorner, grid.yllcorner)


def slope_from_elevation(dem: RasterGrid) -> RasterGrid:
    """Slope in degrees from a continuous elevation grid.

    Interior pixels use the 3x3 Horn-weighted stencil; edge pixels fall back to
    one-sided differences. Values lie in [0, 90).
    """
    if dem.kind != CONTINUOUS:
        raise ValueError("slope_from_elevation requires a continuous grid")
    z = dem.values
    if z.shape[0] < 3 or z.shape[1] < 3:
        raise ValueError(f"grid must be at least 3x3, got {z.shape}")
    cs = dem.cell_size

    # one-sided/central fallback everywhere, Horn stencil on the interior
    dzdy, dzdx = np.gradient(z, cs)
    gx = dzdx.copy()
    gy = dzdy.copy()
    gx[1:-1, 1:-1] = ((z[:-2, 2:] + 2 * z[1:-1, 2:] + z[2:, 2:])
                      - (z[:-2, :-2] + 2 * z[1:-1, :-2] + z[2:, :-2])) / (8 * cs)
    gy[1:-1, 1:-1] = ((z[2:, :-2] + 2 * z[2:, 1:-1] + z[2:, 2:])
                      - (z[:-2, :-2] + 2 * z[:-2, 1:-1] + z[:-2, 2:])) / (8 * cs)
    slope = np.degrees(np.arctan(np.hypot(gx, gy)))
    return RasterGrid(slope, cs, -9999.0, CONTINUOUS, dem.xllcorner, dem.yllcorner)


@dataclass(frozen=True)
class Whitening:
    """ZCA whitening: x -> W (x - mean), with W = Cov^(-1/2) symmetric PD."""

    mean: np.ndarray
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=np.float64))
        if self.matrix.shape != (self.mean.size, self.mean.size):
            raise ValueError("whitener shape does not match mean dimension")

    @property
    def d(self) -> int:
        return self.mean.size

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise ValueError(f"expected {self.d}-vectors, got shape {x.shape}")
        return (x - self.mean) @ self.matrix.T

    def inverse_transform(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return y @ np.linalg.inv(self.matrix).T + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "matrix": self.matrix.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "Whitening":
        return cls(np.array(obj["mean"]), np.array(obj["matrix"]))


def fit_whitening(features: np.ndarray) -> Whitening:
    """Fit the ZCA transform W = Cov^(-1/2) on an (m, d) feature table.

    Eigenvalues are sorted descending for determinism. Raises
    SingularCovarianceError naming the near-null-space direction when the
    smallest eigenvalue is below 1e-12 of the largest.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    m, d = x.shape
    if m < d + 1:
        raise ValueError(f"need at least d+1={d + 1} samples, got {m}")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1).reshape(d, d)
    lam, vec = eigh(cov)
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    vec = vec[:, order]
    if lam[-1] <= 1e-12 * lam[0]:
        raise SingularCovarianceError(
            f"covariance is numerically singular along direction {vec[:, -1].tolist()} "
            f"(eigenvalue {lam[-1]:.3e} vs largest {lam[0]:.3e})")
    w = (vec * (1.0 / np.sqrt(lam))) @ vec.T
    return Whitening(mean, w)


def apply_whitening(mean: np.ndarray, whitener: np.ndarray, x: np.ndarray) -> np.ndarray:
    """W (x - mean) for a single vector or an (m, d) batch."""
    return Whitening(mean, whitener).transform(x)


@dataclass(frozen=True)
class FeatureSpace:
    """Per-pixel explanatory variable tuples, row-aligned with the flattened map."""

    names: tuple[str, ...]
    values: np.ndarray  # (n_pixels, d)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != len(self.names):
            raise ValueError(
                f"values must be (n_pixels, {len(self.names)}), got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def d(self) -> int:
        return len(self.names)

    @classmethod
    def from_grids(cls, named_grids: list[tuple[str, RasterGrid]]) -> "FeatureSpace":
        names = tuple(n for n, _ in named_grids)
        cols = [g.values.reshape(-1) for _, g in named_grids]
        shapes = {g.values.shape for _, g in named_grids}
        if len(shapes) != 1:
            raise ValueError(f"feature grids have mismatched shapes: {shapes}")
        return cls(names, np.column_stack(cols))
