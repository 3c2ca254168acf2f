"""Hybrid binned kernel density estimation in whitened space.

Points are aggregated on a lattice of width h/q (q odd, half-open bins with the
origin at 0, ties to the upper bin) and the kernel is applied to the occupied
bins. Bandwidths come from the Terrell maximal-smoothing rule.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import _fastpath
from ._fastpath import KERNEL_BOX, KERNEL_GAUSSIAN, KERNEL_TRIANGLE

_SHAPES = {
    "box": (KERNEL_BOX, 1.0, 0.5),
    "triangle": (KERNEL_TRIANGLE, 1.0, 2.0 / 3.0),
    "gaussian": (KERNEL_GAUSSIAN, 4.0, 1.0 / (2.0 * math.sqrt(math.pi))),
}


@dataclass(frozen=True)
class KernelSpec:
    """Product kernel: shape, support radius (bandwidth units) and the 1-d
    roughness constant ∫K². The gaussian is truncated at its support radius and
    renormalized so it still integrates to 1."""

    shape: str = "box"
    support_radius: float | None = None

    def __post_init__(self):
        if self.shape not in _SHAPES:
            raise ValueError(f"unknown kernel shape {self.shape!r}")
        if self.support_radius is None:
            object.__setattr__(self, "support_radius", _SHAPES[self.shape][1])
        if self.support_radius <= 0:
            raise ValueError("support_radius must be > 0")
        t = np.linspace(-self.support_radius, self.support_radius, 20001)
        integral = np.trapezoid(self.profile(t), t)
        if abs(integral - 1.0) > 1e-6:
            raise ValueError(
                f"kernel {self.shape!r} integrates to {integral!r}, not 1")

    @property
    def code(self) -> int:
        return _SHAPES[self.shape][0]

    def roughness(self, d: int) -> float:
        """∫K² of the d-variate product kernel (analytic 1-d constants)."""
        return _SHAPES[self.shape][2] ** d

    @property
    def _gauss_renorm(self) -> float:
        return 1.0 / (2.0 * float(ndtr(self.support_radius)) - 1.0)

    def profile(self, t: np.ndarray) -> np.ndarray:
        """Normalized 1-d kernel K(t) on the support, 0 outside."""
        t = np.asarray(t, dtype=np.float64)
        a = np.abs(t)
        if self.shape == "box":
            return np.where(a <= self.support_radius, 0.5, 0.0)
        if self.shape == "triangle":
            return np.clip(1.0 - a, 0.0, None)
        w = np.exp(-0.5 * t * t) / math.sqrt(2 * math.pi) * self._gauss_renorm
        return np.where(a <= self.support_radius, w, 0.0)

    def mass_fraction(self, center: np.ndarray, lo: float, hi: float, h: float) -> np.ndarray:
        """Fraction of 1-d kernel mass (center, bandwidth h) inside [lo, hi]."""
        c = np.asarray(center, dtype=np.float64)
        if self.shape == "box":
            left = np.maximum(lo, c - h)
            right = np.minimum(hi, c + h)
            return np.clip(right - left, 0.0, None) / (2 * h)
        if self.shape == "triangle":
            return _triangle_cdf((hi - c) / h) - _triangle_cdf((lo - c) / h)
        r = self.support_radius
        a = np.clip((lo - c) / h, -r, r)
        b = np.clip((hi - c) / h, -r, r)
        return (ndtr(b) - ndtr(a)) * self._gauss_renorm

    def to_dict(self) -> dict:
        return {"shape": self.shape, "support_radius": self.support_radius}

    @classmethod
    def from_dict(cls, obj: dict) -> "KernelSpec":
        return cls(obj["shape"], obj.get("support_radius"))


def _triangle_cdf(t: np.ndarray) -> np.ndarray:
    t = np.clip(np.asarray(t, dtype=np.float64), -1.0, 1.0)
    return np.where(t < 0, 0.5 * (1 + t) ** 2, 1 - 0.5 * (1 - t) ** 2)


def terrell_bandwidth(n: int, d: int, kernel: KernelSpec) -> float:
    """Terrell maximal-smoothing bandwidth for unit-variance data.

    h = [ (d+8)^((d+6)/2) pi^(d/2) ∫K² / (16 n (d+2) Γ((d+8)/2)) ]^(1/(d+4)),
    strictly decreasing in n: h(2n)/h(n) = 2^(-1/(d+4)).
    """
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    if d < 1:
        raise ValueError(f"need d >= 1, got {d}")
    log_num = (0.5 * (d + 6) * math.log(d + 8)
               + 0.5 * d * math.log(math.pi)
               + math.log(kernel.roughness(d)))
    log_den = math.log(16.0) + math.log(n) + math.log(d + 2) + math.lgamma(0.5 * (d + 8))
    return math.exp((log_num - log_den) / (d + 4))


@dataclass(frozen=True)
class BinnedKde:
    """Fitted hybrid binned KDE: sparse bin-count table plus kernel/bandwidth.

    Immutable; estimate() is deterministic and safe for concurrent callers.
    """

    d: int
    h: float
    q: int
    kernel: KernelSpec
    bin_indices: np.ndarray  # (B, d) int64
    counts: np.ndarray       # (B,) int64
    n: int
    bounds: np.ndarray       # (d, 2) observed [lo, hi] per dimension

    def __post_init__(self):
        for name, arr, dtype in (("bin_indices", self.bin_indices, np.int64),
                                 ("counts", self.counts, np.int64),
                                 ("bounds", self.bounds, np.float64)):
            a = np.ascontiguousarray(arr, dtype=dtype)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.counts.sum() != self.n:
            raise ValueError("bin counts do not sum to n")

    @property
    def bin_width(self) -> float:
        return self.h / self.q

    @property
    def centers(self) -> np.ndarray:
        return (self.bin_indices + 0.5) * self.bin_width

    def estimate(self, y: np.ndarray, correct_boundary: bool = True) -> np.ndarray:
        """Density per unit (whitened) volume at one point or an (m, d) batch."""
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        if single:
            y = y[None, :]
        if y.shape[1] != self.d:
            raise ValueError(f"expected {self.d}-vectors, got shape {y.shape}")
        raw = self._raw_estimate(y)
        if correct_boundary:
            w = np.ones(len(y))
            for k in range(self.d):
                w *= self.kernel.mass_fraction(
                    y[:, k], self.bounds[k, 0], self.bounds[k, 1], self.h)
            out = np.where(w > 1e-9, raw / np.maximum(w, 1e-9), raw)
        else:
            out = raw
        return float(out[0]) if single else out

    def _raw_estimate(self, y: np.ndarray) -> np.ndarray:
        delta = self.bin_width
        qu = np.floor(y / delta + 0.5).astype(np.int64)
        shape = self.kernel.shape
        if shape == "box" and self.d <= 3:
            counts = _fastpath.box_lattice_counts(self.bin_indices, self.counts, qu, self.q)
            return counts / (self.n * (2 * self.h) ** self.d)
        support_bins = int(math.ceil(self.kernel.support_radius * self.q))
        acc = _fastpath.cell_eval(self.bin_indices, self.counts, y, qu, self.q,
                                  delta, self.h, self.kernel.code, support_bins,
                                  self.kernel.support_radius)
        if shape == "box":
            return acc / (self.n * (2 * self.h) ** self.d)
        if shape == "triangle":
            return acc / (self.n * self.h ** self.d)
        norm = (self.kernel._gauss_renorm / math.sqrt(2 * math.pi)) ** self.d
        return acc * norm / (self.n * self.h ** self.d)

    def to_file(self, path) -> None:
        """JSON header at path, binary payload sidecar at path + '.bin'."""
        path = Path(path)
        payload = path.with_name(path.name + ".bin")
        header = {
            "d": self.d, "h": self.h, "q": self.q, "n": self.n,
            "kernel": self.kernel.to_dict(),
            "bounds": self.bounds.tolist(),
            "bins": int(len(self.counts)),
            "payload": payload.name,
        }
        with open(path, "w") as f:
            json.dump(header, f, indent=1)
        with open(payload, "wb") as f:
            f.write(self.bin_indices.astype("<i8").tobytes())
            f.write(self.counts.astype("<i8").tobytes())

    @classmethod
    def from_file(cls, path) -> "BinnedKde":
        path = Path(path)
        with open(path) as f:
            header = json.load(f)
        payload = path.with_name(header["payload"])
        b, d = header["bins"], header["d"]
        with open(payload, "rb") as f:
            idx = np.frombuffer(f.read(8 * b * d), dtype="<i8").reshape(b, d)
            counts = np.frombuffer(f.read(8 * b), dtype="<i8")
        return cls(d, header["h"], header["q"], KernelSpec.from_dict(header["kernel"]),
                   idx, counts, header["n"], np.array(header["bounds"]))


def fit_binned_kde(points: np.ndarray, h: float, q: int,
                   kernel: KernelSpec | None = None,
                   bounds: np.ndarray | None = None) -> BinnedKde:
    """Aggregate points on the h/q lattice (floor(y/bin_width), ties upward).

    bounds, when given, replaces the sample's observed per-dimension range for
    the boundary-mass correction. Pass the support of the underlying variable
    when the sample is only a thin subset of it; otherwise a small concentrated
    sample mistakes its own extent for the support and the correction inflates
    every tail estimate.
    """
    if kernel is None:
        kernel = KernelSpec()
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n, d = pts.shape
    if n < 1:
        raise ValueError("need at least one point")
    if h <= 0:
        raise ValueError(f"bandwidth must be > 0, got {h}")
    if q < 3 or q % 2 == 0:
        raise ValueError(f"q must be an odd integer >= 3, got {q}")
    delta = h / q
    idx = np.floor(pts / delta).astype(np.int64)
    uidx, counts = _unique_rows(idx)
    if bounds is None:
        bounds = np.column_stack([pts.min(axis=0), pts.max(axis=0)])
    else:
        bounds = np.asarray(bounds, dtype=np.float64)
        if bounds.shape != (d, 2):
            raise ValueError(f"bounds must have shape ({d}, 2), got {bounds.shape}")
    return BinnedKde(d, float(h), int(q), kernel, uidx, counts, n, bounds)


def _unique_rows(idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique rows with counts; packs to a single int64 key when ranges allow."""
    lo = idx.min(axis=0)
    span = idx.max(axis=0) - lo + 1
    if np.prod(span.astype(np.float64)) < 2 ** 62:
        key = np.zeros(len(idx), dtype=np.int64)
        for k in range(idx.shape[1]):
            key = key * span[k] + (idx[:, k] - lo[k])
        ukey, counts = np.unique(key, return_counts=True)
        rows = np.empty((len(ukey), idx.shape[1]), dtype=np.int64)
        rem = ukey.copy()
        for k in range(idx.shape[1] - 1, -1, -1):
            rows[:, k] = rem % span[k] + lo[k]
            rem //= span[k]
        return rows, counts
    rows, counts = np.unique(idx, axis=0, return_counts=True)
    return rows, counts


def estimate_density(kde: BinnedKde, y: np.ndarray):
    """Functional alias for BinnedKde.estimate."""
    return kde.estimate(y)
