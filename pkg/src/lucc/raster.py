"""Raster data model and I/O: categorical LULC grids, continuous grids,
ESRI-style ASCII interchange, a binary twin format, and transition matrices."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ASCII_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")
BINARY_MAGIC = b"LUCC"

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"


class GridParseError(ValueError):
    """Raised when a grid file does not conform to the expected format."""


class GridDimensionError(ValueError):
    """Raised when grid dimensions are inconsistent (header vs payload, or map vs map)."""


@dataclass(frozen=True)
class RasterGrid:
    """Rectangular pixel grid, either categorical state codes or continuous values.

    values is a row-major (height, width) array with origin at the top-left.
    Grids are immutable after construction and safe to share across threads.
    """

    values: np.ndarray
    cell_size: float = 1.0
    nodata: float = -9999
    kind: str = CATEGORICAL
    xllcorner: float = 0.0
    yllcorner: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise GridDimensionError(f"values must be 2-d, got shape {v.shape}")
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be > 0, got {self.cell_size}")
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        dtype = np.int32 if self.kind == CATEGORICAL else np.float64
        v = np.ascontiguousarray(v, dtype=dtype)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def mask(self) -> np.ndarray:
        """Boolean array, True where the pixel is nodata."""
        return self.values == np.asarray(self.nodata, dtype=self.values.dtype)

    def with_values(self, values: np.ndarray) -> "RasterGrid":
        """New grid sharing this grid's metadata."""
        return RasterGrid(values, self.cell_size, self.nodata, self.kind,
                          self.xllcorner, self.yllcorner)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return (self.kind == other.kind
                and self.cell_size == other.cell_size
                and self.nodata == other.nodata
                and self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class StateLegend:
    """Ordered alphabet of LULC state codes with labels."""

    states: tuple[tuple[int, str], ...]

    def __post_init__(self):
        states = tuple((int(c), str(l)) for c, l in self.states)
        if len(states) < 2:
            raise ValueError("a legend needs at least 2 states")
        codes = [c for c, _ in states]
        if len(set(codes)) != len(codes):
            raise ValueError(f"duplicate state codes in legend: {codes}")
        if any(c < 0 for c in codes):
            raise ValueError(f"state codes must be non-negative: {codes}")
        object.__setattr__(self, "states", states)

    @property
    def codes(self) -> list[int]:
        return [c for c, _ in self.states]

    def index(self, code: int) -> int:
        try:
            return self.codes.index(code)
        except ValueError:
            raise ValueError(f"state code {code} not in legend {self.codes}") from None

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class TransitionMatrix:
    """Global per-step transition probabilities P(v|u), row = initial state u."""

    legend: StateLegend
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.probabilities, dtype=np.float64)
        k = len(self.legend)
        if p.shape != (k, k):
            raise ValueError(f"probabilities must be {k}x{k}, got {p.shape}")
        if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
            raise ValueError("transition probabilities must lie in [0, 1]")
        off = p.sum(axis=1) - np.diag(p)
        if np.any(off > 1 + 1e-9):
            raise ValueError("off-diagonal row sums exceed 1")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    def prob(self, u: int, v: int) -> float:
        return float(self.probabilities[self.legend.index(u), self.legend.index(v)])


def read_ascii_grid(path, kind: str | None = None) -> RasterGrid:
    """Read an ESRI-style ASCII grid.

    kind is inferred (integral values -> categorical) unless given explicitly.
    """
    path = Path(path)
    header: dict[str, float] = {}
    with open(path) as f:
        pos = f.tell()
        while True:
            pos = f.tell()
            line = f.readline()
            parts = line.split()
            if not parts or _is_number(parts[0]):
                f.seek(pos)
                break
            if len(parts) != 2 or parts[0].lower() not in ASCII_HEADER_KEYS \
                    or not _is_number(parts[1]):
                raise GridParseError(f"{path}: malformed header line {line.strip()!r}")
            header[parts[0].lower()] = float(parts[1])
        for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
            if key not in header:
                raise GridParseError(f"{path}: missing header key {key!r}")
        body = f.read()
    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    nodata = header.get("nodata_value", -9999.0)
    try:
        flat = np.array(body.split(), dtype=np.float64)
    except ValueError as e:
        raise GridParseError(f"{path}: non-numeric grid value ({e})")
    if flat.size != ncols * nrows:
        raise GridDimensionError(
            f"{path}: header declares {nrows}x{ncols}={ncols * nrows} values, found {flat.size}")
    values = flat.reshape(nrows, ncols)
    if kind is None:
        kind = CATEGORICAL if np.all(values == np.round(values)) else CONTINUOUS
    if kind == CATEGORICAL:
        nodata = int(nodata)
    return RasterGrid(values, header["cellsize"], nodata, kind,
                      header["xllcorner"], header["yllcorner"])


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def write_ascii_grid(grid: RasterGrid, path) -> None:
    """Write an ESRI-style ASCII grid; round-trips exactly for categorical grids
    and to 17 significant digits for continuous grids."""
    path = Path(path)
    with open(path, "w") as f:
        f.write(f"ncols {grid.width}\n")
        f.write(f"nrows {grid.height}\n")
        f.write(f"xllcorner {grid.xllcorner!r}\n")
        f.write(f"yllcorner {grid.yllcorner!r}\n")
        f.write(f"cellsize {grid.cell_size!r}\n")
        if grid.kind == CATEGORICAL:
            f.write(f"NODATA_value {int(grid.nodata)}\n")
            for row in grid.values:
                f.write(" ".join(str(int(x)) for x in row))
                f.write("\n")
        else:
            f.write(f"NODATA_value {float(grid.nodata)!r}\n")
            for row in grid.values:
                f.write(" ".join(repr(float(x)) for x in row))
                f.write("\n")


def write_binary_grid(grid: RasterGrid, path) -> None:
    """Little-endian binary twin format: magic 'LUCC', u32 width, u32 height,
    f64 cell_size, i64 nodata-bits, u8 kind, then the row-major payload."""
    path = Path(path)
    kind_code = 0 if grid.kind == CATEGORICAL else 1
    nodata_bits = (int(grid.nodata) if grid.kind == CATEGORICAL
                   else struct.unpack("<q", struct.pack("<d", float(grid.nodata)))[0])
    with open(path, "wb") as f:
        f.write(BINARY_MAGIC)
        f.write(struct.pack("<IIdqB", grid.width, grid.height, grid.cell_size,
                            nodata_bits, kind_code))
        f.write(struct.pack("<dd", grid.xllcorner, grid.yllcorner))
        f.write(np.ascontiguousarray(grid.values).astype(
            "<i4" if kind_code == 0 else "<f8").tobytes())


def read_binary_grid(path) -> RasterGrid:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != BINARY_MAGIC:
            raise GridParseError(f"{path}: bad magic {magic!r}")
        width, height, cell_size, nodata_bits, kind_code = struct.unpack(
            "<IIdqB", f.read(struct.calcsize("<IIdqB")))
        xll, yll = struct.unpack("<dd", f.read(16))
        if kind_code == 0:
            kind = CATEGORICAL
            nodata = nodata_bits
            values = np.frombuffer(f.read(4 * width * height), dtype="<i4")
        else:
            kind = CONTINUOUS
            nodata = struct.unpack("<d", struct.pack("<q", nodata_bits))[0]
            values = np.frombuffer(f.read(8 * width * height), dtype="<f8")
    if values.size != width * height:
        raise GridDimensionError(f"{path}: truncated payload")
    return RasterGrid(values.reshape(height, width), cell_size, nodata, kind, xll, yll)


def observed_transition_matrix(map_t0: RasterGrid, map_t1: RasterGrid,
                               legend: StateLegend) -> TransitionMatrix:
    """P(v|u) tallied from two aligned categorical maps; nodata pixels on either
    map are excluded. Rows with no state-u pixel get diagonal 1."""
    if map_t0.values.shape != map_t1.values.shape:
        raise GridDimensionError(
            f"map shapes differ: {map_t0.values.shape} vs {map_t1.values.shape}")
    if map_t0.kind != CATEGORICAL or map_t1.kind != CATEGORICAL:
        raise ValueError("observed_transition_matrix requires categorical maps")
    valid = ~(map_t0.mask | map_t1.mask)
    a = map_t0.values[valid]
    b = map_t1.values[valid]
    codes = np.array(legend.codes)
    present = np.union1d(np.unique(a), np.unique(b))
    unknown = np.setdiff1d(present, codes)
    if unknown.size:
        raise ValueError(f"state codes {unknown.tolist()} absent from legend {codes.tolist()}")
    k = len(legend)
    lut = np.full(codes.max() + 1, -1, dtype=np.int64)
    lut[codes] = np.arange(k)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (lut[a], lut[b]), 1)
    totals = counts.sum(axis=1)
    p = np.zeros((k, k))
    nz = totals > 0
    p[nz] = counts[nz] / totals[nz, None]
    p[~nz, :] = 0.0
    p[np.where(~nz)[0], np.where(~nz)[0]] = 1.0
    return TransitionMatrix(legend, p)


def write_matrix_csv(matrix: TransitionMatrix, path) -> None:
    """CSV interchange: first row/column are state codes, body is P(v|u), row = u."""
    codes = matrix.legend.codes
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([""] + [str(c) for c in codes])
        for i, u in enumerate(codes):
            w.writerow([str(u)] + [repr(float(x)) for x in matrix.probabilities[i]])


def read_matrix_csv(path, legend: StateLegend | None = None) -> TransitionMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise GridParseError(f"{path}: empty matrix file")
    codes = [int(c) for c in rows[0][1:]]
    if legend is None:
        legend = StateLegend(tuple((c, str(c)) for c in codes))
    elif codes != legend.codes:
        raise ValueError(f"matrix codes {codes} do not match legend {legend.codes}")
    p = np.array([[float(x) for x in row[1:]] for row in rows[1:]])
    return TransitionMatrix(legend, p)
