"""Georeferenced raster container, resampling, terrain derivatives and RSTR I/O.

Rasters are immutable float32 grids stored band-sequential as ``(bands, height, width)``.
Invalid cells hold the ``nodata`` sentinel. Accumulations are carried out in float64.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_NODATA = -9999.0

MAGIC = b"RSTR"
VERSION = 1
DTYPE_F32 = 0
# magic, version, dtype, reserved, width, height, bands, pad, pixel_size, origin_x, origin_y, nodata, pad
HEADER = struct.Struct("<4sHBBIIHHdddff")
HEADER_SIZE = HEADER.size


class RasterFormatError(OSError):
    """Raised when an RSTR file is malformed."""


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    pixel_size: float
    origin_x: float
    origin_y: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"degenerate grid {self.width}x{self.height}")
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World x of column centers and world y of row centers."""
        xs = self.origin_x + (np.arange(self.width) + 0.5) * self.pixel_size
        ys = self.origin_y - (np.arange(self.height) + 0.5) * self.pixel_size
        return xs, ys

    def scaled(self, factor: int) -> GridSpec:
        return GridSpec(self.width // factor, self.height // factor,
                        self.pixel_size * factor, self.origin_x, self.origin_y)


class Raster:
    """Immutable multi-band grid with a nodata sentinel."""

    __slots__ = ("grid", "data", "nodata")

    def __init__(self, data, grid: GridSpec, nodata: float = DEFAULT_NODATA):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(f"raster data must be 2-D or 3-D, got shape {arr.shape}")
        if arr.shape[1:] != (grid.height, grid.width):
            raise ValueError(f"data shape {arr.shape[1:]} does not match grid {grid.height}x{grid.width}")
        nodata = float(np.float32(nodata))
        if not math.isfinite(nodata):
            raise ValueError("nodata must be finite")
        if not np.isfinite(arr).all():
            raise ValueError("raster holds non-finite values")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.grid = grid
        self.nodata = nodata

    @classmethod
    def from_array(cls, data, pixel_size: float = 1.0, origin_x: float = 0.0, origin_y: float = 0.0,
                   nodata: float = DEFAULT_NODATA) -> Raster:
        arr = np.asarray(data)
        h, w = arr.shape[-2:]
        return cls(arr, GridSpec(w, h, pixel_size, origin_x, origin_y), nodata)

    @classmethod
    def from_masked(cls, values, valid, grid: GridSpec, nodata: float = DEFAULT_NODATA) -> Raster:
        out = np.where(valid, values, nodata).astype(np.float32)
        return cls(out, grid, nodata)

    @property
    def width(self) -> int:
        return self.grid.width

    @property
    def height(self) -> int:
        return self.grid.height

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def pixel_size(self) -> float:
        return self.grid.pixel_size

    def band(self, i: int = 0) -> np.ndarray:
        return self.data[i]

    def valid(self, i: int = 0) -> np.ndarray:
        return self.data[i] != np.float32(self.nodata)

    def masked(self, i: int = 0) -> np.ndarray:
        """Band ``i`` as float64 with NaN at nodata cells."""
        b = self.data[i].astype(np.float64)
        b[~self.valid(i)] = np.nan
        return b

    def aligned(self, other: Raster) -> bool:
        return self.grid == other.grid

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (self.grid == other.grid and self.nodata == other.nodata
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())

    def __repr__(self):
        g = self.grid
        return (f"Raster({self.bands}x{g.height}x{g.width}, pixel_size={g.pixel_size}, "
                f"origin=({g.origin_x}, {g.origin_y}), nodata={self.nodata})")


def _require_single_band(r: Raster, what: str) -> None:
    if r.bands != 1:
        raise ValueError(f"{what} requires a single-band raster, got {r.bands} bands")


def require_aligned(*rasters: Raster) -> None:
    first = rasters[0]
    for r in rasters[1:]:
        if r.grid != first.grid:
            raise ValueError(f"misaligned grids: {first.grid} vs {r.grid}")


def pool_resample(src: Raster, factor: int, mode: str = "mean") -> Raster:
    """Aggregate ``factor x factor`` windows by mean or max over valid cells.

    A window with no valid cell becomes nodata. Trailing rows/columns that do not fill a
    whole window are dropped with a warning.
    """
    if not isinstance(factor, (int, np.integer)) or factor <= 0:
        raise ValueError(f"factor must be a positive integer, got {factor!r}")
    if mode not in ("mean", "max"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    _require_single_band(src, "pool_resample")
    h, w = src.height // factor, src.width // factor
    if h == 0 or w == 0:
        raise ValueError(f"raster {src.height}x{src.width} smaller than one {factor}x{factor} window")
    if h * factor != src.height or w * factor != src.width:
        warnings.warn(f"dropping partial windows: {src.height}x{src.width} not divisible by {factor}",
                      stacklevel=2)
    block = src.data[0, :h * factor, :w * factor].astype(np.float64).reshape(h, factor, w, factor)
    valid = (src.data[0, :h * factor, :w * factor] != np.float32(src.nodata)).reshape(h, factor, w, factor)
    count = valid.sum(axis=(1, 3))
    if mode == "mean":
        total = np.where(valid, block, 0.0).sum(axis=(1, 3))
        with np.errstate(invalid="ignore", divide="ignore"):
            out = total / count
    else:
        out = np.where(valid, block, -np.inf).max(axis=(1, 3))
    return Raster.from_masked(out, count > 0, src.grid.scaled(factor), src.nodata)


def bilinear_resample(src: Raster, target: GridSpec) -> Raster:
    """Bilinear interpolation of ``src`` at the cell centers of ``target``.

    Cells outside the source center lattice, or whose four neighbors include nodata,
    become nodata.
    """
    _require_single_band(src, "bilinear_resample")
    if target.width * target.height == 0:
        raise ValueError("degenerate target grid")
    g = src.grid
    xs, ys = target.cell_centers()
    # fractional source index of target centers, in units of source cells from the first center
    fx = (xs - g.origin_x) / g.pixel_size - 0.5
    fy = (g.origin_y - ys) / g.pixel_size - 0.5
    tol = 1e-9
    col_ok = (fx >= -tol) & (fx <= g.width - 1 + tol)
    row_ok = (fy >= -tol) & (fy <= g.height - 1 + tol)
    fx = np.clip(fx, 0, g.width - 1)
    fy = np.clip(fy, 0, g.height - 1)
    c0 = np.minimum(np.floor(fx).astype(np.int64), max(g.width - 2, 0))
    r0 = np.minimum(np.floor(fy).astype(np.int64), max(g.height - 2, 0))
    c1 = np.minimum(c0 + 1, g.width - 1)
    r1 = np.minimum(r0 + 1, g.height - 1)
    tx = (fx - c0)[None, :]
    ty = (fy - r0)[:, None]
    v = src.data[0].astype(np.float64)
    ok = src.valid()
    R0, R1 = r0[:, None], r1[:, None]
    C0, C1 = c0[None, :], c1[None, :]
    v00, v01, v10, v11 = v[R0, C0], v[R0, C1], v[R1, C0], v[R1, C1]
    out = (v00 * (1 - tx) * (1 - ty) + v01 * tx * (1 - ty)
           + v10 * (1 - tx) * ty + v11 * tx * ty)
    # a neighbor only matters if it carries weight
    valid = ((ok[R0, C0] | ((1 - tx) * (1 - ty) == 0)) & (ok[R0, C1] | (tx * (1 - ty) == 0))
             & (ok[R1, C0] | ((1 - tx) * ty == 0)) & (ok[R1, C1] | (tx * ty == 0)))
    valid &= row_ok[:, None] & col_ok[None, :]
    return Raster.from_masked(out, valid, target, src.nodata)


def slope_aspect(dtm: Raster) -> tuple[Raster, Raster]:
    """Slope (degrees) and aspect (degrees clockwise from north) by Horn's method.

    Aspect is the downslope direction; it is nodata where the surface is flat. Border
    cells and cells with any nodata neighbor are nodata in both outputs.
    """
    _require_single_band(dtm, "slope_aspect")
    if dtm.height < 3 or dtm.width < 3:
        raise ValueError("slope_aspect needs at least 3x3 cells")
    z = dtm.data[0].astype(np.float64)
    ok = dtm.valid()
    d = dtm.pixel_size
    a, b, c = z[:-2, :-2], z[:-2, 1:-1], z[:-2, 2:]
    dd, f = z[1:-1, :-2], z[1:-1, 2:]
    g, h, i = z[2:, :-2], z[2:, 1:-1], z[2:, 2:]
    dz_east = ((c + 2 * f + i) - (a + 2 * dd + g)) / (8 * d)
    dz_north = ((a + 2 * b + c) - (g + 2 * h + i)) / (8 * d)
    win_ok = np.ones_like(ok[1:-1, 1:-1])
    for dy in range(3):
        for dx in range(3):
            win_ok &= ok[dy:dy + dtm.height - 2, dx:dx + dtm.width - 2]
    slope = np.full(z.shape, np.nan)
    aspect = np.full(z.shape, np.nan)
    slope[1:-1, 1:-1] = np.degrees(np.arctan(np.hypot(dz_east, dz_north)))
    asp = np.degrees(np.arctan2(-dz_east, -dz_north)) % 360.0
    flat = (dz_east == 0) & (dz_north == 0)
    aspect[1:-1, 1:-1] = np.where(flat, np.nan, asp)
    interior = np.zeros(z.shape, dtype=bool)
    interior[1:-1, 1:-1] = win_ok
    s = Raster.from_masked(slope, interior, dtm.grid, dtm.nodata)
    asp_valid = interior & ~np.isnan(aspect)
    return s, Raster.from_masked(aspect, asp_valid, dtm.grid, dtm.nodata)


def raster_diff(a: Raster, b: Raster) -> Raster:
    """Cell-wise ``a - b``; nodata where either operand is nodata."""
    _require_single_band(a, "raster_diff")
    _require_single_band(b, "raster_diff")
    require_aligned(a, b)
    diff = a.data[0].astype(np.float64) - b.data[0].astype(np.float64)
    return Raster.from_masked(diff, a.valid() & b.valid(), a.grid, a.nodata)


def stack(rasters: list[Raster]) -> Raster:
    """Concatenate single- or multi-band aligned rasters along the band axis."""
    require_aligned(*rasters)
    nodata = rasters[0].nodata
    parts = [np.where(r.data != np.float32(r.nodata), r.data, np.float32(nodata)) for r in rasters]
    return Raster(np.concatenate(parts, axis=0), rasters[0].grid, nodata)


def write_raster(raster: Raster, path) -> None:
    g = raster.grid
    header = HEADER.pack(MAGIC, VERSION, DTYPE_F32, 0, g.width, g.height, raster.bands, 0,
                         g.pixel_size, g.origin_x, g.origin_y, raster.nodata, 0.0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(raster.data, dtype="<f4").tobytes())


def read_raster(path) -> Raster:
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_SIZE:
        raise RasterFormatError(f"{path}: truncated header")
    (magic, version, dtype, _, width, height, bands, _, pixel_size,
     origin_x, origin_y, nodata, _) = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise RasterFormatError(f"{path}: unsupported dtype code {dtype}")
    n = width * height * bands
    payload = blob[HEADER_SIZE:]
    if len(payload) != 4 * n:
        raise RasterFormatError(f"{path}: truncated payload ({len(payload)} of {4 * n} bytes)")
    data = np.frombuffer(payload, dtype="<f4").reshape(bands, height, width)
    grid = GridSpec(width, height, pixel_size, origin_x, origin_y)
    return Raster(data, grid, nodata)
