"""ASCII-grid rasters, oriented road footprints and per-channel intensity histograms."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateGeometryError,
    DimensionMismatchError,
    EmptyPatchError,
    InvalidRangeError,
    ParseError,
)
from .graph import Point, RoadEdge, resample_geometry

log = logging.getLogger(__name__)

N_BINS = 32
RGB_RANGE = (0.0, 256.0)
_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """Single-channel grid. ``values[0]`` is the top (northernmost) row."""

    origin_x: float
    origin_y: float
    cellsize: float
    ncols: int
    nrows: int
    nodata: float
    values: np.ndarray = field(repr=False)
    channel_name: str = ""

    def __post_init__(self):
        if not self.cellsize > 0:
            raise ParseError(f"cellsize must be positive, got {self.cellsize}")
        if self.ncols <= 0 or self.nrows <= 0:
            raise ParseError("raster must have positive dimensions")
        if self.values.shape != (self.nrows, self.ncols):
            raise DimensionMismatchError(
                f"values shape {self.values.shape} != (nrows, ncols) = ({self.nrows}, {self.ncols})"
            )

    def same_georef(self, other: "RasterGrid") -> bool:
        return (self.origin_x, self.origin_y, self.cellsize, self.ncols, self.nrows) == (
            other.origin_x,
            other.origin_y,
            other.cellsize,
            other.ncols,
            other.nrows,
        )

    def valid_range(self) -> tuple[float, float]:
        v = self.values[self.values != self.nodata]
        if v.size == 0:
            return (0.0, 1.0)
        return float(v.min()), float(v.max())


def load_raster(path, channel_name: str = "") -> RasterGrid:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header: dict[str, str] = {}
    body_start = 0
    for i, line in enumerate(lines):
        parts = line.split()
        if not parts:
            continue
        key = parts[0].lower()
        if key in ("xllcenter", "yllcenter"):
            raise ParseError(f"{path}: cell-centre registration ({key}) is not supported")
        if key not in _HEADER_KEYS:
            body_start = i
            break
        if len(parts) != 2:
            raise ParseError(f"{path}: malformed header line {line!r}")
        header[key] = parts[1]
    else:
        body_start = len(lines)
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise ParseError(f"{path}: header missing {', '.join(missing)}")
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        xll = float(header["xllcorner"])
        yll = float(header["yllcorner"])
        cellsize = float(header["cellsize"])
        nodata = float(header["nodata_value"])
    except ValueError as exc:
        raise ParseError(f"{path}: bad header value ({exc})") from exc

    rows = [ln.split() for ln in lines[body_start:] if ln.strip()]
    if len(rows) != nrows:
        raise DimensionMismatchError(f"{path}: header declares nrows={nrows}, found {len(rows)} rows")
    for r, row in enumerate(rows):
        if len(row) != ncols:
            raise DimensionMismatchError(
                f"{path}: row {r} has {len(row)} values, header declares ncols={ncols}"
            )
    try:
        values = np.array([v for row in rows for v in row], dtype=np.float64).reshape(nrows, ncols)
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric cell value") from exc
    return RasterGrid(xll, yll, cellsize, ncols, nrows, nodata, values, channel_name)


def save_raster(grid: RasterGrid, path, fmt: str = "%.6g") -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"ncols {grid.ncols}\nnrows {grid.nrows}\n")
        fh.write(f"xllcorner {grid.origin_x!r}\nyllcorner {grid.origin_y!r}\n")
        fh.write(f"cellsize {grid.cellsize!r}\nNODATA_value {grid.nodata:g}\n")
        np.savetxt(fh, grid.values, fmt=fmt)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Channel:
    grid: RasterGrid
    range_lo: float
    range_hi: float

    @property
    def name(self) -> str:
        return self.grid.channel_name


def load_manifest(path) -> list[Channel]:
    """Load the channel list (R, G, B, DSM order) described by a JSON manifest.

    Channels without explicit ``range_lo``/``range_hi`` use [0, 256) when their
    name is R/G/B and the raster's own min/max otherwise.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        entries = doc["channels"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed raster manifest ({exc!r})") from exc
    channels = []
    for ent in entries:
        name = ent.get("name", "")
        grid = load_raster(path.parent / ent["path"], channel_name=name)
        lo, hi = ent.get("range_lo"), ent.get("range_hi")
        if lo is None or hi is None:
            if name.upper() in ("R", "G", "B"):
                lo, hi = RGB_RANGE
            else:
                lo, hi = grid.valid_range()
                if hi <= lo:
                    hi = lo + 1.0
        channels.append(Channel(grid, float(lo), float(hi)))
    return channels


def write_manifest(path, entries: list[dict]) -> None:
    Path(path).write_text(json.dumps({"channels": entries}, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# footprints and patches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FootprintRect:
    """``height_m`` runs along the bearing, ``width_m`` across it."""

    center: Point
    bearing_deg: float
    width_m: float = 120.0
    height_m: float = 120.0

    def __post_init__(self):
        if not (self.width_m > 0 and self.height_m > 0):
            raise DegenerateGeometryError("footprint extents must be positive")

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        # rectangle is symmetric under a half turn; folding keeps sampling bit-identical
        b = math.radians(self.bearing_deg % 180.0)
        along = np.array([math.sin(b), math.cos(b)])
        across = np.array([math.cos(b), -math.sin(b)])
        return along, across

    def corners(self) -> np.ndarray:
        along, across = self.axes()
        c = np.asarray(self.center, dtype=np.float64)
        hw, hh = self.width_m / 2.0, self.height_m / 2.0
        return np.array(
            [c + sa * hw * across + sh * hh * along for sa, sh in ((1, 1), (1, -1), (-1, -1), (-1, 1))]
        )

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        along, across = self.axes()
        dx = x - self.center[0]
        dy = y - self.center[1]
        return (np.abs(dx * along[0] + dy * along[1]) <= self.height_m / 2.0) & (
            np.abs(dx * across[0] + dy * across[1]) <= self.width_m / 2.0
        )


def footprint_rectangle(edge: RoadEdge, width_m: float = 120.0, height_m: float = 120.0, m: int = 5) -> FootprintRect:
    center, _ = resample_geometry(edge.geometry, m)
    return FootprintRect(center, edge.bearing_deg, width_m, height_m)


def patch_window(grid: RasterGrid, rect: FootprintRect) -> tuple[slice, slice, np.ndarray] | None:
    """Row/column window over the rectangle's bounding box plus the membership mask."""
    corners = rect.corners()
    x0, y0 = corners.min(axis=0)
    x1, y1 = corners.max(axis=0)
    cs = grid.cellsize
    c0 = max(int(math.floor((x0 - grid.origin_x) / cs - 0.5)), 0)
    c1 = min(int(math.ceil((x1 - grid.origin_x) / cs - 0.5)), grid.ncols - 1)
    top = grid.origin_y + grid.nrows * cs
    r0 = max(int(math.floor((top - y1) / cs - 0.5)), 0)
    r1 = min(int(math.ceil((top - y0) / cs - 0.5)), grid.nrows - 1)
    if c0 > c1 or r0 > r1:
        return None
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    xc = grid.origin_x + (cols + 0.5) * cs
    yc = top - (rows + 0.5) * cs
    mask = rect.contains(xc[None, :], yc[:, None])
    return slice(r0, r1 + 1), slice(c0, c1 + 1), mask


def sample_patch(grid: RasterGrid, rect: FootprintRect) -> np.ndarray:
    """Values of all non-nodata cells whose centres lie inside ``rect``, row-major."""
    win = patch_window(grid, rect)
    if win is not None:
        rs, cs, mask = win
        vals = grid.values[rs, cs][mask]
        vals = vals[vals != grid.nodata]
        if vals.size:
            return vals
    raise EmptyPatchError(f"footprint at {rect.center} covers no valid cell of {grid.channel_name or 'raster'}")


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Histogram:
    bins: np.ndarray
    range_lo: float
    range_hi: float
    pixel_count: int


def intensity_histogram(pixels, bins: int = N_BINS, range_lo: float = 0.0, range_hi: float = 256.0) -> Histogram:
    if not range_hi > range_lo:
        raise InvalidRangeError(f"range_hi ({range_hi}) must exceed range_lo ({range_lo})")
    px = np.asarray(pixels, dtype=np.float64).ravel()
    if px.size == 0:
        return Histogram(np.zeros(bins), range_lo, range_hi, 0)
    idx = np.floor((px - range_lo) / (range_hi - range_lo) * bins)
    idx = np.clip(idx, 0, bins - 1).astype(np.int64)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    return Histogram(counts / px.size, range_lo, range_hi, int(px.size))


def edge_histograms(
    edge: RoadEdge,
    channels: list[Channel],
    width_m: float = 120.0,
    height_m: float = 120.0,
    bins: int = N_BINS,
    m: int = 5,
) -> list[Histogram]:
    """One histogram per channel for the edge's footprint.

    An off-raster footprint gives all-zero histograms and a warning.
    """
    rect = footprint_rectangle(edge, width_m, height_m, m)
    out = []
    for ch in channels:
        try:
            px = sample_patch(ch.grid, rect)
        except EmptyPatchError:
            log.warning("edge %s: empty %s patch, using zero histogram", edge.id, ch.name)
            px = np.empty(0)
        out.append(intensity_histogram(px, bins, ch.range_lo, ch.range_hi))
    return out
