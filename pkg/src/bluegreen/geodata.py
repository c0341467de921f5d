"""Terrain, building, and land-use ingestion plus the tile partition.

Grid conventions used everywhere in this package:

- cells are squares of side ``cell_size`` metres in one projected CRS;
- arrays are indexed ``[row, col]`` with row 0 the *southernmost* row, so
  the centre of cell (r, c) is at
  ``(origin_x + (c + 0.5) * cell_size, origin_y + (r + 0.5) * cell_size)``;
- ESRI ASCII files store the northernmost row first, so readers/writers
  flip row order;
- flat cell indices are row-major: ``idx = r * n_cols + c``.

Cells are inactive either because the input raster marked them nodata or
because a building footprint was punched out of the domain (buildings are
holes bounded by no-flow walls; see :func:`rasterize_buildings`).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, TerrainParseError, UnsupportedFormatError

log = logging.getLogger(__name__)

# GeoTIFF tag ids (TIFF 6.0 private tags used by GDAL and friends)
_TAG_MODEL_PIXEL_SCALE = 33550
_TAG_MODEL_TIEPOINT = 33922
_TAG_GDAL_NODATA = 42113


class LandClass(IntEnum):
    GREEN = 0
    PAVED = 1
    BUILDING = 2
    POND = 3


COMMERCIAL = "commercial"
RESIDENTIAL = "residential"
USE_CLASSES = (COMMERCIAL, RESIDENTIAL)


@dataclass(frozen=True)
class TerrainGrid:
    """Uniform raster of ground elevation with the active-cell mask.

    ``active_mask`` is False for nodata cells and for building holes.
    Immutable after construction; share freely across concurrent runs.
    """

    origin_x: float          # m, lower-left corner
    origin_y: float          # m, lower-left corner
    cell_size: float         # m
    elevation: np.ndarray    # (n_rows, n_cols) float64, m above datum
    active_mask: np.ndarray  # (n_rows, n_cols) bool

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ConfigurationError(f"cell_size must be > 0, got {self.cell_size}")
        if self.elevation.ndim != 2 or self.elevation.size == 0:
            raise ConfigurationError("elevation must be a non-empty 2D array")
        if self.elevation.shape != self.active_mask.shape:
            raise ConfigurationError("elevation and active_mask shapes differ")
        if not np.all(np.isfinite(self.elevation[self.active_mask])):
            raise TerrainParseError("active cell with non-finite elevation")
        self.elevation.setflags(write=False)
        self.active_mask.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return self.elevation.shape[0]

    @property
    def n_cols(self) -> int:
        return self.elevation.shape[1]

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    @property
    def n_active(self) -> int:
        return int(self.active_mask.sum())

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin_x + (col + 0.5) * self.cell_size,
                self.origin_y + (row + 0.5) * self.cell_size)

    def with_active_mask(self, mask: np.ndarray) -> "TerrainGrid":
        return replace(self, active_mask=mask.copy())

    def with_elevation(self, elevation: np.ndarray) -> "TerrainGrid":
        return replace(self, elevation=elevation.copy())


@dataclass
class BuildingFootprint:
    """One building: its polygon, the grid cells it removes, and its buffer ring.

    ``footprint_cells`` are flat indices of cells whose centre lies inside the
    polygon (inactive after rasterization). ``buffer_cells`` are the active
    cells within Chebyshev distance 1 of any footprint cell — the one-cell
    ring whose water depths drive the exposure statistics.
    """

    id: str
    use_class: str
    polygon: list[tuple[float, float]]
    footprint_cells: frozenset[int] = frozenset()
    buffer_cells: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.use_class not in USE_CLASSES:
            raise ConfigurationError(
                f"building {self.id!r}: use_class must be one of {USE_CLASSES}, "
                f"got {self.use_class!r}")

    def footprint_area_m2(self, cell_area: float) -> float:
        return len(self.footprint_cells) * cell_area


@dataclass(frozen=True)
class LandUseMap:
    """Per-cell land class. Building cells always coincide with footprints."""

    classes: np.ndarray  # (n_rows, n_cols) int8 of LandClass values

    def __post_init__(self):
        self.classes.setflags(write=False)

    def count(self, land_class: LandClass) -> int:
        return int((self.classes == land_class).sum())


@dataclass(frozen=True)
class TileExtent:
    id: int          # 1-based, row-major from the grid origin
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area_m2(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass(frozen=True)
class TilePartition:
    """Axis-aligned tiling of the domain into roughly tile_size × tile_size blocks.

    Edge tiles are smaller when the domain is not an exact multiple of
    ``tile_size``. Every cell (active or not) maps to exactly one tile;
    ``populated_ids`` lists tiles containing at least one active cell.
    """

    tile_size: float
    n_tiles_x: int
    n_tiles_y: int
    tiles: tuple[TileExtent, ...]
    cell_to_tile: np.ndarray            # (n_rows, n_cols) int32, values 1..T
    populated_ids: tuple[int, ...]
    green_fraction: np.ndarray | None = None  # (T,) float64 in [0, 1], 1-based via index id-1

    def __post_init__(self):
        self.cell_to_tile.setflags(write=False)
        if self.green_fraction is not None:
            self.green_fraction.setflags(write=False)

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    def tile_mask(self, tile_id: int) -> np.ndarray:
        return self.cell_to_tile == tile_id

    def with_green_fraction(self, gf: np.ndarray) -> "TilePartition":
        return replace(self, green_fraction=gf.copy())


# ---------------------------------------------------------------------------
# Terrain loading


def load_terrain(path: str | Path, fmt: str | None = None) -> TerrainGrid:
    """Load a terrain raster from an ESRI ASCII grid or single-band GeoTIFF.

    ``fmt`` is "esri_ascii" or "geotiff"; inferred from the suffix when None.
    Nodata cells become inactive.
    """
    path = Path(path)
    if fmt is None:
        suffix = path.suffix.lower()
        fmt = {"asc": "esri_ascii", "txt": "esri_ascii",
               "tif": "geotiff", "tiff": "geotiff"}.get(suffix.lstrip("."))
        if fmt is None:
            raise UnsupportedFormatError(f"cannot infer raster format from {path.name!r}")
    if fmt == "esri_ascii":
        return _load_esri_ascii(path)
    if fmt == "geotiff":
        return _load_geotiff(path)
    raise UnsupportedFormatError(f"unknown terrain format {fmt!r}")


_ASCII_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


def _load_esri_ascii(path: Path) -> TerrainGrid:
    with open(path) as f:
        lines = f.read().splitlines()

    header: dict[str, float] = {}
    data_start = 0
    for i, line in enumerate(lines):
        parts = line.split()
        if not parts:
            data_start = i + 1
            continue
        key = parts[0].lower()
        if key in _ASCII_HEADER_KEYS or key == "nodata_value":
            if len(parts) != 2:
                raise TerrainParseError(f"{path.name} line {i + 1}: malformed header {line!r}")
            try:
                header[key] = float(parts[1])
            except ValueError:
                raise TerrainParseError(
                    f"{path.name} line {i + 1}: non-numeric header value {line!r}") from None
            data_start = i + 1
        else:
            break

    missing = [k for k in _ASCII_HEADER_KEYS if k not in header]
    if missing:
        raise TerrainParseError(f"{path.name}: missing header keys {missing}")

    n_cols = int(header["ncols"])
    n_rows = int(header["nrows"])
    if n_cols <= 0 or n_rows <= 0 or header["ncols"] != n_cols or header["nrows"] != n_rows:
        raise TerrainParseError(f"{path.name}: ncols/nrows must be positive integers")
    nodata = header.get("nodata_value", -9999.0)

    try:
        values = np.array(" ".join(lines[data_start:]).split(), dtype=np.float64)
    except ValueError as exc:
        raise TerrainParseError(f"{path.name}: non-numeric cell value ({exc})") from None
    if values.size != n_rows * n_cols:
        raise TerrainParseError(
            f"{path.name}: expected {n_rows * n_cols} cell values, found {values.size}")

    elevation = values.reshape(n_rows, n_cols)[::-1].copy()  # file is north-first
    active = elevation != nodata
    elevation[~active] = np.nan
    return TerrainGrid(origin_x=header["xllcorner"], origin_y=header["yllcorner"],
                       cell_size=header["cellsize"], elevation=elevation, active_mask=active)


def _load_geotiff(path: Path) -> TerrainGrid:
    from PIL import Image

    with Image.open(path) as img:
        if img.mode not in ("F", "I", "I;16", "L"):
            raise UnsupportedFormatError(
                f"{path.name}: only single-band rasters supported, got mode {img.mode!r}")
        tags = img.tag_v2
        if _TAG_MODEL_PIXEL_SCALE not in tags or _TAG_MODEL_TIEPOINT not in tags:
            raise TerrainParseError(
                f"{path.name}: missing GeoTIFF georeferencing tags "
                f"(ModelPixelScale/ModelTiepoint)")
        sx, sy = float(tags[_TAG_MODEL_PIXEL_SCALE][0]), float(tags[_TAG_MODEL_PIXEL_SCALE][1])
        if not math.isclose(abs(sx), abs(sy), rel_tol=1e-9):
            raise UnsupportedFormatError(
                f"{path.name}: non-uniform cell size {sx} x {sy} not supported")
        tp = tags[_TAG_MODEL_TIEPOINT]
        raster_i, raster_j, _, geo_x, geo_y = (float(tp[0]), float(tp[1]), float(tp[2]),
                                               float(tp[3]), float(tp[4]))
        nodata = None
        if _TAG_GDAL_NODATA in tags:
            try:
                nodata = float(str(tags[_TAG_GDAL_NODATA]).strip("\x00 "))
            except ValueError:
                raise TerrainParseError(
                    f"{path.name}: unparseable GDAL nodata tag "
                    f"{tags[_TAG_GDAL_NODATA]!r}") from None

        data = np.asarray(img, dtype=np.float64)

    n_rows, n_cols = data.shape
    # Tiepoint maps raster (i, j) to (geo_x, geo_y); j counts from the top row.
    top_y = geo_y + raster_j * abs(sy)
    origin_x = geo_x - raster_i * abs(sx)
    origin_y = top_y - n_rows * abs(sy)

    elevation = data[::-1].copy()
    if nodata is not None:
        active = ~np.isclose(elevation, nodata, rtol=0, atol=1e-9) & np.isfinite(elevation)
    else:
        active = np.isfinite(elevation)
    elevation[~active] = np.nan
    return TerrainGrid(origin_x=origin_x, origin_y=origin_y, cell_size=abs(sx),
                       elevation=elevation, active_mask=active)


def write_esri_ascii(path: str | Path, grid: TerrainGrid, values: np.ndarray,
                     nodata: float = -9999.0) -> None:
    """Write a per-cell value raster georeferenced like ``grid`` (north-first file order)."""
    out = np.where(grid.active_mask, values, nodata)[::-1]
    header = (f"ncols {grid.n_cols}\nnrows {grid.n_rows}\n"
              f"xllcorner {grid.origin_x!r}\nyllcorner {grid.origin_y!r}\n"
              f"cellsize {grid.cell_size!r}\nNODATA_value {nodata!r}\n")
    with open(path, "w") as f:
        f.write(header)
        np.savetxt(f, out, fmt="%.6f")


# ---------------------------------------------------------------------------
# Polygon rasterization


def polygon_area(polygon: list[tuple[float, float]]) -> float:
    """Unsigned shoelace area in m²."""
    pts = _normalize_ring(polygon)
    if len(pts) < 3:
        return 0.0
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def _normalize_ring(polygon) -> list[tuple[float, float]]:
    pts = [(float(x), float(y)) for x, y in polygon]
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts = pts[:-1]
    return pts


def cells_in_polygon(polygon: list[tuple[float, float]], grid: TerrainGrid) -> frozenset[int]:
    """Flat indices of cells whose centre falls inside the polygon (even-odd rule).

    Edges exactly through a centre follow the half-open crossing convention,
    so shared walls never double-count a cell.
    """
    pts = _normalize_ring(polygon)
    if len(pts) < 3 or polygon_area(pts) == 0.0:
        return frozenset()

    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    c0 = max(0, int(np.floor((xs.min() - grid.origin_x) / grid.cell_size - 0.5)))
    c1 = min(grid.n_cols - 1, int(np.ceil((xs.max() - grid.origin_x) / grid.cell_size)))
    r0 = max(0, int(np.floor((ys.min() - grid.origin_y) / grid.cell_size - 0.5)))
    r1 = min(grid.n_rows - 1, int(np.ceil((ys.max() - grid.origin_y) / grid.cell_size)))
    if c0 > c1 or r0 > r1:
        return frozenset()

    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    px = grid.origin_x + (cols + 0.5) * grid.cell_size
    py = grid.origin_y + (rows + 0.5) * grid.cell_size
    PX, PY = np.meshgrid(px, py)

    inside = np.zeros(PX.shape, dtype=bool)
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i - 1]
        x1, y1 = pts[i]
        crosses = (y0 > PY) != (y1 > PY)
        if not crosses.any():
            continue
        x_int = (x1 - x0) * (PY - y0) / (y1 - y0) + x0
        inside ^= crosses & (PX < x_int)

    rr, cc = np.nonzero(inside)
    return frozenset(((rr + r0) * grid.n_cols + (cc + c0)).tolist())


def rasterize_buildings(buildings: list[BuildingFootprint],
                        grid: TerrainGrid) -> tuple[list[BuildingFootprint], np.ndarray]:
    """Punch building holes into the active mask and compute buffer rings.

    Returns the buildings with ``footprint_cells``/``buffer_cells`` filled and
    the updated active mask. Buffers are the active cells within Chebyshev
    distance 1 of a footprint cell; cells of *any* building are excluded, so
    adjacent buildings never appear in each other's buffers.
    """
    mask = grid.active_mask.copy()
    n_cols = grid.n_cols
    out: list[BuildingFootprint] = []
    all_footprints: set[int] = set()

    for b in buildings:
        cells = cells_in_polygon(b.polygon, grid)
        # only cells that were part of the domain become holes
        cells = frozenset(i for i in cells if grid.active_mask.flat[i])
        if not cells:
            log.warning("building %s: footprint covers no active cell centres; "
                        "retained with empty cell sets", b.id)
        out.append(replace(b, footprint_cells=cells))
        all_footprints.update(cells)

    rows = np.array([i // n_cols for i in all_footprints], dtype=np.int64)
    cols = np.array([i % n_cols for i in all_footprints], dtype=np.int64)
    mask[rows, cols] = False

    n_rows = grid.n_rows
    for i, b in enumerate(out):
        ring: set[int] = set()
        for idx in b.footprint_cells:
            r, c = idx // n_cols, idx % n_cols
            for dr in (-1, 0, 1):
                rr = r + dr
                if rr < 0 or rr >= n_rows:
                    continue
                for dc in (-1, 0, 1):
                    cc = c + dc
                    if cc < 0 or cc >= n_cols or (dr == 0 and dc == 0):
                        continue
                    j = rr * n_cols + cc
                    if mask[rr, cc] and j not in all_footprints:
                        ring.add(j)
        if b.footprint_cells and not ring:
            log.warning("building %s: no buffer cells (fully enclosed); "
                        "will classify as low exposure by definition", b.id)
        out[i] = replace(b, buffer_cells=frozenset(ring))

    return out, mask


# ---------------------------------------------------------------------------
# Land use


def build_landuse(green_polygons: list[list[tuple[float, float]]],
                  grid: TerrainGrid,
                  buildings: list[BuildingFootprint]) -> LandUseMap:
    """Rasterize land use: paved by default, green inside the given polygons,
    building wherever a footprint cell sits."""
    classes = np.full((grid.n_rows, grid.n_cols), LandClass.PAVED, dtype=np.int8)
    for poly in green_polygons:
        for idx in cells_in_polygon(poly, grid):
            classes.flat[idx] = LandClass.GREEN
    for b in buildings:
        for idx in b.footprint_cells:
            classes.flat[idx] = LandClass.BUILDING
    return LandUseMap(classes=classes)


# ---------------------------------------------------------------------------
# Tiles


def partition_tiles(grid: TerrainGrid, tile_size: float) -> TilePartition:
    """Divide the domain into tile_size × tile_size blocks, row-major from the origin.

    Edge tiles are smaller when the extent is not an exact multiple. Tile ids
    are 1-based and deterministic for a given grid + tile_size.
    """
    if tile_size < 2 * grid.cell_size:
        raise ConfigurationError(
            f"tile_size {tile_size} m must be at least twice the cell size "
            f"({2 * grid.cell_size} m)")

    width = grid.n_cols * grid.cell_size
    height = grid.n_rows * grid.cell_size
    n_tx = int(math.ceil(width / tile_size - 1e-12))
    n_ty = int(math.ceil(height / tile_size - 1e-12))

    tiles = []
    for ty in range(n_ty):
        for tx in range(n_tx):
            tid = ty * n_tx + tx + 1
            x0 = grid.origin_x + tx * tile_size
            y0 = grid.origin_y + ty * tile_size
            tiles.append(TileExtent(id=tid,
                                    x0=x0, y0=y0,
                                    x1=min(x0 + tile_size, grid.origin_x + width),
                                    y1=min(y0 + tile_size, grid.origin_y + height)))

    cols = np.arange(grid.n_cols)
    rows = np.arange(grid.n_rows)
    tx_of_col = np.minimum(((cols + 0.5) * grid.cell_size // tile_size).astype(np.int32),
                           n_tx - 1)
    ty_of_row = np.minimum(((rows + 0.5) * grid.cell_size // tile_size).astype(np.int32),
                           n_ty - 1)
    cell_to_tile = (ty_of_row[:, None] * n_tx + tx_of_col[None, :] + 1).astype(np.int32)

    populated = np.unique(cell_to_tile[grid.active_mask])
    return TilePartition(tile_size=tile_size, n_tiles_x=n_tx, n_tiles_y=n_ty,
                         tiles=tuple(tiles), cell_to_tile=cell_to_tile,
                         populated_ids=tuple(int(t) for t in populated))


def compute_green_fraction(landuse: LandUseMap, partition: TilePartition,
                           domain_mask: np.ndarray) -> np.ndarray:
    """Per-tile share of green cells over all study-area cells in the tile.

    The denominator counts every domain cell, building cells included;
    nodata cells outside the study area are ignored. Returns a (T,) array
    indexed by tile id - 1; tiles with no domain cells get 0.
    """
    if landuse.classes.shape != partition.cell_to_tile.shape:
        raise ConfigurationError("landuse and partition do not share a grid")
    n_tiles = partition.n_tiles
    tile_idx = partition.cell_to_tile[domain_mask] - 1
    green = (landuse.classes[domain_mask] == LandClass.GREEN)
    totals = np.bincount(tile_idx, minlength=n_tiles).astype(np.float64)
    greens = np.bincount(tile_idx, weights=green.astype(np.float64), minlength=n_tiles)
    with np.errstate(invalid="ignore", divide="ignore"):
        gf = np.where(totals > 0, greens / np.maximum(totals, 1.0), 0.0)
    return gf


# ---------------------------------------------------------------------------
# GeoJSON input


def load_buildings_geojson(path: str | Path) -> list[BuildingFootprint]:
    """Read building footprints from a GeoJSON FeatureCollection.

    Features must be Polygons (outer ring used) with properties ``id`` and
    ``use_class`` in {"commercial", "residential"}.
    """
    with open(path) as f:
        doc = json.load(f)
    if doc.get("type") != "FeatureCollection":
        raise TerrainParseError(f"{path}: expected a GeoJSON FeatureCollection")
    buildings = []
    for feat in doc.get("features", []):
        props = feat.get("properties") or {}
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise UnsupportedFormatError(
                f"{path}: building {props.get('id')!r} has geometry "
                f"{geom.get('type')!r}; only Polygon supported")
        ring = [(float(x), float(y)) for x, y in geom["coordinates"][0]]
        buildings.append(BuildingFootprint(
            id=str(props.get("id", f"b{len(buildings)}")),
            use_class=str(props.get("use_class", "")).lower(),
            polygon=ring))
    return buildings


def load_landuse_geojson(path: str | Path) -> list[list[tuple[float, float]]]:
    """Read green-space polygons: features with properties.class == "green"."""
    with open(path) as f:
        doc = json.load(f)
    if doc.get("type") != "FeatureCollection":
        raise TerrainParseError(f"{path}: expected a GeoJSON FeatureCollection")
    polys = []
    for feat in doc.get("features", []):
        props = feat.get("properties") or {}
        if str(props.get("class", "")).lower() != "green":
            continue
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            continue
        polys.append([(float(x), float(y)) for x, y in geom["coordinates"][0]])
    return polys
