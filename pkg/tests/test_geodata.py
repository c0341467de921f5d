import json
import math
import time
import warnings

import numpy as np
import pytest

from conftest import flat_grid, rect
from bluegreen.errors import (ConfigurationError, TerrainParseError,
                              UnsupportedFormatError)
from bluegreen.geodata import (LandClass, BuildingFootprint, TerrainGrid,
                               build_landuse, cells_in_polygon,
                               compute_green_fraction, load_buildings_geojson,
                               load_landuse_geojson, load_terrain,
                               partition_tiles, polygon_area,
                               rasterize_buildings, write_esri_ascii)


# -- polygon_area ------------------------------------------------------------

def test_polygon_area_square():
    assert polygon_area(rect(0, 0, 10, 10)) == 100.0


def test_polygon_area_orientation_independent():
    ccw = rect(2, 3, 4, 5)
    cw = list(reversed(ccw))
    assert polygon_area(ccw) == polygon_area(cw) == 20.0


def test_polygon_area_triangle():
    assert polygon_area([(0, 0), (4, 0), (0, 3), (0, 0)]) == 6.0


# -- cells_in_polygon --------------------------------------------------------

def test_cells_rectangle_counts():
    grid = flat_grid(10, 10, cell=1.0)
    # centers at 0.5..9.5; the rect [2, 5) x [3, 7) holds centers 2.5..4.5 x 3.5..6.5
    cells = cells_in_polygon(rect(2, 3, 3, 4), grid)
    assert len(cells) == 3 * 4
    rows = {i // 10 for i in cells}
    cols = {i % 10 for i in cells}
    assert rows == {3, 4, 5, 6} and cols == {2, 3, 4}


def test_cells_edge_through_centers_half_open():
    grid = flat_grid(4, 4, cell=1.0)
    # edges pass exactly through cell centers: bottom/left centers included,
    # top/right excluded, so a shifted copy never double-counts a cell
    cells = cells_in_polygon(rect(0.5, 0.5, 2.0, 2.0), grid)
    assert len(cells) == 4
    assert cells == cells_in_polygon(rect(0.5, 0.5, 2.0, 2.0), grid)
    shifted = cells_in_polygon(rect(2.5, 0.5, 2.0, 2.0), grid)
    assert not (cells & shifted)


def test_cells_off_grid_polygon_empty():
    grid = flat_grid(5, 5, cell=2.0)
    assert cells_in_polygon(rect(100, 100, 5, 5), grid) == frozenset()


def _convex_contains(poly, px, py):
    # sign-of-cross-product test, independent of the ray-casting rasterizer
    n = len(poly) - 1
    sign = 0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[i + 1]
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        if abs(cross) < 1e-9:
            return None  # on an edge: half-open rule applies, skip
        s = 1 if cross > 0 else -1
        if sign == 0:
            sign = s
        elif s != sign:
            return False
    return True


def _convex_hull(pts):
    # Andrew's monotone chain
    pts = sorted(map(tuple, pts))
    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and \
                    ((out[-1][0] - out[-2][0]) * (p[1] - out[-2][1]) -
                     (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(p)
        return out
    lower = half(pts)
    upper = half(reversed(pts))
    return lower[:-1] + upper[:-1]


def test_cells_match_convex_oracle():
    rng = np.random.default_rng(7)
    grid = flat_grid(20, 20, cell=1.0)
    for _ in range(50):
        pts = rng.uniform(1, 19, size=(8, 2))
        hull = _convex_hull(pts)
        hull.append(hull[0])
        got = cells_in_polygon(hull, grid)
        for r in range(20):
            for c in range(20):
                want = _convex_contains(hull, c + 0.5, r + 0.5)
                if want is None:
                    continue
                assert ((r * 20 + c) in got) == want


# -- terrain io --------------------------------------------------------------

def test_ascii_roundtrip(tmp_path):
    z = np.arange(12, dtype=np.float64).reshape(3, 4)
    grid = TerrainGrid(origin_x=10.0, origin_y=20.0, cell_size=2.0,
                       elevation=z, active_mask=np.isfinite(z))
    p = tmp_path / "t.asc"
    write_esri_ascii(p, grid, grid.elevation)
    back = load_terrain(p)
    assert back.n_rows == 3 and back.n_cols == 4
    assert back.origin_x == 10.0 and back.origin_y == 20.0
    assert back.cell_size == 2.0
    np.testing.assert_array_equal(back.elevation, z)
    assert back.active_mask.all()


def test_ascii_nodata_inactive(tmp_path):
    p = tmp_path / "t.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n"
                 "NODATA_value -9999\n-9999 1.5\n2.5 3.5\n")
    grid = load_terrain(p)
    # file rows run north to south; array row 0 is the southmost
    assert grid.active_mask.tolist() == [[True, True], [False, True]]
    assert grid.elevation[0, 0] == 2.5
    assert np.isnan(grid.elevation[1, 0])
    assert grid.n_active == 3


def test_ascii_bad_header_reports_line(tmp_path):
    p = tmp_path / "bad.asc"
    p.write_text("ncols 2\nnrows oops\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n3 4\n")
    with pytest.raises(TerrainParseError, match="line 2"):
        load_terrain(p)


def test_ascii_wrong_cell_count(tmp_path):
    p = tmp_path / "bad.asc"
    p.write_text("ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n"
                 "1 2 3\n4 5\n")
    with pytest.raises(TerrainParseError):
        load_terrain(p)


def test_geotiff_roundtrip(tmp_path):
    Image = pytest.importorskip("PIL.Image")
    z = np.arange(20, dtype=np.float32).reshape(4, 5) / 3.0
    img = Image.fromarray(z, mode="F")
    p = tmp_path / "t.tif"
    img.save(p, tiffinfo={33550: (2.0, 2.0, 0.0),
                          33922: (0.0, 0.0, 0.0, 100.0, 300.0, 0.0)})
    grid = load_terrain(p)
    assert grid.cell_size == 2.0
    assert grid.origin_x == 100.0
    # tie point is the top-left corner; origin is the lower-left
    assert grid.origin_y == 300.0 - 4 * 2.0
    # row order flipped to south-first
    np.testing.assert_allclose(grid.elevation, z[::-1].astype(np.float64))


def test_geotiff_nonuniform_cell_rejected(tmp_path):
    Image = pytest.importorskip("PIL.Image")
    z = np.zeros((3, 3), dtype=np.float32)
    p = tmp_path / "t.tif"
    Image.fromarray(z, mode="F").save(
        p, tiffinfo={33550: (2.0, 3.0, 0.0), 33922: (0, 0, 0, 0, 0, 0)})
    with pytest.raises(UnsupportedFormatError):
        load_terrain(p)


def test_load_terrain_unknown_suffix(tmp_path):
    p = tmp_path / "t.xyz"
    p.write_text("")
    with pytest.raises(UnsupportedFormatError):
        load_terrain(p)


# -- buildings ---------------------------------------------------------------

def test_rasterize_punches_holes_and_buffers():
    grid = flat_grid(8, 8, cell=1.0)
    b = BuildingFootprint(id="b1", use_class="residential",
                          polygon=rect(3, 3, 2, 2))
    out, mask = rasterize_buildings([b], grid)
    fp = out[0].footprint_cells
    assert fp == {3 * 8 + 3, 3 * 8 + 4, 4 * 8 + 3, 4 * 8 + 4}
    assert not mask.flat[sorted(fp)].any()
    # ring of 12 cells at Chebyshev distance 1
    assert len(out[0].buffer_cells) == 12
    assert fp.isdisjoint(out[0].buffer_cells)
    assert mask.sum() == 64 - 4


def test_rasterize_adjacent_buildings_excluded_from_buffers():
    grid = flat_grid(8, 8, cell=1.0)
    b1 = BuildingFootprint(id="a", use_class="residential", polygon=rect(1, 1, 2, 2))
    b2 = BuildingFootprint(id="b", use_class="residential", polygon=rect(3, 1, 2, 2))
    out, mask = rasterize_buildings([b1, b2], grid)
    all_fp = out[0].footprint_cells | out[1].footprint_cells
    for b in out:
        assert b.buffer_cells.isdisjoint(all_fp)


def test_rasterize_off_grid_building_logs(caplog):
    grid = flat_grid(5, 5, cell=1.0)
    b = BuildingFootprint(id="x", use_class="commercial",
                          polygon=rect(50, 50, 2, 2))
    with caplog.at_level("WARNING"):
        out, mask = rasterize_buildings([b], grid)
    assert any("building x" in m for m in caplog.messages)
    assert out[0].footprint_cells == frozenset()
    assert out[0].buffer_cells == frozenset()
    assert mask.all()


def test_building_use_class_validated():
    with pytest.raises(ConfigurationError, match="use_class"):
        BuildingFootprint(id="b", use_class="industrial", polygon=rect(0, 0, 1, 1))


def test_load_buildings_geojson(tmp_path):
    doc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"id": "h1", "use_class": "residential"},
         "geometry": {"type": "Polygon",
                      "coordinates": [[[0, 0], [4, 0], [4, 4], [0, 4], [0, 0]]]}}]}
    p = tmp_path / "b.geojson"
    p.write_text(json.dumps(doc))
    buildings = load_buildings_geojson(p)
    assert len(buildings) == 1
    assert buildings[0].id == "h1"
    assert buildings[0].polygon[0] == (0.0, 0.0)


def test_load_buildings_rejects_bad_geometry(tmp_path):
    doc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"id": "h1", "use_class": "residential"},
         "geometry": {"type": "Point", "coordinates": [0, 0]}}]}
    p = tmp_path / "b.geojson"
    p.write_text(json.dumps(doc))
    with pytest.raises(UnsupportedFormatError):
        load_buildings_geojson(p)


# -- land use ----------------------------------------------------------------

def test_build_landuse_layers():
    grid = flat_grid(6, 6, cell=1.0)
    b = BuildingFootprint(id="b", use_class="commercial", polygon=rect(4, 4, 2, 2))
    out, _ = rasterize_buildings([b], grid)
    lu = build_landuse([rect(0, 0, 3, 6)], grid, out)
    assert lu.classes[0, 0] == LandClass.GREEN
    assert lu.classes[0, 4] == LandClass.PAVED
    assert lu.classes[4, 4] == LandClass.BUILDING
    assert lu.count(LandClass.GREEN) == 18
    assert lu.count(LandClass.BUILDING) == 4


def test_load_landuse_geojson_filters_classes(tmp_path):
    doc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"class": "green"},
         "geometry": {"type": "Polygon",
                      "coordinates": [[[0, 0], [2, 0], [2, 2], [0, 2], [0, 0]]]}},
        {"type": "Feature", "properties": {"class": "paved"},
         "geometry": {"type": "Polygon",
                      "coordinates": [[[5, 5], [6, 5], [6, 6], [5, 6], [5, 5]]]}}]}
    p = tmp_path / "lu.geojson"
    p.write_text(json.dumps(doc))
    polys = load_landuse_geojson(p)
    assert len(polys) == 1  # only green polygons matter; paved is the default


# -- tiles -------------------------------------------------------------------

def test_partition_row_major_from_sw():
    grid = flat_grid(10, 10, cell=1.0)  # 10 m x 10 m
    part = partition_tiles(grid, 4.0)   # 3 x 3 tiles, edge tiles 2 m
    assert part.n_tiles == 9
    assert part.cell_to_tile[0, 0] == 1
    assert part.cell_to_tile[0, 9] == 3
    assert part.cell_to_tile[9, 0] == 7
    assert part.cell_to_tile[9, 9] == 9
    t1 = part.tiles[0]
    assert (t1.x0, t1.y0, t1.x1, t1.y1) == (0.0, 0.0, 4.0, 4.0)
    t9 = part.tiles[8]
    assert (t9.x0, t9.y0, t9.x1, t9.y1) == (8.0, 8.0, 10.0, 10.0)
    assert part.populated_ids == tuple(range(1, 10))


def test_partition_too_small_tile_rejected():
    grid = flat_grid(4, 4, cell=2.0)
    with pytest.raises(ConfigurationError):
        partition_tiles(grid, 3.0)


def test_partition_populated_skips_nodata_tiles():
    z = np.zeros((8, 8))
    z[:4, :4] = np.nan
    grid = TerrainGrid(origin_x=0, origin_y=0, cell_size=1.0, elevation=z,
                       active_mask=np.isfinite(z))
    part = partition_tiles(grid, 4.0)
    assert part.n_tiles == 4
    assert part.populated_ids == (2, 3, 4)


def test_green_fraction_counts_buildings_in_denominator():
    grid = flat_grid(4, 4, cell=1.0)
    b = BuildingFootprint(id="b", use_class="residential", polygon=rect(2, 2, 2, 2))
    out, mask = rasterize_buildings([b], grid)
    lu = build_landuse([rect(0, 0, 4, 2)], grid, out)  # south half green
    part = partition_tiles(grid.with_active_mask(mask), 4.0)
    gf = compute_green_fraction(lu, part, grid.active_mask)
    # 8 green cells of 16 domain cells (4 of them building)
    assert gf[0] == pytest.approx(0.5)


def test_green_fraction_excludes_nodata():
    z = np.zeros((4, 4))
    z[0, :] = np.nan       # southmost row nodata
    grid = TerrainGrid(origin_x=0, origin_y=0, cell_size=1.0, elevation=z,
                       active_mask=np.isfinite(z))
    lu = build_landuse([rect(0, 0, 4, 4)], grid, [])
    part = partition_tiles(grid, 4.0)
    gf = compute_green_fraction(lu, part, grid.active_mask)
    assert gf[0] == pytest.approx(1.0)  # 12 green of 12 domain cells


# -- study-area scale --------------------------------------------------------

def test_city_scale_geometry_pipeline():
    rng = np.random.default_rng(42)
    n_rows, n_cols = 1325, 1000
    z = rng.uniform(0.0, 60.0, size=(n_rows, n_cols))
    z[:, :40] = np.nan                 # a nodata margin strip
    z[1075:, :250] = np.nan            # one fully empty corner tile
    grid = TerrainGrid(origin_x=0.0, origin_y=0.0, cell_size=2.0, elevation=z,
                       active_mask=np.isfinite(z))

    t0 = time.time()
    buildings = [BuildingFootprint(id=f"b{i:03d}", use_class="residential",
                                   polygon=rect(200 + 60 * (i % 20),
                                                300 + 40 * (i // 20), 12, 10))
                 for i in range(100)]
    buildings, mask = rasterize_buildings(buildings, grid)
    lu = build_landuse([rect(0, 0, 1000, 1000)], grid, buildings)
    part = partition_tiles(grid.with_active_mask(mask), 500.0)
    gf = compute_green_fraction(lu, part, grid.active_mask)
    elapsed = time.time() - t0

    assert part.n_tiles == 24  # 4 x 6
    assert len(part.populated_ids) == 23
    assert 21 not in part.populated_ids
    assert all(b.footprint_cells for b in buildings)
    assert 0.0 <= gf.min() and gf.max() <= 1.0
    assert elapsed < 20.0
