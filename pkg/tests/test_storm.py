import json

import numpy as np
import pytest

from conftest import flat_grid, rect
from bluegreen.errors import ConfigurationError
from bluegreen.geodata import BuildingFootprint, rasterize_buildings, partition_tiles
from bluegreen.storm import (CaptureSpec, Hyetograph, StormScenario,
                             build_redirection, load_storms,
                             make_uniform_hyetograph, rain_rate, rain_weights)


# -- hyetograph ----------------------------------------------------------------

def test_uniform_hyetograph_intensity():
    h = make_uniform_hyetograph(25.0, 15.0)
    assert h.intensity_at(0.0) == pytest.approx(100.0)   # 25 mm in quarter hour
    assert h.total_depth_m() == pytest.approx(0.025)
    assert h.end_s == 900.0


def test_intensity_half_open_intervals():
    h = Hyetograph(t_edges_s=(0.0, 100.0, 300.0), intensity_mm_h=(10.0, 40.0))
    assert h.intensity_at(-1.0) == 0.0
    assert h.intensity_at(0.0) == 10.0
    assert h.intensity_at(99.999) == 10.0
    assert h.intensity_at(100.0) == 40.0     # edge belongs to the next interval
    assert h.intensity_at(300.0) == 0.0      # rain stops at the final edge
    assert h.total_depth_m() == pytest.approx((10 * 100 + 40 * 200) / 1000 / 3600)


def test_next_edge_after():
    h = Hyetograph(t_edges_s=(0.0, 100.0, 300.0), intensity_mm_h=(10.0, 40.0))
    assert h.next_edge_after(0.0) == 100.0
    assert h.next_edge_after(100.0) == 300.0
    assert h.next_edge_after(300.0) is None


def test_hyetograph_validation():
    with pytest.raises(ConfigurationError):
        Hyetograph(t_edges_s=(0.0, 0.0), intensity_mm_h=(1.0,))
    with pytest.raises(ConfigurationError):
        Hyetograph(t_edges_s=(0.0, 10.0), intensity_mm_h=(-1.0,))
    with pytest.raises(ConfigurationError):
        make_uniform_hyetograph(10.0, 0.0)


def test_scenario_name():
    s = StormScenario(return_period_y=100, hyetograph=make_uniform_hyetograph(50, 60))
    assert s.name == "rp100"


def test_capture_spec_fraction_range():
    CaptureSpec(tile_id=1, fraction=0.0)
    CaptureSpec(tile_id=1, fraction=1.0)
    with pytest.raises(ConfigurationError):
        CaptureSpec(tile_id=1, fraction=1.01)


# -- roof redirection ----------------------------------------------------------

def _building_on(grid, x0, y0, w, h, bid="b1"):
    b = BuildingFootprint(id=bid, use_class="residential",
                          polygon=rect(x0, y0, w, h))
    return rasterize_buildings([b], grid)


def test_redirection_targets_nearest_active():
    grid = flat_grid(7, 7, cell=1.0)
    out, mask = _building_on(grid, 3, 3, 1, 1)
    red = build_redirection(mask, out)
    roof = 3 * 7 + 3
    # all four orthogonal neighbours tie at d2=1; lowest row-major index wins
    assert red.target_of == {roof: 2 * 7 + 3}


def test_redirection_skips_other_roofs():
    grid = flat_grid(9, 9, cell=1.0)
    b1 = BuildingFootprint(id="a", use_class="residential", polygon=rect(3, 3, 2, 2))
    b2 = BuildingFootprint(id="b", use_class="residential", polygon=rect(3, 5, 2, 2))
    out, mask = rasterize_buildings([b1, b2], grid)
    red = build_redirection(mask, out)
    for roof, tgt in red.target_of.items():
        assert mask.flat[tgt]


def test_redirection_reaches_distant_cell():
    z = np.zeros((9, 9))
    z[:, :] = np.nan
    z[0, 0] = 1.0           # the only active cell
    from bluegreen.geodata import TerrainGrid
    grid = TerrainGrid(origin_x=0, origin_y=0, cell_size=1.0, elevation=z,
                       active_mask=np.isfinite(z))
    b = BuildingFootprint(id="far", use_class="commercial",
                          polygon=rect(7, 7, 1, 1),
                          footprint_cells=frozenset({7 * 9 + 7}))
    red = build_redirection(grid.active_mask, [b])
    assert red.target_of[7 * 9 + 7] == 0


def test_redirection_no_active_anywhere():
    mask = np.zeros((4, 4), dtype=bool)
    b = BuildingFootprint(id="b", use_class="commercial", polygon=rect(1, 1, 1, 1),
                          footprint_cells=frozenset({5}))
    with pytest.raises(ConfigurationError, match="no active cell"):
        build_redirection(mask, [b])


# -- rain weights ---------------------------------------------------------------

def _weights_setup():
    grid = flat_grid(8, 8, cell=1.0)  # 8 m x 8 m, tiles of 4 m -> 2 x 2 tiles
    b = BuildingFootprint(id="b1", use_class="residential", polygon=rect(5, 5, 2, 2))
    out, mask = rasterize_buildings([b], grid)
    grid = grid.with_active_mask(mask)
    part = partition_tiles(grid, 4.0)
    red = build_redirection(mask, out)
    return grid, out, red, part


def test_weights_conserve_rain_without_capture():
    grid, buildings, red, part = _weights_setup()
    w = rain_weights(grid, buildings, red, part)
    # every cell's rain lands somewhere: actives get 1, roofs add on top
    assert w.sum() == pytest.approx(grid.n_active + 4)
    assert (w[~grid.active_mask] == 0).all()
    assert w.max() > 1.0  # some cell receives roof water on top of its own


def test_weights_full_capture_zeroes_tile():
    grid, buildings, red, part = _weights_setup()
    # building at (5..7)^2 sits in the NE tile (id 4)
    w = rain_weights(grid, buildings, red, part,
                     captures=(CaptureSpec(tile_id=4, fraction=1.0),))
    ne = part.tile_mask(4)
    assert (w[ne] == 0).all()
    assert w.sum() == pytest.approx((grid.active_mask & ~ne).sum())


def test_weights_partial_capture_scales():
    grid, buildings, red, part = _weights_setup()
    w0 = rain_weights(grid, buildings, red, part)
    w = rain_weights(grid, buildings, red, part,
                     captures=(CaptureSpec(tile_id=4, fraction=0.25),))
    ne = part.tile_mask(4)
    np.testing.assert_allclose(w[ne], 0.75 * w0[ne])
    np.testing.assert_array_equal(w[~ne], w0[~ne])


def test_weights_roof_attribution_follows_roof_tile():
    # roof in one tile, redirect target in another: capture of the roof's
    # tile must remove the roof water even though it lands elsewhere
    grid = flat_grid(8, 8, cell=1.0)
    b = BuildingFootprint(id="edge", use_class="residential",
                          polygon=rect(4, 0, 1, 1))  # in NE... east tile col 4
    out, mask = rasterize_buildings([b], grid)
    grid2 = grid.with_active_mask(mask)
    part = partition_tiles(grid2, 4.0)
    red = build_redirection(mask, out)
    roof = 0 * 8 + 4
    assert part.cell_to_tile.flat[roof] == 2        # roof in the SE tile
    target = red.target_of[roof]
    assert part.cell_to_tile.flat[target] == 1      # lands in the SW tile
    w = rain_weights(grid2, out, red, part,
                     captures=(CaptureSpec(tile_id=2, fraction=1.0),))
    assert w.flat[target] == 1.0                    # own rain only, roof removed
    w2 = rain_weights(grid2, out, red, part,
                      captures=(CaptureSpec(tile_id=1, fraction=1.0),))
    assert w2.flat[target] == 1.0                   # roof water still arrives


def test_rain_rate_scales_weights():
    grid, buildings, red, part = _weights_setup()
    w = rain_weights(grid, buildings, red, part)
    h = make_uniform_hyetograph(36.0, 60.0)  # 36 mm/h = 1e-5 m/s
    r = rain_rate(w, h, 10.0)
    np.testing.assert_allclose(r, w * 1e-5)
    assert (rain_rate(w, h, 3600.0) == 0).all()


def test_load_storms(tmp_path):
    p = tmp_path / "storms.json"
    p.write_text(json.dumps([
        {"return_period_y": 30, "depth_mm": 30.0, "duration_min": 60.0},
        {"return_period_y": 5, "depth_mm": 10.0, "duration_min": 30.0}]))
    storms = load_storms(p)
    assert [s.return_period_y for s in storms] == [5, 30]
    assert storms[0].hyetograph.total_depth_m() == pytest.approx(0.010)
