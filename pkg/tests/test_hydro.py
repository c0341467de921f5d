import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import flat_grid, rect
from bluegreen.errors import (ConfigurationError, ConservationError,
                              GeometryError, SolverDivergenceError)
from bluegreen.geodata import (LandClass, BuildingFootprint, LandUseMap,
                               TerrainGrid, partition_tiles, rasterize_buildings)
from bluegreen.hydro import (DRY_EPS, DetentionPond, FlowState, G,
                             PermeablePavement, RunConfig, VolumeLedger,
                             apply_interventions, build_faces, cfl_dt,
                             make_surface, pavement_cells, run_scenario, step)
from bluegreen.storm import Hyetograph, make_uniform_hyetograph


def _surface(grid, **kw):
    return make_surface(grid, **kw)


def closed_surface(grid, **kw):
    kw.setdefault("open_edges", ())
    return make_surface(grid, **kw)


# -- face classification -------------------------------------------------------


def test_faces_all_walls_when_closed():
    grid = flat_grid(3, 3)
    props = closed_surface(grid)
    # x faces: (3, 4); boundary columns are walls, interior faces interior
    assert props.face_x.shape == (3, 4)
    assert props.face_y.shape == (4, 3)
    assert (props.face_x[:, 1:3] == 0).all()
    assert (props.face_x[:, 0] != 0).all() and (props.face_x[:, 3] != 0).all()


def test_faces_open_only_on_requested_edges():
    grid = flat_grid(3, 3)
    props = make_surface(grid, open_edges=("east",))
    open_codes = {4, 5}
    east = set(props.face_x[:, 3].tolist())
    west = set(props.face_x[:, 0].tolist())
    north = set(props.face_y[3, :].tolist())
    assert east <= open_codes and not (west & open_codes)
    assert not (north & open_codes)


def test_faces_nodata_island_is_dead_or_wall():
    z = np.zeros((3, 3))
    z[1, 1] = np.nan
    grid = TerrainGrid(origin_x=0, origin_y=0, cell_size=1.0, elevation=z,
                       active_mask=np.isfinite(z))
    props = closed_surface(grid)
    # faces around the hole must not be interior
    assert props.face_x[1, 1] != 0 and props.face_x[1, 2] != 0
    assert props.face_y[1, 1] != 0 and props.face_y[2, 1] != 0


def test_make_surface_class_defaults():
    grid = flat_grid(2, 2)
    classes = np.array([[0, 1], [2, 3]], dtype=np.int8)
    props = make_surface(grid, LandUseMap(classes=classes))
    assert props.manning_n[0, 0] == 0.035   # green
    assert props.manning_n[0, 1] == 0.02    # paved
    assert props.manning_n[1, 1] == 0.03    # pond
    assert props.infiltration_rate_ms[0, 0] == pytest.approx(12.5 / 1000 / 3600)
    assert props.infiltration_rate_ms[0, 1] == 0.0
    assert np.isinf(props.infiltration_capacity_m[0, 0])


# -- still water and lake at rest ------------------------------------------------


def test_still_water_is_bit_exact():
    grid = flat_grid(9, 9, cell=2.0, z=1.5)
    props = closed_surface(grid)
    state = FlowState.dry((9, 9))
    state.h[:] = 0.25
    config = RunConfig(t_end_s=1.0, dt_max_s=0.05)
    before = state.h.copy()
    for _ in range(20):
        step(state, props, config, 0.05)
    np.testing.assert_array_equal(state.h, before)
    assert (state.qx == 0).all() and (state.qy == 0).all()


def test_lake_at_rest_over_bathymetry():
    rng = np.random.default_rng(3)
    z = rng.uniform(0.0, 0.6, size=(24, 24))
    grid = TerrainGrid(origin_x=0, origin_y=0, cell_size=1.0, elevation=z,
                       active_mask=np.ones_like(z, dtype=bool))
    props = closed_surface(grid)
    state = FlowState.dry((24, 24))
    state.h[:] = np.maximum(0.0, 0.8 - z)
    config = RunConfig(t_end_s=1e9, dt_max_s=0.05)
    for _ in range(300):
        dt = cfl_dt(state, props, config)
        step(state, props, config, dt)
    assert max(np.abs(state.qx).max(), np.abs(state.qy).max()) < 1e-12


# -- rain, infiltration, ledger ---------------------------------------------------


def test_closed_basin_rain_fill():
    grid = flat_grid(20, 20, cell=2.0)
    props = closed_surface(grid)  # default land: paved, no infiltration
    res = run_scenario(props, make_uniform_hyetograph(50.0, 60.0),
                       RunConfig(t_end_s=3600.0))
    np.testing.assert_allclose(res.final_state.h, 0.05, atol=1e-9)
    assert res.ledger.rain_in_m3 == pytest.approx(0.05 * 1600.0, rel=1e-12)
    assert res.ledger.relative_residual() < 1e-12
    res.ledger.check_closed(1e-9)


def test_green_cells_swallow_lighter_rain():
    grid = flat_grid(10, 10, cell=1.0)
    classes = np.zeros((10, 10), dtype=np.int8)  # all green
    props = closed_surface(grid, landuse=LandUseMap(classes=classes),
                           infiltration_by_class={LandClass.GREEN: (200.0, 0.0)})
    res = run_scenario(props, make_uniform_hyetograph(20.0, 10.0),  # 120 mm/h
                       RunConfig(t_end_s=900.0, dt_max_s=5.0))
    assert res.final_state.h.max() == 0.0
    assert res.ledger.infiltrated_m3 == pytest.approx(res.ledger.rain_in_m3, rel=1e-12)
    assert res.ledger.stored_m3 == 0.0


def test_infiltration_capacity_cap():
    grid = flat_grid(6, 6, cell=1.0)
    classes = np.zeros((6, 6), dtype=np.int8)
    props = closed_surface(grid, landuse=LandUseMap(classes=classes),
                           infiltration_by_class={LandClass.GREEN: (500.0, 5.0)})
    res = run_scenario(props, make_uniform_hyetograph(20.0, 30.0),
                       RunConfig(t_end_s=1800.0, dt_max_s=5.0))
    area = 36.0
    assert res.ledger.infiltrated_m3 == pytest.approx(0.005 * area, rel=1e-12)
    assert res.ledger.stored_m3 == pytest.approx(0.015 * area, rel=1e-9)
    np.testing.assert_allclose(res.final_state.infiltrated_depth_m, 0.005,
                               atol=1e-15)


def test_rain_totals_exact_across_intensity_edges():
    grid = flat_grid(8, 8, cell=1.0)
    props = closed_surface(grid)
    hyet = Hyetograph(t_edges_s=(0.0, 100.0, 300.0), intensity_mm_h=(90.0, 18.0))
    # dt_max deliberately not a divisor of the edge times
    res = run_scenario(props, hyet, RunConfig(t_end_s=300.0, dt_max_s=7.0))
    want = (90.0 * 100 + 18.0 * 200) / 1000.0 / 3600.0 * 64.0
    assert res.ledger.rain_in_m3 == pytest.approx(want, rel=1e-12)


def test_open_edge_drains_slope():
    z = np.linspace(1.0, 0.0, 30)[None, :] * np.ones((10, 1))
    grid = TerrainGrid(origin_x=0, origin_y=0, cell_size=1.0, elevation=z,
                       active_mask=np.ones_like(z, dtype=bool))
    props = make_surface(grid, open_edges=("east",))
    state = FlowState.dry((10, 30))
    state.h[:, :5] = 0.2
    initial = state.h.sum() * 1.0
    res = run_scenario(props, None, RunConfig(t_end_s=600.0, dt_max_s=1.0),
                       initial=state)
    assert res.ledger.initial_m3 == pytest.approx(initial)
    assert res.ledger.boundary_outflow_m3 > 0.9 * initial
    assert res.ledger.relative_residual() < 1e-9


def test_walls_keep_volume():
    z = np.linspace(1.0, 0.0, 30)[None, :] * np.ones((10, 1))
    grid = TerrainGrid(origin_x=0, origin_y=0, cell_size=1.0, elevation=z,
                       active_mask=np.ones_like(z, dtype=bool))
    props = closed_surface(grid)
    state = FlowState.dry((10, 30))
    state.h[:, :5] = 0.2
    initial = state.h.sum()
    res = run_scenario(props, None, RunConfig(t_end_s=120.0, dt_max_s=1.0),
                       initial=state)
    assert res.ledger.boundary_outflow_m3 == 0.0
    assert res.ledger.stored_m3 == pytest.approx(initial, rel=1e-12)


# -- friction -------------------------------------------------------------------


def test_manning_friction_semi_implicit_factor():
    rng = np.random.default_rng(11)
    z = rng.uniform(0, 0.05, size=(5, 5))
    grid = TerrainGrid(origin_x=0, origin_y=0, cell_size=1.0, elevation=z,
                       active_mask=np.ones_like(z, dtype=bool))
    frictionless = closed_surface(grid, manning_by_class={LandClass.PAVED: 0.0})
    rough = closed_surface(grid, manning_by_class={LandClass.PAVED: 0.05})

    def one_step(props):
        state = FlowState.dry((5, 5))
        state.h[:] = 0.3
        state.qx[:] = 0.06
        state.qy[:] = -0.02
        dt = 0.05
        step(state, props, RunConfig(t_end_s=1.0, dt_max_s=dt), dt)
        return state

    a = one_step(frictionless)
    b = one_step(rough)
    dt = 0.05
    wet = a.h > DRY_EPS
    sp = np.sqrt((a.qx / a.h) ** 2 + (a.qy / a.h) ** 2)
    denom = 1.0 + dt * G * 0.05**2 * sp / a.h ** (4.0 / 3.0)
    np.testing.assert_allclose(b.qx[wet], (a.qx / denom)[wet], rtol=1e-12)
    np.testing.assert_allclose(b.qy[wet], (a.qy / denom)[wet], rtol=1e-12)
    np.testing.assert_array_equal(a.h, b.h)  # friction moves momentum only


# -- stepping control -----------------------------------------------------------


def test_cfl_dt_dry_gives_dt_max():
    grid = flat_grid(4, 4)
    props = closed_surface(grid)
    state = FlowState.dry((4, 4))
    assert cfl_dt(state, props, RunConfig(dt_max_s=8.0)) == 8.0


def test_cfl_dt_limits_by_wave_speed():
    grid = flat_grid(4, 4, cell=2.0)
    props = closed_surface(grid)
    state = FlowState.dry((4, 4))
    state.h[:] = 1.0
    config = RunConfig(cfl=0.5, dt_max_s=100.0)
    dt = cfl_dt(state, props, config)
    assert dt == pytest.approx(0.5 * 2.0 / np.sqrt(G))


def test_divergence_reported_with_cell():
    grid = flat_grid(5, 5)
    props = closed_surface(grid)
    state = FlowState.dry((5, 5))
    state.h[2, 3] = np.inf
    with pytest.raises(SolverDivergenceError) as exc:
        step(state, props, RunConfig(), 0.01)
    # first bad cell in scan order: the seed or a neighbour it spread to
    r, c = exc.value.cell
    assert abs(r - 2) <= 1 and abs(c - 3) <= 1


def test_divergence_check_can_be_disabled():
    grid = flat_grid(5, 5)
    props = closed_surface(grid)
    state = FlowState.dry((5, 5))
    state.h[2, 3] = np.inf
    step(state, props, RunConfig(divergence_check=False), 0.01)  # no raise


def test_run_scenario_deterministic():
    rng = np.random.default_rng(5)
    z = rng.uniform(0, 0.4, size=(16, 16))
    grid = TerrainGrid(origin_x=0, origin_y=0, cell_size=1.0, elevation=z,
                       active_mask=np.ones_like(z, dtype=bool))
    props = make_surface(grid, open_edges=("east", "north"))
    hyet = make_uniform_hyetograph(30.0, 10.0)
    a = run_scenario(props, hyet, RunConfig(t_end_s=900.0, dt_max_s=2.0))
    b = run_scenario(props, hyet, RunConfig(t_end_s=900.0, dt_max_s=2.0))
    assert a.n_steps == b.n_steps
    assert a.max_depth.depth_m.tobytes() == b.max_depth.depth_m.tobytes()
    assert a.final_state.h.tobytes() == b.final_state.h.tobytes()
    assert a.ledger.as_dict() == b.ledger.as_dict()


def test_max_depth_seeded_from_initial_state():
    grid = flat_grid(6, 6)
    props = make_surface(grid, open_edges=("east",))
    state = FlowState.dry((6, 6))
    state.h[3, 3] = 0.4
    res = run_scenario(props, None, RunConfig(t_end_s=60.0, dt_max_s=0.5),
                       initial=state)
    assert res.max_depth.depth_m[3, 3] >= 0.4
    assert state.h[3, 3] == 0.4  # caller's state untouched


def test_flowstate_copy_is_deep():
    s = FlowState.dry((3, 3))
    s.h[0, 0] = 1.0
    c = s.copy()
    c.h[0, 0] = 2.0
    assert s.h[0, 0] == 1.0
    assert c.max_speed is None


def test_run_config_validation():
    with pytest.raises(ConfigurationError):
        RunConfig(cfl=0.0)
    with pytest.raises(ConfigurationError):
        RunConfig(cfl=1.5)
    with pytest.raises(ConfigurationError):
        RunConfig(t_end_s=-1.0)


# -- interventions ---------------------------------------------------------------


def _scene_bits(n=10):
    grid = flat_grid(n, n, cell=1.0, z=2.0)
    classes = np.ones((n, n), dtype=np.int8)  # all paved
    lu = LandUseMap(classes=classes)
    part = partition_tiles(grid, 5.0)
    return grid, lu, part


def test_pond_carves_terrain_and_class():
    grid, lu, part = _scene_bits()
    pond = DetentionPond(polygon=tuple(rect(2, 2, 4, 3)), area_m2=12.0,
                         volume_m3=18.0)
    g2, lu2 = apply_interventions(grid, lu, part, [pond])
    assert pond.depth_m == pytest.approx(1.5)
    carved = lu2.classes == int(LandClass.POND)
    assert carved.sum() == 12
    np.testing.assert_allclose(grid.elevation[carved] - g2.elevation[carved], 1.5)
    # inputs untouched
    assert (lu.classes == int(LandClass.POND)).sum() == 0
    assert grid.elevation[3, 3] == 2.0


def test_pond_off_active_rejected():
    grid, lu, part = _scene_bits()
    pond = DetentionPond(polygon=tuple(rect(50, 50, 4, 3)), area_m2=12.0,
                         volume_m3=6.0)
    with pytest.raises(GeometryError):
        apply_interventions(grid, lu, part, [pond])


def test_pond_on_building_rejected():
    grid, lu, part = _scene_bits()
    b = BuildingFootprint(id="b", use_class="residential", polygon=rect(3, 3, 2, 2))
    bs, mask = rasterize_buildings([b], grid)
    classes = lu.classes.copy()
    classes.flags.writeable = True
    for i in sorted(bs[0].footprint_cells):
        classes.flat[i] = int(LandClass.BUILDING)
    lu2 = LandUseMap(classes=classes)
    pond = DetentionPond(polygon=tuple(rect(2, 2, 4, 4)), area_m2=16.0,
                         volume_m3=8.0)
    with pytest.raises(GeometryError, match="building"):
        apply_interventions(grid.with_active_mask(mask), lu2, part, [pond])


def test_pavement_tile_range_checked():
    grid, lu, part = _scene_bits()
    iv = PermeablePavement(tile_id=99, area_m2=10.0)
    with pytest.raises(ConfigurationError):
        apply_interventions(grid, lu, part, [iv])


def test_pavement_cells_mask():
    grid, lu, part = _scene_bits()
    mask = pavement_cells(part, lu, 1)
    assert mask.sum() == 25
    assert mask[:5, :5].all()


# -- conservation property ---------------------------------------------------------


@settings(max_examples=8, deadline=None)
@given(depth_mm=st.floats(2.0, 60.0), seed=st.integers(0, 10 ** 6),
       open_east=st.booleans())
def test_ledger_closes_on_random_terrain(depth_mm, seed, open_east):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, 0.5, size=(12, 12))
    grid = TerrainGrid(origin_x=0, origin_y=0, cell_size=1.0, elevation=z,
                       active_mask=np.ones_like(z, dtype=bool))
    props = make_surface(grid, open_edges=("east",) if open_east else ())
    res = run_scenario(props, make_uniform_hyetograph(depth_mm, 5.0),
                       RunConfig(t_end_s=420.0, dt_max_s=2.0))
    assert res.ledger.relative_residual() < 1e-9
    if not open_east:
        assert res.ledger.boundary_outflow_m3 == 0.0
