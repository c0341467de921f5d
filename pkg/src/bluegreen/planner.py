"""Source-area ranking and intervention appraisal.

The planning loop runs the storm set twice over: once as-is (baseline) and
once per candidate tile with that tile's rainfall removed at the source
(capture). The damage avoided by capturing a tile is the tile's benefit;
tiles are ranked by benefit weighted by how green they already are (green
land is where source-control measures can actually be built):

    score = (benefit / GBP 1M) x green_fraction

Concrete interventions (permeable pavement, detention ponds) are then
costed and re-simulated to report per-storm benefit against whole-life cost.

All scenario runs go through the registry, so repeating a matrix reuses
finished runs and two executions of the same project produce byte-identical
artifacts regardless of worker count.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .damage import ScenarioDamages, aggregate
from .errors import ConfigurationError, GeometryError
from .exposure import classify_all
from .geodata import LandClass, LandUseMap, TerrainGrid, TilePartition
from .hydro import (DetentionPond, Intervention, PermeablePavement, RunConfig,
                    ScenarioResult, SurfaceProperties, apply_interventions,
                    make_surface, pavement_cells, run_scenario)
from .project import Scene
from .registry import Registry, canonical_json, hash_array, run_key
from .storm import CaptureSpec, StormScenario

GBP_PER_MILLION = 1_000_000.0


# ---------------------------------------------------------------------------
# Costing


@dataclass(frozen=True)
class CostRates:
    """Unit rates; override any field to re-price an appraisal."""

    pavement_install_gbp_m2: float = 30.0
    pavement_maintenance_gbp_m2_y: float = 0.40
    pavement_lifetime_y: float = 40.0
    pond_install_gbp_m3: float = 16.0     # GBP 80,000 per 5,000 m3 of storage
    pond_maintenance_gbp_m2_y: float = 0.60
    pond_lifetime_y: float = 15.0


@dataclass(frozen=True)
class CostBreakdown:
    install_gbp: float
    maintenance_gbp_per_y: float
    lifetime_y: float

    @property
    def whole_life_gbp(self) -> float:
        return self.install_gbp + self.maintenance_gbp_per_y * self.lifetime_y


def cost_intervention(iv: Intervention, rates: CostRates | None = None) -> CostBreakdown:
    rates = rates or CostRates()
    if isinstance(iv, PermeablePavement):
        if iv.area_m2 <= 0:
            raise ConfigurationError("pavement area must be positive")
        return CostBreakdown(
            install_gbp=iv.area_m2 * rates.pavement_install_gbp_m2,
            maintenance_gbp_per_y=iv.area_m2 * rates.pavement_maintenance_gbp_m2_y,
            lifetime_y=rates.pavement_lifetime_y)
    if isinstance(iv, DetentionPond):
        if iv.area_m2 <= 0 or iv.volume_m3 <= 0:
            raise ConfigurationError("pond area and volume must be positive")
        return CostBreakdown(
            install_gbp=iv.volume_m3 * rates.pond_install_gbp_m3,
            maintenance_gbp_per_y=iv.area_m2 * rates.pond_maintenance_gbp_m2_y,
            lifetime_y=rates.pond_lifetime_y)
    raise ConfigurationError(f"cannot cost {iv!r}")


# ---------------------------------------------------------------------------
# Benefit and ranking


def benefit_gbp(baseline: float, treated: float) -> float:
    """Damage avoided; negative when the change makes flooding worse."""
    return baseline - treated


def tile_score(benefit: float, green_fraction: float) -> float:
    return benefit / GBP_PER_MILLION * green_fraction


@dataclass(frozen=True)
class TileScore:
    tile_id: int
    green_fraction: float
    benefit_gbp: float
    score: float


def rank_tiles(entries: list[tuple[int, float, float]]) -> list[TileScore]:
    """Rank (tile_id, green_fraction, benefit_gbp) rows by score.

    Ties resolve to the larger benefit, then the lower tile id, so a full
    ordering always exists and repeat runs agree.
    """
    scored = [TileScore(tile_id=t, green_fraction=gf, benefit_gbp=b,
                        score=tile_score(b, gf))
              for t, gf, b in entries]
    return sorted(scored, key=lambda s: (-s.score, -s.benefit_gbp, s.tile_id))


def expected_annual_damage(damage_by_rp: dict[int, float]) -> float:
    """Trapezoidal integral of damage over annual exceedance probability.

    Events more frequent than the smallest return period are assumed
    damage-free; beyond the largest, damage is held at the largest's value.
    """
    if not damage_by_rp:
        return 0.0
    pts = sorted(((1.0 / rp, d) for rp, d in damage_by_rp.items()), reverse=True)
    ead = 0.0
    for (p0, d0), (p1, d1) in zip(pts, pts[1:]):
        ead += 0.5 * (d0 + d1) * (p0 - p1)
    ead += pts[-1][0] * pts[-1][1]
    return ead


# ---------------------------------------------------------------------------
# Scenario matrix


@dataclass(frozen=True)
class RunRef:
    """Index entry for one completed run."""

    key: str
    return_period_y: int
    tile_id: int | None
    capture_fraction: float | None
    total_damage_gbp: float
    boundary_outflow_m3: float
    rain_in_m3: float
    n_steps: int


@dataclass
class MatrixResult:
    baseline: dict[int, RunRef] = field(default_factory=dict)             # rp -> ref
    capture: dict[tuple[int, int], RunRef] = field(default_factory=dict)  # (rp, tile) -> ref

    @property
    def n_runs(self) -> int:
        return len(self.baseline) + len(self.capture)

    def benefit(self, rp: int, tile_id: int) -> float:
        base = self.baseline[rp].total_damage_gbp
        return benefit_gbp(base, self.capture[(rp, tile_id)].total_damage_gbp)

    def ranking(self, rp: int, partition: TilePartition) -> list[TileScore]:
        if partition.green_fraction is None:
            raise ConfigurationError("partition has no green fractions")
        rows = []
        for (r, tile_id) in sorted(self.capture):
            if r != rp:
                continue
            rows.append((tile_id, float(partition.green_fraction[tile_id - 1]),
                         self.benefit(rp, tile_id)))
        if not rows:
            raise ConfigurationError(f"no capture runs for return period {rp}")
        return rank_tiles(rows)


def scene_hash(scene: Scene) -> str:
    """Short stable id of the scene's output-determining inputs."""
    return hashlib.sha256(
        canonical_json(scene_fingerprint(scene)).encode()).hexdigest()[:12]


def scene_fingerprint(scene: Scene) -> dict:
    """Everything output-determining that is shared by all runs of a scene."""
    props = scene.props
    buildings = [{"id": b.id, "use": b.use_class,
                  "cells": sorted(b.footprint_cells),
                  "buffer": sorted(b.buffer_cells)}
                 for b in sorted(scene.buildings, key=lambda b: b.id)]
    curves = {uc: {"depth": list(c.depth_m), "gbp": list(c.damage_gbp),
                   "per_m2": c.per_m2}
              for uc, c in sorted(scene.curves.items())}
    return {
        "elevation": hash_array(np.nan_to_num(props.elevation, nan=-1e30)),
        "active": hash_array(props.active),
        "manning": hash_array(props.manning_n),
        "inf_rate": hash_array(props.infiltration_rate_ms),
        "inf_cap": hash_array(np.nan_to_num(props.infiltration_capacity_m,
                                            posinf=-1.0)),
        "open_edges": sorted(props.open_edges),
        "cell_size": props.cell_size,
        "origin": [scene.grid.origin_x, scene.grid.origin_y],
        "buildings": hashlib.sha256(
            canonical_json(buildings).encode()).hexdigest(),
        "curves": hashlib.sha256(canonical_json(curves).encode()).hexdigest(),
        "tile_size": scene.partition.tile_size,
    }


def _execute_run(scene: Scene, registry: Registry, key: str, meta: dict,
                 storm: StormScenario, weights: np.ndarray,
                 props: SurfaceProperties | None = None,
                 grid: TerrainGrid | None = None,
                 buildings=None, curves=None) -> RunRef:
    """Solve + post-process + persist one scenario (skips the solve when the
    registry already holds the key)."""
    grid = grid if grid is not None else scene.grid
    props = props if props is not None else scene.props
    buildings = buildings if buildings is not None else list(scene.buildings)
    curves = curves if curves is not None else scene.curves

    if not registry.has(key):
        config = scene.project.solver.run_config()
        result = run_scenario(props, storm.hyetograph, config,
                              rain_weights=weights, scenario=storm)
        result = ScenarioResult(
            scenario=result.scenario,
            max_depth=_georef(result, grid),
            ledger=result.ledger, final_state=result.final_state,
            n_steps=result.n_steps, wall_time_s=result.wall_time_s)
        records = classify_all(buildings, result.max_depth.depth_m)
        damages = aggregate(buildings, records, curves, grid.cell_area)
        registry.store(key, meta, result, records, damages)

    ledger = registry.load_ledger(key)
    dmg = registry.load_damages(key)
    stored_meta = registry.load_meta(key)
    return RunRef(key=key,
                  return_period_y=meta["return_period_y"],
                  tile_id=meta.get("tile_id"),
                  capture_fraction=meta.get("capture_fraction"),
                  total_damage_gbp=dmg["total_gbp"],
                  boundary_outflow_m3=ledger["boundary_outflow_m3"],
                  rain_in_m3=ledger["rain_in_m3"],
                  n_steps=stored_meta["n_steps"])


def _georef(result: ScenarioResult, grid: TerrainGrid):
    from .hydro import MaxDepthRaster
    return MaxDepthRaster(depth_m=result.max_depth.depth_m,
                          cell_size=grid.cell_size,
                          origin_x=grid.origin_x, origin_y=grid.origin_y)


def _storm_payload(storm: StormScenario, config: RunConfig) -> dict:
    return {"rp": storm.return_period_y,
            "edges": list(storm.hyetograph.t_edges_s),
            "mm_h": list(storm.hyetograph.intensity_mm_h),
            "cfl": config.cfl, "dt_max": config.dt_max_s, "t_end": config.t_end_s,
            "dry_eps": config.dry_eps_m, "g": config.g}


def run_matrix(scene: Scene, registry: Registry,
               tiles: list[int] | None = None,
               capture_fraction: float | None = None,
               workers: int = 1,
               rps: list[int] | None = None) -> MatrixResult:
    """Baseline runs for every storm plus one capture run per (storm, tile).

    tiles defaults to the populated tiles of the partition; capture_fraction
    defaults to the project's. Tasks execute on a thread pool (the solver
    kernel releases the GIL); outputs are independent of worker count.
    """
    if workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {workers}")
    fraction = (scene.project.capture_fraction
                if capture_fraction is None else float(capture_fraction))
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError(f"capture fraction must be in [0, 1], got {fraction}")
    if tiles is None:
        tiles = list(scene.partition.populated_ids)
    else:
        bad = [t for t in tiles if not 1 <= t <= scene.partition.n_tiles]
        if bad:
            raise ConfigurationError(f"tiles out of range: {bad}")
    storms = list(scene.project.storms)
    if rps is not None:
        storms = [scene.storm_by_rp(rp) for rp in rps]

    fp = scene_fingerprint(scene)
    sh = scene_hash(scene)
    config = scene.project.solver.run_config()

    tasks: list[tuple[str, dict, StormScenario, np.ndarray]] = []
    for storm in storms:
        payload = {"scene": fp, "storm": _storm_payload(storm, config),
                   "weights": hash_array(scene.base_weights),
                   "kind": "baseline", "tile": None, "fraction": None}
        meta = {"return_period_y": storm.return_period_y, "tile_id": None,
                "capture_fraction": None, "kind": "baseline",
                "scene_hash": sh, "storm": _storm_payload(storm, config)}
        tasks.append((run_key(payload), meta, storm, scene.base_weights))

    weights_by_tile = {t: scene.weights_with_capture([CaptureSpec(t, fraction)])
                       for t in tiles}
    for storm in storms:
        for t in tiles:
            w = weights_by_tile[t]
            payload = {"scene": fp, "storm": _storm_payload(storm, config),
                       "weights": hash_array(w),
                       "kind": "capture", "tile": t, "fraction": fraction}
            meta = {"return_period_y": storm.return_period_y, "tile_id": t,
                    "capture_fraction": fraction, "kind": "capture",
                    "scene_hash": sh, "storm": _storm_payload(storm, config)}
            tasks.append((run_key(payload), meta, storm, w))

    def _work(task):
        key, meta, storm, weights = task
        return _execute_run(scene, registry, key, meta, storm, weights)

    if workers == 1:
        refs = [_work(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            refs = list(pool.map(_work, tasks))

    out = MatrixResult()
    for ref in refs:
        if ref.tile_id is None:
            out.baseline[ref.return_period_y] = ref
        else:
            out.capture[(ref.return_period_y, ref.tile_id)] = ref
    return out


def matrix_from_registry(scene: Scene, registry: Registry,
                         capture_fraction: float | None = None) -> MatrixResult:
    """Reassemble a MatrixResult from runs already stored for this scene.

    Only records whose scene hash matches the loaded inputs count; stale runs
    from an edited project are ignored rather than silently mixed in.
    """
    sh = scene_hash(scene)
    fraction = (scene.project.capture_fraction
                if capture_fraction is None else float(capture_fraction))
    out = MatrixResult()
    for rec in registry.records():
        if rec.scene_hash != sh:
            continue
        dmg = registry.load_damages(rec.key)
        ledger = registry.load_ledger(rec.key)
        ref = RunRef(key=rec.key, return_period_y=rec.return_period_y,
                     tile_id=rec.tile_id, capture_fraction=rec.capture_fraction,
                     total_damage_gbp=dmg["total_gbp"],
                     boundary_outflow_m3=ledger["boundary_outflow_m3"],
                     rain_in_m3=ledger["rain_in_m3"], n_steps=rec.n_steps)
        if rec.kind == "baseline":
            out.baseline[rec.return_period_y] = ref
        elif rec.kind == "capture" and rec.capture_fraction == fraction:
            out.capture[(rec.return_period_y, rec.tile_id)] = ref
    return out


# ---------------------------------------------------------------------------
# Concrete interventions


def suggest_intervention(scene: Scene, tile_id: int,
                         pond_depth_m: float = 1.25) -> Intervention:
    """Propose a measure for a tile from its land cover alone.

    Mostly-paved tiles get permeable pavement over all their paved cells.
    Greener tiles get a detention pond on the green space: sized to hold the
    largest design storm falling on the tile, capped at half the green area,
    placed as a square at the green cells' centroid.
    """
    part = scene.partition
    if not 1 <= tile_id <= part.n_tiles:
        raise ConfigurationError(f"tile {tile_id} out of range 1..{part.n_tiles}")
    cell_area = scene.grid.cell_area
    in_tile = part.cell_to_tile == tile_id
    is_building = scene.landuse.classes == int(LandClass.BUILDING)
    domain = in_tile & (scene.grid.active_mask | is_building)  # nodata excluded
    paved = in_tile & (scene.landuse.classes == int(LandClass.PAVED)) \
        & scene.grid.active_mask
    green = in_tile & (scene.landuse.classes == int(LandClass.GREEN)) \
        & scene.grid.active_mask

    n_domain = int(domain.sum())
    if n_domain == 0:
        raise ConfigurationError(f"tile {tile_id} has no usable cells")
    paved_area = float(paved.sum()) * cell_area
    green_area = float(green.sum()) * cell_area

    if paved_area >= 0.25 * n_domain * cell_area or green_area == 0.0:
        if paved_area == 0.0:
            raise ConfigurationError(f"tile {tile_id} has neither paved nor green cells")
        return PermeablePavement(tile_id=tile_id, area_m2=paved_area)

    depth_m = max(s.hyetograph.total_depth_m() for s in scene.project.storms)
    volume = depth_m * n_domain * cell_area
    area = min(volume / pond_depth_m, 0.5 * green_area)
    if area < cell_area:
        area = cell_area
    volume = area * pond_depth_m
    side = float(np.sqrt(area))

    rr, cc = np.nonzero(green)
    cy = scene.grid.origin_y + (float(rr.mean()) + 0.5) * scene.grid.cell_size
    cx = scene.grid.origin_x + (float(cc.mean()) + 0.5) * scene.grid.cell_size
    half = side / 2.0
    poly = ((cx - half, cy - half), (cx + half, cy - half),
            (cx + half, cy + half), (cx - half, cy + half))
    return DetentionPond(polygon=poly, area_m2=area, volume_m3=volume)


def build_intervention_scene(scene: Scene, interventions: list[Intervention]) \
        -> tuple[TerrainGrid, LandUseMap, SurfaceProperties]:
    """Modified terrain + land use + solver surface for a package of measures."""
    grid2, landuse2 = apply_interventions(scene.grid, scene.landuse,
                                          scene.partition, interventions)
    solver = scene.project.solver
    props = make_surface(grid2, landuse2,
                         manning_by_class=solver.manning_by_class(),
                         infiltration_by_class=solver.infiltration_by_class(),
                         open_edges=solver.open_edges)
    rate = props.infiltration_rate_ms.copy()
    cap = props.infiltration_capacity_m.copy()
    touched = False
    for iv in interventions:
        if isinstance(iv, PermeablePavement):
            cells = pavement_cells(scene.partition, scene.landuse, iv.tile_id)
            cells &= grid2.active_mask
            rate[cells] = iv.infiltration_rate_mmh * 0.001 / 3600.0
            cap[cells] = np.inf if iv.capacity_mm <= 0 else iv.capacity_mm * 0.001
            touched = True
    if touched:
        props = SurfaceProperties(
            elevation=props.elevation, active=props.active,
            manning_n=props.manning_n, infiltration_rate_ms=rate,
            infiltration_capacity_m=cap, face_x=props.face_x,
            face_y=props.face_y, cell_size=props.cell_size,
            open_edges=props.open_edges)
    return grid2, landuse2, props


@dataclass(frozen=True)
class RpOutcome:
    baseline_key: str
    treated_key: str
    baseline_gbp: float
    treated_gbp: float

    @property
    def benefit_gbp(self) -> float:
        return self.baseline_gbp - self.treated_gbp


@dataclass(frozen=True)
class InterventionReport:
    interventions: tuple[Intervention, ...]
    cost: CostBreakdown
    per_rp: dict[int, RpOutcome]
    ead_baseline_gbp: float
    ead_treated_gbp: float

    @property
    def ead_benefit_gbp(self) -> float:
        return self.ead_baseline_gbp - self.ead_treated_gbp

    @property
    def lifetime_benefit_gbp(self) -> float:
        return self.ead_benefit_gbp * self.cost.lifetime_y

    @property
    def benefit_cost_ratio(self) -> float:
        c = self.cost.whole_life_gbp
        return self.lifetime_benefit_gbp / c if c > 0 else float("inf")


def evaluate_intervention(scene: Scene, registry: Registry,
                          interventions: list[Intervention] | Intervention,
                          rates: CostRates | None = None,
                          workers: int = 1) -> InterventionReport:
    """Price a measure and re-simulate every storm with it in place.

    Baseline runs are shared with the matrix (same keys) so evaluating after
    a scan only adds the treated runs.
    """
    if isinstance(interventions, (PermeablePavement, DetentionPond)):
        interventions = [interventions]
    if not interventions:
        raise ConfigurationError("no interventions to evaluate")

    grid2, landuse2, props2 = build_intervention_scene(scene, interventions)
    fp = scene_fingerprint(scene)
    sh = scene_hash(scene)
    iv_desc = []
    for iv in interventions:
        if isinstance(iv, PermeablePavement):
            iv_desc.append({"kind": iv.kind, "tile": iv.tile_id,
                            "area": iv.area_m2, "rate": iv.infiltration_rate_mmh,
                            "cap": iv.capacity_mm})
        else:
            iv_desc.append({"kind": iv.kind, "poly": [list(p) for p in iv.polygon],
                            "area": iv.area_m2, "vol": iv.volume_m3})

    config = scene.project.solver.run_config()
    tasks = []
    for storm in scene.project.storms:
        bl_payload = {"scene": fp, "storm": _storm_payload(storm, config),
                      "weights": hash_array(scene.base_weights),
                      "kind": "baseline", "tile": None, "fraction": None}
        bl_meta = {"return_period_y": storm.return_period_y, "tile_id": None,
                   "capture_fraction": None, "kind": "baseline",
                   "scene_hash": sh, "storm": _storm_payload(storm, config)}
        tr_payload = {"scene": fp, "storm": _storm_payload(storm, config),
                      "weights": hash_array(scene.base_weights),
                      "kind": "intervention", "interventions": iv_desc}
        tr_meta = {"return_period_y": storm.return_period_y, "tile_id": None,
                   "capture_fraction": None, "kind": "intervention",
                   "interventions": iv_desc, "scene_hash": sh,
                   "storm": _storm_payload(storm, config)}
        tasks.append((storm, run_key(bl_payload), bl_meta, run_key(tr_payload), tr_meta))

    def _work(task):
        storm, bl_key, bl_meta, tr_key, tr_meta = task
        base = _execute_run(scene, registry, bl_key, bl_meta, storm,
                            scene.base_weights)
        treated = _execute_run(scene, registry, tr_key, tr_meta, storm,
                               scene.base_weights, props=props2, grid=grid2)
        return storm.return_period_y, base, treated

    if workers == 1:
        results = [_work(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_work, tasks))

    per_rp = {}
    for rp, base, treated in sorted(results):
        per_rp[rp] = RpOutcome(baseline_key=base.key, treated_key=treated.key,
                               baseline_gbp=base.total_damage_gbp,
                               treated_gbp=treated.total_damage_gbp)

    total_cost = CostBreakdown(
        install_gbp=sum(cost_intervention(iv, rates).install_gbp
                        for iv in interventions),
        maintenance_gbp_per_y=sum(cost_intervention(iv, rates).maintenance_gbp_per_y
                                  for iv in interventions),
        lifetime_y=min(cost_intervention(iv, rates).lifetime_y
                       for iv in interventions))
    ead_base = expected_annual_damage({rp: o.baseline_gbp for rp, o in per_rp.items()})
    ead_treat = expected_annual_damage({rp: o.treated_gbp for rp, o in per_rp.items()})
    return InterventionReport(
        interventions=tuple(interventions),
        cost=total_cost, per_rp=per_rp,
        ead_baseline_gbp=ead_base, ead_treated_gbp=ead_treat)
