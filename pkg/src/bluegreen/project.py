"""Project configuration: one JSON file naming the data inputs and settings.

A project directory holds the terrain raster, building footprints, land-use
polygons, damage curves, and a config listing the storm set and solver
settings. `Project.load` reads and validates the config; `Scene.build`
does the one-off geometry work (rasterize buildings, partition tiles,
compute green fractions, build roof redirection) shared by every run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geodata, hydro, storm
from .damage import DamageCurve, load_curves
from .errors import ConfigurationError
from .geodata import (BuildingFootprint, LandUseMap, TerrainGrid, TilePartition,
                      compute_green_fraction, load_buildings_geojson,
                      load_landuse_geojson, partition_tiles, rasterize_buildings)
from .hydro import EDGE_NAMES, RunConfig, SurfaceProperties, make_surface
from .storm import RainRedirection, StormScenario, build_redirection, make_uniform_hyetograph

SCHEMA_VERSION = 1

_CLASS_BY_NAME = {"green": geodata.LandClass.GREEN,
                  "paved": geodata.LandClass.PAVED,
                  "building": geodata.LandClass.BUILDING,
                  "pond": geodata.LandClass.POND}


@dataclass(frozen=True)
class SolverSettings:
    cfl: float = 0.5
    dt_max_s: float = 10.0
    t_end_s: float = 5400.0
    open_edges: tuple[str, ...] = EDGE_NAMES
    manning: dict[str, float] = field(default_factory=dict)
    infiltration: dict[str, tuple[float, float]] = field(default_factory=dict)

    def run_config(self) -> RunConfig:
        return RunConfig(cfl=self.cfl, dt_max_s=self.dt_max_s, t_end_s=self.t_end_s)

    def manning_by_class(self) -> dict[int, float]:
        return {int(_CLASS_BY_NAME[k]): v for k, v in self.manning.items()}

    def infiltration_by_class(self) -> dict[int, tuple[float, float]]:
        return {int(_CLASS_BY_NAME[k]): tuple(v) for k, v in self.infiltration.items()}


@dataclass(frozen=True)
class Project:
    name: str
    root: Path
    terrain_path: Path
    buildings_path: Path
    landuse_path: Path | None
    curves_path: Path
    tile_size_m: float
    storms: tuple[StormScenario, ...]
    solver: SolverSettings
    capture_fraction: float = 1.0

    @classmethod
    def load(cls, config_path: str | Path) -> "Project":
        config_path = Path(config_path)
        try:
            with open(config_path) as f:
                doc = json.load(f)
        except FileNotFoundError:
            raise ConfigurationError(f"project config not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{config_path}: invalid JSON ({exc})") from None

        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"{config_path}: schema_version {version!r} unsupported "
                f"(expected {SCHEMA_VERSION})")

        root = config_path.parent
        for key in ("terrain", "buildings", "curves"):
            if key not in doc:
                raise ConfigurationError(f"{config_path}: missing {key!r}")

        storms_doc = doc.get("storms")
        if not storms_doc:
            raise ConfigurationError(f"{config_path}: at least one storm required")
        seen: set[int] = set()
        scenarios = []
        for s in storms_doc:
            rp = int(s["return_period_y"])
            if rp <= 0:
                raise ConfigurationError(f"return period must be positive, got {rp}")
            if rp in seen:
                raise ConfigurationError(f"duplicate storm return period {rp}")
            seen.add(rp)
            scenarios.append(StormScenario(
                return_period_y=rp,
                hyetograph=make_uniform_hyetograph(float(s["depth_mm"]),
                                                   float(s["duration_min"]))))
        scenarios.sort(key=lambda s: s.return_period_y)

        sv = doc.get("solver", {})
        solver = SolverSettings(
            cfl=float(sv.get("cfl", 0.5)),
            dt_max_s=float(sv.get("dt_max_s", 10.0)),
            t_end_s=float(sv.get("t_end_s", 5400.0)),
            open_edges=tuple(sv.get("open_edges", list(EDGE_NAMES))),
            manning={str(k): float(v) for k, v in sv.get("manning", {}).items()},
            infiltration={str(k): (float(v[0]), float(v[1]))
                          for k, v in sv.get("infiltration", {}).items()})
        unknown = set(solver.open_edges) - set(EDGE_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown open_edges {sorted(unknown)}")
        unknown = set(solver.manning) | set(solver.infiltration)
        unknown -= set(_CLASS_BY_NAME)
        if unknown:
            raise ConfigurationError(f"unknown land classes {sorted(unknown)}")

        tile_size = float(doc.get("tile_size_m", 500.0))
        fraction = float(doc.get("capture_fraction", 1.0))
        if not 0.0 <= fraction <= 1.0:
            raise ConfigurationError(f"capture_fraction must be in [0, 1], got {fraction}")

        landuse = doc.get("landuse")
        return cls(name=str(doc.get("name", config_path.stem)),
                   root=root,
                   terrain_path=root / doc["terrain"],
                   buildings_path=root / doc["buildings"],
                   landuse_path=root / landuse if landuse else None,
                   curves_path=root / doc["curves"],
                   tile_size_m=tile_size,
                   storms=tuple(scenarios),
                   solver=solver,
                   capture_fraction=fraction)

    def validate(self) -> list[str]:
        """Check input files exist and are loadable; returns human-readable notes."""
        notes = []
        for label, p in (("terrain", self.terrain_path),
                         ("buildings", self.buildings_path),
                         ("curves", self.curves_path)):
            if not p.exists():
                raise ConfigurationError(f"{label} file missing: {p}")
        if self.landuse_path is not None and not self.landuse_path.exists():
            raise ConfigurationError(f"landuse file missing: {self.landuse_path}")
        scene = Scene.build(self)
        notes.append(f"grid {scene.grid.n_rows} x {scene.grid.n_cols} cells "
                     f"at {scene.grid.cell_size} m, {scene.grid.n_active} active")
        notes.append(f"{len(scene.buildings)} buildings "
                     f"({sum(1 for b in scene.buildings if not b.footprint_cells)} off-grid)")
        notes.append(f"{scene.partition.n_tiles} tiles "
                     f"({len(scene.partition.populated_ids)} populated) "
                     f"at {self.tile_size_m} m")
        notes.append(f"{len(self.storms)} storms: " +
                     ", ".join(f"rp{s.return_period_y}" for s in self.storms))
        missing = ({b.use_class for b in scene.buildings} - set(scene.curves))
        if missing:
            raise ConfigurationError(f"no damage curve for use classes {sorted(missing)}")
        return notes


@dataclass(frozen=True)
class Scene:
    """Everything derived from the project inputs that runs share read-only."""

    project: Project
    grid: TerrainGrid                  # active mask already excludes buildings
    buildings: tuple[BuildingFootprint, ...]
    landuse: LandUseMap
    partition: TilePartition
    props: SurfaceProperties
    redirection: RainRedirection
    base_weights: np.ndarray
    curves: dict[str, DamageCurve]

    def __post_init__(self):
        self.base_weights.setflags(write=False)

    @classmethod
    def build(cls, project: Project) -> "Scene":
        grid0 = geodata.load_terrain(project.terrain_path)
        buildings = load_buildings_geojson(project.buildings_path)
        buildings, mask = rasterize_buildings(buildings, grid0)
        grid = grid0.with_active_mask(mask)

        green_polys = (load_landuse_geojson(project.landuse_path)
                       if project.landuse_path else [])
        landuse = geodata.build_landuse(green_polys, grid0, buildings)

        partition = partition_tiles(grid, project.tile_size_m)
        gf = compute_green_fraction(landuse, partition, grid0.active_mask)
        partition = partition.with_green_fraction(gf)

        props = make_surface(grid, landuse,
                             manning_by_class=project.solver.manning_by_class(),
                             infiltration_by_class=project.solver.infiltration_by_class(),
                             open_edges=project.solver.open_edges)
        redirection = build_redirection(grid.active_mask, list(buildings))
        weights = storm.rain_weights(grid, list(buildings), redirection, partition)
        curves = load_curves(project.curves_path)
        return cls(project=project, grid=grid, buildings=tuple(buildings),
                   landuse=landuse, partition=partition, props=props,
                   redirection=redirection, base_weights=weights, curves=curves)

    def weights_with_capture(self, captures) -> np.ndarray:
        return storm.rain_weights(self.grid, list(self.buildings),
                                  self.redirection, self.partition,
                                  captures=tuple(captures))

    def storm_by_rp(self, rp: int) -> StormScenario:
        for s in self.project.storms:
            if s.return_period_y == rp:
                return s
        raise ConfigurationError(f"no storm with return period {rp} in project")
