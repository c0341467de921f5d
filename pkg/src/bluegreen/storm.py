"""Design storms, roof-runoff redirection, and per-tile rainfall capture.

Rain enters the solver as a per-cell volumetric rate: a time-varying uniform
intensity from the hyetograph multiplied by a static per-cell weight array.
The weights encode two things that never change during a run:

- roof redirection: buildings are holes, so the rain landing on each roof
  cell is added to the nearest active surface cell instead;
- capture: a tile-level intervention that removes a fixed fraction of the
  rain attributed to that tile (surface cells directly, roof cells via the
  tile containing the *building* cell, not the receiving cell).

Weight 1.0 means a plain surface cell with no capture.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .geodata import BuildingFootprint, TerrainGrid, TilePartition

MM_PER_HOUR_TO_M_PER_S = 0.001 / 3600.0


@dataclass(frozen=True)
class Hyetograph:
    """Stepwise-constant rain intensity: intensity_mm_h[i] applies on
    [t_edges_s[i], t_edges_s[i+1])."""

    t_edges_s: tuple[float, ...]
    intensity_mm_h: tuple[float, ...]

    def __post_init__(self):
        if len(self.t_edges_s) != len(self.intensity_mm_h) + 1:
            raise ConfigurationError("hyetograph needs len(edges) == len(intensities) + 1")
        if len(self.intensity_mm_h) == 0:
            raise ConfigurationError("hyetograph must have at least one interval")
        if any(b <= a for a, b in zip(self.t_edges_s, self.t_edges_s[1:])):
            raise ConfigurationError("hyetograph time edges must strictly increase")
        if any(i < 0 for i in self.intensity_mm_h):
            raise ConfigurationError("rain intensity must be non-negative")

    @property
    def end_s(self) -> float:
        return self.t_edges_s[-1]

    def intensity_at(self, t_s: float) -> float:
        """mm/h at time t; zero before the first edge and from the last edge on."""
        if t_s < self.t_edges_s[0] or t_s >= self.t_edges_s[-1]:
            return 0.0
        # len(edges) is tiny (a design storm has a handful of steps)
        for i, edge in enumerate(self.t_edges_s[1:]):
            if t_s < edge:
                return self.intensity_mm_h[i]
        return 0.0

    def total_depth_m(self) -> float:
        return sum(i * (b - a) for i, a, b in
                   zip(self.intensity_mm_h, self.t_edges_s, self.t_edges_s[1:])) / 1000.0 / 3600.0

    def next_edge_after(self, t_s: float) -> float | None:
        for edge in self.t_edges_s:
            if edge > t_s + 1e-12:
                return edge
        return None


def make_uniform_hyetograph(depth_mm: float, duration_min: float,
                            start_s: float = 0.0) -> Hyetograph:
    """Block storm: constant intensity delivering depth_mm over duration_min."""
    if depth_mm < 0:
        raise ConfigurationError(f"storm depth must be >= 0 mm, got {depth_mm}")
    if duration_min <= 0:
        raise ConfigurationError(f"storm duration must be > 0 min, got {duration_min}")
    intensity = depth_mm / (duration_min / 60.0)
    return Hyetograph(t_edges_s=(start_s, start_s + duration_min * 60.0),
                      intensity_mm_h=(intensity,))


@dataclass(frozen=True)
class StormScenario:
    """A named design storm (return period in years + its hyetograph)."""

    return_period_y: int
    hyetograph: Hyetograph

    @property
    def name(self) -> str:
        return f"rp{self.return_period_y}"


@dataclass(frozen=True)
class CaptureSpec:
    """Remove ``fraction`` of the rain attributed to ``tile_id`` at the source."""

    tile_id: int
    fraction: float

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigurationError(
                f"capture fraction must be in [0, 1], got {self.fraction}")


@dataclass(frozen=True)
class RainRedirection:
    """Static mapping of roof cells to receiving surface cells.

    ``target_of`` maps flat roof-cell index to the flat index of the nearest
    active cell (Euclidean distance between cell centres; ties broken by the
    lowest row-major index, which makes the mapping order-independent).
    """

    target_of: dict[int, int]


def build_redirection(grid_mask: np.ndarray,
                      buildings: list[BuildingFootprint]) -> RainRedirection:
    """Map every footprint cell to its nearest active cell.

    Expanding ring search on squared integer distances: scan Chebyshev rings
    outward, keep the best exact d², and stop once the ring's minimum possible
    distance exceeds the best found.
    """
    n_rows, n_cols = grid_mask.shape
    target: dict[int, int] = {}
    for b in buildings:
        for idx in sorted(b.footprint_cells):
            r, c = idx // n_cols, idx % n_cols
            best_d2 = None
            best_idx = -1
            ring = 1
            while True:
                if best_d2 is not None and (ring * ring) > best_d2:
                    break
                if ring > max(n_rows, n_cols):
                    break
                for rr, cc in _ring_cells(r, c, ring, n_rows, n_cols):
                    if not grid_mask[rr, cc]:
                        continue
                    d2 = (rr - r) ** 2 + (cc - c) ** 2
                    j = rr * n_cols + cc
                    if best_d2 is None or d2 < best_d2 or (d2 == best_d2 and j < best_idx):
                        best_d2, best_idx = d2, j
                ring += 1
            if best_d2 is None:
                raise ConfigurationError(
                    f"building {b.id}: no active cell anywhere to receive roof rain")
            target[idx] = best_idx
    return RainRedirection(target_of=target)


def _ring_cells(r: int, c: int, ring: int, n_rows: int, n_cols: int):
    r0, r1 = r - ring, r + ring
    c0, c1 = c - ring, c + ring
    for cc in range(max(0, c0), min(n_cols - 1, c1) + 1):
        if 0 <= r0:
            yield r0, cc
        if r1 < n_rows:
            yield r1, cc
    for rr in range(max(0, r0 + 1), min(n_rows - 1, r1 - 1) + 1):
        if 0 <= c0:
            yield rr, c0
        if c1 < n_cols:
            yield rr, c1


def rain_weights(grid: TerrainGrid,
                 buildings: list[BuildingFootprint],
                 redirection: RainRedirection,
                 partition: TilePartition | None = None,
                 captures: tuple[CaptureSpec, ...] = ()) -> np.ndarray:
    """Static per-cell rain weight array W (n_rows, n_cols), float64.

    Active surface cells start at 1. Each roof cell adds (1 - capture of the
    roof's own tile) to its redirect target. Surface cells in a captured tile
    are scaled by (1 - fraction). Inactive cells that are not building cells
    (true nodata) contribute nothing.
    """
    keep = np.ones(partition.n_tiles + 1 if partition else 1, dtype=np.float64)
    cap_by_tile: dict[int, float] = {}
    for cap in captures:
        if cap.tile_id in cap_by_tile:
            raise ConfigurationError(f"duplicate capture spec for tile {cap.tile_id}")
        cap_by_tile[cap.tile_id] = cap.fraction
    if partition is not None:
        for tid, frac in cap_by_tile.items():
            if not 1 <= tid <= partition.n_tiles:
                raise ConfigurationError(f"capture tile {tid} outside partition 1..{partition.n_tiles}")
            keep[tid] = 1.0 - frac
    elif cap_by_tile:
        raise ConfigurationError("capture specs given without a tile partition")

    W = np.zeros(grid.elevation.shape, dtype=np.float64)
    if partition is not None:
        tile_of = partition.cell_to_tile
        W[grid.active_mask] = keep[tile_of[grid.active_mask]]
    else:
        W[grid.active_mask] = 1.0

    n_cols = grid.n_cols
    for b in buildings:
        for idx in sorted(b.footprint_cells):
            target = redirection.target_of[idx]
            if partition is not None:
                w = keep[tile_of.flat[idx]]   # attribution follows the roof cell's tile
            else:
                w = 1.0
            W.flat[target] += w
    return W


def rain_rate(weights: np.ndarray, hyetograph: Hyetograph, t_s: float) -> np.ndarray:
    """Volumetric rain rate per unit area, m/s, per cell at time t."""
    return weights * (hyetograph.intensity_at(t_s) * MM_PER_HOUR_TO_M_PER_S)


# ---------------------------------------------------------------------------
# Storm set configuration


def load_storms(path: str | Path) -> tuple[StormScenario, ...]:
    """Read a storm set from JSON: either a bare list or {"storms": [...]},
    entries shaped {"return_period_y": 10, "depth_mm": 31.2, "duration_min": 60}."""
    with open(path) as f:
        doc = json.load(f)
    entries = doc if isinstance(doc, list) else doc.get("storms", [])
    storms = []
    seen = set()
    for s in entries:
        rp = int(s["return_period_y"])
        if rp in seen:
            raise ConfigurationError(f"duplicate storm return period {rp}")
        seen.add(rp)
        storms.append(StormScenario(
            return_period_y=rp,
            hyetograph=make_uniform_hyetograph(float(s["depth_mm"]),
                                               float(s["duration_min"]))))
    if not storms:
        raise ConfigurationError(f"{path}: no storms defined")
    return tuple(sorted(storms, key=lambda s: s.return_period_y))
