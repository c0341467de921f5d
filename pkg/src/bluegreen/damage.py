"""Depth-damage curves and per-scenario damage aggregation.

Each use class (commercial / residential) has a piecewise-linear curve of
damage against water depth. Curves interpolate between knots and clamp at
both ends: depths beyond the last knot cost the last value, depths below
the first cost the first (curves normally start at (0, 0)). A curve is
either absolute (GBP per building) or per-m2 (GBP per square metre of
footprint, scaled by the building's rasterized footprint area).

Damage is driven by the mean buffer depth of the building's exposure
record, and buildings classified low are not counted: their surroundings
never pass the depth bands, so they contribute exactly 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .exposure import LOW, ExposureRecord
from .geodata import BuildingFootprint

GBP_PER_MILLION = 1_000_000.0


@dataclass(frozen=True)
class DamageCurve:
    use_class: str
    depth_m: tuple[float, ...]
    damage_gbp: tuple[float, ...]
    per_m2: bool = False

    def __post_init__(self):
        if len(self.depth_m) != len(self.damage_gbp) or len(self.depth_m) == 0:
            raise ConfigurationError(
                f"curve {self.use_class!r}: depth and damage lists must be "
                f"non-empty and the same length")
        if any(b <= a for a, b in zip(self.depth_m, self.depth_m[1:])):
            raise ConfigurationError(
                f"curve {self.use_class!r}: depths must strictly increase")
        if any(d < 0 for d in self.damage_gbp):
            raise ConfigurationError(f"curve {self.use_class!r}: negative damage")


def interp_damage(curve: DamageCurve, depth_m: float) -> float:
    """Linear interpolation with clamping at both ends."""
    return float(np.interp(depth_m, curve.depth_m, curve.damage_gbp))


def load_curves(path: str | Path) -> dict[str, DamageCurve]:
    """Read curves from CSV: use_class, depth_m, damage_gbp[, per_m2].

    Rows are grouped by use class; depth order within a class is enforced.
    """
    curves: dict[str, list] = {}
    per_m2: dict[str, bool] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"use_class", "depth_m", "damage_gbp"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ConfigurationError(
                f"{path}: curve CSV needs columns {sorted(required)}")
        for row in reader:
            uc = row["use_class"].strip()
            curves.setdefault(uc, []).append(
                (float(row["depth_m"]), float(row["damage_gbp"])))
            flag = (row.get("per_m2") or "").strip().lower() in ("1", "true", "yes")
            if uc in per_m2 and per_m2[uc] != flag:
                raise ConfigurationError(
                    f"{path}: inconsistent per_m2 flag within class {uc!r}")
            per_m2[uc] = flag
    out = {}
    for uc, pts in curves.items():
        out[uc] = DamageCurve(use_class=uc,
                              depth_m=tuple(p[0] for p in pts),
                              damage_gbp=tuple(p[1] for p in pts),
                              per_m2=per_m2[uc])
    return out


@dataclass(frozen=True)
class BuildingDamage:
    building_id: str
    use_class: str
    exposure: str
    depth_m: float
    damage_gbp: float


@dataclass(frozen=True)
class ScenarioDamages:
    """Per-building damages for one run plus fixed-order totals."""

    items: tuple[BuildingDamage, ...]
    total_gbp: float
    by_use_class: dict[str, float]

    def total_million(self) -> float:
        return self.total_gbp / GBP_PER_MILLION


def building_damage(building: BuildingFootprint, record: ExposureRecord,
                    curves: dict[str, DamageCurve], cell_area_m2: float) -> BuildingDamage:
    if record.building_id != building.id:
        raise ConfigurationError(
            f"exposure record {record.building_id!r} paired with building {building.id!r}")
    depth = record.stats.mean_depth_m
    if record.exposure == LOW:
        value = 0.0
    else:
        curve = curves.get(building.use_class)
        if curve is None:
            raise ConfigurationError(
                f"no damage curve for use class {building.use_class!r}")
        value = interp_damage(curve, depth)
        if curve.per_m2:
            value *= building.footprint_area_m2(cell_area_m2)
    return BuildingDamage(building_id=building.id, use_class=building.use_class,
                          exposure=record.exposure, depth_m=depth,
                          damage_gbp=value)


def aggregate(buildings: list[BuildingFootprint],
              records: list[ExposureRecord],
              curves: dict[str, DamageCurve],
              cell_area_m2: float) -> ScenarioDamages:
    """Damage for every building, summed in building-id order.

    The fixed summation order makes totals bit-identical across repeated and
    concurrent evaluations of the same inputs.
    """
    by_id = {b.id: b for b in buildings}
    if len(by_id) != len(buildings):
        raise ConfigurationError("duplicate building ids")
    items = []
    for rec in sorted(records, key=lambda r: r.building_id):
        b = by_id.get(rec.building_id)
        if b is None:
            raise ConfigurationError(f"exposure record for unknown building "
                                     f"{rec.building_id!r}")
        items.append(building_damage(b, rec, curves, cell_area_m2))
    total = 0.0
    by_uc: dict[str, float] = {}
    for it in items:
        total += it.damage_gbp
        by_uc[it.use_class] = by_uc.get(it.use_class, 0.0) + it.damage_gbp
    return ScenarioDamages(items=tuple(items), total_gbp=total,
                           by_use_class=dict(sorted(by_uc.items())))


def damages_csv(damages: ScenarioDamages) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["building_id", "use_class", "exposure", "depth_m", "damage_gbp"])
    for it in damages.items:
        w.writerow([it.building_id, it.use_class, it.exposure,
                    f"{it.depth_m:.6f}", f"{it.damage_gbp:.2f}"])
    w.writerow(["TOTAL", "", "", "", f"{damages.total_gbp:.2f}"])
    return buf.getvalue()
