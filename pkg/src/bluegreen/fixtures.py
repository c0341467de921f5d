"""Synthetic demo project generator.

Writes a small, self-contained project directory (terrain, buildings,
land use, curves, config) that runs in seconds. Used by the `demo` CLI
command and handy for trying the HTTP service and UI without real data.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

import numpy as np

N_ROWS = 100
N_COLS = 100
CELL = 2.0


def _dem(rng: random.Random) -> np.ndarray:
    """Plane falling west to east, valley mid-row, ponding hollow by the buildings."""
    rows = np.arange(N_ROWS)[:, None]
    cols = np.arange(N_COLS)[None, :]
    z = 6.0 - 0.02 * cols * CELL / 2.0                       # ~1% easterly fall
    z = z + 0.01 * np.abs(rows - N_ROWS / 2) * CELL          # valley towards mid-row
    # hollow under the building cluster; the raised lip east of it ponds
    # the runoff so the demo actually floods
    d2 = ((rows - 50) / 16.0) ** 2 + ((cols - 65) / 16.0) ** 2
    z = z - 0.45 * np.maximum(0.0, 1.0 - d2)
    z[33:68, 83:86] += 0.20
    bumps = np.zeros((N_ROWS, N_COLS))
    for _ in range(12):
        r0 = rng.randrange(N_ROWS)
        c0 = rng.randrange(N_COLS)
        amp = rng.uniform(-0.05, 0.08)
        d2 = (rows - r0) ** 2 + (cols - c0) ** 2
        bumps += amp * np.exp(-d2 / 60.0)
    return z + bumps


def _ascii(path: Path, z: np.ndarray) -> None:
    lines = [f"ncols {N_COLS}", f"nrows {N_ROWS}", "xllcorner 0.0",
             "yllcorner 0.0", f"cellsize {CELL}", "NODATA_value -9999"]
    for row in z[::-1]:
        lines.append(" ".join(f"{v:.4f}" for v in row))
    path.write_text("\n".join(lines) + "\n")


def _rect(x, y, w, h):
    return [[x, y], [x + w, y], [x + w, y + h], [x, y + h], [x, y]]


def write_demo_project(out_dir: str | Path, seed: int = 0) -> Path:
    """Create the demo project under out_dir; returns the config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)

    _ascii(out / "dem.asc", _dem(rng))

    features = []
    n_b = 0
    for by in range(3):
        for bx in range(4):
            x = 96.0 + bx * 24.0 + rng.uniform(-3, 3)
            y = 52.0 + by * 32.0 + rng.uniform(-4, 4)
            use = "commercial" if (bx + by) % 3 == 0 else "residential"
            n_b += 1
            features.append({"type": "Feature",
                             "properties": {"id": f"b{n_b:02d}", "use_class": use},
                             "geometry": {"type": "Polygon",
                                          "coordinates": [_rect(x, y, 10.0, 8.0)]}})
    (out / "buildings.geojson").write_text(json.dumps(
        {"type": "FeatureCollection", "features": features}, indent=1))

    green = [{"type": "Feature", "properties": {"class": "green"},
              "geometry": {"type": "Polygon", "coordinates": [_rect(0, 0, 60, 200)]}},
             {"type": "Feature", "properties": {"class": "green"},
              "geometry": {"type": "Polygon", "coordinates": [_rect(60, 140, 50, 60)]}}]
    (out / "landuse.geojson").write_text(json.dumps(
        {"type": "FeatureCollection", "features": green}, indent=1))

    (out / "curves.csv").write_text(
        "use_class,depth_m,damage_gbp\n"
        "commercial,0.0,0\n"
        "commercial,0.1,25000\n"
        "commercial,0.3,80000\n"
        "commercial,1.0,200000\n"
        "commercial,3.0,400000\n"
        "residential,0.0,0\n"
        "residential,0.1,12000\n"
        "residential,0.3,40000\n"
        "residential,1.0,90000\n"
        "residential,3.0,150000\n")

    config = {
        "schema_version": 1,
        "name": "demo",
        "terrain": "dem.asc",
        "buildings": "buildings.geojson",
        "landuse": "landuse.geojson",
        "curves": "curves.csv",
        "tile_size_m": 50.0,
        "capture_fraction": 1.0,
        "storms": [
            {"return_period_y": 10, "depth_mm": 25.0, "duration_min": 15.0},
            {"return_period_y": 100, "depth_mm": 50.0, "duration_min": 15.0},
        ],
        "solver": {
            "cfl": 0.5,
            "dt_max_s": 5.0,
            "t_end_s": 1800.0,
            "open_edges": ["east"],
            "infiltration": {"green": [20.0, 0.0]},
        },
    }
    cfg = out / "project.json"
    cfg.write_text(json.dumps(config, indent=1))
    return cfg
