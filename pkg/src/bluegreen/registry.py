"""Content-addressed store of completed scenario runs.

Every run is keyed by a hash of everything that determines its outputs:
terrain, buildings, land use, weights, storm, and solver settings. Rerunning
the same inputs finds the key and skips the solve; changing any input moves
the key. Artifacts are written atomically (complete runs only) so a registry
is always safe to read concurrently and survives interrupted processes.

Artifacts per run:
    meta.json       inputs, key, schema_version, step count
    ledger.json     volume ledger
    depth.bgrd      max-depth raster, binary (see write_bgrd)
    depth.asc       same raster as ESRI ASCII
    exposure.json   per-building exposure records (GeoJSON-ish FeatureCollection)
    exposure.csv
    damages.json    per-building damages + totals
    damages.csv

All JSON is canonical (sorted keys, tight separators) so identical runs are
byte-identical, and floats round-trip exactly via repr.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .damage import ScenarioDamages, damages_csv
from .errors import ConfigurationError, UsageError
from .exposure import ExposureRecord
from .hydro import MaxDepthRaster, ScenarioResult, VolumeLedger

SCHEMA_VERSION = 1
BGRD_MAGIC = b"BGRD"

ARTIFACTS = ("meta.json", "ledger.json", "depth.bgrd", "depth.asc",
             "exposure.json", "exposure.csv", "damages.json", "damages.csv")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def hash_array(a: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(str(a.shape).encode())
    h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def run_key(payload: dict) -> str:
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:24]


def write_bgrd(raster: MaxDepthRaster) -> bytes:
    """Binary raster: magic, u32 version, u32 rows, u32 cols, 3 f64 georefs,
    then row-major little-endian float64 values (row 0 = south)."""
    depth = np.ascontiguousarray(raster.depth_m, dtype="<f8")
    head = BGRD_MAGIC + struct.pack("<III", 1, depth.shape[0], depth.shape[1])
    head += struct.pack("<ddd", raster.origin_x, raster.origin_y, raster.cell_size)
    return head + depth.tobytes()


def read_bgrd(blob: bytes) -> MaxDepthRaster:
    if blob[:4] != BGRD_MAGIC:
        raise UsageError("not a BGRD raster (bad magic)")
    version, n_rows, n_cols = struct.unpack_from("<III", blob, 4)
    if version != 1:
        raise UsageError(f"unsupported BGRD version {version}")
    ox, oy, cs = struct.unpack_from("<ddd", blob, 16)
    need = 40 + n_rows * n_cols * 8
    if len(blob) != need:
        raise UsageError(f"BGRD payload truncated: {len(blob)} != {need} bytes")
    depth = np.frombuffer(blob, dtype="<f8", offset=40).reshape(n_rows, n_cols).copy()
    return MaxDepthRaster(depth_m=depth, cell_size=cs, origin_x=ox, origin_y=oy)


def depth_ascii(raster: MaxDepthRaster, nodata: float = -9999.0) -> str:
    rows, cols = raster.depth_m.shape
    lines = [f"ncols {cols}", f"nrows {rows}",
             f"xllcorner {raster.origin_x!r}", f"yllcorner {raster.origin_y!r}",
             f"cellsize {raster.cell_size!r}", f"NODATA_value {nodata!r}"]
    body = raster.depth_m[::-1]
    for r in body:
        lines.append(" ".join(f"{v:.6f}" for v in r))
    return "\n".join(lines) + "\n"


def exposure_json(records: list[ExposureRecord]) -> dict:
    return {"schema_version": SCHEMA_VERSION,
            "records": [{"building_id": r.building_id,
                         "use_class": r.use_class,
                         "exposure": r.exposure,
                         "mean_depth_m": r.stats.mean_depth_m,
                         "p90_depth_m": r.stats.p90_depth_m,
                         "max_depth_m": r.stats.max_depth_m,
                         "n_buffer_cells": r.stats.n_cells}
                        for r in records]}


def exposure_csv(records: list[ExposureRecord]) -> str:
    lines = ["building_id,use_class,exposure,mean_depth_m,p90_depth_m,n_buffer_cells"]
    for r in records:
        lines.append(f"{r.building_id},{r.use_class},{r.exposure},"
                     f"{r.stats.mean_depth_m:.6f},{r.stats.p90_depth_m:.6f},"
                     f"{r.stats.n_cells}")
    return "\n".join(lines) + "\n"


def damages_json(damages: ScenarioDamages) -> dict:
    return {"schema_version": SCHEMA_VERSION,
            "total_gbp": damages.total_gbp,
            "by_use_class": damages.by_use_class,
            "buildings": [{"building_id": d.building_id,
                           "use_class": d.use_class,
                           "exposure": d.exposure,
                           "depth_m": d.depth_m,
                           "damage_gbp": d.damage_gbp}
                          for d in damages.items]}


def ledger_json(ledger: VolumeLedger) -> dict:
    doc = {"schema_version": SCHEMA_VERSION}
    doc.update(ledger.as_dict())
    return doc


@dataclass(frozen=True)
class RunRecord:
    key: str
    return_period_y: int
    tile_id: int | None          # None for baseline runs
    capture_fraction: float | None
    kind: str                    # "baseline" | "capture" | "intervention"
    n_steps: int
    scene_hash: str = ""         # ties the run to one version of the inputs


class Registry:
    """Filesystem-backed run store under one root directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.runs_dir = self.root / "runs"
        self.index_path = self.root / "registry.json"
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()  # serializes index read-modify-write

    # -- index ------------------------------------------------------------

    def _read_index(self) -> dict:
        if not self.index_path.exists():
            return {"schema_version": SCHEMA_VERSION, "runs": {}}
        with open(self.index_path) as f:
            return json.load(f)

    def _write_index(self, index: dict) -> None:
        _atomic_write(self.index_path, canonical_json(index).encode())

    def records(self) -> list[RunRecord]:
        index = self._read_index()
        out = []
        for key, meta in sorted(index["runs"].items()):
            out.append(RunRecord(key=key,
                                 return_period_y=meta["return_period_y"],
                                 tile_id=meta["tile_id"],
                                 capture_fraction=meta["capture_fraction"],
                                 kind=meta["kind"],
                                 n_steps=meta["n_steps"],
                                 scene_hash=meta.get("scene_hash", "")))
        return out

    def has(self, key: str) -> bool:
        d = self.runs_dir / key
        return all((d / a).exists() for a in ARTIFACTS)

    def dir_for(self, key: str) -> Path:
        return self.runs_dir / key

    # -- write ------------------------------------------------------------

    def store(self, key: str, meta: dict, result: ScenarioResult,
              records: list[ExposureRecord], damages: ScenarioDamages) -> None:
        """Persist one completed run atomically; a second store of the same
        key is a no-op (the content is the same by construction)."""
        if self.has(key):
            return
        meta_doc = {"schema_version": SCHEMA_VERSION, "key": key,
                    "n_steps": result.n_steps}
        meta_doc.update(meta)

        files = {
            "meta.json": canonical_json(meta_doc).encode(),
            "ledger.json": canonical_json(ledger_json(result.ledger)).encode(),
            "depth.bgrd": write_bgrd(result.max_depth),
            "depth.asc": depth_ascii(result.max_depth).encode(),
            "exposure.json": canonical_json(exposure_json(records)).encode(),
            "exposure.csv": exposure_csv(records).encode(),
            "damages.json": canonical_json(damages_json(damages)).encode(),
            "damages.csv": damages_csv(damages).encode(),
        }

        final_dir = self.runs_dir / key
        tmp_dir = Path(tempfile.mkdtemp(prefix=f".{key}.", dir=self.runs_dir))
        try:
            for name, blob in files.items():
                with open(tmp_dir / name, "wb") as f:
                    f.write(blob)
            try:
                os.rename(tmp_dir, final_dir)
            except OSError:
                if not self.has(key):   # lost a race and the winner is broken
                    raise
        finally:
            if tmp_dir.exists() and tmp_dir != final_dir:
                for p in tmp_dir.iterdir():
                    p.unlink()
                tmp_dir.rmdir()

        with self._lock:
            index = self._read_index()
            index["runs"][key] = {
                "return_period_y": meta["return_period_y"],
                "tile_id": meta.get("tile_id"),
                "capture_fraction": meta.get("capture_fraction"),
                "kind": meta.get("kind", "baseline"),
                "n_steps": result.n_steps,
                "scene_hash": meta.get("scene_hash", ""),
            }
            self._write_index(index)

    # -- read -------------------------------------------------------------

    def _read(self, key: str, name: str) -> bytes:
        p = self.runs_dir / key / name
        if not p.exists():
            raise UsageError(f"run {key!r} has no artifact {name!r}")
        return p.read_bytes()

    def load_meta(self, key: str) -> dict:
        return json.loads(self._read(key, "meta.json"))

    def load_ledger(self, key: str) -> dict:
        return json.loads(self._read(key, "ledger.json"))

    def load_depth(self, key: str) -> MaxDepthRaster:
        return read_bgrd(self._read(key, "depth.bgrd"))

    def load_exposure(self, key: str) -> dict:
        return json.loads(self._read(key, "exposure.json"))

    def load_damages(self, key: str) -> dict:
        return json.loads(self._read(key, "damages.json"))

    def load_artifact(self, key: str, name: str) -> bytes:
        if name not in ARTIFACTS:
            raise UsageError(f"unknown artifact {name!r}; expected one of {ARTIFACTS}")
        return self._read(key, name)


def _atomic_write(path: Path, blob: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
