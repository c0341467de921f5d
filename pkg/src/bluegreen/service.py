"""HTTP service exposing projects, runs, results, rankings, and interventions.

The API serves registry artifacts byte-for-byte (what the CLI `report`
command emits is exactly what these endpoints return), so any client sees
the same numbers as the batch pipeline. Scenario work happens on a single
background worker thread feeding a FIFO queue of jobs; job state survives
restarts in jobs.json (anything still marked running at startup is failed
as interrupted, finished results stay readable).

Intervention sets are versioned with compare-and-set: every POST must name
the version it was based on and conflicts get 409, so two planners editing
at once cannot silently overwrite each other.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse, Response

from .errors import (ConfigurationError, EngineError, GeometryError,
                     StaleVersionError, UsageError)
from .hydro import DetentionPond, MaxDepthRaster, PermeablePavement
from .planner import (evaluate_intervention, matrix_from_registry, run_matrix,
                      scene_hash)
from .project import Project, Scene
from .registry import Registry
from .service_jobs import JobManager

API_VERSION = 1


def _error_payload(exc: EngineError) -> dict:
    return {"error": type(exc).__name__, "message": str(exc)}


def _http_error(exc: EngineError) -> HTTPException:
    if isinstance(exc, StaleVersionError):
        payload = _error_payload(exc)
        payload["current_version"] = exc.current_version
        return HTTPException(status_code=409, detail=payload)
    if isinstance(exc, GeometryError):
        status = 422
    elif isinstance(exc, (ConfigurationError, UsageError)):
        status = 400
    else:
        status = 500
    return HTTPException(status_code=status, detail=_error_payload(exc))


def depth_png(raster: MaxDepthRaster) -> bytes:
    """Colormapped PNG: transparent when dry, blue ramp through the 0.10 /
    0.30 exposure bands, deep water towards indigo."""
    from PIL import Image

    d = raster.depth_m
    rgba = np.zeros(d.shape + (4,), dtype=np.uint8)
    wet = d > 1e-3
    shallow = wet & (d < 0.10)
    mid = (d >= 0.10) & (d < 0.30)
    deep = d >= 0.30

    t = np.clip(d / 0.10, 0.0, 1.0)
    rgba[..., 0] = np.where(shallow, 170 - 60 * t, rgba[..., 0])
    rgba[..., 1] = np.where(shallow, 210 - 60 * t, rgba[..., 1])
    rgba[..., 2] = np.where(shallow, 255, rgba[..., 2])
    rgba[..., 3] = np.where(shallow, 120 + 60 * t, rgba[..., 3])

    t = np.clip((d - 0.10) / 0.20, 0.0, 1.0)
    rgba[..., 0] = np.where(mid, 80 - 40 * t, rgba[..., 0])
    rgba[..., 1] = np.where(mid, 120 - 70 * t, rgba[..., 1])
    rgba[..., 2] = np.where(mid, 230, rgba[..., 2])
    rgba[..., 3] = np.where(mid, 190, rgba[..., 3])

    t = np.clip((d - 0.30) / 1.0, 0.0, 1.0)
    rgba[..., 0] = np.where(deep, 60 + 40 * t, rgba[..., 0])
    rgba[..., 1] = np.where(deep, 30, rgba[..., 1])
    rgba[..., 2] = np.where(deep, 200 - 60 * t, rgba[..., 2])
    rgba[..., 3] = np.where(deep, 230, rgba[..., 3])

    img = Image.fromarray(rgba[::-1], mode="RGBA")  # north-up for screens
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def create_app(project_path: str | Path, registry_dir: str | Path,
               workers: int = 1, ui_dir: str | Path | None = None) -> FastAPI:
    scene = Scene.build(Project.load(project_path))
    registry = Registry(registry_dir)
    jobs = JobManager(Path(registry_dir) / "jobs.json")
    app = FastAPI(title="flood source planner", version=str(API_VERSION))
    app.state.scene = scene
    app.state.registry = registry
    app.state.jobs = jobs

    @app.exception_handler(EngineError)
    async def _engine_error(request: Request, exc: EngineError):
        http = _http_error(exc)
        return JSONResponse(status_code=http.status_code, content=http.detail)

    def _grid_headers(raster: MaxDepthRaster) -> dict:
        return {"X-Grid-Rows": str(raster.depth_m.shape[0]),
                "X-Grid-Cols": str(raster.depth_m.shape[1]),
                "X-Cell-Size": repr(raster.cell_size),
                "X-Origin-X": repr(raster.origin_x),
                "X-Origin-Y": repr(raster.origin_y)}

    def _require_run(key: str) -> None:
        if not registry.has(key):
            raise HTTPException(status_code=404, detail={
                "error": "UnknownRun", "message": f"no completed run {key!r}"})

    # -- read side --------------------------------------------------------

    @app.get("/project")
    def get_project():
        p = scene.project
        return {"api_version": API_VERSION,
                "name": p.name,
                "scene_hash": scene_hash(scene),
                "grid": {"n_rows": scene.grid.n_rows,
                         "n_cols": scene.grid.n_cols,
                         "cell_size_m": scene.grid.cell_size,
                         "origin_x": scene.grid.origin_x,
                         "origin_y": scene.grid.origin_y,
                         "n_active": scene.grid.n_active},
                "tile_size_m": p.tile_size_m,
                "n_tiles": scene.partition.n_tiles,
                "populated_tiles": list(scene.partition.populated_ids),
                "n_buildings": len(scene.buildings),
                "capture_fraction": p.capture_fraction,
                "storms": [{"return_period_y": s.return_period_y,
                            "total_depth_mm": s.hyetograph.total_depth_m() * 1000.0,
                            "duration_min": (s.hyetograph.end_s
                                             - s.hyetograph.t_edges_s[0]) / 60.0}
                           for s in p.storms]}

    @app.get("/tiles")
    def get_tiles():
        part = scene.partition
        gf = part.green_fraction
        out = []
        for t in part.tiles:
            out.append({"id": t.id,
                        "x0": t.x0, "y0": t.y0, "x1": t.x1, "y1": t.y1,
                        "green_fraction": (float(gf[t.id - 1])
                                           if gf is not None else None),
                        "populated": t.id in part.populated_ids})
        return {"tile_size_m": part.tile_size, "tiles": out}

    @app.get("/buildings")
    def get_buildings():
        feats = []
        for b in scene.buildings:
            feats.append({"type": "Feature",
                          "properties": {"id": b.id, "use_class": b.use_class,
                                         "n_cells": len(b.footprint_cells)},
                          "geometry": {"type": "Polygon",
                                       "coordinates": [[list(p) for p in b.polygon]
                                                       + [list(b.polygon[0])]]}})
        return {"type": "FeatureCollection", "features": feats}

    @app.get("/runs")
    def list_runs():
        return {"runs": [vars(r) for r in registry.records()],
                "jobs": jobs.list_jobs()}

    @app.get("/runs/{job_id}")
    def get_job(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail={
                "error": "UnknownJob", "message": f"no job {job_id!r}"})
        return job

    @app.get("/results/{key}/depth")
    def get_depth(key: str, format: str = Query("bgrd")):
        _require_run(key)
        raster = registry.load_depth(key)
        if format == "bgrd":
            return Response(content=registry.load_artifact(key, "depth.bgrd"),
                            media_type="application/octet-stream",
                            headers=_grid_headers(raster))
        if format == "ascii":
            return PlainTextResponse(
                registry.load_artifact(key, "depth.asc").decode(),
                headers=_grid_headers(raster))
        if format == "png":
            return Response(content=depth_png(raster), media_type="image/png",
                            headers=_grid_headers(raster))
        raise HTTPException(status_code=400, detail={
            "error": "UsageError",
            "message": f"format must be bgrd|ascii|png, got {format!r}"})

    @app.get("/results/{key}/exposure")
    def get_exposure(key: str, format: str = Query("json")):
        _require_run(key)
        if format == "csv":
            return PlainTextResponse(
                registry.load_artifact(key, "exposure.csv").decode())
        return Response(content=registry.load_artifact(key, "exposure.json"),
                        media_type="application/json")

    @app.get("/results/{key}/damages")
    def get_damages(key: str, format: str = Query("json")):
        _require_run(key)
        if format == "csv":
            return PlainTextResponse(
                registry.load_artifact(key, "damages.csv").decode())
        return Response(content=registry.load_artifact(key, "damages.json"),
                        media_type="application/json")

    @app.get("/results/{key}/ledger")
    def get_ledger(key: str):
        _require_run(key)
        return Response(content=registry.load_artifact(key, "ledger.json"),
                        media_type="application/json")

    @app.get("/results/{key}/meta")
    def get_meta(key: str):
        _require_run(key)
        return Response(content=registry.load_artifact(key, "meta.json"),
                        media_type="application/json")

    @app.get("/ranking")
    def get_ranking(rp: int = Query(...), capture_fraction: float | None = None):
        matrix = matrix_from_registry(scene, registry, capture_fraction)
        if rp not in matrix.baseline:
            raise HTTPException(status_code=404, detail={
                "error": "MissingRuns",
                "message": f"no baseline run stored for rp{rp}; POST /runs first"})
        ranking = matrix.ranking(rp, scene.partition)
        return {"return_period_y": rp,
                "baseline_key": matrix.baseline[rp].key,
                "baseline_damage_gbp": matrix.baseline[rp].total_damage_gbp,
                "entries": [{"rank": i + 1,
                             "tile_id": r.tile_id,
                             "green_fraction": r.green_fraction,
                             "benefit_gbp": r.benefit_gbp,
                             "score": r.score,
                             "run_key": matrix.capture[(rp, r.tile_id)].key}
                            for i, r in enumerate(ranking)]}

    @app.get("/diff")
    def get_diff(a: str = Query(...), b: str = Query(...)):
        _require_run(a)
        _require_run(b)
        da = registry.load_damages(a)
        db = registry.load_damages(b)
        rows_a = {r["building_id"]: r for r in da["buildings"]}
        rows_b = {r["building_id"]: r for r in db["buildings"]}
        buildings = []
        for bid in sorted(set(rows_a) | set(rows_b)):
            ra = rows_a.get(bid)
            rb = rows_b.get(bid)
            buildings.append({
                "building_id": bid,
                "damage_a_gbp": ra["damage_gbp"] if ra else None,
                "damage_b_gbp": rb["damage_gbp"] if rb else None,
                "delta_gbp": ((rb["damage_gbp"] if rb else 0.0)
                              - (ra["damage_gbp"] if ra else 0.0)),
                "exposure_a": ra["exposure"] if ra else None,
                "exposure_b": rb["exposure"] if rb else None})
        depth_a = registry.load_depth(a).depth_m
        depth_b = registry.load_depth(b).depth_m
        ddiff = depth_b - depth_a if depth_a.shape == depth_b.shape else None
        return {"a": a, "b": b,
                "total_a_gbp": da["total_gbp"],
                "total_b_gbp": db["total_gbp"],
                "delta_total_gbp": db["total_gbp"] - da["total_gbp"],
                "depth_delta": (None if ddiff is None else
                                {"min_m": float(ddiff.min()),
                                 "max_m": float(ddiff.max()),
                                 "mean_m": float(ddiff.mean())}),
                "buildings": buildings}

    # -- write side -------------------------------------------------------

    @app.post("/runs", status_code=202)
    def post_runs(body: dict):
        kind = body.get("kind", "matrix")
        if kind not in ("baseline", "capture", "matrix"):
            raise HTTPException(status_code=400, detail={
                "error": "UsageError",
                "message": f"kind must be baseline|capture|matrix, got {kind!r}"})
        rps = body.get("rps")
        if rps is not None:
            rps = [int(r) for r in rps]
            known = {s.return_period_y for s in scene.project.storms}
            bad = [r for r in rps if r not in known]
            if bad:
                raise HTTPException(status_code=400, detail={
                    "error": "UsageError",
                    "message": f"unknown return periods {bad}; project has {sorted(known)}"})
        tiles = body.get("tiles")
        if tiles is not None:
            tiles = [int(t) for t in tiles]
            bad = [t for t in tiles if not 1 <= t <= scene.partition.n_tiles]
            if bad:
                raise HTTPException(status_code=400, detail={
                    "error": "UsageError", "message": f"tiles out of range: {bad}"})
        if kind == "baseline":
            tiles = []
        fraction = body.get("capture_fraction")
        if fraction is not None:
            fraction = float(fraction)
            if not 0.0 <= fraction <= 1.0:
                raise HTTPException(status_code=400, detail={
                    "error": "UsageError",
                    "message": f"capture_fraction must be in [0, 1], got {fraction}"})

        def work():
            matrix = run_matrix(scene, registry, tiles=tiles,
                                capture_fraction=fraction,
                                workers=workers, rps=rps)
            return {"n_runs": matrix.n_runs,
                    "baseline": {str(rp): ref.key
                                 for rp, ref in sorted(matrix.baseline.items())},
                    "capture": {f"{rp}:{tile}": ref.key
                                for (rp, tile), ref in sorted(matrix.capture.items())}}

        job_id = jobs.submit(kind="runs", params=body, work=work)
        return {"job_id": job_id}

    @app.get("/interventions")
    def get_interventions():
        return jobs.intervention_state()

    @app.post("/interventions", status_code=202)
    def post_interventions(body: dict):
        base_version = body.get("base_version")
        if base_version is None:
            raise HTTPException(status_code=400, detail={
                "error": "UsageError", "message": "base_version is required"})
        items = body.get("items")
        if not isinstance(items, list) or not items:
            raise HTTPException(status_code=400, detail={
                "error": "UsageError", "message": "items must be a non-empty list"})

        interventions = []
        for it in items:
            kind = it.get("kind")
            if kind == "permeable_pavement":
                tile_id = int(it["tile_id"])
                if not 1 <= tile_id <= scene.partition.n_tiles:
                    raise HTTPException(status_code=422, detail={
                        "error": "GeometryError",
                        "message": f"tile {tile_id} out of range"})
                area = it.get("area_m2")
                if area is None:
                    from .hydro import pavement_cells
                    mask = pavement_cells(scene.partition, scene.landuse, tile_id)
                    mask &= scene.grid.active_mask
                    area = float(mask.sum()) * scene.grid.cell_area
                interventions.append(PermeablePavement(
                    tile_id=tile_id, area_m2=float(area),
                    infiltration_rate_mmh=float(it.get("infiltration_rate_mmh", 50.0)),
                    capacity_mm=float(it.get("capacity_mm", 0.0))))
            elif kind == "detention_pond":
                ring = tuple((float(x), float(y)) for x, y in it["polygon"])
                interventions.append(DetentionPond(
                    polygon=ring, area_m2=float(it["area_m2"]),
                    volume_m3=float(it["volume_m3"])))
            else:
                raise HTTPException(status_code=400, detail={
                    "error": "UsageError",
                    "message": f"unknown intervention kind {kind!r}"})

        # geometry check up front so bad ponds 422 before any queueing
        from .planner import build_intervention_scene
        build_intervention_scene(scene, interventions)

        new_version = jobs.cas_interventions(int(base_version), items)

        def work():
            report = evaluate_intervention(scene, registry, interventions,
                                           workers=workers)
            return {
                "version": new_version,
                "cost": {"install_gbp": report.cost.install_gbp,
                         "maintenance_gbp_per_y": report.cost.maintenance_gbp_per_y,
                         "lifetime_y": report.cost.lifetime_y,
                         "whole_life_gbp": report.cost.whole_life_gbp},
                "per_rp": {str(rp): {"baseline_gbp": o.baseline_gbp,
                                     "treated_gbp": o.treated_gbp,
                                     "benefit_gbp": o.benefit_gbp,
                                     "baseline_key": o.baseline_key,
                                     "treated_key": o.treated_key}
                           for rp, o in report.per_rp.items()},
                "ead_baseline_gbp": report.ead_baseline_gbp,
                "ead_treated_gbp": report.ead_treated_gbp,
                "ead_benefit_gbp": report.ead_benefit_gbp,
                "lifetime_benefit_gbp": report.lifetime_benefit_gbp,
                "benefit_cost_ratio": report.benefit_cost_ratio,
            }

        job_id = jobs.submit(kind="interventions", params=body, work=work)
        return {"job_id": job_id, "version": new_version}

    # -- optional static UI -------------------------------------------------

    candidates = []
    if ui_dir is not None:
        candidates.append(Path(ui_dir))
    candidates.append(Path(__file__).resolve().parents[2] / "frontend" / "dist")
    for cand in candidates:
        if cand.is_dir() and (cand / "index.html").exists():
            from fastapi.staticfiles import StaticFiles
            app.mount("/ui", StaticFiles(directory=str(cand), html=True),
                      name="ui")
            break

    return app
