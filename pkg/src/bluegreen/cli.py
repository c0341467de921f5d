"""Command line pipeline.

Typical session:

    bluegreen demo --out demo/
    bluegreen validate --project demo/project.json
    bluegreen baseline --project demo/project.json --out results/
    bluegreen capture-scan --project demo/project.json --out results/
    bluegreen rank --project demo/project.json --out results/ --rp 10
    bluegreen intervene --project demo/project.json --out results/ --pavement-tile 7
    bluegreen report --project demo/project.json --out results/ --key <key> \
        --artifact damages.json
    bluegreen serve --project demo/project.json --out results/

Engine errors print one JSON object to stderr and exit nonzero, so scripts
can parse failures without scraping tracebacks.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from .errors import EngineError, UsageError
from .planner import (CostRates, cost_intervention, evaluate_intervention,
                      matrix_from_registry, run_matrix, suggest_intervention)
from .hydro import DetentionPond, PermeablePavement
from .project import Project, Scene
from .registry import Registry, ARTIFACTS


def _fail(exc: EngineError) -> None:
    sys.stderr.write(json.dumps({"error": type(exc).__name__,
                                 "message": str(exc)}) + "\n")
    sys.exit(2)


def engine_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except EngineError as exc:
            _fail(exc)
    return wrapper


def _load_scene(project_path: str) -> Scene:
    return Scene.build(Project.load(project_path))


def _parse_tiles(text: str | None, scene: Scene) -> list[int] | None:
    if text is None or text == "all":
        return None
    try:
        tiles = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--tiles expects comma-separated ids or 'all', got {text!r}")
    if not tiles:
        raise UsageError("--tiles given but empty")
    return tiles


project_opt = click.option("--project", "project_path", required=True,
                           type=click.Path(), help="Project config JSON.")
out_opt = click.option("--out", "out_dir", required=True, type=click.Path(),
                       help="Run registry directory.")
workers_opt = click.option("--workers", default=1, show_default=True,
                           help="Concurrent scenario runs.")


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Rank flood source areas and appraise drainage interventions."""


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@engine_errors
def demo(out_dir, seed):
    """Write a small synthetic project to try the pipeline on."""
    from .fixtures import write_demo_project
    cfg = write_demo_project(out_dir, seed=seed)
    click.echo(f"demo project written: {cfg}")


@main.command()
@project_opt
@engine_errors
def validate(project_path):
    """Check the project config and input files; print a summary."""
    project = Project.load(project_path)
    for note in project.validate():
        click.echo(note)
    click.echo("ok")


@main.command()
@project_opt
@out_opt
@click.option("--rp", "rps", type=int, multiple=True,
              help="Return periods to run (default: all in the project).")
@workers_opt
@engine_errors
def baseline(project_path, out_dir, rps, workers):
    """Run the do-nothing scenario for each storm."""
    scene = _load_scene(project_path)
    registry = Registry(out_dir)
    matrix = run_matrix(scene, registry, tiles=[], workers=workers,
                        rps=list(rps) or None)
    for rp, ref in sorted(matrix.baseline.items()):
        click.echo(f"rp{rp}: key={ref.key} damage_gbp={ref.total_damage_gbp:.2f} "
                   f"outflow_m3={ref.boundary_outflow_m3:.3f} steps={ref.n_steps}")


@main.command("capture-scan")
@project_opt
@out_opt
@click.option("--rp", "rps", type=int, multiple=True)
@click.option("--tiles", default="all", show_default=True,
              help="Comma-separated tile ids, or 'all' populated tiles.")
@click.option("--capture-fraction", type=float, default=None,
              help="Fraction of tile rainfall removed (default: project setting).")
@click.option("--dry-run", is_flag=True, help="Only report what would run.")
@workers_opt
@engine_errors
def capture_scan(project_path, out_dir, rps, tiles, capture_fraction, dry_run,
                 workers):
    """Run the full source-scan matrix: baseline + one capture run per tile."""
    scene = _load_scene(project_path)
    tile_ids = _parse_tiles(tiles, scene)
    rps = list(rps) or [s.return_period_y for s in scene.project.storms]
    n_tiles = (len(scene.partition.populated_ids) if tile_ids is None
               else len(tile_ids))
    n_base = len(rps)
    n_capture = n_base * n_tiles
    if dry_run:
        click.echo(f"{n_base + n_capture} runs scheduled "
                   f"({n_base} baseline + {n_capture} capture)")
        return
    registry = Registry(out_dir)
    matrix = run_matrix(scene, registry, tiles=tile_ids,
                        capture_fraction=capture_fraction,
                        workers=workers, rps=rps)
    click.echo(f"{matrix.n_runs} runs complete "
               f"({len(matrix.baseline)} baseline + {len(matrix.capture)} capture)")
    for rp in sorted(matrix.baseline):
        top = matrix.ranking(rp, scene.partition)[0]
        click.echo(f"rp{rp}: top tile {top.tile_id} "
                   f"(benefit_gbp={top.benefit_gbp:.2f} score={top.score:.4f})")


@main.command()
@project_opt
@out_opt
@click.option("--rp", type=int, required=True)
@click.option("--capture-fraction", type=float, default=None)
@click.option("--csv", "csv_path", type=click.Path(), default=None,
              help="Also write the table to this CSV file.")
@engine_errors
def rank(project_path, out_dir, rp, capture_fraction, csv_path):
    """Rank tiles by damage avoided x green fraction from stored runs."""
    scene = _load_scene(project_path)
    registry = Registry(out_dir)
    matrix = matrix_from_registry(scene, registry, capture_fraction)
    if rp not in matrix.baseline:
        raise UsageError(f"no baseline run for rp{rp} in {out_dir}; "
                         f"run capture-scan first")
    ranking = matrix.ranking(rp, scene.partition)
    lines = ["rank,tile_id,green_fraction,benefit_gbp,score"]
    for i, row in enumerate(ranking, start=1):
        lines.append(f"{i},{row.tile_id},{row.green_fraction:.6f},"
                     f"{row.benefit_gbp:.2f},{row.score:.6f}")
    text = "\n".join(lines) + "\n"
    click.echo(text, nl=False)
    if csv_path:
        Path(csv_path).write_text(text)


@main.command()
@project_opt
@out_opt
@click.option("--pavement-tile", type=int, default=None,
              help="Lay permeable pavement over this tile's paved cells.")
@click.option("--pavement-area", type=float, default=None,
              help="Treated area m2 for costing (default: rasterized paved area).")
@click.option("--pond-geojson", type=click.Path(), default=None,
              help="GeoJSON file with one pond polygon feature "
                   "(properties.area_m2 and properties.volume_m3).")
@click.option("--suggest-tile", type=int, default=None,
              help="Let the planner pick a measure for this tile.")
@click.option("--rates-json", type=click.Path(), default=None,
              help="JSON file overriding cost rates.")
@workers_opt
@engine_errors
def intervene(project_path, out_dir, pavement_tile, pavement_area, pond_geojson,
              suggest_tile, rates_json, workers):
    """Evaluate an intervention: cost it, re-run all storms, report benefit."""
    scene = _load_scene(project_path)
    registry = Registry(out_dir)

    interventions = []
    if pavement_tile is not None:
        area = pavement_area
        if area is None:
            from .hydro import pavement_cells
            mask = pavement_cells(scene.partition, scene.landuse, pavement_tile)
            mask &= scene.grid.active_mask
            area = float(mask.sum()) * scene.grid.cell_area
        interventions.append(PermeablePavement(tile_id=pavement_tile, area_m2=area))
    if pond_geojson is not None:
        with open(pond_geojson) as f:
            doc = json.load(f)
        feats = doc.get("features") or [doc]
        for feat in feats:
            props = feat.get("properties") or {}
            geom = feat.get("geometry") or {}
            if geom.get("type") != "Polygon":
                raise UsageError("pond feature must be a Polygon")
            ring = tuple((float(x), float(y)) for x, y in geom["coordinates"][0])
            interventions.append(DetentionPond(
                polygon=ring, area_m2=float(props["area_m2"]),
                volume_m3=float(props["volume_m3"])))
    if suggest_tile is not None:
        interventions.append(suggest_intervention(scene, suggest_tile))
    if not interventions:
        raise UsageError("nothing to do: give --pavement-tile, --pond-geojson "
                         "or --suggest-tile")

    rates = None
    if rates_json:
        with open(rates_json) as f:
            rates = CostRates(**json.load(f))

    report = evaluate_intervention(scene, registry, interventions,
                                   rates=rates, workers=workers)
    doc = {
        "interventions": [
            {"kind": iv.kind, "tile_id": iv.tile_id, "area_m2": iv.area_m2}
            if isinstance(iv, PermeablePavement) else
            {"kind": iv.kind, "area_m2": iv.area_m2, "volume_m3": iv.volume_m3}
            for iv in report.interventions],
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
    click.echo(json.dumps(doc, indent=1, sort_keys=True))


@main.command()
@project_opt
@out_opt
@click.option("--key", default=None, help="Run key (see capture-scan output).")
@click.option("--rp", type=int, default=None,
              help="Alternative to --key: baseline run of this return period.")
@click.option("--tile", type=int, default=None,
              help="With --rp: the capture run of this tile.")
@click.option("--artifact", default=None, type=click.Choice(list(ARTIFACTS)),
              help="Emit one artifact's exact bytes (default: summary JSON).")
@click.option("--dest", type=click.Path(), default=None,
              help="Write to file instead of stdout.")
@engine_errors
def report(project_path, out_dir, key, rp, tile, artifact, dest):
    """Print a stored run: summary JSON, or one artifact byte-for-byte."""
    scene = _load_scene(project_path)
    registry = Registry(out_dir)
    if key is None:
        if rp is None:
            raise UsageError("give --key, or --rp (with optional --tile)")
        matrix = matrix_from_registry(scene, registry)
        ref = (matrix.baseline.get(rp) if tile is None
               else matrix.capture.get((rp, tile)))
        if ref is None:
            raise UsageError(f"no stored run for rp{rp}"
                             + (f" tile {tile}" if tile is not None else ""))
        key = ref.key
    if not registry.has(key):
        raise UsageError(f"unknown run key {key!r}")

    if artifact is not None:
        blob = registry.load_artifact(key, artifact)
        if dest:
            Path(dest).write_bytes(blob)
        else:
            sys.stdout.buffer.write(blob)
        return

    doc = {"meta": registry.load_meta(key),
           "ledger": registry.load_ledger(key),
           "damages": registry.load_damages(key)}
    text = json.dumps(doc, indent=1, sort_keys=True)
    if dest:
        Path(dest).write_text(text + "\n")
    else:
        click.echo(text)


@main.command()
@project_opt
@out_opt
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@workers_opt
@engine_errors
def serve(project_path, out_dir, host, port, workers):
    """Serve the HTTP API (and the web UI if built) for this project."""
    import uvicorn
    from .service import create_app
    app = create_app(project_path, out_dir, workers=workers)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
