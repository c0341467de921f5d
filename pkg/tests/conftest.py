import numpy as np
import pytest

import synth
from bluegreen.fixtures import write_demo_project
from bluegreen.geodata import TerrainGrid
from bluegreen.project import Project, Scene


def flat_grid(n_rows: int, n_cols: int, cell: float = 1.0, z: float = 0.0,
              origin=(0.0, 0.0)) -> TerrainGrid:
    elev = np.full((n_rows, n_cols), z, dtype=np.float64)
    return TerrainGrid(origin_x=origin[0], origin_y=origin[1], cell_size=cell,
                       elevation=elev, active_mask=np.isfinite(elev))


def rect(x0: float, y0: float, w: float, h: float) -> list[tuple[float, float]]:
    return [(x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h), (x0, y0)]


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory):
    cfg = write_demo_project(tmp_path_factory.mktemp("demo") / "proj")
    return cfg.parent


@pytest.fixture(scope="session")
def demo_project(demo_dir):
    return Project.load(demo_dir / "project.json")


@pytest.fixture(scope="session")
def demo_scene(demo_project):
    return Scene.build(demo_project)


@pytest.fixture(scope="session")
def accept_dir(tmp_path_factory):
    cfg = synth.write_accept_project(tmp_path_factory.mktemp("accept") / "proj")
    return cfg.parent


@pytest.fixture(scope="session")
def accept_scene(accept_dir):
    return Scene.build(Project.load(accept_dir / "project.json"))
