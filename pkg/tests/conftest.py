import json
import os

import numpy as np
import pytest

from sceneaudio import cli, fixtures
from sceneaudio.scene import Material, shoebox


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_room():
    mats = [Material("walls", np.full(8, 0.8)), Material("floor", np.full(8, 0.6))]
    return shoebox((4.0, 6.0, 3.0), mats, wall_material=0, floor_material=1)


@pytest.fixture(scope="session")
def fixture_files(tmp_path_factory):
    return fixtures.write_fixture(str(tmp_path_factory.mktemp("fixture")))


def pipeline_config(files, outdir, **kw):
    with open(files["config"], encoding="utf-8") as fh:
        meta = json.load(fh)
    return cli.PipelineConfig(scene=files["scene"], ir=files["ir"], dry=files["dry"],
                              trajectory=files["trajectory"], source=np.array(meta["source"]),
                              listener=np.array(meta["listener"]), outdir=str(outdir), **kw)


@pytest.fixture(scope="session")
def pipeline_run(fixture_files, tmp_path_factory):
    outdir = tmp_path_factory.mktemp("run")
    result = cli.run_pipeline(pipeline_config(fixture_files, outdir))
    return result, str(outdir)


def file_exists(path):
    return os.path.isfile(path)
