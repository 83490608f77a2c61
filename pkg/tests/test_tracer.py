import numpy as np
import pytest

from oracles import AIR_DB_PER_KM, AIR_DB_PER_KM_TABLE, image_source_times, path_energy_loop
from sceneaudio import tracer
from sceneaudio.scene import Material, Scene, Surface, shoebox
from sceneaudio.tracer import (PathRecord, TraceError, air_absorption_iso9613, air_attenuation, direct_path,
                               path_energies, path_energy, read_pathset, trace_paths, write_pathset)

SRC = np.array([1.0, 1.5, 1.2])
LIS = np.array([3.0, 4.5, 1.6])


@pytest.fixture(scope="module")
def traced(small_room):
    return trace_paths(small_room, SRC, LIS, 3000, 0.2, seed=11, keep_vertices=True)


def test_empty_scene_has_only_direct_path():
    scene = Scene([], [Material("m", np.full(8, 0.5))])
    paths = trace_paths(scene, [0, 0, 0], [3.43, 0, 0], 100, 1.0)
    assert len(paths) == 1 and paths.bounces[0] == 0
    assert paths.times[0] == pytest.approx(0.01, abs=1e-15)


def test_identical_seeds_are_bit_identical(small_room):
    a = trace_paths(small_room, SRC, LIS, 5000, 0.1, seed=3)
    b = trace_paths(small_room, SRC, LIS, 5000, 0.1, seed=3, workers=3)
    for name in ("times", "directions", "energy", "beta", "bounces", "materials"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    c = trace_paths(small_room, SRC, LIS, 5000, 0.1, seed=4)
    assert len(c) != len(a) or not np.array_equal(c.times, a.times)


def test_pathset_invariants(traced):
    assert np.all(np.diff(traced.times) >= 0)
    assert np.all(traced.times <= 0.2) and np.all(traced.times > 0)
    assert np.count_nonzero(traced.bounces == 0) == 1
    assert np.allclose(np.linalg.norm(traced.directions, axis=1), 1, atol=1e-9)
    assert np.all(traced.energy >= 0)
    assert np.all(traced.energy <= traced.beta)
    assert np.array_equal(np.diff(traced.offsets), traced.bounces)


def test_arrival_time_is_polyline_length(traced):
    for j in range(len(traced)):
        pts = np.vstack([SRC, traced.vertices[j], LIS])
        length = np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1))
        assert abs(traced.times[j] - length / 343.0) < 1e-9


def test_direction_points_at_last_reflection(traced):
    for j in np.nonzero(traced.bounces > 0)[0][:200]:
        v = traced.vertices[j][-1] - LIS
        assert np.allclose(traced.directions[j], v / np.linalg.norm(v), atol=1e-12)


def test_specular_paths_match_image_sources():
    size = (4.0, 6.0, 3.0)
    room = shoebox(size, [Material("m", np.full(8, 0.9))], 0, 0, scattering=0.0)
    radius = 0.4
    paths = trace_paths(room, SRC, LIS, 30000, 0.06, seed=5, receiver_radius=radius)
    images = image_source_times(size, SRC, LIS, 343.0, max_order=2)
    # a receiver hit lies at most ``radius`` off the unfolded specular ray
    tol = 2 * radius / 343.0
    for order in (1, 2):
        t = paths.times[paths.bounces == order]
        assert t.size
        nearest = np.min(np.abs(t[:, None] - images[order][None, :]), axis=1)
        assert np.all(nearest <= tol)
        within = images[order][images[order] <= 0.06 - tol]
        found = np.min(np.abs(within[:, None] - t[None, :]), axis=1)
        assert np.all(found <= tol)
    assert paths.times[0] == pytest.approx(images[0][0], abs=1e-15)


def test_lossless_walls_leave_launch_weight(small_room):
    lossless = small_room.with_reflectances(np.ones((2, 8)))
    paths = trace_paths(lossless, SRC, LIS, 1000, 0.1, seed=1)
    assert np.array_equal(paths.energy, paths.beta)


def test_direct_path_and_occlusion(small_room):
    d = direct_path(small_room, SRC, LIS)
    dist = np.linalg.norm(SRC - LIS)
    assert d.arrival_time == pytest.approx(dist / 343.0, rel=1e-15)
    assert np.allclose(d.band_energy, np.exp(-tracer.AIR_ALPHA_DEFAULT * dist) / (4 * np.pi * dist ** 2))
    other = direct_path(small_room.with_reflectances(np.full((2, 8), 0.1)), SRC, LIS)
    assert np.array_equal(other.band_energy, d.band_energy)
    wall = Surface(np.array([[2, 0, 0], [2, 6, 0], [2, 6, 3], [2, 0, 3]], float), 0)
    blocked = Scene(list(small_room.surfaces) + [wall], small_room.materials)
    assert direct_path(blocked, SRC, LIS) is None


def _record(seq, beta):
    return PathRecord(0.01, np.array([1.0, 0, 0]), np.zeros(beta.size), tuple(seq), beta)


def test_path_energy_cases(rng):
    beta = np.full(8, 0.9)
    assert np.array_equal(path_energy(_record((), beta), np.full((1, 8), 0.3)), beta)
    assert path_energy(_record((0,), beta), np.full((1, 8), 0.5))[0] == pytest.approx(0.45, abs=1e-16)
    table = rng.uniform(0.1, 1.0, (3, 8))
    for _ in range(20):
        seq = rng.integers(0, 3, 5)
        b = rng.uniform(0.1, 1.0, 8)
        got = path_energy(_record(seq, b), table)
        want = path_energy_loop(b, seq, table)
        assert np.all(np.abs(got / want - 1) < 1e-15)
    with pytest.raises(IndexError):
        path_energy(_record((5,), beta), table)


def test_vectorized_energies_match_single(traced, small_room, rng):
    table = rng.uniform(0.2, 1.0, (2, 8))
    bulk = path_energies(traced, table)
    for j in range(0, len(traced), 37):
        assert np.allclose(bulk[j], path_energy(traced[j], table), rtol=1e-12)


def test_air_attenuation():
    assert air_attenuation(0.0, 3) == 1.0
    for d in (0.5, 10.0, 300.0):
        f = [air_attenuation(d, b) for b in range(8)]
        assert 0 < f[-1] <= f[0] <= 1
        assert np.all(np.diff(f) <= 0)
    with pytest.raises(ValueError):
        air_attenuation(-1.0, 0)


def test_air_table_matches_formula():
    db_km = tracer.AIR_ALPHA_DEFAULT * 10 / np.log(10) * 1000
    assert np.allclose(db_km, AIR_DB_PER_KM, rtol=1e-7)
    formula = air_absorption_iso9613([62.5, 125, 250, 500, 1000, 2000, 4000, 8000]) * 10 / np.log(10) * 1000
    assert np.allclose(formula, AIR_DB_PER_KM, rtol=1e-7)
    nominal = air_absorption_iso9613([125, 250, 500, 1000, 2000, 4000, 8000]) * 10 / np.log(10) * 1000
    assert np.allclose(nominal, AIR_DB_PER_KM_TABLE, rtol=0.02)


def test_trace_argument_errors(small_room):
    with pytest.raises(TraceError):
        trace_paths(small_room, SRC, LIS, 0, 0.1)
    with pytest.raises(TraceError):
        trace_paths(small_room, SRC, LIS, 10, 0.0)
    with pytest.raises(TraceError):
        trace_paths(small_room, [100.0, 0, 0], LIS, 10, 0.1)


def test_pathset_roundtrip(tmp_path, traced):
    path = tmp_path / "p.bin"
    write_pathset(path, traced)
    again = read_pathset(path)
    for name in ("times", "directions", "energy", "beta", "bounces", "materials", "source", "listener"):
        assert np.array_equal(getattr(again, name), getattr(traced, name))
    assert (again.seed, again.ray_budget) == (traced.seed, traced.ray_budget)
    assert path.read_bytes()[:4] == b"PSET"


def test_corrupt_pathset(tmp_path, traced):
    path = tmp_path / "p.bin"
    write_pathset(path, traced)
    path.write_bytes(path.read_bytes()[:200])
    with pytest.raises(TraceError):
        read_pathset(path)
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(TraceError):
        read_pathset(path)


def test_with_reflectances_reuses_geometry(traced):
    table = np.full((2, 8), 0.5)
    again = traced.with_reflectances(table)
    assert np.allclose(again.energy, traced.beta * 0.5 ** traced.bounces[:, None])
