"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line with the
measured quantity so the verdicts are visible in ``pytest -v`` output.
"""

import hashlib
import json
import os
import time

import numpy as np
import pytest

from conftest import pipeline_config
from oracles import crossroom_brute, encode_loop, one_pole_magnitude, sh_first_order, through_origin_decay
from sceneaudio import cli, fixtures
from sceneaudio.ambi import AmbisonicBuffer, encode_er, encode_lr, sh_matrix, vector_to_angles
from sceneaudio.dsp_io import Signal, fft_convolve
from sceneaudio.erdur import find_er_duration
from sceneaudio.irsynth import (CrossoverBank, ModulationCurve, apply_modulation, build_directional_ir,
                                compute_modulation, crossroom_lrir)
from sceneaudio.matopt import OptProblem, gradient, objective, optimize_materials
from sceneaudio.scene import Material, load_scene, shoebox
from sceneaudio.sweep_analysis import deconvolve_ir, energy_response, gen_sweep, load_decay
from sceneaudio.tracer import PathSet, trace_paths

BANDS = 8


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def random_problem(rng, n_paths=500, n_materials=3):
    bounces = np.r_[0, rng.integers(1, 12, n_paths)]
    mats = rng.integers(0, n_materials, bounces.sum())
    times = np.r_[0.01, np.sort(rng.uniform(0.012, 0.5, n_paths))]
    beta = rng.uniform(1e-5, 1e-2, (n_paths + 1, BANDS))
    ps = PathSet(times, np.tile([1.0, 0, 0], (n_paths + 1, 1)), beta, beta, bounces, mats, [0, 0, 0], [1, 0, 0])
    return OptProblem(ps, rng.uniform(5, 60, BANDS), beta[0], 0.01, n_materials)


def test_01_gradient_matches_finite_differences(capsys):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    h = 1e-6
    for _ in range(100):
        prob = random_problem(rng)
        for band in range(BANDS):
            p = rng.uniform(0.2, 0.9, 3)
            g = gradient(p, prob, band)
            fd = np.array([(objective(p + h * e, prob, band) - objective(p - h * e, prob, band)) / (2 * h)
                           for e in np.eye(3)])
            worst = max(worst, float(np.max(np.abs(g - fd) / np.abs(fd))))
    elapsed = time.perf_counter() - start
    verdict(capsys, 1, worst < 1e-5 and elapsed < 10,
            f"max relative error {worst:.2e} over 100 instances x 8 bands in {elapsed:.2f} s")


def test_02_material_recovery(capsys):
    start = time.perf_counter()
    truth = np.array([0.35, 0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9])
    room = shoebox((4.0, 6.0, 3.0), [Material("m", truth)], 0, 0)
    paths = trace_paths(room, [1.0, 1.5, 1.2], [3.0, 4.5, 1.6], 3000, 0.15, seed=3)
    t0 = paths.times[paths.direct_index()]
    prob = OptProblem(paths, through_origin_decay(paths, t0), paths.beta[paths.direct_index()], t0, 1)
    report = optimize_materials(prob, init=0.5)
    err = np.abs(report.p_opt[0] - truth)
    good = int(np.count_nonzero(err <= 0.05))
    elapsed = time.perf_counter() - start
    verdict(capsys, 2, good >= 7 and elapsed < 30,
            f"{good}/8 bands within 0.05 (max error {err.max():.4f}) in {elapsed:.2f} s")


def test_03_optimizer_timing(capsys):
    scene = fixtures.fixture_scene()
    paths = trace_paths(scene, fixtures.SOURCE, fixtures.LISTENER, 44000, 0.5, seed=0)
    t0 = paths.times[paths.direct_index()]
    table = np.array([m.reflectance for m in scene.materials])
    rates = through_origin_decay(paths.with_reflectances(table), t0)
    prob = OptProblem(paths, rates, paths.beta[paths.direct_index()], t0, scene.n_materials)
    start = time.perf_counter()
    optimize_materials(prob, workers=4)
    elapsed = time.perf_counter() - start
    verdict(capsys, 3, elapsed < 10 and len(paths) >= 15000,
            f"8-band fit on {len(paths)} paths in {elapsed:.2f} s")


def test_04_t_er_robustness(capsys):
    start = time.perf_counter()
    scene = fixtures.fixture_scene()
    values = []
    for k, budget in enumerate(np.linspace(15000, 38000, 7).astype(int)):
        paths = trace_paths(scene, fixtures.SOURCE, fixtures.LISTENER, int(budget), 0.1, seed=k)
        values.append(find_er_duration(paths).t_er)
    values = np.array(values)
    spread = values.std() / values.mean()
    elapsed = time.perf_counter() - start
    verdict(capsys, 4, spread < 0.042 and elapsed < 60,
            f"T_ER {np.round(values * 1e3, 2).tolist()} ms, std/mean {spread * 100:.2f} % in {elapsed:.1f} s")


def test_05_t_er_grows_with_room_size(capsys):
    mats = [Material("walls", np.full(8, 0.8)), Material("floor", np.full(8, 0.6))]
    small = shoebox((4.0, 6.0, 3.0), mats, 0, 1)
    large = shoebox((40.0, 60.0, 12.0), mats, 0, 1)
    t_small = find_er_duration(trace_paths(small, [1.0, 1.5, 1.2], [3.0, 4.5, 1.6], 20000, 0.1, seed=1)).t_er
    # receiver radius grows with the room so hits per window stay comparable
    big_paths = trace_paths(large, [15.0, 25.0, 1.5], [25.0, 35.0, 1.6], 60000, 0.3, seed=1, receiver_radius=2.5)
    t_large = find_er_duration(big_paths).t_er
    ok = 0.010 <= t_small <= 0.060 and 0.080 <= t_large <= 0.250 and t_small < t_large
    verdict(capsys, 5, ok, f"4x6x3 m: {t_small * 1e3:.1f} ms, 40x60x12 m: {t_large * 1e3:.1f} ms")


def test_06_sweep_roundtrip(capsys):
    sweep = gen_sweep()
    snrs = []
    for seed in range(10):
        h = np.random.default_rng(seed).standard_normal(100)
        rec = Signal(fft_convolve(sweep.samples, h), sweep.rate)
        est = deconvolve_ir(rec, sweep).samples[:100] * np.max(np.abs(h))
        snrs.append(10 * np.log10(np.sum(h ** 2) / np.sum((est - h) ** 2)))
    verdict(capsys, 6, min(snrs) > 40, f"worst SNR {min(snrs):.1f} dB over 10 seeds")


def test_07_modulation_oracle(capsys):
    rate, at = 48000, 480
    sim = np.zeros(4000)
    sim[at] = 1.0
    meas = np.zeros_like(sim)
    meas[at:] = 0.8 ** np.arange(sim.size - at)
    curve = compute_modulation(Signal(meas, rate), Signal(sim, rate), at / rate)
    err_db = np.max(np.abs(20 * np.log10(curve.ratio / one_pole_magnitude(0.8))))
    rng = np.random.default_rng(7)
    k = rng.standard_normal(4096)
    m = ModulationCurve(rng.uniform(0.2, 4.0, 128), rate)
    before, after = np.fft.rfft(k), np.fft.rfft(apply_modulation(k, m))
    sel = np.abs(before) > 1e-6
    phase = float(np.max(np.abs(np.angle(after[sel] / before[sel]))))
    verdict(capsys, 7, err_db < 1.0 and phase < 1e-9,
            f"resonator error {err_db:.2e} dB, phase change {phase:.2e} rad")


def test_08_encoding_oracle(capsys):
    rng = np.random.default_rng(8)
    dry = rng.standard_normal(128)
    entries = []
    for _ in range(6):
        d = rng.standard_normal(3)
        entries.append((d / np.linalg.norm(d), rng.standard_normal(rng.integers(1, 50))))
    gains = np.array([sh_first_order(*vector_to_angles(d)) for d, _ in entries])
    rms = float(np.sqrt(np.mean((encode_er(Signal(dry, 8000), entries).channels
                                 - encode_loop(dry, entries, gains)) ** 2)))
    axes = sh_matrix(1, np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]))
    # ACN order W, Y, Z, X
    want = np.array([[2 ** -0.5, 0, 0, 1], [2 ** -0.5, 1, 0, 0], [2 ** -0.5, 0, 1, 0]])
    axis_err = float(np.max(np.abs(axes - want)))
    verdict(capsys, 8, rms < 1e-9 and axis_err < 1e-15,
            f"loop oracle RMS {rms:.2e}, axis gain error {axis_err:.1e}")


def test_09_lr_isotropy(capsys):
    rng = np.random.default_rng(9)
    base = AmbisonicBuffer(rng.standard_normal((4, 300)), 8000, 1)
    out = encode_lr(Signal(rng.standard_normal(200), 8000), Signal(rng.standard_normal(100), 8000), base)
    untouched = np.array_equal(out.channels[1:, :300], base.channels[1:]) and not np.any(out.channels[1:, 300:])
    v = rng.standard_normal((10_000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    delta = np.array([1.0])
    buf = encode_er(Signal(np.r_[1.0, np.zeros(3)], 8000), [(d, delta) for d in v])
    energy = np.sum(buf.channels ** 2, axis=1)
    ratio = float(np.max(energy[1:] / energy[0]))
    verdict(capsys, 9, untouched and ratio < 0.01,
            f"X/Y/Z bit-identical: {untouched}, worst X/Y/Z to W energy {ratio * 100:.3f} %")


def test_10_crossroom_formula(capsys):
    rng = np.random.default_rng(10)
    l1, l2 = rng.standard_normal(8), rng.standard_normal(8)
    e1 = [rng.standard_normal(8) for _ in range(2)]
    e2 = [rng.standard_normal(8) for _ in range(2)]
    sig = lambda x: Signal(x, 48000)  # noqa: E731
    out = crossroom_lrir(sig(l1), sig(l2), [sig(x) for x in e1], [sig(x) for x in e2], 0.0625).samples
    brute = crossroom_brute(l1, l2, e1, e2, 0.0625)
    swapped = crossroom_lrir(sig(l2), sig(l1), [sig(x) for x in e2], [sig(x) for x in e1], 0.0625).samples
    err = float(np.max(np.abs(out - brute[:out.size])))
    sym = float(np.max(np.abs(out - swapped)))
    verdict(capsys, 10, err < 1e-12 and sym < 1e-12, f"brute-force error {err:.1e}, swap difference {sym:.1e}")


@pytest.fixture(scope="module")
def two_runs(fixture_files, tmp_path_factory):
    runs = []
    for k in range(2):
        outdir = tmp_path_factory.mktemp(f"acceptance_run{k}")
        start = time.perf_counter()
        result = cli.run_pipeline(pipeline_config(fixture_files, outdir))
        runs.append((result, str(outdir), time.perf_counter() - start))
    return runs


def test_11_splice_continuity(capsys, fixture_files, two_runs):
    result, outdir, _ = two_runs[0]
    assert result.exit_code == 0
    meta = json.load(open(fixture_files["config"]))
    scene, scale = cli.apply_materials(load_scene(fixture_files["scene"]),
                                       json.load(open(os.path.join(outdir, "materials.json"))))
    source = np.array(meta["source"]) * scale
    listener = np.array(meta["listener"]) * scale
    t_er = cli.read_t_er(os.path.join(outdir, "er.json"))
    decay = load_decay(os.path.join(outdir, "decay.json"))
    measured = cli.load_measured_ir(fixture_files["ir"])
    rate = measured.rate
    bank = CrossoverBank.for_bands(scene.band_centers, rate)
    curve = ModulationCurve(np.asarray(result.report["modulation_ratio"]), rate)
    config = pipeline_config(fixture_files, outdir)
    paths = trace_paths(scene, source, listener, config.synth_rays, t_er, seed=config.seed,
                        receiver_radius=config.receiver_radius)
    full = build_directional_ir(paths, measured.to_signal(), t_er, curve, bank, config.window).omni()
    n_er, span = int(round(t_er * rate)), int(round(0.010 * rate))
    jumps = []
    for band in range(BANDS):
        h = energy_response(full, band, scene.band_centers).samples
        measured_ratio = h[n_er:n_er + span].sum() / h[n_er - span:n_er].sum()
        predicted = np.exp(-decay.rates[band] * span / rate)
        jumps.append(10 * np.log10(measured_ratio / predicted))
    jumps = np.array(jumps)
    verdict(capsys, 11, bool(np.all(np.abs(jumps) <= 3.0)),
            f"T_ER {t_er * 1e3:.1f} ms, jump vs decay per band {np.round(jumps, 1).tolist()} dB (limit 3)")


def test_12_pipeline_determinism_and_timing(capsys, two_runs):
    digests = []
    for result, outdir, _ in two_runs:
        assert result.exit_code == 0
        digests.append({name: hashlib.sha256(open(os.path.join(outdir, name), "rb").read()).hexdigest()
                        for name in ("out.wav", "materials.json", "er.json", "decay.json")})
    same = digests[0] == digests[1]
    slowest = max(r[2] for r in two_runs)
    verdict(capsys, 12, same and slowest < 60, f"outputs identical: {same}, slowest run {slowest:.1f} s")
