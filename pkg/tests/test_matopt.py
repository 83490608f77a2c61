import numpy as np
import pytest

from sceneaudio import matopt
from sceneaudio.irsynth import CrossoverBank
from sceneaudio.matopt import (OptimizationError, OptProblem, gradient, objective, optimize_materials,
                               simulate_ir_from_paths)
from sceneaudio.scene import Material, shoebox
from sceneaudio.sweep_analysis import DecayModel
from sceneaudio.tracer import PathSet, trace_paths

BANDS = 8
T0 = 0.01


def synthetic_paths(rng, n_paths, n_materials, p_true=None, gammas=None, e0=None, max_bounces=6):
    """Direct path plus ``n_paths`` reflected paths with random material sequences.

    When ``p_true`` is given the launch weights are chosen so that the
    decay model with ``gammas`` fits every path exactly.
    """
    bounces = np.r_[0, rng.integers(1, max_bounces + 1, n_paths)]
    mats = rng.integers(0, n_materials, bounces.sum())
    times = np.r_[T0, np.sort(rng.uniform(T0 + 1e-3, 0.3, n_paths))]
    e0 = np.full(BANDS, 1e-2) if e0 is None else e0
    beta = rng.uniform(1e-4, 1e-2, (n_paths + 1, BANDS))
    beta[0] = e0
    ps = PathSet(times, np.tile([1.0, 0, 0], (n_paths + 1, 1)), beta, beta, bounces, mats,
                 [0, 0, 0], [1, 0, 0])
    if p_true is not None:
        counts = ps.material_counts(n_materials)
        decay = np.exp(-np.outer(times - T0, gammas))
        beta = e0 * decay / np.prod(p_true[None, :, :] ** counts[:, :, None], axis=1)
        ps.beta = beta
        ps.energy = beta
    return ps


def problem_for(ps, gammas, n_materials, e0=None):
    e0 = ps.beta[0] if e0 is None else e0
    return OptProblem(ps, gammas, e0, T0, n_materials)


def test_exact_problem_has_zero_objective_and_gradient(rng):
    p_true = rng.uniform(0.3, 0.95, (3, BANDS))
    gammas = rng.uniform(10, 40, BANDS)
    prob = problem_for(synthetic_paths(rng, 200, 3, p_true, gammas), gammas, 3)
    for band in range(BANDS):
        assert objective(p_true[:, band], prob, band) == pytest.approx(0, abs=1e-20)
        assert np.all(np.abs(gradient(p_true[:, band], prob, band)) < 1e-9)


def test_exact_problem_is_recovered(rng):
    p_true = rng.uniform(0.3, 0.95, (3, BANDS))
    gammas = rng.uniform(10, 40, BANDS)
    prob = problem_for(synthetic_paths(rng, 200, 3, p_true, gammas), gammas, 3)
    for method in ("lbfgsb", "projected"):
        report = optimize_materials(prob, method=method)
        assert np.allclose(report.p_opt, p_true, atol=1e-5)
        assert np.all(report.j_final < 1e-10)


def test_single_path_closed_form():
    # one reflection off material 0: J(p) = (log10(beta p / e0) + gamma dt / ln10)^2
    beta, e0, gamma, t = 8e-3, 1e-2, 20.0, 0.05
    ps = PathSet([T0, t], [[1, 0, 0]] * 2, np.full((2, BANDS), beta), np.full((2, BANDS), beta),
                 [0, 1], [0], [0, 0, 0], [1, 0, 0])
    ps.beta[0] = e0
    prob = OptProblem(ps, np.full(BANDS, gamma), np.full(BANDS, e0), T0, 1)
    p_star = e0 * np.exp(-gamma * (t - T0)) / beta
    assert 0 < p_star < 1
    for p in (0.2, 0.5, 0.9):
        want = (np.log10(beta * p / e0) + gamma * (t - T0) / np.log(10)) ** 2
        assert objective([p], prob, 0) == pytest.approx(want, rel=1e-12)
    report = optimize_materials(prob)
    assert report.p_opt[0] == pytest.approx(np.full(BANDS, p_star), rel=1e-6)


def test_ratio_invariance(rng):
    ps = synthetic_paths(rng, 50, 2)
    gammas = np.full(BANDS, 25.0)
    a = problem_for(ps, gammas, 2)
    ps.beta = ps.beta * 7.5
    b = problem_for(ps, gammas, 2)
    p = np.array([0.4, 0.7])
    assert objective(p, a, 2) == pytest.approx(objective(p, b, 2), rel=1e-12)


def test_decay_amplitude_cancels(rng):
    ps = synthetic_paths(rng, 50, 2)
    one = DecayModel(np.ones(BANDS), np.ones(BANDS), np.full(BANDS, 20.0))
    big = DecayModel(np.ones(BANDS), np.full(BANDS, 1e3), np.full(BANDS, 20.0))
    a = OptProblem.from_decay(ps, one, 2, T0)
    b = OptProblem.from_decay(ps, big, 2, T0)
    assert objective([0.5, 0.6], a, 0) == objective([0.5, 0.6], b, 0)


def test_gradient_matches_central_differences(rng):
    ps = synthetic_paths(rng, 300, 3)
    prob = problem_for(ps, rng.uniform(10, 40, BANDS), 3)
    h = 1e-6
    for band in range(BANDS):
        p = rng.uniform(0.2, 0.9, 3)
        g = gradient(p, prob, band)
        fd = np.array([(objective(p + h * e, prob, band) - objective(p - h * e, prob, band)) / (2 * h)
                       for e in np.eye(3)])
        assert np.all(np.abs(g - fd) / np.abs(fd) < 1e-5)


def test_absent_material_has_zero_partial(rng):
    ps = synthetic_paths(rng, 40, 2)
    prob = problem_for(ps, np.full(BANDS, 20.0), 3)
    assert gradient([0.5, 0.5, 0.5], prob, 1)[2] == 0.0


def test_start_at_optimum_stops_immediately(rng):
    p_true = rng.uniform(0.3, 0.95, (2, BANDS))
    gammas = rng.uniform(10, 40, BANDS)
    prob = problem_for(synthetic_paths(rng, 100, 2, p_true, gammas), gammas, 2)
    for method in ("lbfgsb", "projected"):
        report = optimize_materials(prob, init=p_true, method=method)
        assert np.all(report.iterations <= 2)
        assert np.allclose(report.p_opt, p_true, rtol=1e-9)


def test_projected_descent_is_monotone(rng, monkeypatch):
    ps = synthetic_paths(rng, 150, 3)
    prob = problem_for(ps, rng.uniform(10, 40, BANDS), 3)
    values = []
    for k in range(1, 25):
        monkeypatch.setattr(matopt, "MAX_ITER", k)
        p, _ = matopt._fit_band_projected(prob, 4, np.full(3, 0.5))
        values.append(objective(p, prob, 4))
    assert np.all(np.diff(values) <= 1e-12 * values[0])
    assert values[-1] < values[0]


def test_bands_are_independent(rng):
    ps = synthetic_paths(rng, 120, 2)
    gammas = rng.uniform(10, 40, BANDS)
    base = optimize_materials(problem_for(ps, gammas, 2)).p_opt
    perm = rng.permutation(BANDS)
    ps.beta = ps.beta[:, perm]
    swapped = optimize_materials(problem_for(ps, gammas[perm], 2)).p_opt
    assert np.allclose(swapped, base[:, perm], atol=1e-6)


def test_solutions_stay_in_bounds(rng):
    ps = synthetic_paths(rng, 80, 2)
    # decay far slower than any reflectance below one can produce
    report = optimize_materials(problem_for(ps, np.full(BANDS, 0.01), 2), method="projected")
    assert np.all(report.p_opt <= 1.0) and np.all(report.p_opt >= matopt.LOWER_BOUND)


def test_problem_errors(rng):
    only_direct = PathSet([T0], [[1, 0, 0]], np.ones((1, BANDS)), np.ones((1, BANDS)), [0], [],
                          [0, 0, 0], [1, 0, 0])
    with pytest.raises(OptimizationError):
        optimize_materials(OptProblem(only_direct, np.ones(BANDS), np.ones(BANDS), T0, 1))
    ps = synthetic_paths(rng, 10, 3)
    with pytest.raises(ValueError):
        OptProblem(ps, np.ones(BANDS), np.ones(BANDS), T0, 2)
    with pytest.raises(ValueError):
        OptProblem(ps, np.ones(BANDS), np.zeros(BANDS), T0, 3)
    with pytest.raises(ValueError):
        objective([0.0, 0.5, 0.5], problem_for(ps, np.ones(BANDS), 3), 0)


def test_failure_to_decrease_raises(rng, monkeypatch):
    ps = synthetic_paths(rng, 30, 2)
    prob = problem_for(ps, np.full(BANDS, 20.0), 2)
    monkeypatch.setattr(matopt, "_fit_band_lbfgsb", lambda problem, band, p0: (p0 * 0.3, 1))
    with pytest.raises(OptimizationError):
        optimize_materials(prob)


def test_two_materials_trade_off_along_the_decay_line():
    # a single decay line constrains a product of reflectances, not each one
    walls = np.array([0.8, 0.82, 0.85, 0.86, 0.86, 0.84, 0.8, 0.74])
    floor = np.array([0.5, 0.55, 0.6, 0.62, 0.65, 0.6, 0.55, 0.5])
    room = shoebox((4.0, 6.0, 3.0), [Material("w", walls), Material("f", floor)], 0, 1)
    paths = trace_paths(room, [1.0, 1.5, 1.2], [3.0, 4.5, 1.6], 3000, 0.15, seed=3)
    prob = problem_for(paths, np.zeros(BANDS), 2)
    truth = np.vstack([walls, floor])
    prob.decay_rates = _through_origin(prob, truth)
    report = optimize_materials(prob)
    counts = prob.counts.sum(axis=0)
    for band in range(BANDS):
        assert report.j_final[band] <= objective(truth[:, band], prob, band) * (1 + 1e-9)
        geo = np.exp(counts @ np.log(report.p_opt[:, band]) / counts.sum())
        geo_true = np.exp(counts @ np.log(truth[:, band]) / counts.sum())
        assert abs(geo - geo_true) < 0.02


def _through_origin(prob, p):
    """Decay rate that best explains the true path energies through the origin."""
    tau = prob.times - prob.t0_measured
    rates = []
    for band in range(prob.n_bands):
        y = prob.log_beta[:, band] + prob.counts @ np.log10(p[:, band]) - np.log10(prob.e0[band])
        rates.append(-np.log(10) * (tau @ y) / (tau @ tau))
    return np.array(rates)


def test_direct_path_only_gives_one_band_split_impulse():
    ps = PathSet([T0], [[1, 0, 0]], np.ones((1, BANDS)), np.ones((1, BANDS)), [0], [],
                 [0, 0, 0], [3.43, 0, 0])
    h = simulate_ir_from_paths(ps, 48000).samples
    start = int(round(T0 * 48000))
    assert not np.any(h[:start])
    assert np.sum(h ** 2) == pytest.approx(BANDS, rel=1e-9)


def test_silent_band_carries_no_energy():
    e = np.ones((1, BANDS))
    e[0, 3] = 0.0
    ps = PathSet([T0], [[1, 0, 0]], e, e, [0], [], [0, 0, 0], [3.43, 0, 0])
    bank = CrossoverBank.for_bands(np.array([62.5, 125, 250, 500, 1000, 2000, 4000, 8000]), 48000)
    h = simulate_ir_from_paths(ps, 48000, bank=bank).samples
    full = simulate_ir_from_paths(PathSet([T0], [[1, 0, 0]], np.ones((1, BANDS)), np.ones((1, BANDS)),
                                          [0], [], [0, 0, 0], [3.43, 0, 0]), 48000, bank=bank).samples
    assert np.sum(h ** 2) == pytest.approx(BANDS - 1, rel=1e-9)
    # neighbouring crossovers leak into band 3, so only require a clear drop
    n = min(h.size, full.size)
    left = np.sum(bank.band_filter(3, h[:n]) ** 2)
    assert left < 0.4 * np.sum(bank.band_filter(3, full[:n]) ** 2)
