"""Inverse estimation of per-band material reflectances.

For each band, reflectances ``p`` minimize the squared log10 mismatch between
simulated path energies relative to the direct path and the fitted decay
model relative to the measured first arrival. Path energies are
``beta_j * prod_i p_i ** c_ji`` with ``c_ji`` the number of reflections of
path ``j`` off material ``i``, so the objective and its gradient are
evaluated from the material count matrix without re-tracing.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .dsp_io import Signal
from .irsynth import CrossoverBank, merge_arrivals

log = logging.getLogger(__name__)

LOWER_BOUND = 1e-4
UPPER_BOUND = 1.0
DEFAULT_INIT = 0.5
GRAD_TOL = 1e-8
MAX_ITER = 500
_LN10 = np.log(10.0)


class OptimizationError(RuntimeError):
    pass


@dataclass
class OptProblem:
    """Data of the per-band least-squares problems.

    Parameters
    ----------
    paths : PathSet
        Traced paths; the direct path (if present) is excluded from the sum.
    decay_rates : (B,) array
        Fitted decay rates ``gamma`` per band, 1/s. The decay amplitude
        cancels in the objective.
    e0 : (B,) array
        Direct-path energy per band.
    t0_measured : float
        Earliest arrival in the measured IR.
    n_materials : int
    bounds : (lo, hi)
    """

    paths: object
    decay_rates: np.ndarray
    e0: np.ndarray
    t0_measured: float
    n_materials: int
    bounds: tuple = (LOWER_BOUND, UPPER_BOUND)
    counts: np.ndarray = field(init=False, repr=False)
    log_beta: np.ndarray = field(init=False, repr=False)
    times: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.decay_rates = np.asarray(self.decay_rates, dtype=np.float64)
        self.e0 = np.asarray(self.e0, dtype=np.float64)
        if np.any(self.e0 <= 0):
            raise ValueError("direct-path energy must be positive in every band")
        if self.paths.materials.size and self.paths.materials.max() >= self.n_materials:
            raise ValueError("a path references a material outside the unknown vector")
        keep = self.paths.bounces > 0
        self.times = self.paths.times[keep]
        self.counts = self.paths.material_counts(self.n_materials)[keep]
        with np.errstate(divide="ignore"):
            self.log_beta = np.log10(self.paths.beta[keep])

    @classmethod
    def from_decay(cls, paths, decay, n_materials, t0_measured, **kwargs):
        direct = paths.direct_index()
        if direct is None:
            raise ValueError("path set has no direct path")
        return cls(paths, decay.rates, paths.beta[direct], t0_measured, n_materials, **kwargs)

    @property
    def n_bands(self):
        return self.e0.size

    def target(self, band):
        """``log10(h(t_j) / h(t0))`` for the exponential decay model."""
        return -self.decay_rates[band] * (self.times - self.t0_measured) / _LN10

    def residuals(self, p, band):
        p = np.asarray(p, dtype=np.float64)
        if np.any(p <= 0):
            raise ValueError("reflectances must be positive for the log objective")
        log_e = self.log_beta[:, band] + self.counts @ np.log10(p)
        return log_e - np.log10(self.e0[band]) - self.target(band)


@dataclass
class OptReport:
    p_opt: np.ndarray
    j_final: np.ndarray
    j_initial: np.ndarray
    iterations: np.ndarray
    gradient_norm: np.ndarray
    converged: np.ndarray

    def to_dict(self):
        return {
            "J_final": self.j_final.tolist(),
            "J_initial": self.j_initial.tolist(),
            "iterations": self.iterations.tolist(),
            "gradient_norm": self.gradient_norm.tolist(),
            "converged": self.converged.tolist(),
        }


def objective(p, problem, band):
    """Sum of squared log10 residuals over reflected paths."""
    r = problem.residuals(p, band)
    return float(r @ r)


def gradient(p, problem, band):
    """Analytic gradient of :func:`objective` with respect to ``p``.

    With ``de_j/dp_i = e_j c_ji / p_i`` the chain rule gives
    ``dJ/dp_i = 2 / ln10 * sum_j r_j c_ji / p_i``.
    """
    p = np.asarray(p, dtype=np.float64)
    r = problem.residuals(p, band)
    return (2.0 / _LN10) * (r @ problem.counts) / p


def projected_gradient_norm(p, g, bounds):
    lo, hi = bounds
    pg = np.clip(p - g, lo, hi) - p
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def _fit_band_lbfgsb(problem, band, p0):
    lo, hi = problem.bounds
    trace = {"nit": 0}

    def fun(p):
        return objective(p, problem, band), gradient(p, problem, band)

    res = scipy.optimize.minimize(
        fun, p0, jac=True, method="L-BFGS-B",
        bounds=[(lo, hi)] * p0.size,
        options={"maxiter": MAX_ITER, "gtol": GRAD_TOL, "ftol": 1e-15, "maxcor": 10},
    )
    trace["nit"] = res.nit
    return res.x, res.nit


def _fit_band_projected(problem, band, p0):
    """Projected gradient descent with Armijo backtracking."""
    lo, hi = problem.bounds
    p = p0.copy()
    f = objective(p, problem, band)
    step = 1.0
    for it in range(MAX_ITER):
        g = gradient(p, problem, band)
        if projected_gradient_norm(p, g, problem.bounds) < GRAD_TOL:
            return p, it
        step = min(step * 4.0, 1e6)
        while True:
            q = np.clip(p - step * g, lo, hi)
            fq = objective(q, problem, band)
            if fq <= f - 1e-4 * g @ (p - q):
                break
            step *= 0.5
            if step < 1e-20:
                return p, it
        p, f = q, fq
    return p, MAX_ITER


def optimize_materials(problem, init=DEFAULT_INIT, method="lbfgsb", workers=None):
    """Fit reflectances for every band independently.

    Parameters
    ----------
    problem : OptProblem
    init : float or (K, B) array
        Starting reflectances.
    method : {"lbfgsb", "projected"}
    workers : int, optional
        Threads for the per-band fits.

    Returns
    -------
    OptReport
        ``p_opt`` has shape (materials, bands).
    """
    if problem.times.size == 0:
        raise OptimizationError("no reflected paths to fit")
    k, b = problem.n_materials, problem.n_bands
    lo, hi = problem.bounds
    p_init = np.clip(np.broadcast_to(np.asarray(init, dtype=np.float64), (k, b)), lo, hi)
    fit = {"lbfgsb": _fit_band_lbfgsb, "projected": _fit_band_projected}[method]

    def one(band):
        p0 = p_init[:, band].copy()
        j0 = objective(p0, problem, band)
        g0 = projected_gradient_norm(p0, gradient(p0, problem, band), problem.bounds)
        p, nit = fit(problem, band, p0)
        p = np.clip(p, lo, hi)
        j1 = objective(p, problem, band)
        if j1 > j0:
            p, j1 = p0, j0
        gnorm = projected_gradient_norm(p, gradient(p, problem, band), problem.bounds)
        return p, j0, j1, nit, gnorm, g0

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(b)))
    else:
        results = [one(band) for band in range(b)]

    p_opt = np.stack([r[0] for r in results], axis=1)
    j0 = np.array([r[1] for r in results])
    j1 = np.array([r[2] for r in results])
    report = OptReport(
        p_opt=p_opt,
        j_final=j1,
        j_initial=j0,
        iterations=np.array([r[3] for r in results]),
        gradient_norm=np.array([r[4] for r in results]),
        converged=np.array([r[4] < GRAD_TOL or r[3] < MAX_ITER for r in results]),
    )
    # a start that is already stationary is not a failure to decrease
    stuck = (j1 >= j0) & (np.array([r[5] for r in results]) >= GRAD_TOL)
    if np.all(stuck):
        raise OptimizationError("objective did not decrease in any band")
    return report


def simulate_ir_from_paths(paths, rate, bank=None, length=None):
    """Omnidirectional IR built from path band energies.

    Paths are merged per arrival sample; each arrival deposits an impulse
    split into bands by the crossover bank exactly as
    :func:`irsynth.er_ray_ir` does, with band ``i`` carrying energy ``e_i``.
    """
    if len(paths) == 0:
        raise ValueError("empty path set")
    if bank is None:
        bank = CrossoverBank.for_bands(_band_centers_for(paths.n_bands), rate)
    arr = merge_arrivals(paths, rate)
    n = length if length is not None else int(arr.samples.max()) + bank.tail_length
    keep = arr.samples < n
    amps = bank.ray_amplitudes(arr.energy[keep]) * arr.polarity[keep, None]
    trains = np.zeros((paths.n_bands, n))
    for band in range(paths.n_bands):
        trains[band, arr.samples[keep]] = amps[:, band]
    return Signal(bank.synthesize(trains), rate)


def _band_centers_for(n_bands):
    from .scene import DEFAULT_BAND_CENTERS
    if n_bands != len(DEFAULT_BAND_CENTERS):
        raise ValueError("pass a CrossoverBank for non-default band layouts")
    return np.array(DEFAULT_BAND_CENTERS)
