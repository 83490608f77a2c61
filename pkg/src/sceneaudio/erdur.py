"""Early/late transition time from directional isotropy of traced energy.

Windows of traced paths are tested for energy isotropy with a
Kolmogorov-Smirnov distance in zenith and azimuth separately; the first
window passing both gives the transition time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ZENITH_BINS = 18
AZIMUTH_BINS = 36
DEFAULT_WINDOW = 0.010
DEFAULT_THRESHOLD = 0.15


@dataclass
class DirectionalHistogram:
    zenith: np.ndarray
    azimuth: np.ndarray
    window: tuple

    @classmethod
    def from_paths(cls, directions, weights, window, zenith_bins=ZENITH_BINS, azimuth_bins=AZIMUTH_BINS):
        if np.any(np.asarray(weights) < 0):
            raise ValueError("histogram weights must be non-negative")
        zen, azi = zenith_azimuth(directions)
        hz, _ = np.histogram(zen, bins=zenith_bins, range=(0.0, np.pi), weights=weights)
        ha, _ = np.histogram(azi, bins=azimuth_bins, range=(0.0, 2.0 * np.pi), weights=weights)
        return cls(hz, ha, tuple(window))

    def distances(self):
        """KS distances ``(d_zenith, d_azimuth)`` against an isotropic field."""
        nz, na = self.zenith.size, self.azimuth.size
        d_zen = ks_distance(empirical_cdf(self.zenith), expected_zenith_cdf(np.linspace(0, np.pi, nz + 1))[1:])
        d_azi = ks_distance(empirical_cdf(self.azimuth), np.arange(1, na + 1) / na)
        return d_zen, d_azi


@dataclass
class ErResult:
    t_er: float
    pass_window_index: int
    window_starts: np.ndarray
    distances: np.ndarray


def zenith_azimuth(directions):
    d = np.atleast_2d(directions)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    zen = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    azi = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2.0 * np.pi)
    return zen, azi


def expected_zenith_cdf(edges):
    """Isotropic zenith-angle CDF ``(1 - cos(phi)) / 2`` at ``edges``."""
    edges = np.asarray(edges, dtype=np.float64)
    if np.any(edges < 0) or np.any(edges > np.pi) or np.any(np.diff(edges) < 0):
        raise ValueError("zenith edges must be increasing within [0, pi]")
    return 0.5 * (1.0 - np.cos(edges))


def empirical_cdf(hist):
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    if total <= 0:
        return np.zeros_like(hist)
    return np.cumsum(hist) / total


def ks_distance(empirical, expected):
    empirical = np.asarray(empirical, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if empirical.shape != expected.shape:
        raise ValueError(f"CDF lengths differ: {empirical.shape} vs {expected.shape}")
    return float(np.max(np.abs(empirical - expected)))


def find_er_duration(paths, window=DEFAULT_WINDOW, threshold=DEFAULT_THRESHOLD, horizon=None,
                     zenith_bins=ZENITH_BINS, azimuth_bins=AZIMUTH_BINS):
    """Earliest isotropic window of a path set.

    Windows of length ``window`` start at the first arrival and hop by half a
    window. Path weights are band energies summed over bands.

    Parameters
    ----------
    paths : PathSet
    window : float
        Window length in seconds.
    threshold : float
        Both KS distances must be at most this value.
    horizon : float, optional
        Last time (seconds) a window may end at; defaults to the last arrival.

    Returns
    -------
    ErResult or None
        ``None`` when no window within the horizon passes.
    """
    if len(paths) == 0:
        raise ValueError("empty path set")
    if not window > 0:
        raise ValueError("window must be positive")
    times = paths.times
    weights = paths.energy.sum(axis=1)
    t_first = times.min()
    if horizon is None:
        horizon = times.max()
    hop = window / 2.0
    n_windows = int(np.floor((horizon - t_first - window) / hop + 1e-9)) + 1
    starts = t_first + hop * np.arange(max(n_windows, 0))
    dists = np.full((starts.size, 2), np.inf)
    lo_idx = np.searchsorted(times, starts, side="left")
    hi_idx = np.searchsorted(times, starts + window, side="right")
    for k, (a, b) in enumerate(zip(lo_idx, hi_idx)):
        if b <= a or weights[a:b].sum() <= 0:
            continue
        hist = DirectionalHistogram.from_paths(paths.directions[a:b], weights[a:b],
                                               (starts[k], starts[k] + window), zenith_bins, azimuth_bins)
        dists[k] = hist.distances()
        if dists[k, 0] <= threshold and dists[k, 1] <= threshold:
            return ErResult(float(starts[k]), k, starts[:k + 1], dists[:k + 1])
    return None
