"""Exponential sine sweeps, impulse-response recovery and decay analysis."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.signal

from .dsp_io import Signal, check_rates
from .scene import DEFAULT_BAND_CENTERS

ONSET_DB = -20.0
NOISE_FLOOR_DB = -60.0
DEGENERATE_RATE = 1e-6


class AnalysisError(ValueError):
    pass


class DegenerateDecayError(AnalysisError):
    """The energy response shows no usable exponential decay."""


@dataclass(frozen=True)
class ImpulseResponse:
    """Mono impulse response with its earliest arrival time ``first_arrival``."""

    samples: np.ndarray
    rate: float
    first_arrival: float

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if not 0 <= self.first_arrival < self.samples.size / self.rate:
            raise ValueError("first arrival outside the IR")

    @classmethod
    def from_signal(cls, signal, onset_db=ONSET_DB):
        return cls(signal.samples, signal.rate, first_arrival(signal.samples, signal.rate, onset_db))

    def to_signal(self):
        return Signal(self.samples, self.rate)

    @property
    def duration(self):
        return self.samples.size / self.rate


@dataclass(frozen=True)
class DecayFit:
    amplitude: float
    rate: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.amplitude, self.rate))


@dataclass
class DecayModel:
    """Per-band exponential envelope ``A_j exp(-gamma_j t)``.

    ``first_arrival`` optionally records the onset of the analysed IR.
    """

    centers: np.ndarray
    amplitudes: np.ndarray
    rates: np.ndarray
    first_arrival: float | None = None

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64)
        self.rates = np.asarray(self.rates, dtype=np.float64)
        if not (self.centers.shape == self.amplitudes.shape == self.rates.shape):
            raise ValueError("decay model arrays must have equal length")
        if np.any(self.amplitudes <= 0) or np.any(self.rates <= 0):
            raise ValueError("decay amplitudes and rates must be positive")

    def evaluate(self, band, t):
        return self.amplitudes[band] * np.exp(-self.rates[band] * np.asarray(t))

    def to_dict(self):
        doc = {"bands": [
            {"center_hz": float(c), "A": float(a), "gamma": float(g)}
            for c, a, g in zip(self.centers, self.amplitudes, self.rates)
        ]}
        if self.first_arrival is not None:
            doc["first_arrival"] = float(self.first_arrival)
        return doc

    @classmethod
    def from_dict(cls, data):
        try:
            bands = data["bands"]
            return cls([b["center_hz"] for b in bands], [b["A"] for b in bands], [b["gamma"] for b in bands],
                       data.get("first_arrival"))
        except (KeyError, TypeError) as exc:
            raise AnalysisError(f"malformed decay model: {exc}") from exc


def load_decay(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return DecayModel.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise AnalysisError(f"{path}: {exc}") from exc


def write_decay(path, model):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=2)


def gen_sweep(f1=20.0, f2=20000.0, duration=48.0, rate=48000):
    """Exponential sine sweep from ``f1`` to ``f2`` Hz over ``duration`` seconds.

    ``sin(w1 T / ln(w2/w1) * (exp(t/T ln(w2/w1)) - 1))`` with ``w = 2 pi f``.
    """
    if not 0 < f1 < f2 < rate / 2:
        raise AnalysisError(f"need 0 < f1 < f2 < rate/2, got f1={f1}, f2={f2}, rate={rate}")
    if duration <= 0:
        raise AnalysisError("sweep duration must be positive")
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    w1, w2 = 2 * np.pi * f1, 2 * np.pi * f2
    k = np.log(w2 / w1)
    return Signal(np.sin(w1 * duration / k * np.expm1(t / duration * k)), float(rate))


def first_arrival(samples, rate, onset_db=ONSET_DB):
    """Time of the first sample within ``onset_db`` of the absolute peak."""
    mag = np.abs(samples)
    peak = mag.max()
    if peak <= 0:
        raise AnalysisError("impulse response is silent")
    return float(np.argmax(mag >= peak * 10 ** (onset_db / 20))) / rate


def deconvolve_ir(recording, sweep, regularization=1e-12, onset_db=ONSET_DB):
    """Impulse response from a recorded sweep by whitened cross-correlation.

    The cross-spectrum ``R conj(S)`` is divided by ``|S|^2`` (plus a tiny
    fraction of its peak), which turns the sweep autocorrelation into a
    delta. Lags ``0 .. len(recording) - len(sweep)`` are kept and the result
    is normalized to unit peak.
    """
    check_rates(recording, sweep)
    rec, swp = recording.samples, sweep.samples
    if rec.size < swp.size:
        raise AnalysisError("recording is shorter than the sweep")
    if np.max(np.abs(rec)) < 1e-12:
        raise AnalysisError("recording is silent")
    n = scipy.fft.next_fast_len(rec.size + swp.size - 1, real=True)
    s = scipy.fft.rfft(swp, n)
    r = scipy.fft.rfft(rec, n)
    power = np.abs(s) ** 2
    h = scipy.fft.irfft(r * np.conj(s) / (power + regularization * power.max()), n)
    h = h[:rec.size - swp.size + 1]
    peak = np.max(np.abs(h))
    if peak <= 0:
        raise AnalysisError("deconvolution produced a silent response")
    h = h / peak
    return ImpulseResponse(h, recording.rate, first_arrival(h, recording.rate, onset_db))


def octave_sos(center, rate, order=4, edge=None):
    """Butterworth filter over the octave around ``center``.

    ``edge="low"`` extends the band down to DC and ``edge="high"`` up to
    Nyquist, so the outermost bands of a bank cover the whole spectrum.
    """
    lo, hi = center / np.sqrt(2), center * np.sqrt(2)
    if edge == "high" or hi >= rate / 2:
        return scipy.signal.butter(order, lo, "high", fs=rate, output="sos")
    if edge == "low":
        return scipy.signal.butter(order, hi, "low", fs=rate, output="sos")
    return scipy.signal.butter(order, [lo, hi], "bandpass", fs=rate, output="sos")


def band_filter(samples, center, rate, edge=None):
    """Zero-phase octave band filter."""
    samples = np.asarray(samples, dtype=np.float64)
    sos = octave_sos(center, rate, edge=edge)
    padlen = min(3 * (2 * sos.shape[0] + 1), samples.size - 1)
    return scipy.signal.sosfiltfilt(sos, samples, padlen=max(padlen, 0))


def energy_response(ir, band=None, centers=DEFAULT_BAND_CENTERS):
    """Squared (optionally octave-filtered) IR.

    The first band reaches down to DC and the last up to Nyquist, so band
    energies add up to the broadband energy.

    Parameters
    ----------
    ir : ImpulseResponse or Signal
    band : int, optional
        Index into ``centers``; ``None`` for broadband.
    """
    x = np.asarray(ir.samples, dtype=np.float64)
    if band is not None:
        if not 0 <= band < len(centers):
            raise AnalysisError(f"band index {band} out of range")
        edge = "low" if band == 0 else "high" if band == len(centers) - 1 else None
        x = band_filter(x, centers[band], ir.rate, edge)
    return Signal(x * x, ir.rate)


def smooth_energy(h, window):
    """Moving average of an energy response over ``window`` seconds."""
    n = max(1, int(round(window * h.rate)))
    if n == 1:
        return h
    return Signal(scipy.signal.oaconvolve(h.samples, np.full(n, 1.0 / n), mode="same"), h.rate)


def fit_decay(h_band, t_start, floor_db=NOISE_FLOOR_DB, t_stop=None):
    """Log-linear least-squares fit of ``A exp(-gamma t)`` to an energy response.

    Only samples at or after ``t_start`` (and before ``t_stop``) that lie
    above ``floor_db`` relative to the band peak are used.

    Returns
    -------
    DecayFit
        ``degenerate`` is set when the fitted rate is not clearly positive.
    """
    h = np.asarray(h_band.samples, dtype=np.float64)
    t = np.arange(h.size) / h_band.rate
    peak = h.max() if h.size else 0.0
    if peak <= 0:
        raise AnalysisError("energy response is silent")
    use = (t >= t_start) & (h > peak * 10 ** (floor_db / 10))
    if t_stop is not None:
        use &= t <= t_stop
    if np.count_nonzero(use) < 2:
        raise DegenerateDecayError("fewer than two samples above the noise floor")
    slope, intercept = np.polyfit(t[use], np.log(h[use]), 1)
    gamma = -slope
    degenerate = not gamma > DEGENERATE_RATE * h_band.rate
    return DecayFit(float(np.exp(intercept)), float(gamma), degenerate)


def noise_onset(h, t_start, tail=0.1, margin_db=10.0):
    """First time after the band peak where ``h`` drops to ``margin_db`` above
    the noise level, taken as the median of the last ``tail`` fraction.

    Returns ``None`` when the response never reaches that level.
    """
    x = np.asarray(h.samples)
    noise = np.median(x[int(x.size * (1 - tail)):])
    if noise <= 0:
        return None
    begin = max(int(np.argmax(x)), int(np.ceil(t_start * h.rate)))
    below = np.nonzero(x[begin:] <= noise * 10 ** (margin_db / 10))[0]
    return (begin + below[0]) / h.rate if below.size else None


def fit_band_decays(ir, t_start=None, centers=DEFAULT_BAND_CENTERS, floor_db=NOISE_FLOOR_DB,
                    smoothing=0.010):
    """Decay model of every octave band of an impulse response.

    Band energies are smoothed over ``smoothing`` seconds before fitting so
    that single near-zero samples do not reach the noise-floor gate. Each
    fit stops where the band meets its own noise level (see ``noise_onset``).
    """
    if t_start is None:
        t_start = ir.first_arrival
    amps, rates = [], []
    for band, center in enumerate(centers):
        h = energy_response(ir, band, centers)
        if smoothing:
            h = smooth_energy(h, smoothing)
        fit = fit_decay(h, t_start, floor_db, t_stop=noise_onset(h, t_start))
        if fit.degenerate:
            raise DegenerateDecayError(f"band {center:g} Hz shows no decay")
        amps.append(fit.amplitude)
        rates.append(fit.rate)
    return DecayModel(np.asarray(centers, dtype=np.float64), amps, rates, ir.first_arrival)
