"""Directional impulse responses: per-ray early kernels and the measured tail.

Early rays become band-split impulses through a Linkwitz-Riley (LR4)
crossover bank; a per-room magnitude ratio restores room resonances the
geometric simulation misses. The late part reuses the measured IR, gain
matched to the simulated energy just before the transition time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.signal

from .dsp_io import Signal, check_rates, fft_convolve

MODULATION_WINDOW = 256
MODULATION_HOP = 16
MODULATION_BINS = 128
_FLOOR_REL = 1e-9
_POLARITY_STREAM = 0x9E37


class SynthesisError(ValueError):
    pass


def _allpass_sos(sos):
    """Second-order allpass sharing the poles of each section of ``sos``."""
    a = sos[:, 3:]
    return np.concatenate([a[:, ::-1], a], axis=1)


class CrossoverBank:
    """Tree of LR4 crossovers with allpass phase compensation.

    Band ``k`` is the low output of crossover ``k`` fed by the high output of
    crossover ``k - 1``, followed by the allpasses of every higher crossover,
    so the bands sum to a cascade of allpasses (flat magnitude).

    Parameters
    ----------
    crossovers : array_like
        Increasing crossover frequencies in Hz (one fewer than bands).
    rate : float
    """

    def __init__(self, crossovers, rate):
        self.crossovers = np.asarray(crossovers, dtype=np.float64)
        self.rate = float(rate)
        if np.any(self.crossovers >= rate / 2) or np.any(self.crossovers <= 0):
            raise ValueError("crossover frequencies must lie in (0, rate/2)")
        self._lp, self._hp, self._ap = [], [], []
        for fc in self.crossovers:
            lp = scipy.signal.butter(2, fc, "low", fs=rate, output="sos")
            hp = scipy.signal.butter(2, fc, "high", fs=rate, output="sos")
            self._lp.append(np.vstack([lp, lp]))
            self._hp.append(np.vstack([hp, hp]))
            self._ap.append(_allpass_sos(lp))
        self.tail_length = self._settle_length()
        bands = self.split(self._impulse())
        self.band_energy = np.einsum("ij,ij->i", bands, bands)
        self.gains = 1.0 / np.sqrt(self.band_energy)
        self._unit_bands = bands * self.gains[:, None]
        # adjacent bands overlap, so band energies do not simply add
        self.gram = self._unit_bands @ self._unit_bands.T

    @classmethod
    def for_bands(cls, centers, rate):
        centers = np.asarray(centers, dtype=np.float64)
        return cls(np.sqrt(centers[:-1] * centers[1:]), rate)

    @property
    def n_bands(self):
        return self.crossovers.size + 1

    def _impulse(self, n=None):
        x = np.zeros(n or self.tail_length)
        x[0] = 1.0
        return x

    def _settle_length(self, rel=1e-12):
        n = int(self.rate)
        bands = self.split(self._impulse(n))
        energy = np.cumsum(bands[0][::-1] ** 2)[::-1]
        last = np.nonzero(energy > rel * energy[0])[0][-1]
        return int(2 ** np.ceil(np.log2(last + 1)))

    def split(self, x):
        """(bands, len(x)) band signals whose sum is allpass-filtered ``x``."""
        x = np.asarray(x, dtype=np.float64)
        out = np.empty((self.n_bands, x.size))
        rest = x
        for k in range(self.crossovers.size):
            low = scipy.signal.sosfilt(self._lp[k], rest)
            rest = scipy.signal.sosfilt(self._hp[k], rest)
            for j in range(k + 1, self.crossovers.size):
                low = scipy.signal.sosfilt(self._ap[j], low)
            out[k] = low
        out[-1] = rest
        return out

    def band_filter(self, band, x):
        """Filter ``x`` through the path of one band only."""
        y = np.asarray(x, dtype=np.float64)
        for k in range(min(band, self.crossovers.size)):
            y = scipy.signal.sosfilt(self._hp[k], y)
        if band < self.crossovers.size:
            y = scipy.signal.sosfilt(self._lp[band], y)
            for j in range(band + 1, self.crossovers.size):
                y = scipy.signal.sosfilt(self._ap[j], y)
        return y

    def ray_amplitudes(self, band_energy):
        """Per-band drive amplitudes giving a kernel of energy ``sum(band_energy)``.

        Amplitudes are ``sqrt(e_i)`` times one per-ray factor that removes the
        energy added by band overlap. ``band_energy`` is (B,) or (M, B).
        """
        e = np.maximum(np.asarray(band_energy, dtype=np.float64), 0.0)
        a = np.sqrt(e)
        overlap = np.einsum("...i,ij,...j->...", a, self.gram, a)
        total = e.sum(axis=-1)
        factor = np.sqrt(np.divide(total, overlap, out=np.zeros_like(total), where=overlap > 0))
        return a * np.asarray(factor)[..., None]

    def synthesize(self, trains):
        """Sum of unit-energy band responses driven by per-band impulse trains."""
        trains = np.asarray(trains, dtype=np.float64)
        out = np.zeros(trains.shape[1])
        for band in range(self.n_bands):
            if np.any(trains[band]):
                out += self.gains[band] * self.band_filter(band, trains[band])
        return out

    def kernel(self, band_energy):
        """Band-split unit impulse of energy ``sum(band_energy)``, shaped by band."""
        return self.ray_amplitudes(band_energy) @ self._unit_bands


@dataclass
class Arrivals:
    """Paths merged per arrival sample.

    Hits of one image source reach the receiver within a sample; summing
    their energies (not amplitudes) keeps the kernel energy equal to the
    traced energy. ``polarity`` is +1 for the direct sound and a seeded
    random sign otherwise, so overlapping diffuse kernels add incoherently.
    """

    samples: np.ndarray
    energy: np.ndarray
    directions: np.ndarray
    polarity: np.ndarray

    def __len__(self):
        return self.samples.size


def merge_arrivals(paths, rate):
    idx = np.round(paths.times * rate).astype(np.int64)
    uniq, inv = np.unique(idx, return_inverse=True)
    k, b = uniq.size, paths.n_bands
    energy = np.zeros((k, b))
    np.add.at(energy, inv, paths.energy)
    weight = paths.energy.sum(axis=1)
    vec = np.zeros((k, 3))
    np.add.at(vec, inv, paths.directions * weight[:, None])
    norm = np.linalg.norm(vec, axis=1)
    first = np.zeros((k, 3))
    first[inv[::-1]] = paths.directions[::-1]
    dirs = np.where(norm[:, None] > 0, vec / np.where(norm > 0, norm, 1.0)[:, None], first)
    rng = np.random.default_rng([max(paths.seed, 0), _POLARITY_STREAM])
    polarity = rng.choice(np.array([-1.0, 1.0]), size=k)
    direct = paths.direct_index()
    if direct is not None:
        polarity[inv[direct]] = 1.0
    return Arrivals(uniq, energy, dirs, polarity)


@dataclass
class ModulationCurve:
    """Magnitude ratio at ``k * rate / 256`` Hz, ``k = 0 .. 127``."""

    ratio: np.ndarray
    rate: float

    @property
    def freqs(self):
        return np.arange(self.ratio.size) * self.rate / (2 * self.ratio.size)

    def to_dict(self):
        return {"rate": self.rate, "ratio": self.ratio.tolist()}

    @classmethod
    def identity(cls, rate):
        return cls(np.ones(MODULATION_BINS), rate)


@dataclass
class RayKernel:
    """Early kernel of one ray, stored from sample ``delay`` onward."""

    direction: np.ndarray
    delay: int
    kernel: np.ndarray

    def as_signal(self, rate):
        return Signal(np.concatenate([np.zeros(self.delay), self.kernel]), rate)


@dataclass
class DirectionalIr:
    rays: list
    lr_tail: Signal
    t_er: float
    rate: float
    meta: dict = field(default_factory=dict)

    def entries(self):
        return [(r.direction, r.as_signal(self.rate)) for r in self.rays]

    def omni(self):
        """Omnidirectional IR: every ray kernel plus the tail."""
        parts = [np.concatenate([np.zeros(r.delay), r.kernel]) for r in self.rays]
        return Signal(_sum_signals(parts + [self.lr_tail.samples]), self.rate)


def er_ray_ir(ray, rate, bank=None, band_centers=None):
    """Early kernel of one traced ray as a full-length :class:`Signal`.

    The impulse at the arrival time is split into bands with band ``i``
    carrying energy ``e_i``.
    """
    if np.any(ray.band_energy < 0):
        raise ValueError("band energies must be non-negative")
    if bank is None:
        from .scene import DEFAULT_BAND_CENTERS
        bank = CrossoverBank.for_bands(band_centers if band_centers is not None else DEFAULT_BAND_CENTERS, rate)
    delay = int(round(ray.arrival_time * rate))
    return Signal(np.concatenate([np.zeros(delay), bank.kernel(ray.band_energy)]), rate)


def compute_modulation(measured, simulated, t0, match_level=False):
    """Average magnitude ratio of measured over simulated IR after ``t0``.

    256-sample windows hop by 16 samples through ``[t0, t0 + 512 samples]``.
    Each bin averages the per-window ratios over the windows where the
    simulated magnitude reaches ``1e-9`` of its peak over all windows; bins
    that never do are set to 1.

    With ``match_level`` the simulated IR is first scaled to the measured
    energy over that span, so the curve carries spectral shape only.
    """
    check_rates(measured, simulated)
    rate = measured.rate
    n = MODULATION_WINDOW
    start = int(round(t0 * rate))
    end = start + 2 * n
    if start < 0 or measured.samples.size < end or simulated.samples.size < end:
        raise SynthesisError("both IRs must extend past t0 + 2 * 256 samples")
    meas = measured.samples
    sim = simulated.samples
    if match_level:
        e_sim = np.dot(sim[start:end], sim[start:end])
        if e_sim > 0:
            sim = sim * np.sqrt(np.dot(meas[start:end], meas[start:end]) / e_sim)
    offsets = np.arange(0, n + 1, MODULATION_HOP)
    hm = np.empty((offsets.size, MODULATION_BINS))
    hs = np.empty((offsets.size, MODULATION_BINS))
    for k, off in enumerate(offsets):
        s = start + off
        hm[k] = np.abs(scipy.fft.rfft(meas[s:s + n]))[:MODULATION_BINS]
        hs[k] = np.abs(scipy.fft.rfft(sim[s:s + n]))[:MODULATION_BINS]
    # a window only votes in bins where the simulation has energy
    ok = hs >= _FLOOR_REL * hs.max() if hs.max() > 0 else np.zeros(hs.shape, bool)
    ratios = np.where(ok, hm / np.where(ok, hs, 1.0), 0.0)
    votes = ok.sum(axis=0)
    curve = np.where(votes > 0, ratios.sum(axis=0) / np.maximum(votes, 1), 1.0)
    return ModulationCurve(curve, rate)


def apply_modulation(kernel, curve):
    """Scale the kernel's magnitude spectrum by the curve, keeping its phase."""
    x = kernel.samples if isinstance(kernel, Signal) else np.asarray(kernel, dtype=np.float64)
    rate = kernel.rate if isinstance(kernel, Signal) else curve.rate
    spec = scipy.fft.rfft(x)
    freqs = np.arange(spec.size) * rate / x.size
    gain = np.interp(freqs, curve.freqs, curve.ratio)
    y = scipy.fft.irfft(spec * gain, x.size)
    return Signal(y, rate) if isinstance(kernel, Signal) else y


def lr_tail(measured, t_er, paths, window, energy=None):
    """Measured IR after ``t_er``, gain matched to the simulated early energy.

    The gain is ``sqrt(E_sim / E_meas)`` where ``E_sim`` sums all band
    energies of paths arriving in ``[t_er - window, t_er]`` and ``E_meas``
    sums the measured energy response over the same span, in the same
    per-sample units as the ray kernels.

    Parameters
    ----------
    energy : array_like, optional
        Broadband energy response of ``measured``; defaults to its square.

    Returns
    -------
    tail : Signal
    scale : float
    """
    rate = measured.rate
    h = measured.samples ** 2 if energy is None else np.asarray(energy, dtype=np.float64)
    n_er = int(round(t_er * rate))
    if n_er >= measured.samples.size:
        raise SynthesisError("measured IR ends before the transition time")
    in_win = (paths.times >= t_er - window) & (paths.times <= t_er)
    if not in_win.any():
        raise SynthesisError(f"no simulated paths in [{t_er - window:.4f}, {t_er:.4f}] s; widen the window")
    e_sim = float(paths.energy[in_win].sum())
    lo = max(0, int(round((t_er - window) * rate)))
    # sample sum: a kernel of ray energy e has sum(k**2) == e
    e_meas = float(h[lo:n_er].sum())
    if e_meas <= 0:
        raise SynthesisError("measured IR has no energy in the matching window")
    scale = np.sqrt(e_sim / e_meas)
    tail = measured.samples.copy()
    tail[:n_er] = 0.0
    return Signal(scale * tail, rate), float(scale)


def crossroom_lrir(h1_tail, h2_tail, er_s_to_door, er_d_to_door, area):
    """Late IR between two rooms joined by a door.

    ``area * sum_p (E1_p * L2 + E2_p * L1 + L1 * L2)`` over door samples
    ``p``, with ``E1_p`` / ``E2_p`` the early IRs from the source / listener to
    door sample ``p`` and ``L1`` / ``L2`` the late tails of each room.
    """
    if not er_s_to_door or len(er_s_to_door) != len(er_d_to_door):
        raise SynthesisError("door sample lists must be non-empty and of equal length")
    check_rates(h1_tail, h2_tail, *er_s_to_door, *er_d_to_door)
    rate = h1_tail.rate
    n_door = len(er_s_to_door)
    # sum the early IRs first: convolution is linear in each argument
    e1 = _sum_signals([s.samples for s in er_s_to_door])
    e2 = _sum_signals([s.samples for s in er_d_to_door])
    l1, l2 = h1_tail.samples, h2_tail.samples
    terms = [fft_convolve(e1, l2), fft_convolve(e2, l1), n_door * fft_convolve(l1, l2)]
    return Signal(area * _sum_signals(terms), rate)


def _sum_signals(arrays):
    out = np.zeros(max(a.size for a in arrays))
    for a in arrays:
        out[:a.size] += a
    return out


def door_samples(corner, edge_u, edge_v, pitch=0.25):
    """Uniform grid of points on a rectangular door and the area per point."""
    corner = np.asarray(corner, dtype=np.float64)
    edge_u = np.asarray(edge_u, dtype=np.float64)
    edge_v = np.asarray(edge_v, dtype=np.float64)
    nu = max(1, int(round(np.linalg.norm(edge_u) / pitch)))
    nv = max(1, int(round(np.linalg.norm(edge_v) / pitch)))
    uu, vv = np.meshgrid((np.arange(nu) + 0.5) / nu, (np.arange(nv) + 0.5) / nv, indexing="ij")
    pts = corner + uu.reshape(-1, 1) * edge_u + vv.reshape(-1, 1) * edge_v
    area = np.linalg.norm(np.cross(edge_u, edge_v)) / (nu * nv)
    return pts, area


def build_directional_ir(paths, measured, t_er, curve, bank, window=0.010, min_energy=0.0):
    """Assemble early ray kernels and the gain-matched measured tail.

    Rays are the paths arriving before ``t_er``, merged per arrival sample
    (see :class:`Arrivals`); each kernel is modulated by ``curve`` on a buffer padded by half a modulation
    window on both sides so the zero-phase smoothing is not wrapped.
    """
    rate = measured.rate
    n_er = int(round(t_er * rate))
    arr = merge_arrivals(paths.select(paths.times <= t_er), rate)
    pad = MODULATION_WINDOW // 2
    n_ker = bank.tail_length + 2 * pad
    amps = bank.ray_amplitudes(arr.energy) * arr.polarity[:, None]
    rays = []
    for j in range(len(arr)):
        if arr.energy[j].sum() <= min_energy:
            continue
        buf = np.zeros(n_ker)
        buf[pad:pad + bank.tail_length] = amps[j] @ bank._unit_bands
        buf = apply_modulation(buf, curve)
        delay = int(arr.samples[j]) - pad
        if delay < 0:
            buf = buf[-delay:]
            delay = 0
        # early kernels end where the measured tail takes over
        buf = buf[:max(n_er - delay, 0)]
        if buf.size == 0:
            continue
        rays.append(RayKernel(arr.directions[j].copy(), delay, buf))
    tail, scale = lr_tail(measured, t_er, paths, window)
    return DirectionalIr(rays, tail, t_er, rate, {"tail_scale": scale})


_DIRR_MAGIC = b"DIRR"
_DIRR_VERSION = 1


def write_directional_ir(path, dirir):
    """Binary container: header, per-ray direction/delay/kernel, then the tail."""
    with open(path, "wb") as fh:
        fh.write(_DIRR_MAGIC)
        fh.write(struct.pack("<IddI", _DIRR_VERSION, dirir.rate, dirir.t_er, len(dirir.rays)))
        for r in dirir.rays:
            fh.write(np.asarray(r.direction, "<f8").tobytes())
            fh.write(struct.pack("<qI", r.delay, r.kernel.size))
            fh.write(r.kernel.astype("<f8").tobytes())
        fh.write(struct.pack("<I", dirir.lr_tail.samples.size))
        fh.write(dirir.lr_tail.samples.astype("<f8").tobytes())


def read_directional_ir(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return _parse_directional_ir(data, path)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, SynthesisError):
            raise
        raise SynthesisError(f"{path}: truncated or corrupt directional IR ({exc})") from exc


def _parse_directional_ir(data, path):
    if data[:4] != _DIRR_MAGIC:
        raise SynthesisError(f"{path}: not a directional IR file")
    version, rate, t_er, n = struct.unpack_from("<IddI", data, 4)
    if version != _DIRR_VERSION:
        raise SynthesisError(f"{path}: unsupported version {version}")
    pos = 4 + struct.calcsize("<IddI")
    rays = []
    for _ in range(n):
        direction = np.frombuffer(data, "<f8", 3, pos).copy()
        pos += 24
        delay, size = struct.unpack_from("<qI", data, pos)
        pos += struct.calcsize("<qI")
        kernel = np.frombuffer(data, "<f8", size, pos).copy()
        pos += 8 * size
        rays.append(RayKernel(direction, delay, kernel))
    (size,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tail = Signal(np.frombuffer(data, "<f8", size, pos).copy(), rate)
    return DirectionalIr(rays, tail, t_er, rate)
