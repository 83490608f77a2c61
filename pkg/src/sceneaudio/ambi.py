"""Ambisonic encoding of directional early rays and the isotropic late tail.

Channels use ACN ordering. The default ``"w-sqrt-half"`` normalization is SN3D
with the omnidirectional channel scaled by ``1/sqrt(2)``; first-order gains are
``W = 1/sqrt(2)``, ``X = cos(az) cos(el)``, ``Y = sin(az) cos(el)`` and
``Z = sin(el)``. ``"sn3d"`` (AmbiX) uses ``W = 1``. Azimuth is measured from
+x toward +y and elevation from the horizontal plane toward +z.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from math import factorial

import numpy as np
import scipy.special

from .dsp_io import Signal, check_rates, fft_convolve, write_wav, WavSpec

log = logging.getLogger(__name__)

NORMALIZATIONS = ("w-sqrt-half", "sn3d")
W_GAIN = 1.0 / np.sqrt(2.0)
TRAJECTORY_SPACING = 0.5
CROSSFADE = 0.050


class AmbisonicError(ValueError):
    pass


@dataclass(frozen=True)
class SphericalDirection:
    azimuth: float
    elevation: float

    def __post_init__(self):
        if not -np.pi / 2 - 1e-12 <= self.elevation <= np.pi / 2 + 1e-12:
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")
        object.__setattr__(self, "azimuth", float(np.mod(self.azimuth, 2 * np.pi)))

    @classmethod
    def from_vector(cls, v):
        az, el = vector_to_angles(v)
        return cls(float(az), float(el))

    def to_vector(self):
        ce = np.cos(self.elevation)
        return np.array([np.cos(self.azimuth) * ce, np.sin(self.azimuth) * ce, np.sin(self.elevation)])


def vector_to_angles(v):
    """Azimuth and elevation of (..., 3) vectors."""
    v = np.asarray(v, dtype=np.float64)
    az = np.mod(np.arctan2(v[..., 1], v[..., 0]), 2 * np.pi)
    el = np.arctan2(v[..., 2], np.hypot(v[..., 0], v[..., 1]))
    return az, el


def n_channels(order):
    return (order + 1) ** 2


def acn(n, m):
    return n * n + n + m


def acn_to_nm(index):
    n = int(np.floor(np.sqrt(index)))
    return n, index - n * n - n


def real_sh(n, m, azimuth, elevation, normalization="w-sqrt-half"):
    """Real spherical harmonic ``Y_n^m`` without Condon-Shortley phase.

    Parameters
    ----------
    n, m : int
        Degree and order, ``|m| <= n``.
    azimuth, elevation : float or array_like
        Radians; broadcast together.
    normalization : {"w-sqrt-half", "sn3d"}
    """
    if n < 0 or abs(m) > n:
        raise AmbisonicError(f"invalid spherical harmonic index (n={n}, m={m})")
    if normalization not in NORMALIZATIONS:
        raise AmbisonicError(f"unknown normalization {normalization!r}")
    az = np.asarray(azimuth, dtype=np.float64)
    el = np.asarray(elevation, dtype=np.float64)
    am = abs(m)
    norm = np.sqrt((2.0 - (m == 0)) * factorial(n - am) / factorial(n + am))
    # lpmv includes (-1)^m; cancel it
    legendre = (-1.0) ** am * scipy.special.lpmv(am, n, np.sin(el))
    trig = np.cos(m * az) if m >= 0 else np.sin(am * az)
    value = norm * legendre * trig
    if n == 0 and normalization == "w-sqrt-half":
        value = value * W_GAIN
    return value


def sh_matrix(order, directions, normalization="w-sqrt-half"):
    """(K, (order+1)^2) gains for K unit vectors."""
    az, el = vector_to_angles(np.atleast_2d(directions))
    cols = []
    for index in range(n_channels(order)):
        n, m = acn_to_nm(index)
        cols.append(np.broadcast_to(real_sh(n, m, az, el, normalization), az.shape))
    return np.stack(cols, axis=-1)


@dataclass
class AmbisonicBuffer:
    """(channels, samples) ambisonic signals in ACN order."""

    channels: np.ndarray
    rate: float
    order: int
    normalization: str = "w-sqrt-half"

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels, dtype=np.float64))
        if self.order < 1:
            raise AmbisonicError("ambisonic order must be at least 1")
        if self.channels.shape[0] != n_channels(self.order):
            raise AmbisonicError(f"order {self.order} needs {n_channels(self.order)} channels, "
                                 f"got {self.channels.shape[0]}")
        if self.normalization not in NORMALIZATIONS:
            raise AmbisonicError(f"unknown normalization {self.normalization!r}")

    @classmethod
    def zeros(cls, order, length, rate, normalization="w-sqrt-half"):
        return cls(np.zeros((n_channels(order), length)), rate, order, normalization)

    def __len__(self):
        return self.channels.shape[1]

    def padded(self, length):
        if length <= len(self):
            return self
        out = np.zeros((self.channels.shape[0], length))
        out[:, :len(self)] = self.channels
        return AmbisonicBuffer(out, self.rate, self.order, self.normalization)

    def __add__(self, other):
        if (other.order, other.rate, other.normalization) != (self.order, self.rate, self.normalization):
            raise AmbisonicError("buffers differ in order, rate or normalization")
        n = max(len(self), len(other))
        a, b = self.padded(n), other.padded(n)
        return AmbisonicBuffer(a.channels + b.channels, self.rate, self.order, self.normalization)

    def renormalized(self, normalization):
        """Copy in another normalization; only the W channel differs."""
        if normalization not in NORMALIZATIONS:
            raise AmbisonicError(f"unknown normalization {normalization!r}")
        ch = self.channels.copy()
        if normalization != self.normalization:
            ch[0] *= np.sqrt(2.0) if normalization == "sn3d" else W_GAIN
        return AmbisonicBuffer(ch, self.rate, self.order, normalization)

    def sidecar(self, trajectory=None):
        meta = {"order": self.order, "normalization": self.normalization, "channel_order": "ACN",
                "rate": self.rate}
        if trajectory is not None:
            meta["trajectory_meta"] = {
                "t": trajectory.times.tolist(),
                "pos": trajectory.positions.tolist(),
                "quat": trajectory.orientations.tolist(),
            }
        else:
            meta["trajectory_meta"] = None
        return meta


def write_ambisonic(path, buffer, sidecar_path=None, trajectory=None):
    """Multichannel float32 WAV plus a JSON sidecar (``<path>.json`` by default)."""
    write_wav(path, buffer.channels, WavSpec(buffer.channels.shape[0], int(buffer.rate), "float32"))
    sidecar_path = sidecar_path or f"{path}.json"
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(buffer.sidecar(trajectory), fh, indent=2)
    return sidecar_path


def _entry_arrays(entries, rate):
    dirs, kernels = [], []
    for direction, kernel in entries:
        if isinstance(kernel, Signal):
            if kernel.rate != rate:
                check_rates(kernel, Signal(np.zeros(1), rate))
            kernel = kernel.samples
        dirs.append(np.asarray(direction, dtype=np.float64))
        kernels.append(np.asarray(kernel, dtype=np.float64))
    return dirs, kernels


def combined_kernels(entries, order, rate, normalization="w-sqrt-half"):
    """Per-channel IRs ``sum_r Y(dir_r) * kernel_r`` of (direction, kernel) entries."""
    dirs, kernels = _entry_arrays(entries, rate)
    length = max((k.size for k in kernels), default=1)
    out = np.zeros((n_channels(order), length))
    if not kernels:
        return out
    gains = sh_matrix(order, np.stack(dirs), normalization)
    for g, k in zip(gains, kernels):
        out[:, :k.size] += g[:, None] * k
    return out


def encode_er(dry, entries, order=1, normalization="w-sqrt-half"):
    """Encode early rays as directional sources driven by ``dry``.

    Parameters
    ----------
    dry : Signal
    entries : iterable of (direction, kernel)
        Unit direction toward each arrival and its kernel (Signal or array
        at ``dry.rate``).
    order : int

    Returns
    -------
    AmbisonicBuffer
        Length ``len(dry) + max kernel length - 1``.
    """
    entries = list(entries)
    kernels = combined_kernels(entries, order, dry.rate, normalization)
    return encode_multichannel_ir(dry, kernels, order, normalization)


def encode_multichannel_ir(dry, kernels, order, normalization="w-sqrt-half"):
    """Convolve ``dry`` with one IR per ambisonic channel."""
    if dry.samples.size == 0:
        raise AmbisonicError("dry signal is empty")
    n_out = dry.samples.size + kernels.shape[1] - 1
    out = np.zeros((kernels.shape[0], n_out))
    for c, k in enumerate(kernels):
        if np.any(k):
            out[c] = fft_convolve(dry.samples, k)
    return AmbisonicBuffer(out, dry.rate, order, normalization)


def encode_lr(dry, tail, buffer):
    """Add ``W_gain * (dry * tail)`` to the omnidirectional channel only."""
    check_rates(dry, tail)
    if dry.rate != buffer.rate:
        raise AmbisonicError("dry signal and buffer rates differ")
    if not np.any(tail.samples):
        return buffer
    w = fft_convolve(dry.samples, tail.samples)
    out = buffer.padded(w.size)
    channels = out.channels.copy()
    gain = W_GAIN if buffer.normalization == "w-sqrt-half" else 1.0
    channels[0, :w.size] += gain * w
    return AmbisonicBuffer(channels, buffer.rate, buffer.order, buffer.normalization)


def directional_ir_kernels(dirir, order, normalization="w-sqrt-half"):
    """Per-channel IRs of a DirectionalIr: encoded rays plus the tail on W."""
    entries = [(r.direction, np.concatenate([np.zeros(r.delay), r.kernel])) for r in dirir.rays]
    ker = combined_kernels(entries, order, dirir.rate, normalization)
    tail = dirir.lr_tail.samples
    n = max(ker.shape[1], tail.size)
    out = np.zeros((ker.shape[0], n))
    out[:, :ker.shape[1]] = ker
    out[0, :tail.size] += (W_GAIN if normalization == "w-sqrt-half" else 1.0) * tail
    return out


def decode_to_direction(buffer, direction):
    """Probe signal ``sum_nm Y_n^m(direction) * channel_nm``."""
    if isinstance(direction, SphericalDirection):
        direction = direction.to_vector()
    gains = sh_matrix(buffer.order, direction, buffer.normalization)[0]
    return Signal(gains @ buffer.channels, buffer.rate)


def crossfade_weights(n, boundaries, fade):
    """Per-segment sample weights summing to one.

    Segment ``k`` spans ``[boundaries[k-1], boundaries[k])`` (sample
    indices); across each boundary the weights follow ``cos^2`` / ``sin^2``
    over ``fade`` samples centered on it.
    """
    t = np.arange(n, dtype=np.float64)
    k = len(boundaries) + 1
    # ramp[b] rises 0 -> 1 across boundary b
    ramps = []
    for b in boundaries:
        if fade > 0:
            x = np.clip((t - (b - fade / 2)) / fade, 0.0, 1.0)
            ramps.append(np.sin(0.5 * np.pi * x) ** 2)
        else:
            ramps.append((t >= b).astype(np.float64))
    weights = np.empty((k, n))
    for seg in range(k):
        w = np.ones(n)
        if seg > 0:
            w *= ramps[seg - 1]
        if seg < k - 1:
            w *= 1.0 - ramps[seg]
        weights[seg] = w
    return weights


@dataclass
class RenderResult:
    buffer: AmbisonicBuffer
    positions: np.ndarray
    times: np.ndarray
    meta: list = field(default_factory=list)


def render_trajectory(dry, trajectory, synthesize, order=1, spacing=TRAJECTORY_SPACING,
                      crossfade=CROSSFADE, normalization="w-sqrt-half"):
    """Render a moving listener by crossfading per-position ambisonic IRs.

    Parameters
    ----------
    dry : Signal
    trajectory : Trajectory
    synthesize : callable
        ``synthesize(index, position) -> DirectionalIr`` for a listener
        position; errors are re-raised with the position index.
    order : int
    spacing : float
        Arc-length spacing of listener samples, meters.
    crossfade : float
        Crossfade length between segments, seconds.

    Returns
    -------
    RenderResult
    """
    if len(trajectory) == 0:
        raise AmbisonicError("trajectory is empty")
    times, positions = trajectory.sample_by_distance(spacing)
    rate = dry.rate
    n = dry.samples.size
    bounds = []
    for a, b in zip(times[:-1], times[1:]):
        bounds.append(int(round(0.5 * (a + b) * rate)))
    bounds = np.clip(bounds, 0, n).tolist()
    weights = crossfade_weights(n, bounds, crossfade * rate)
    irs = []
    for k, pos in enumerate(positions):
        try:
            dirir = synthesize(k, pos)
        except Exception as exc:
            raise AmbisonicError(f"synthesis failed at trajectory position {k} {pos.tolist()}: {exc}") from exc
        irs.append(directional_ir_kernels(dirir, order, normalization))
    ir_len = max(k.shape[1] for k in irs)
    out = AmbisonicBuffer.zeros(order, n + ir_len - 1, rate, normalization)
    for k, ker in enumerate(irs):
        support = np.nonzero(weights[k])[0]
        if support.size == 0:
            continue
        lo, hi = support[0], support[-1] + 1
        seg = Signal(dry.samples[lo:hi] * weights[k, lo:hi], rate)
        part = encode_multichannel_ir(seg, ker, order, normalization)
        out.channels[:, lo:lo + len(part)] += part.channels
    log.info("rendered %d trajectory positions", len(positions))
    return RenderResult(out, positions, times)
