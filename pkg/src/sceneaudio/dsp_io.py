"""Signal container, FFT convolution, resampling and WAV I/O."""

from __future__ import annotations

from dataclasses import dataclass
import struct
from math import gcd

import numpy as np
import scipy.fft
import scipy.io.wavfile
import scipy.signal

DEFAULT_RATE = 48000


class RateMismatchError(ValueError):
    pass


class WavError(ValueError):
    """Malformed or unsupported WAV file."""


@dataclass(frozen=True, eq=False)
class Signal:
    """Uniformly sampled mono signal held in double precision."""

    samples: np.ndarray
    rate: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("Signal samples must be one-dimensional")
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("Signal contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.rate

    def energy(self):
        return float(np.dot(self.samples, self.samples))


@dataclass(frozen=True)
class WavSpec:
    channels: int
    rate: int
    sample_format: str = "float32"

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.sample_format not in ("int16", "float32"):
            raise ValueError(f"unsupported sample format {self.sample_format!r}")


def check_rates(*signals):
    rates = {s.rate for s in signals}
    if len(rates) > 1:
        raise RateMismatchError(f"sample rates differ: {sorted(rates)}")


def fft_convolve(a, b, partition=None):
    """Full linear convolution of two signals.

    Parameters
    ----------
    a, b : Signal or array_like
        Inputs. When both are :class:`Signal` their rates must agree and a
        :class:`Signal` is returned, otherwise a plain array.
    partition : int, optional
        Block length for overlap-add over the longer input. Chosen
        automatically when omitted; inputs shorter than the block are
        convolved in one transform.

    Returns
    -------
    Signal or ndarray
        Length ``len(a) + len(b) - 1``.
    """
    rate = None
    if isinstance(a, Signal) or isinstance(b, Signal):
        if not (isinstance(a, Signal) and isinstance(b, Signal)):
            raise TypeError("mix of Signal and raw array")
        check_rates(a, b)
        rate = a.rate
        a, b = a.samples, b.samples
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("cannot convolve empty input")
    out = _ola_convolve(a, b, partition)
    return Signal(out, rate) if rate is not None else out


def _ola_convolve(a, b, partition):
    if a.size < b.size:
        a, b = b, a
    n_out = a.size + b.size - 1
    if partition is None:
        partition = max(8 * b.size, 1 << 16)
    if a.size <= partition:
        nfft = scipy.fft.next_fast_len(n_out, real=True)
        return scipy.fft.irfft(scipy.fft.rfft(a, nfft) * scipy.fft.rfft(b, nfft), nfft)[:n_out]

    nfft = scipy.fft.next_fast_len(partition + b.size - 1, real=True)
    kernel = scipy.fft.rfft(b, nfft)
    out = np.zeros(n_out + nfft)
    for start in range(0, a.size, partition):
        block = a[start:start + partition]
        seg = scipy.fft.irfft(scipy.fft.rfft(block, nfft) * kernel, nfft)
        out[start:start + nfft] += seg
    return out[:n_out]


def resample(signal, rate):
    """Polyphase windowed-sinc resampling (Kaiser window, ~80 dB stopband)."""
    if signal.rate == rate:
        return signal
    src, dst = int(round(signal.rate)), int(round(rate))
    g = gcd(src, dst)
    y = scipy.signal.resample_poly(signal.samples, dst // g, src // g, window=("kaiser", 8.0))
    return Signal(y, rate)


def read_wav(path):
    """Read a PCM16 or IEEE float32 WAV file.

    Returns
    -------
    channels : ndarray, shape (channels, frames)
        Samples in double precision; int16 data is scaled to [-1, 1).
    spec : WavSpec
    """
    try:
        rate, data = scipy.io.wavfile.read(path)
    except (ValueError, EOFError, OSError, struct.error) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise WavError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        fmt = "int16"
        values = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        fmt = "float32"
        values = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported sample type {data.dtype}; only int16 and float32")
    if values.ndim == 1:
        values = values[:, None]
    return np.ascontiguousarray(values.T), WavSpec(values.shape[1], int(rate), fmt)


def write_wav(path, samples, spec):
    """Write interleaved little-endian WAV; ``samples`` is (channels, frames) or 1-D."""
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    if data.shape[0] != spec.channels:
        raise ValueError(f"expected {spec.channels} channels, got {data.shape[0]}")
    if spec.sample_format == "float32":
        out = data.T.astype(np.float32)
    else:
        out = np.clip(np.round(data.T * 32768.0), -32768, 32767).astype(np.int16)
    scipy.io.wavfile.write(path, spec.rate, np.ascontiguousarray(out))


def read_signal(path, rate=DEFAULT_RATE):
    """Read channel 0 of a WAV file as a :class:`Signal` at ``rate``."""
    channels, spec = read_wav(path)
    return resample(Signal(channels[0], spec.rate), rate)


def write_signal(path, signal, sample_format="float32"):
    write_wav(path, signal.samples, WavSpec(1, int(round(signal.rate)), sample_format))
