"""Audio buffers, WAV I/O, loudness normalization and sample-rate conversion."""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

CANONICAL_RATE = 22050
SILENCE_STD = 1e-8


class AudioError(ValueError):
    """Raised for malformed audio input or unusable WAV files."""


class NearSilenceError(AudioError):
    """Raised when a buffer is too quiet to be normalized."""


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono signal stored as float64 samples at an integer sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError(f"expected mono samples, got shape {samples.shape}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise AudioError(f"sample rate must be a positive integer, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise AudioError("samples contain NaN or Inf")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return len(self.samples)

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


@dataclass(frozen=True)
class WriteInfo:
    path: str
    n_samples: int
    n_clipped: int


def read_wav(path, target_rate: int | None = CANONICAL_RATE) -> AudioBuffer:
    """Read a PCM16 or float32 WAV file as a mono buffer.

    Stereo is downmixed by the channel mean.  Unless ``target_rate`` is None
    the result is resampled to it.
    """
    if not os.path.isfile(path):
        raise AudioError(f"no such file: {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioError(f"cannot decode {path}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported sample encoding {data.dtype} in {path}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise AudioError(f"{path} has no audio frames")

    buf = AudioBuffer(samples, rate)
    if target_rate is not None and target_rate != rate:
        buf = resample(buf, target_rate)
    return buf


def write_wav(buffer: AudioBuffer, path) -> WriteInfo:
    """Write ``buffer`` as 16-bit PCM.  Out-of-range samples are clipped and counted."""
    if len(buffer) == 0:
        raise AudioError("refusing to write an empty buffer")
    x = buffer.samples
    over = np.abs(x) > 1.0
    n_clipped = int(np.count_nonzero(over))
    if n_clipped:
        warnings.warn(f"{n_clipped} samples clipped while writing {path}")
    q = np.clip(np.round(np.clip(x, -1.0, 1.0) * 32768.0), -32768, 32767).astype(np.int16)
    try:
        wavfile.write(path, buffer.sample_rate, q)
    except OSError as exc:
        raise AudioError(f"cannot write {path}: {exc}") from exc
    return WriteInfo(str(path), len(q), n_clipped)


def normalize_std(buffer: AudioBuffer) -> AudioBuffer:
    std = float(np.std(buffer.samples))
    if std <= SILENCE_STD:
        raise NearSilenceError(f"standard deviation {std:.3g} is too small to normalize")
    return buffer.with_samples(buffer.samples / std)


def resample_ratio(samples: np.ndarray, ratio: float, max_denominator: int = 256) -> np.ndarray:
    """Band-limited resampling of raw samples by ``ratio`` (output/input length).

    Irrational ratios are approximated by the closest fraction with a bounded
    denominator; for ``max_denominator=256`` the pitch error this introduces is
    far below one cent.
    """
    frac = Fraction(ratio).limit_denominator(max_denominator)
    up, down = frac.numerator, frac.denominator
    if up == down:
        return np.array(samples, dtype=np.float64)
    return resample_poly(np.asarray(samples, dtype=np.float64), up, down)


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    if target_rate <= 0:
        raise AudioError(f"target rate must be positive, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == buffer.sample_rate:
        return AudioBuffer(buffer.samples.copy(), target_rate)
    frac = Fraction(target_rate, buffer.sample_rate)
    y = resample_poly(buffer.samples, frac.numerator, frac.denominator)
    return AudioBuffer(y, target_rate)
