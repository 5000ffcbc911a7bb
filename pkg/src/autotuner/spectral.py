"""Constant-Q analysis, STFT phase vocoder and pitch shifting in cents."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio import AudioBuffer, AudioError, resample_ratio

N_FFT = 2048
HOP = 256


class SpectralError(ValueError):
    pass


def _pow2(x: float) -> int:
    return 1 << int(round(math.log2(x)))


@dataclass(frozen=True)
class CqtConfig:
    f_min: float = 100.0
    octaves: int = 6
    bins_per_semitone: int = 8
    frame_seconds: float = 0.092
    hop_seconds: float = 0.011

    @property
    def bins_per_octave(self) -> int:
        return 12 * self.bins_per_semitone

    @property
    def bins_total(self) -> int:
        return self.octaves * self.bins_per_octave

    @property
    def q(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def frame_samples(self, sample_rate: int) -> int:
        # 92 ms / 11 ms realized as the nearest powers of two: 2048 / 256 at 22050 Hz
        return _pow2(self.frame_seconds * sample_rate)

    def hop_samples(self, sample_rate: int) -> int:
        return _pow2(self.hop_seconds * sample_rate)

    def frequencies(self) -> np.ndarray:
        k = np.arange(self.bins_total)
        return self.f_min * 2.0 ** (k / self.bins_per_octave)

    def bin_of(self, freq: float) -> int:
        """Index of the bin whose center is closest (in log frequency) to ``freq``."""
        return int(round(self.bins_per_octave * math.log2(freq / self.f_min)))


@dataclass(frozen=True, eq=False)
class CqtMatrix:
    magnitudes: np.ndarray  # (bins, frames)
    hop_seconds: float
    f_min: float

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    values: np.ndarray  # (fft_size // 2 + 1, frames) complex
    fft_size: int
    hop_samples: int
    window: str = "hann"

    def __post_init__(self):
        if self.values.shape[0] != self.fft_size // 2 + 1:
            raise SpectralError(
                f"expected {self.fft_size // 2 + 1} bins, got {self.values.shape[0]}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


# --------------------------------------------------------------------------- CQT

def _window_lengths(config: CqtConfig, sample_rate: int) -> np.ndarray:
    frame = config.frame_samples(sample_rate)
    lengths = np.ceil(config.q * sample_rate / config.frequencies()).astype(int)
    return np.minimum(lengths, frame)


@lru_cache(maxsize=8)
def _cqt_kernel(config: CqtConfig, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense (bins, frame) kernel split into real and imaginary parts."""
    frame = config.frame_samples(sample_rate)
    freqs = config.frequencies()
    lengths = _window_lengths(config, sample_rate)
    kernel = np.zeros((len(freqs), frame), dtype=np.complex128)
    for k, (f, n) in enumerate(zip(freqs, lengths)):
        start = (frame - n) // 2
        w = np.hanning(n)
        idx = np.arange(start, start + n)
        kernel[k, start:start + n] = w * np.exp(-2j * np.pi * f * idx / sample_rate) / w.sum()
    re = np.ascontiguousarray(kernel.real)
    im = np.ascontiguousarray(kernel.imag)
    re.flags.writeable = False
    im.flags.writeable = False
    return re, im


def _framed(samples: np.ndarray, frame: int, hop: int, center: bool) -> np.ndarray:
    x = samples
    if center:
        x = np.pad(x, frame // 2)
    if len(x) < frame:
        raise SpectralError(f"signal of {len(x)} samples is shorter than one {frame}-sample frame")
    return sliding_window_view(x, frame)[::hop]


def cqt(buffer: AudioBuffer, config: CqtConfig = CqtConfig(), center: bool = False) -> CqtMatrix:
    """Constant-Q magnitudes, one column per hop.

    Each bin correlates the frame with a Hann-windowed complex exponential at
    the bin frequency; the window spans ``Q * rate / f`` samples, capped at the
    frame length, and is normalized to unit sum so a sinusoid of amplitude
    ``A`` peaks near ``A / 2``.  With ``center=True`` the signal is zero-padded
    by half a frame so that column ``t`` is centered on sample ``t * hop``.
    """
    sr = buffer.sample_rate
    frames = _framed(buffer.samples, config.frame_samples(sr), config.hop_samples(sr), center)
    re, im = _cqt_kernel(config, sr)
    frames = np.ascontiguousarray(frames)
    mag = np.hypot(re @ frames.T, im @ frames.T)
    return CqtMatrix(mag, config.hop_samples(sr) / sr, config.f_min)


def cqt_reference(buffer: AudioBuffer, config: CqtConfig = CqtConfig(), center: bool = False) -> CqtMatrix:
    """Bin-by-bin, frame-by-frame evaluation of the CQT definition (slow)."""
    sr = buffer.sample_rate
    frame = config.frame_samples(sr)
    hop = config.hop_samples(sr)
    x = np.pad(buffer.samples, frame // 2) if center else buffer.samples
    if len(x) < frame:
        raise SpectralError("signal shorter than one frame")
    n_frames = 1 + (len(x) - frame) // hop
    out = np.zeros((config.bins_total, n_frames))
    for k, (f, n) in enumerate(zip(config.frequencies(), _window_lengths(config, sr))):
        start = (frame - n) // 2
        w = np.hanning(n)
        phasor = np.exp(-2j * np.pi * f * np.arange(start, start + n) / sr)
        for t in range(n_frames):
            seg = x[t * hop + start: t * hop + start + n]
            out[k, t] = abs(np.sum(seg * w * phasor)) / w.sum()
    return CqtMatrix(out, hop / sr, config.f_min)


# ------------------------------------------------------------------ STFT / PV

def _stft_window(n_fft: int) -> np.ndarray:
    return np.hanning(n_fft + 1)[:-1]


def stft(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> ComplexSpectrogram:
    x = np.pad(np.asarray(samples, dtype=np.float64), n_fft // 2)
    if len(x) < n_fft:
        x = np.pad(x, (0, n_fft - len(x)))
    frames = sliding_window_view(x, n_fft)[::hop] * _stft_window(n_fft)
    return ComplexSpectrogram(np.fft.rfft(frames, axis=1).T, n_fft, hop)


def istft(spec: ComplexSpectrogram, length: int | None = None) -> np.ndarray:
    n_fft, hop = spec.fft_size, spec.hop_samples
    win = _stft_window(n_fft)
    frames = np.fft.irfft(spec.values.T, n=n_fft, axis=1) * win
    n = n_fft + hop * (spec.n_frames - 1)
    y = np.zeros(n)
    norm = np.zeros(n)
    for t in range(spec.n_frames):
        y[t * hop: t * hop + n_fft] += frames[t]
        norm[t * hop: t * hop + n_fft] += win ** 2
    good = norm > 1e-10
    y[good] /= norm[good]
    y = y[n_fft // 2:]
    if length is None:
        length = hop * (spec.n_frames - 1)
    if len(y) < length:
        y = np.pad(y, (0, length - len(y)))
    return y[:length]


def time_stretch(spec: ComplexSpectrogram, rate: float) -> ComplexSpectrogram:
    """Phase-vocoder time stretch; ``rate > 1`` shortens, ``rate < 1`` lengthens."""
    if not 0.25 <= rate <= 4.0:
        raise SpectralError(f"stretch rate {rate} outside [0.25, 4]")
    D = spec.values
    n_bins, n_frames = D.shape
    steps = np.arange(0, n_frames, rate)
    # expected phase advance per hop for each bin center
    advance = 2 * np.pi * spec.hop_samples * np.arange(n_bins) / spec.fft_size
    D = np.concatenate([D, np.zeros((n_bins, 2), dtype=D.dtype)], axis=1)

    out = np.empty((n_bins, len(steps)), dtype=np.complex128)
    phase = np.angle(D[:, 0])
    for t, step in enumerate(steps):
        i = int(step)
        frac = step - i
        c0, c1 = D[:, i], D[:, i + 1]
        mag = (1.0 - frac) * np.abs(c0) + frac * np.abs(c1)
        out[:, t] = mag * np.exp(1j * phase)
        dphi = np.angle(c1) - np.angle(c0) - advance
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + advance + dphi
        phase -= 2 * np.pi * np.round(phase / (2 * np.pi))
    return ComplexSpectrogram(out, spec.fft_size, spec.hop_samples, spec.window)


def shift_samples(samples: np.ndarray, cents: float, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Pitch-shift a raw sample array by ``cents`` keeping its length."""
    n = len(samples)
    ratio = 2.0 ** (cents / 1200.0)
    spec = time_stretch(stft(samples, n_fft, hop), 1.0 / ratio)
    stretched = istft(spec, length=int(round(n * ratio)))
    y = resample_ratio(stretched, 1.0 / ratio)
    if len(y) < n:
        y = np.pad(y, (0, n - len(y)))
    return y[:n]


def pitch_shift_cents(buffer: AudioBuffer, cents: float) -> AudioBuffer:
    """Shift pitch by ``cents`` (phase-vocoder stretch by the pitch ratio, then resample)."""
    if abs(cents) > 1200:
        raise SpectralError(f"|cents| must be <= 1200, got {cents}")
    if len(buffer) == 0:
        raise AudioError("empty buffer")
    return buffer.with_samples(shift_samples(buffer.samples, cents))
