"""Pitch units and a YIN tracker with HMM smoothing (pYIN-style)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import beta as beta_dist

from .audio import AudioBuffer
from .spectral import CqtConfig

FRAME = 2048
VOICING_THRESHOLD = 0.5
CMNDF_THRESHOLD = 0.15
STATE_CENTS = 10.0
MAX_STEP_CENTS = 50.0
VOICING_SWITCH_PROB = 0.01


class PitchError(ValueError):
    pass


def midi_to_hz(p):
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr < 0) | (p_arr > 127)):
        raise PitchError(f"MIDI pitch out of [0, 127]: {p}")
    out = 440.0 * 2.0 ** ((p_arr - 69.0) / 12.0)
    return float(out) if out.ndim == 0 else out


def hz_to_midi(f):
    f_arr = np.asarray(f, dtype=np.float64)
    if np.any(f_arr <= 0):
        raise PitchError("frequency must be positive")
    out = 69.0 + 12.0 * np.log2(f_arr / 440.0)
    return float(out) if out.ndim == 0 else out


def cents_between(f1, f0):
    """Interval from ``f0`` up to ``f1`` in cents."""
    a = np.asarray(f1, dtype=np.float64)
    b = np.asarray(f0, dtype=np.float64)
    if np.any(a <= 0) or np.any(b <= 0):
        raise PitchError("frequencies must be positive")
    out = 1200.0 * np.log2(a / b)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class PitchTrack:
    f0: np.ndarray  # Hz per frame, 0 where unvoiced
    voicing: np.ndarray  # posterior voicing probability per frame
    hop_seconds: float

    @property
    def voiced(self) -> np.ndarray:
        return self.f0 > 0

    def midi(self) -> np.ndarray:
        """Per-frame MIDI pitch with 0 for unvoiced frames."""
        out = np.zeros_like(self.f0)
        v = self.voiced
        out[v] = hz_to_midi(self.f0[v])
        return out


def _cmndf(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """Cumulative-mean-normalized YIN difference for every frame, lags 0..max_lag."""
    n_frames, frame = frames.shape
    w = frame - max_lag
    n_fft = 1 << int(math.ceil(math.log2(frame + w)))
    a = np.fft.rfft(frames[:, :w], n_fft, axis=1)
    b = np.fft.rfft(frames, n_fft, axis=1)
    # r[tau] = sum_{j<w} x_j x_{j+tau}
    r = np.fft.irfft(np.conj(a) * b, n_fft, axis=1)[:, :max_lag + 1]
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    e0 = sq[:, w][:, None]
    lags = np.arange(max_lag + 1)
    e_tau = sq[:, lags + w] - sq[:, lags]
    d = np.maximum(e0 + e_tau - 2.0 * r, 0.0)
    d[:, 0] = 0.0

    cum = np.cumsum(d[:, 1:], axis=1)
    out = np.ones_like(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = d[:, 1:] * lags[1:] / cum
    out[:, 1:] = np.where(cum > 1e-12 * frame, ratio, 1.0)
    return out


def _threshold_prior(n: int = 100, mean: float = CMNDF_THRESHOLD):
    """Threshold grid with Beta(2, b) weights whose mean is ``mean``."""
    thresholds = np.linspace(0.01, 1.0, n)
    b = 2.0 / mean - 2.0
    edges = np.concatenate([[0.0], (thresholds[:-1] + thresholds[1:]) / 2, [1.0]])
    weights = np.diff(beta_dist.cdf(edges, 2.0, b))
    return thresholds, weights / weights.sum()


def _candidates(cmndf_row: np.ndarray, lag_lo: int, lag_hi: int, thresholds, weights):
    """(lag, prob) pairs: each threshold votes for the first local minimum below it."""
    d = cmndf_row
    lag = np.arange(lag_lo, lag_hi)
    is_min = (d[lag] < d[lag - 1]) & (d[lag] <= d[lag + 1])
    minima = lag[is_min]
    out = []
    prev_best = np.inf
    for m in minima:
        v = d[m]
        if v >= prev_best:
            continue
        chosen = (thresholds > v) & (thresholds <= prev_best)
        p = float(weights[chosen].sum())
        if p > 0:
            out.append((m, p))
        prev_best = v
    return out


def _refine(d: np.ndarray, tau: int) -> float:
    a, b, c = d[tau - 1], d[tau], d[tau + 1]
    denom = a - 2 * b + c
    if denom <= 0:
        return float(tau)
    return tau + 0.5 * (a - c) / denom


def _voicing_posterior(p_voiced: np.ndarray, switch: float = VOICING_SWITCH_PROB) -> np.ndarray:
    """Forward-backward posterior of a two-state voiced/unvoiced chain."""
    eps = 1e-6
    emit = np.stack([np.clip(1 - p_voiced, eps, 1), np.clip(p_voiced, eps, 1)], axis=1)
    trans = np.array([[1 - switch, switch], [switch, 1 - switch]])
    n = len(p_voiced)
    alpha = np.zeros((n, 2))
    a = np.array([0.5, 0.5]) * emit[0]
    alpha[0] = a / a.sum()
    for t in range(1, n):
        a = (alpha[t - 1] @ trans) * emit[t]
        alpha[t] = a / a.sum()
    beta = np.ones((n, 2))
    for t in range(n - 2, -1, -1):
        b = trans @ (emit[t + 1] * beta[t + 1])
        beta[t] = b / b.sum()
    post = alpha * beta
    return post[:, 1] / post.sum(axis=1)


def _viterbi_pitch(obs: np.ndarray, max_step: int) -> np.ndarray:
    """Most likely state path with a triangular transition kernel of half-width ``max_step``."""
    n_frames, n_states = obs.shape
    offsets = np.arange(-max_step, max_step + 1)
    tw = (max_step + 1 - np.abs(offsets)).astype(float)
    log_t = np.log(tw / tw.sum())
    log_obs = np.log(obs)
    score = log_obs[0].copy()
    back = np.zeros((n_frames, n_states), dtype=np.int64)
    idx = np.arange(n_states)
    for t in range(1, n_frames):
        cand = np.full((len(offsets), n_states), -np.inf)
        for i, off in enumerate(offsets):
            src = idx - off
            ok = (src >= 0) & (src < n_states)
            cand[i, ok] = score[src[ok]] + log_t[i]
        best = np.argmax(cand, axis=0)
        back[t] = idx - offsets[best]
        score = cand[best, idx] + log_obs[t]
    path = np.zeros(n_frames, dtype=np.int64)
    path[-1] = int(np.argmax(score))
    for t in range(n_frames - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def track_pitch(buffer: AudioBuffer, fmin: float = 80.0, fmax: float = 1000.0,
                config: CqtConfig = CqtConfig(), center: bool = False) -> PitchTrack:
    """Frame-wise f0 with a YIN front end and HMM smoothing.

    Every CMNDF local minimum that some threshold in a Beta-weighted grid
    would pick becomes a candidate weighted by that threshold mass.  Voicing
    comes from a two-state forward-backward pass over the per-frame candidate
    mass; the pitch path is a Viterbi decode over 10-cent states.  Frames use
    the same hop (and optional half-frame centering) as :func:`cqt`.
    """
    sr = buffer.sample_rate
    if not 0 < fmin < fmax <= sr / 4:
        raise PitchError(f"invalid pitch range [{fmin}, {fmax}] for rate {sr}")
    hop = config.hop_samples(sr)
    x = np.pad(buffer.samples, FRAME // 2) if center else buffer.samples
    if len(x) < FRAME:
        raise PitchError(f"need at least {FRAME} samples, got {len(x)}")
    frames = np.ascontiguousarray(sliding_window_view(x, FRAME)[::hop])
    lag_lo = max(2, int(math.floor(sr / fmax)))
    lag_hi = int(math.ceil(sr / fmin)) + 1
    d = _cmndf(frames, lag_hi + 1)

    thresholds, weights = _threshold_prior()
    n_states = int(math.ceil(1200 * math.log2(fmax / fmin) / STATE_CENTS)) + 1
    obs = np.zeros((len(frames), n_states))
    p_voiced = np.zeros(len(frames))
    cand_f0 = []
    for t in range(len(frames)):
        found = []
        for tau, p in _candidates(d[t], lag_lo, lag_hi + 1, thresholds, weights):
            f = sr / _refine(d[t], tau)
            if not fmin <= f <= fmax:
                continue
            s = int(round(1200 * math.log2(f / fmin) / STATE_CENTS))
            obs[t, s] += p
            found.append((s, f))
        cand_f0.append(found)
        p_voiced[t] = obs[t].sum()

    voicing = _voicing_posterior(p_voiced)
    # frames without candidate mass contribute a flat emission
    obs_n = obs + 1e-9
    obs_n /= obs_n.sum(axis=1, keepdims=True)
    path = _viterbi_pitch(obs_n, int(round(MAX_STEP_CENTS / STATE_CENTS)))

    f0 = np.zeros(len(frames))
    for t in np.flatnonzero(voicing >= VOICING_THRESHOLD):
        s = path[t]
        near = [(abs(cs - s), f) for cs, f in cand_f0[t] if abs(cs - s) <= 2]
        f0[t] = min(near)[1] if near else fmin * 2.0 ** (s * STATE_CENTS / 1200)
    return PitchTrack(f0, voicing, hop / sr)
