"""Synthetic karaoke corpus, per-note de-tuning, input features and the feature cache."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .align import NoteSegment, Score, Note, dtw_align, note_segments, render_score_track
from .audio import CANONICAL_RATE, AudioBuffer, NearSilenceError, normalize_std
from .pitch import midi_to_hz, track_pitch
from .spectral import CqtConfig, cqt, shift_samples

MIN_SEGMENT_FRAMES = 8
CROSSFADE_SECONDS = 0.010
SHIFT_CONTEXT = 2048


class DatasetError(ValueError):
    pass


class CacheError(ValueError):
    pass


class CacheVersionError(CacheError):
    pass


# ------------------------------------------------------------------ synthesis

@dataclass(frozen=True)
class Chord:
    root: float  # MIDI
    quality: str  # "maj" or "min"
    onset: float
    duration: float

    def pitches(self) -> tuple[float, float, float]:
        third = 4 if self.quality == "maj" else 3
        return (self.root, self.root + third, self.root + 7)


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = CANONICAL_RATE
    n_partials: int = 6
    vibrato_cents: float = 15.0
    vibrato_hz: float = 5.5
    attack: float = 0.03
    release: float = 0.06
    chord_partials: int = 4
    chord_gain: float = 0.22
    doubling_gain: float = 0.12
    tail_seconds: float = 0.3
    noise: float = 1e-4
    chords: tuple[Chord, ...] | None = None


@dataclass(eq=False)
class SongExample:
    vocal: AudioBuffer
    accompaniment: AudioBuffer
    score: Score
    segments: list[NoteSegment] = field(default_factory=list)
    chords: tuple[Chord, ...] = ()


def _envelope(n: int, sr: int, attack: float, release: float) -> np.ndarray:
    env = np.ones(n)
    na = min(int(attack * sr), n // 2)
    nr = min(int(release * sr), n - na)
    if na:
        env[:na] = np.linspace(0.0, 1.0, na, endpoint=False)
    if nr:
        env[n - nr:] = np.linspace(1.0, 0.0, nr)
    return env


def _harmonic_tone(freq_track: np.ndarray, sr: int, n_partials: int, phase0: float = 0.0) -> np.ndarray:
    phase = phase0 + 2 * np.pi * np.cumsum(freq_track) / sr
    out = np.zeros_like(freq_track)
    top = float(np.max(freq_track))
    for k in range(1, n_partials + 1):
        if k * top >= sr / 2:
            break
        out += np.sin(k * phase) / k
    return out


def _headroom(x: np.ndarray, peak: float = 0.9) -> np.ndarray:
    """Scale down so 16-bit export never clips."""
    top = float(np.max(np.abs(x)))
    return x * (peak / top) if top > peak else x


def default_chords(score: Score, rng: np.random.Generator) -> tuple[Chord, ...]:
    """One triad per note, chosen so the melody pitch is a chord tone."""
    chords = []
    for n in score.notes:
        pc = int(round(n.midi)) % 12
        quality = "maj" if rng.random() < 0.6 else "min"
        third = 4 if quality == "maj" else 3
        offset = [0, third, 7][rng.integers(3)]
        root = 60 + (pc - offset) % 12
        chords.append(Chord(float(root), quality, n.onset, n.duration))
    return tuple(chords)


def synth_song(score: Score, melody_seed: int = 0, config: SynthConfig = SynthConfig(),
               segment: bool = True) -> SongExample:
    """Render an in-tune vocal and a consonant accompaniment for ``score``.

    The vocal is a six-partial harmonic tone with 1/k amplitudes, light
    vibrato and a per-note envelope.  The accompaniment sustains triads
    (harmonic stacks on root, third and fifth) and doubles the melody
    quietly.  With ``segment=True`` note boundaries are recovered from the
    rendered vocal through pitch tracking and DTW.
    """
    if len(score) == 0:
        raise DatasetError("cannot synthesize an empty score")
    rng = np.random.default_rng(melody_seed)
    sr = config.sample_rate
    n = int(math.ceil((score.end_seconds + config.tail_seconds) * sr))
    vocal = np.zeros(n)
    doubling = np.zeros(n)
    for note in score.notes:
        a = int(round(note.onset * sr))
        b = min(n, int(round((note.onset + note.duration) * sr)))
        if b <= a:
            continue
        t = np.arange(b - a) / sr
        f0 = midi_to_hz(note.midi)
        vib = config.vibrato_cents * np.sin(2 * np.pi * config.vibrato_hz * t + rng.uniform(0, 2 * np.pi))
        ftrack = f0 * 2.0 ** (vib / 1200.0)
        env = _envelope(b - a, sr, config.attack, config.release) * rng.uniform(0.8, 1.0)
        vocal[a:b] += env * _harmonic_tone(ftrack, sr, config.n_partials, rng.uniform(0, 2 * np.pi))
        doubling[a:b] += env * _harmonic_tone(np.full(b - a, f0), sr, 2)

    chords = config.chords if config.chords is not None else default_chords(score, rng)
    acc = config.doubling_gain * doubling
    for ch in chords:
        a = int(round(ch.onset * sr))
        b = min(n, int(round((ch.onset + ch.duration) * sr)))
        if b <= a:
            continue
        env = _envelope(b - a, sr, 0.02, 0.05)
        for p in ch.pitches():
            tone = _harmonic_tone(np.full(b - a, midi_to_hz(p)), sr, config.chord_partials, rng.uniform(0, 2 * np.pi))
            acc[a:b] += config.chord_gain * env * tone
    vocal = _headroom(0.5 * vocal + config.noise * rng.standard_normal(n))
    acc = _headroom(acc + config.noise * rng.standard_normal(n))

    example = SongExample(AudioBuffer(vocal, sr), AudioBuffer(acc, sr), score, [], tuple(chords))
    if segment:
        example.segments = segment_song(example.vocal, score)
    return example


def segment_song(vocal: AudioBuffer, score: Score, config: CqtConfig = CqtConfig(),
                 min_frames: int = MIN_SEGMENT_FRAMES) -> list[NoteSegment]:
    """Note spans in centered CQT frames, from tracking the vocal and warping the score onto it."""
    track = track_pitch(vocal, config=config, center=True)
    perf = track.midi()
    score_track = render_score_track(score, track.hop_seconds, len(perf))
    path = dtw_align(score_track, perf)
    return [s for s in note_segments(score, path, track.hop_seconds) if s.n_frames >= min_frames]


# scale degrees (semitones above the key) and qualities for four-bar loops;
# the two splits never share a progression
TRAIN_PROGRESSIONS = (
    ((0, "maj"), (7, "maj"), (9, "min"), (5, "maj")),
    ((0, "maj"), (5, "maj"), (7, "maj"), (0, "maj")),
    ((0, "maj"), (9, "min"), (5, "maj"), (7, "maj")),
    ((9, "min"), (5, "maj"), (0, "maj"), (7, "maj")),
)
VALIDATION_PROGRESSIONS = (
    ((2, "min"), (7, "maj"), (0, "maj"), (5, "maj")),
    ((0, "maj"), (4, "min"), (5, "maj"), (7, "maj")),
)
MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)


def random_song_plan(seed: int, n_notes: int, progressions=TRAIN_PROGRESSIONS,
                     note_range=(57, 76), start=0.2) -> tuple[Score, tuple[Chord, ...]]:
    """A melody over a looping chord progression in a random major key."""
    rng = np.random.default_rng(seed)
    prog = progressions[rng.integers(len(progressions))]
    key = int(rng.integers(12))
    lo, hi = note_range
    scale = [p for p in range(lo, hi + 1) if (p - key) % 12 in MAJOR_SCALE]
    notes, chords = [], []
    t = start
    prev = scale[len(scale) // 2]
    bar = 0
    while len(notes) < n_notes:
        degree, quality = prog[bar % len(prog)]
        chord = Chord(float(60 + (key + degree) % 12), quality, t, 0.0)
        tones = {int(p) % 12 for p in chord.pitches()}
        per_bar = min(int(rng.integers(3, 6)), n_notes - len(notes))
        bar_start = t
        for _ in range(per_bar):
            pool = [p for p in scale if p % 12 in tones] if rng.random() < 0.7 else scale
            near = [p for p in pool if abs(p - prev) <= 7] or pool
            pitch = int(rng.choice(near))
            dur = float(rng.uniform(0.3, 0.6))
            gap = float(rng.uniform(0.05, 0.15)) if rng.random() < 0.3 else 0.0
            notes.append(Note(float(pitch), t, dur - gap))
            t += dur
            prev = pitch
        chords.append(Chord(chord.root, quality, bar_start, t - bar_start))
        bar += 1
    return Score(tuple(notes)), tuple(chords)


def make_song(seed: int, n_notes: int, progressions=TRAIN_PROGRESSIONS, config: SynthConfig = SynthConfig(),
              segment: bool = True) -> SongExample:
    score, chords = random_song_plan(seed, n_notes, progressions)
    cfg = SynthConfig(**{**config.__dict__, "chords": chords})
    return synth_song(score, seed, cfg, segment=segment)


# ----------------------------------------------------------------- de-tuning

@dataclass(eq=False)
class DetunedVariant:
    detuned_vocal: AudioBuffer
    labels: np.ndarray  # semitones per segment
    variant_index: int


def _span_weights(n: int, a: int, b: int, xf: int) -> np.ndarray:
    """Trapezoid over [a, b) with linear ramps of ``xf`` samples centered on the edges."""
    w = np.zeros(n)
    lo, hi = max(0, a - xf // 2), min(n, b + xf // 2)
    idx = np.arange(lo, hi)
    up = np.clip((idx - (a - xf / 2)) / xf, 0.0, 1.0) if xf else (idx >= a).astype(float)
    down = np.clip(((b + xf / 2) - idx) / xf, 0.0, 1.0) if xf else (idx < b).astype(float)
    w[lo:hi] = np.minimum(up, down)
    return w


def apply_note_shifts(vocal: AudioBuffer, segments, cents, hop_samples: int,
                      crossfade: float = CROSSFADE_SECONDS) -> AudioBuffer:
    """Pitch-shift each segment's span by its amount in cents, leaving other audio untouched.

    Segment frame ``f`` is taken to start at sample ``f * hop``.  Each span is
    shifted with some surrounding context and spliced back with linear
    crossfades of ``crossfade`` seconds.
    """
    x = vocal.samples
    n = len(x)
    xf = int(round(crossfade * vocal.sample_rate))
    total_w = np.zeros(n)
    mixed = np.zeros(n)
    for seg, c in zip(segments, cents):
        a, b = seg.start_frame * hop_samples, min(n, seg.end_frame * hop_samples)
        if b <= a:
            continue
        w = _span_weights(n, a, b, xf)
        lo, hi = max(0, a - SHIFT_CONTEXT), min(n, b + SHIFT_CONTEXT)
        shifted = x[lo:hi] if c == 0 else shift_samples(x[lo:hi], float(c))
        mixed[lo:hi] += w[lo:hi] * shifted
        total_w += w
    total_w = np.minimum(total_w, 1.0)
    return vocal.with_samples(mixed + (1.0 - total_w) * x)


def draw_labels(rng: np.random.Generator, n_segments: int, max_cents: float = 100.0) -> np.ndarray:
    """Independent uniform shifts in semitones, within ``±max_cents``."""
    return rng.uniform(-max_cents, max_cents, size=n_segments) / 100.0


def detune_song(example: SongExample, seed: int = 0, n_variants: int = 7, max_cents: float = 100.0,
                config: CqtConfig = CqtConfig()) -> list[DetunedVariant]:
    if not example.segments:
        raise DatasetError("song has no segments to de-tune")
    short = [s for s in example.segments if s.n_frames < 2]
    if short:
        raise DatasetError(f"segment {short[0]} is shorter than 2 frames")
    hop = config.hop_samples(example.vocal.sample_rate)
    rng = np.random.default_rng(seed)
    variants = []
    for v in range(n_variants):
        labels = draw_labels(rng, len(example.segments), max_cents)
        audio = apply_note_shifts(example.vocal, example.segments, labels * 100.0, hop)
        variants.append(DetunedVariant(audio, labels, v))
    return variants


# ------------------------------------------------------------------ features

@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """3×576×T input: accompaniment CQT, vocal CQT, binary disagreement."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise DatasetError(f"feature tensor must be 3×bins×T, got {self.data.shape}")

    @property
    def accompaniment(self):
        return self.data[0]

    @property
    def vocal(self):
        return self.data[1]

    @property
    def disagreement(self):
        return self.data[2]

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]


def binarize_cqt(magnitudes) -> np.ndarray:
    """1 where a bin reaches the global median of the matrix, else 0."""
    m = getattr(magnitudes, "magnitudes", magnitudes)
    m = np.asarray(m)
    if m.size == 0:
        raise DatasetError("cannot binarize an empty matrix")
    return (m >= np.median(m)).astype(np.uint8)


def disagreement(bin_v, bin_a) -> np.ndarray:
    bin_v, bin_a = np.asarray(bin_v), np.asarray(bin_a)
    if bin_v.shape != bin_a.shape:
        raise DatasetError(f"shape mismatch {bin_v.shape} vs {bin_a.shape}")
    return np.bitwise_xor(bin_v.astype(np.uint8), bin_a.astype(np.uint8))


def _feature_cqt(buffer: AudioBuffer, config: CqtConfig) -> np.ndarray:
    try:
        buffer = normalize_std(buffer)
    except NearSilenceError:
        pass  # silent tracks stay all-zero
    return cqt(buffer, config, center=True).magnitudes


def build_features(vocal: AudioBuffer, accompaniment: AudioBuffer, config: CqtConfig = CqtConfig()) -> FeatureTensor:
    """Std-normalize both tracks, take centered CQTs and add the disagreement channel."""
    if vocal.sample_rate != accompaniment.sample_rate:
        raise DatasetError("vocal and accompaniment sample rates differ")
    v = _feature_cqt(vocal, config)
    a = _feature_cqt(accompaniment, config)
    if abs(v.shape[1] - a.shape[1]) > 1:
        raise DatasetError(f"track lengths differ by {abs(v.shape[1] - a.shape[1])} frames")
    t = min(v.shape[1], a.shape[1])
    v, a = v[:, :t], a[:, :t]
    return FeatureTensor(np.stack([a, v, disagreement(binarize_cqt(v), binarize_cqt(a)).astype(np.float64)]))


@dataclass(eq=False)
class SongFeatures:
    """All de-tuned variants of one song, ready for training.

    ``vocal`` holds one CQT per variant and ``labels`` one shift per variant
    and segment (semitones).
    """

    accompaniment: np.ndarray  # bins×T
    vocal: np.ndarray  # V×bins×T
    labels: np.ndarray  # V×n_segments
    segments: list[NoteSegment]
    song_id: str = ""

    @classmethod
    def from_records(cls, records, song_id: str = "") -> "SongFeatures":
        records = list(records)
        if not records:
            raise DatasetError("no variant records")
        acc = records[0].features.accompaniment
        vocal = np.stack([r.features.vocal for r in records])
        labels = np.stack([r.labels for r in records])
        return cls(acc, vocal, labels, list(records[0].segments), song_id)

    @property
    def n_variants(self) -> int:
        return self.vocal.shape[0]

    def features(self, channels: int = 3) -> np.ndarray:
        """V×channels×bins×T network input, recomputing the disagreement channel."""
        n_var = self.n_variants
        out = np.empty((n_var, channels) + self.accompaniment.shape)
        out[:, 0] = self.accompaniment
        out[:, 1] = self.vocal
        if channels == 3:
            bin_a = binarize_cqt(self.accompaniment)
            for v in range(n_var):
                out[v, 2] = disagreement(binarize_cqt(self.vocal[v]), bin_a)
        elif channels != 2:
            raise DatasetError(f"channels must be 2 or 3, got {channels}")
        return out

    def shuffled(self, rng: np.random.Generator) -> "SongFeatures":
        """Recombine variants note by note: each segment draws its variant order independently.

        Frames of segment ``k`` in output variant ``v`` come from input variant
        ``perm_k[v]`` and carry its label, so every feature slice keeps its
        true shift.
        """
        vocal = self.vocal.copy()
        labels = self.labels.copy()
        for k, seg in enumerate(self.segments):
            perm = rng.permutation(self.n_variants)
            vocal[:, :, seg.start_frame:seg.end_frame] = self.vocal[perm, :, seg.start_frame:seg.end_frame]
            labels[:, k] = self.labels[perm, k]
        return SongFeatures(self.accompaniment, vocal, labels, self.segments, self.song_id)


# --------------------------------------------------------------------- cache

CACHE_MAGIC = b"ATF1"
CACHE_VERSION = 1


@dataclass(eq=False)
class FeatureRecord:
    features: FeatureTensor
    segments: list[NoteSegment]
    labels: np.ndarray


def feature_cache_write(path, features, segments, labels) -> None:
    """Write one feature tensor with its segment and label tables.

    Layout (little endian): magic ``ATF1``, u16 version, u32×3 dims, float64
    payload, u32 segment count + (i64 start, i64 end, f64 midi, f64 label,
    i64 note index) rows, u32 label count + float64 labels, u32 CRC-32 of all
    preceding bytes.
    """
    data = features.data if isinstance(features, FeatureTensor) else np.asarray(features)
    labels = np.asarray(labels, dtype=np.float64)
    if data.ndim != 3:
        raise CacheError("feature payload must be 3-D")
    parts = [CACHE_MAGIC, struct.pack("<H", CACHE_VERSION), struct.pack("<3I", *data.shape),
             np.ascontiguousarray(data, dtype="<f8").tobytes(), struct.pack("<I", len(segments))]
    for s in segments:
        parts.append(struct.pack("<qqddq", s.start_frame, s.end_frame, s.score_midi, s.shift_label, s.note_index))
    parts.append(struct.pack("<I", len(labels)))
    parts.append(np.ascontiguousarray(labels, dtype="<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def feature_cache_read(path) -> FeatureRecord:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 6 or raw[:4] != CACHE_MAGIC:
        raise CacheError(f"{path}: corrupt header (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CACHE_VERSION:
        raise CacheVersionError(f"{path}: cache version {version}, reader supports {CACHE_VERSION}")
    if len(raw) < 22:
        raise CacheError(f"{path}: corrupt header (truncated)")
    dims = struct.unpack_from("<3I", raw, 6)
    pos = 18
    n_payload = int(np.prod(dims)) * 8
    if pos + n_payload + 4 > len(raw):
        raise CacheError(f"{path}: corrupt header (payload truncated)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CacheError(f"{path}: checksum mismatch (corrupt or truncated)")
    data = np.frombuffer(body, dtype="<f8", count=int(np.prod(dims)), offset=pos).reshape(dims).astype(np.float64)
    pos += n_payload
    try:
        (n_seg,) = struct.unpack_from("<I", body, pos)
        pos += 4
        segments = []
        for _ in range(n_seg):
            a, b, midi, label, idx = struct.unpack_from("<qqddq", body, pos)
            segments.append(NoteSegment(a, b, midi, label, idx))
            pos += 40
        (n_lab,) = struct.unpack_from("<I", body, pos)
        pos += 4
        labels = np.frombuffer(body, dtype="<f8", count=n_lab, offset=pos).astype(np.float64)
        pos += 8 * n_lab
    except struct.error as exc:
        raise CacheError(f"{path}: corrupt tables: {exc}") from exc
    if pos != len(body):
        raise CacheError(f"{path}: {len(body) - pos} trailing bytes")
    return FeatureRecord(FeatureTensor(data), segments, labels)


# ------------------------------------------------------------ whole-song prep

def prepare_song(example: SongExample, seed: int, n_variants: int = 7, max_cents: float = 100.0,
                 config: CqtConfig = CqtConfig()) -> list[FeatureRecord]:
    """De-tune a segmented song and build one feature record per variant."""
    records = []
    acc_cqt = _feature_cqt(example.accompaniment, config)
    for var in detune_song(example, seed, n_variants, max_cents, config):
        v = _feature_cqt(var.detuned_vocal, config)
        t = min(v.shape[1], acc_cqt.shape[1])
        a = acc_cqt[:, :t]
        v = v[:, :t]
        feats = FeatureTensor(np.stack([a, v, disagreement(binarize_cqt(v), binarize_cqt(a)).astype(np.float64)]))
        segs = [s.with_label(lab) for s, lab in zip(example.segments, var.labels)]
        records.append(FeatureRecord(feats, segs, var.labels.copy()))
    return records
