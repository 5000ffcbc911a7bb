"""Score-to-performance alignment with asymmetric DTW and note segmentation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

REST_COST = 6.0


class AlignError(ValueError):
    pass


@dataclass(frozen=True)
class Note:
    midi: float
    onset: float
    duration: float


@dataclass(frozen=True)
class Score:
    notes: tuple[Note, ...] = field(default_factory=tuple)

    def __post_init__(self):
        notes = tuple(n if isinstance(n, Note) else Note(*n) for n in self.notes)
        object.__setattr__(self, "notes", notes)
        for a, b in zip(notes, notes[1:]):
            if b.onset < a.onset:
                raise AlignError("note onsets must be nondecreasing")
        for n in notes:
            if n.duration <= 0:
                raise AlignError(f"nonpositive duration in {n}")
            if not 0 <= n.midi <= 127:
                raise AlignError(f"MIDI pitch out of range in {n}")

    def __len__(self):
        return len(self.notes)

    @property
    def end_seconds(self) -> float:
        return max((n.onset + n.duration for n in self.notes), default=0.0)


@dataclass(frozen=True)
class NoteSegment:
    start_frame: int
    end_frame: int  # exclusive
    score_midi: float
    shift_label: float = 0.0  # semitones
    note_index: int = -1

    def __post_init__(self):
        if self.start_frame >= self.end_frame:
            raise AlignError(f"empty segment [{self.start_frame}, {self.end_frame})")

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame

    def with_label(self, label: float) -> "NoteSegment":
        return replace(self, shift_label=float(label))


@dataclass(frozen=True)
class StepWeights:
    """Multipliers on the local cost for each DTW step.

    ``score`` advances only the score index, ``perf`` advances only the
    performance index.  Making score-only steps cheap pushes time distortion
    onto the score.
    """

    score: float = 0.5
    perf: float = 2.0
    diagonal: float = 1.0


@dataclass(frozen=True, eq=False)
class WarpPath:
    pairs: np.ndarray  # (L, 2) int: (score frame, performance frame)
    cost: float

    def __len__(self):
        return len(self.pairs)


def _note_index_track(score: Score, hop_seconds: float, n_frames: int) -> np.ndarray:
    """Index of the active note per frame (-1 for rests); later onsets win."""
    times = np.arange(n_frames) * hop_seconds
    idx = np.full(n_frames, -1, dtype=np.int64)
    for i, n in enumerate(score.notes):
        idx[(times >= n.onset) & (times < n.onset + n.duration)] = i
    return idx


def render_score_track(score: Score, hop_seconds: float, n_frames: int) -> np.ndarray:
    """Per-frame MIDI pitch of the note active at ``frame * hop``; 0 marks rests."""
    if n_frames <= 0:
        raise AlignError("n_frames must be positive")
    idx = _note_index_track(score, hop_seconds, n_frames)
    pitches = np.array([n.midi for n in score.notes] + [0.0])
    return pitches[idx]


def local_cost(score_track, perf_track) -> np.ndarray:
    """Octave-folded absolute MIDI distance matrix; rest against pitch costs ``REST_COST``."""
    s = np.asarray(score_track, dtype=np.float64)[:, None]
    p = np.asarray(perf_track, dtype=np.float64)[None, :]
    diff = np.abs(s - p) % 12.0
    d = np.minimum(diff, 12.0 - diff)
    s_rest, p_rest = s <= 0, p <= 0
    d = np.where(s_rest ^ p_rest, REST_COST, d)
    return np.where(s_rest & p_rest, 0.0, d)


def dtw_align(score_track, perf_track, weights: StepWeights = StepWeights()) -> WarpPath:
    """Minimum-cost monotone alignment of a rendered score to a performance track.

    Path cost is ``d(0, 0)`` plus, for every step, the step weight times the
    local cost of the cell it lands on.
    """
    d = local_cost(score_track, perf_track)
    n, m = d.shape
    if n == 0 or m == 0:
        raise AlignError("cannot align empty sequences")
    ws, wp, wd = weights.score, weights.perf, weights.diagonal

    acc = np.empty((n, m))
    acc[0, 0] = d[0, 0]
    acc[0, 1:] = d[0, 0] + np.cumsum(wp * d[0, 1:])
    for i in range(1, n):
        # vertical and diagonal predecessors, then a min-plus prefix scan for
        # horizontal (performance-only) moves along the row
        from_above = acc[i - 1] + ws * d[i]
        from_diag = np.full(m, np.inf)
        from_diag[1:] = acc[i - 1, :-1] + wd * d[i, 1:]
        best = np.minimum(from_above, from_diag)
        c = np.concatenate([[0.0], np.cumsum(wp * d[i, 1:])])
        acc[i] = c + np.minimum.accumulate(best - c)

    # backtrack, preferring diagonal on ties
    i, j = n - 1, m - 1
    pairs = [(i, j)]
    while (i, j) != (0, 0):
        options = []
        if i > 0 and j > 0:
            options.append((acc[i - 1, j - 1] + wd * d[i, j], 0, i - 1, j - 1))
        if i > 0:
            options.append((acc[i - 1, j] + ws * d[i, j], 1, i - 1, j))
        if j > 0:
            options.append((acc[i, j - 1] + wp * d[i, j], 2, i, j - 1))
        _, _, i, j = min(options)
        pairs.append((i, j))
    pairs = np.array(pairs[::-1], dtype=np.int64)
    return WarpPath(pairs, path_cost(d, pairs, weights))


def path_cost(cost_matrix: np.ndarray, pairs: np.ndarray, weights: StepWeights = StepWeights()) -> float:
    total = float(cost_matrix[pairs[0, 0], pairs[0, 1]])
    for (i0, j0), (i1, j1) in zip(pairs[:-1], pairs[1:]):
        step = (i1 - i0, j1 - j0)
        w = {(1, 1): weights.diagonal, (1, 0): weights.score, (0, 1): weights.perf}[step]
        total += w * float(cost_matrix[i1, j1])
    return total


def note_segments(score: Score, path: WarpPath, hop_seconds: float) -> list[NoteSegment]:
    """Map score notes through ``path`` onto performance frames.

    Each performance frame takes the note active at the first score frame the
    path pairs it with; maximal runs of one note become segments.  Notes that
    end up owning no performance frame are dropped.
    """
    pairs = path.pairs
    n_score = int(pairs[-1, 0]) + 1
    n_perf = int(pairs[-1, 1]) + 1
    note_at = _note_index_track(score, hop_seconds, n_score)
    owner = np.full(n_perf, -1, dtype=np.int64)
    seen = np.zeros(n_perf, dtype=bool)
    for i, j in pairs:
        if not seen[j]:
            owner[j] = note_at[i]
            seen[j] = True

    segments = []
    start = 0
    for j in range(1, n_perf + 1):
        if j == n_perf or owner[j] != owner[start]:
            k = owner[start]
            if k >= 0:
                segments.append(NoteSegment(start, j, score.notes[k].midi, note_index=int(k)))
            start = j
    return segments
