"""Score encodings feeding the predictors.

The central object is the frame grid: the score is cut at the union of all
parts' event onset times, and each segment becomes one row per part. A row
where the part's event begins carries that event's full duration as a
one-hot plus its pitches as a multi-hot; rows where the event is still
sounding carry the reserved continuation slot with the same pitch bits
repeated. Histories, targets, location and pitch-class features, relative
(recentered) views, and pitch embeddings are all derived from this grid.

Two comparison encoders from older conventions (a sampled on/onset piano
roll and a start/advance/stop instruction stream) are included for
reference experiments only.
"""
from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .score import Event, Score


class EncodingError(Exception):
    """Base class for encoding failures."""


class UnknownDuration(EncodingError):
    def __init__(self, value: Fraction):
        self.value = value
        super().__init__(f"duration {value} beats not in vocabulary")


class PitchOutOfRange(EncodingError):
    def __init__(self, pitch: int, lo: int, hi: int):
        self.pitch = pitch
        super().__init__(f"pitch {pitch} outside [{lo}, {hi})")


class UnrepresentableAtResolution(EncodingError):
    def __init__(self, value: Fraction, delta: Fraction):
        super().__init__(f"{value} beats is not a multiple of frame length {delta}")


@dataclass
class OOVCounter:
    """Tallies out-of-vocabulary events absorbed instead of raised.

    Pass one to the encoders at eval time: unseen durations map to the
    nearest vocabulary entry and out-of-range pitches clamp to the range
    edge, each incrementing its counter. Without a counter both are errors.
    """

    durations: int = 0
    pitches: int = 0


@dataclass(frozen=True)
class Resolution:
    """Frame length delta in beats; every corpus time is a multiple of it."""

    delta: Fraction

    @property
    def frames_per_beat(self) -> int:
        return self.delta.denominator  # delta = 1/lcm by construction

    def to_json(self) -> dict:
        return {"delta": str(self.delta)}

    @staticmethod
    def from_json(obj: dict) -> "Resolution":
        return Resolution(Fraction(obj["delta"]))


def compute_resolution(corpus: list[Score]) -> Resolution:
    """Finest frame length: 1 / lcm of all onset and duration denominators."""
    if not corpus:
        raise EncodingError("empty corpus")
    denom = 1
    for score in corpus:
        for p in score.parts:
            t = Fraction(0)
            for ev in p.events:
                denom = math.lcm(denom, t.denominator, ev.duration.denominator)
                t += ev.duration
    return Resolution(Fraction(1, denom))


@dataclass(frozen=True)
class DurationVocab:
    """Duration classes: index 0 is the continuation slot '*', the rest are
    the distinct training-set durations in ascending order."""

    durations: tuple[Fraction, ...]

    def __post_init__(self):
        if list(self.durations) != sorted(set(self.durations)):
            raise ValueError("durations must be sorted and distinct")
        if any(d <= 0 for d in self.durations):
            raise ValueError("durations must be positive")

    @staticmethod
    def from_corpus(corpus: list[Score]) -> "DurationVocab":
        seen = {ev.duration for s in corpus for p in s.parts for ev in p.events}
        if not seen:
            raise EncodingError("no events in corpus")
        return DurationVocab(tuple(sorted(seen)))

    @property
    def size(self) -> int:
        """D: real durations plus the continuation slot."""
        return len(self.durations) + 1

    @property
    def n_real(self) -> int:
        return len(self.durations)

    def real_index(self, d: Fraction, oov: OOVCounter | None = None) -> int:
        """Index into the real durations (0-based, continuation excluded)."""
        i = bisect_left(self.durations, d)
        if i < len(self.durations) and self.durations[i] == d:
            return i
        if oov is None:
            raise UnknownDuration(d)
        oov.durations += 1
        best = min(range(len(self.durations)), key=lambda j: (abs(self.durations[j] - d), j))
        return best

    def duration_at(self, real_index: int) -> Fraction:
        return self.durations[real_index]

    def to_json(self) -> dict:
        return {"durations": [str(d) for d in self.durations]}

    @staticmethod
    def from_json(obj: dict) -> "DurationVocab":
        return DurationVocab(tuple(Fraction(s) for s in obj["durations"]))


@dataclass(frozen=True)
class PitchRange:
    """Half-open MIDI window [lo, hi); N = hi - lo pitch slots."""

    lo: int
    hi: int

    def __post_init__(self):
        if self.hi <= self.lo:
            raise ValueError("empty pitch range")

    @property
    def n(self) -> int:
        return self.hi - self.lo

    @staticmethod
    def from_corpus(corpus: list[Score], lo_cap: int = 21, hi_cap: int = 109) -> "PitchRange":
        pitches = [n for s in corpus for p in s.parts for ev in p.events for n in ev.pitches]
        if not pitches:
            return PitchRange(lo_cap, hi_cap)
        return PitchRange(max(lo_cap, min(pitches)), min(hi_cap, max(pitches) + 1))

    def index(self, pitch: int, oov: OOVCounter | None = None) -> int:
        if self.lo <= pitch < self.hi:
            return pitch - self.lo
        if oov is None:
            raise PitchOutOfRange(pitch, self.lo, self.hi)
        oov.pitches += 1
        return 0 if pitch < self.lo else self.n - 1

    def multi_hot(self, pitches, oov: OOVCounter | None = None) -> np.ndarray:
        v = np.zeros(self.n)
        for p in pitches:
            v[self.index(p, oov)] = 1.0
        return v

    def to_json(self) -> dict:
        return {"lo": self.lo, "hi": self.hi}

    @staticmethod
    def from_json(obj: dict) -> "PitchRange":
        return PitchRange(int(obj["lo"]), int(obj["hi"]))


@dataclass(frozen=True)
class EventTargets:
    """What the model must predict at one event onset."""

    duration_real_index: int
    duration: Fraction
    pitch_bits: np.ndarray  # (N,)
    pitches: tuple[int, ...]
    onset: Fraction


@dataclass
class FrameGrid:
    """Change-point discretization of a whole score.

    data[t, p, :N] are pitch bits, data[t, p, N:N+D] the duration slot
    (slot 0 = continuation). Row t covers [times[t], ends[t]).
    """

    data: np.ndarray
    times: list[Fraction]
    ends: list[Fraction]
    onset: np.ndarray        # (T, P) bool
    event_index: np.ndarray  # (T, P) int
    vocab: DurationVocab
    pitch_range: PitchRange

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_parts(self) -> int:
        return self.data.shape[1]

    def rows_before(self, t: Fraction) -> int:
        """Count of rows starting strictly before time t."""
        return bisect_left(self.times, t)

    def history(self, t: Fraction, k: int) -> np.ndarray:
        """Last k rows before t, zero-padded at the old end. Shape (k, P, F)."""
        end = self.rows_before(t)
        start = max(0, end - k)
        rows = self.data[start:end]
        if end - start < k:
            pad = np.zeros((k - (end - start),) + self.data.shape[1:])
            rows = np.concatenate([pad, rows], axis=0)
        return rows

    def decode(self) -> list[list[Event]]:
        """Recover each part's event sequence from the binary rows alone."""
        n = self.pitch_range.n
        out: list[list[Event]] = []
        for p in range(self.n_parts):
            events: list[Event] = []
            for t in range(self.n_frames):
                if not self.onset[t, p]:
                    continue
                slot = int(np.argmax(self.data[t, p, n:]))
                if slot == 0:
                    raise EncodingError(f"onset row {t} part {p} marked as continuation")
                pitches = tuple(int(i) + self.pitch_range.lo
                                for i in np.flatnonzero(self.data[t, p, :n]))
                events.append(Event(self.vocab.duration_at(slot - 1), pitches))
            out.append(events)
        return out


def build_frame_grid(score: Score, vocab: DurationVocab, pitch_range: PitchRange,
                     oov: OOVCounter | None = None) -> FrameGrid:
    P = score.n_parts
    onsets = [p.onsets() for p in score.parts]
    boundaries = sorted({t for o in onsets for t in o})
    total = score.total_beats
    n, d = pitch_range.n, vocab.size
    T = len(boundaries)
    data = np.zeros((T, P, n + d))
    onset = np.zeros((T, P), dtype=bool)
    event_index = np.zeros((T, P), dtype=int)
    for p in range(P):
        part_onsets = onsets[p]
        for t, tb in enumerate(boundaries):
            i = bisect_right(part_onsets, tb) - 1
            ev = score.parts[p].events[i]
            event_index[t, p] = i
            data[t, p, :n] = pitch_range.multi_hot(ev.pitches, oov)
            if part_onsets[i] == tb:
                onset[t, p] = True
                data[t, p, n + 1 + vocab.real_index(ev.duration, oov)] = 1.0
            else:
                data[t, p, n] = 1.0  # continuation slot
    ends = boundaries[1:] + [total]
    return FrameGrid(data, boundaries, ends, onset, event_index, vocab, pitch_range)


def event_targets(ev: Event, onset: Fraction, vocab: DurationVocab,
                  pitch_range: PitchRange, oov: OOVCounter | None = None) -> EventTargets:
    return EventTargets(
        duration_real_index=vocab.real_index(ev.duration, oov),
        duration=ev.duration,
        pitch_bits=pitch_range.multi_hot(ev.pitches, oov),
        pitches=ev.pitches,
        onset=onset,
    )


def encode_history(score: Score, part: int, event_index: int, k: int,
                   vocab: DurationVocab, pitch_range: PitchRange,
                   resolution: Resolution | None = None,
                   grid: FrameGrid | None = None,
                   oov: OOVCounter | None = None):
    """Full-score history at one event onset.

    Returns (history (k, P, N+D), location one-hot, targets): the k grid
    rows strictly before the event's onset across all parts, the onset's
    beat-subdivision feature, and the duration index plus pitch bits to
    predict.
    """
    if grid is None:
        grid = build_frame_grid(score, vocab, pitch_range, oov)
    t0 = score.parts[part].onsets()[event_index]
    hist = grid.history(t0, k)
    res = resolution or compute_resolution([score])
    loc = location_feature(t0, res)
    targets = event_targets(score.parts[part].events[event_index], t0, vocab,
                            pitch_range, oov)
    return hist, loc, targets


def encode_part_events(score: Score, part: int, event_index: int, k: int,
                       vocab: DurationVocab, pitch_range: PitchRange,
                       resolution: Resolution | None = None,
                       oov: OOVCounter | None = None):
    """Single-part event history: the part's last k events, most recent
    last, zero-padded at the old end, with no continuation rows. Shape
    (k, N+D)."""
    p = score.parts[part]
    n, d = pitch_range.n, vocab.size
    rows = np.zeros((k, n + d))
    start = max(0, event_index - k)
    for j, i in enumerate(range(start, event_index)):
        row = rows[k - (event_index - start) + j]
        ev = p.events[i]
        row[:n] = pitch_range.multi_hot(ev.pitches, oov)
        row[n + 1 + vocab.real_index(ev.duration, oov)] = 1.0
    t0 = p.onsets()[event_index]
    res = resolution or compute_resolution([score])
    loc = location_feature(t0, res)
    targets = event_targets(p.events[event_index], t0, vocab, pitch_range, oov)
    return rows, loc, targets


def location_feature(t: Fraction, resolution: Resolution) -> np.ndarray:
    """One-hot beat subdivision of a prediction time; dim = frames per beat."""
    fpb = resolution.frames_per_beat
    frac = t - (t.numerator // t.denominator)
    slot = frac * fpb
    if slot.denominator != 1:
        raise UnrepresentableAtResolution(t, resolution.delta)
    v = np.zeros(fpb)
    v[int(slot)] = 1.0
    return v


def pitch_class_feature(n: int, pitch_range: PitchRange) -> np.ndarray:
    """One-hot identity of the pitch slot being predicted."""
    v = np.zeros(pitch_range.n)
    v[pitch_range.index(n)] = 1.0
    return v


def recenter_bits(bits: np.ndarray, center: int, pitch_range: PitchRange) -> np.ndarray:
    """Translate an N-slot pitch axis onto a widened 2N-1 axis so that
    `center` lands on the middle slot. Works on any leading shape."""
    n = pitch_range.n
    c = pitch_range.index(center)
    out = np.zeros(bits.shape[:-1] + (2 * n - 1,))
    start = (n - 1) - c
    out[..., start:start + n] = bits
    return out


def relative_view(h: np.ndarray, center: int, pitch_range: PitchRange) -> np.ndarray:
    """History tensor recentered at the query pitch: pitch block widened to
    2N-1 and shifted, duration block passed through unchanged."""
    n = pitch_range.n
    pitch = recenter_bits(h[..., :n], center, pitch_range)
    return np.concatenate([pitch, h[..., n:]], axis=-1)


@dataclass(frozen=True)
class PitchEmbedding:
    """Dense pitch features replacing the multi-hot block.

    fixed-octave: each axis slot maps to the one-hot of its pitch class
    (absolute axis) or interval class from the center (relative axis).
    learned: free weights, trained with the model.
    """

    kind: str
    weights: np.ndarray  # (axis_size, dim)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @staticmethod
    def fixed_octave(pitch_range: PitchRange) -> "PitchEmbedding":
        w = np.zeros((pitch_range.n, 12))
        for i in range(pitch_range.n):
            w[i, (pitch_range.lo + i) % 12] = 1.0
        return PitchEmbedding("fixed-octave", w)

    @staticmethod
    def fixed_octave_relative(pitch_range: PitchRange) -> "PitchEmbedding":
        n = pitch_range.n
        w = np.zeros((2 * n - 1, 12))
        for j in range(2 * n - 1):
            w[j, (j - (n - 1)) % 12] = 1.0
        return PitchEmbedding("fixed-octave", w)

    @staticmethod
    def learned(axis_size: int, dim: int = 16,
                rng: np.random.Generator | None = None) -> "PitchEmbedding":
        rng = rng or np.random.default_rng(0)
        scale = 1.0 / math.sqrt(axis_size)
        return PitchEmbedding("learned", rng.uniform(-scale, scale, (axis_size, dim)))


def embed(h: np.ndarray, e: PitchEmbedding) -> np.ndarray:
    """Replace the pitch block with summed embedding rows of the set bits."""
    a = e.weights.shape[0]
    return np.concatenate([h[..., :a] @ e.weights, h[..., a:]], axis=-1)


def encode_discrete_grid(score: Score, delta: Fraction,
                         pitch_range: PitchRange | None = None) -> np.ndarray:
    """Uniformly sampled piano roll: shape (T, P, N, 2) with an on bit and
    an onset bit per pitch slot, T = total beats / delta frames."""
    pr = pitch_range or PitchRange(0, 128)
    total = score.total_beats
    frames = total / delta
    if frames.denominator != 1:
        raise UnrepresentableAtResolution(total, delta)
    T, P, N = int(frames), score.n_parts, pr.n
    grid = np.zeros((T, P, N, 2))
    for p_idx, part in enumerate(score.parts):
        t = Fraction(0)
        for ev in part.events:
            start, span = t / delta, ev.duration / delta
            if start.denominator != 1 or span.denominator != 1:
                raise UnrepresentableAtResolution(ev.duration, delta)
            for pitch in ev.pitches:
                i = pr.index(pitch)
                grid[int(start):int(start + span), p_idx, i, 0] = 1.0
                grid[int(start), p_idx, i, 1] = 1.0
            t += ev.duration
    return grid


def decode_discrete_grid(grid: np.ndarray, delta: Fraction,
                         pitch_range: PitchRange | None = None) -> list[list[Event]]:
    """Invert encode_discrete_grid. Rest spans have no bits, so consecutive
    rests come back merged; pitched content is exact via the onset bit."""
    pr = pitch_range or PitchRange(0, 128)
    T, P = grid.shape[0], grid.shape[1]
    parts: list[list[Event]] = []
    for p in range(P):
        events: list[Event] = []
        t = 0
        while t < T:
            on = np.flatnonzero(grid[t, p, :, 0])
            if on.size and grid[t, p, on, 1].all():
                span = 1
                while (t + span < T and not grid[t + span, p, :, 1].any()
                       and np.array_equal(np.flatnonzero(grid[t + span, p, :, 0]), on)):
                    span += 1
                pitches = tuple(int(i) + pr.lo for i in on)
            elif on.size:
                raise EncodingError(f"frame {t} part {p}: note on without onset")
            else:
                span = 1
                while t + span < T and not grid[t + span, p, :, 0].any():
                    span += 1
                pitches = ()
            events.append(Event(span * delta, pitches))
            t += span
        parts.append(events)
    return parts


def encode_runlength(score: Score) -> list[tuple]:
    """Instruction-stream encoding: per part, start/advance/stop triples
    per event. Rests are bare advances."""
    out: list[tuple] = []
    for p_idx, part in enumerate(score.parts):
        out.append(("part", p_idx))
        for ev in part.events:
            for n in ev.pitches:
                out.append(("start", n))
            out.append(("advance", ev.duration))
            for n in ev.pitches:
                out.append(("stop", n))
    return out


def decode_runlength(instructions: list[tuple]) -> list[list[Event]]:
    parts: list[list[Event]] = []
    current: list[Event] | None = None
    sounding: set[int] = set()
    for ins in instructions:
        op = ins[0]
        if op == "part":
            current = []
            parts.append(current)
            sounding = set()
        elif op == "start":
            sounding.add(ins[1])
        elif op == "advance":
            current.append(Event(ins[1], tuple(sorted(sounding))))
        elif op == "stop":
            sounding.discard(ins[1])
        else:
            raise EncodingError(f"unknown instruction {ins!r}")
    return parts
