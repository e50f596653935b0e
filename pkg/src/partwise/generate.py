"""Ancestral score generation with least-advanced-part scheduling.

The sampler is the generative dual of teacher-forced evaluation: the next
prediction always belongs to the part whose clock has advanced the least
(ties broken by the fixed part order), so every event is conditioned on
exactly the rows a teacher-forced pass would see. Durations are drawn
from the softmax over real duration classes, then pitch bits are drawn
low to high, each conditioned on the bits already decided below it. An
all-zero draw is a rest.

History windows are rebuilt from the partial score at every step. Only
rows strictly before the prediction time are consumed, and min-clock
scheduling guarantees those rows are final, so the windows match what
the same model sees when scoring the finished piece.
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .coupled import CoupledModel
from .encode import DurationVocab, PitchRange, location_feature
from .score import Event, Part, Score


@dataclass
class GenerationState:
    """Clocks and emitted events for one in-flight generation."""

    n_parts: int
    seed: int | None = None
    events: list[list[Event]] = field(default_factory=list)
    clocks: list[Fraction] = field(default_factory=list)

    def __post_init__(self):
        if not self.events:
            self.events = [[] for _ in range(self.n_parts)]
        if not self.clocks:
            self.clocks = [Fraction(0)] * self.n_parts

    def scheduled_part(self) -> int:
        """Least advanced part; ties go to the lowest part index."""
        return min(range(self.n_parts), key=lambda p: (self.clocks[p], p))

    def advance(self, part: int, ev: Event) -> None:
        self.events[part].append(ev)
        self.clocks[part] += ev.duration

    def min_clock(self) -> Fraction:
        return min(self.clocks)


def _onsets(events: list[Event]) -> list[Fraction]:
    out, t = [], Fraction(0)
    for e in events:
        out.append(t)
        t += e.duration
    return out


def _grid_window(state: GenerationState, t0: Fraction, k: int,
                 vocab: DurationVocab, pitch_range: PitchRange) -> np.ndarray:
    """Last k change-point rows strictly before t0, zero-padded at the old
    end. Shape (k, P, N+D), matching the frame grid of the finished score
    row for row."""
    P = state.n_parts
    n, d = pitch_range.n, vocab.size
    onsets = [_onsets(evs) for evs in state.events]
    boundaries = sorted({t for o in onsets for t in o if t < t0})[-k:]
    rows = np.zeros((k, P, n + d))
    for j, tb in enumerate(boundaries, start=k - len(boundaries)):
        for p in range(P):
            i = bisect_right(onsets[p], tb) - 1
            ev = state.events[p][i]
            rows[j, p, :n] = pitch_range.multi_hot(ev.pitches)
            if onsets[p][i] == tb:
                rows[j, p, n + 1 + vocab.real_index(ev.duration)] = 1.0
            else:
                rows[j, p, n] = 1.0
    return rows


def _event_window(events: list[Event], k: int, vocab: DurationVocab,
                  pitch_range: PitchRange) -> np.ndarray:
    """The part's last k events as onset rows, zero-padded. Shape (k, N+D)."""
    n, d = pitch_range.n, vocab.size
    rows = np.zeros((k, n + d))
    tail = events[-k:] if k else []
    for j, ev in enumerate(tail, start=k - len(tail)):
        rows[j, :n] = pitch_range.multi_hot(ev.pitches)
        rows[j, n + 1 + vocab.real_index(ev.duration)] = 1.0
    return rows


def _sample_categorical(logits: np.ndarray, rng, temperature: float) -> int:
    if temperature == 0:
        return int(np.argmax(logits))
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def _sample_bit(logit: float, rng, temperature: float) -> float:
    if temperature == 0:
        return 1.0 if logit > 0 else 0.0
    p = 1.0 / (1.0 + np.exp(-logit / temperature))
    return 1.0 if rng.random() < p else 0.0


def sample_event(model, gen: GenerationState, rng,
                 temperature: float = 1.0) -> Event:
    """Draw one event for the scheduled part and advance its clock."""
    part = gen.scheduled_part()
    t0 = gen.clocks[part]
    vocab, pitch_range = model.vocab, model.pitch_range
    loc = (location_feature(t0, model.resolution)
           if model.spec.use_location else None)

    if isinstance(model, CoupledModel):
        windows = _grid_window(gen, t0, model.spec.part_history_k,
                               vocab, pitch_range)
        dur_logits, cache = model.predict_heads(windows, loc, part)
        y_t = _sample_categorical(dur_logits, rng, temperature)
        bits = np.zeros(pitch_range.n)
        for c in range(pitch_range.n):
            logit = model.pitch_logit(cache, y_t, bits, c)
            bits[c] = _sample_bit(logit, rng, temperature)
    else:
        if model.spec.interspersed:
            hist = _grid_window(gen, t0, model.spec.history_k,
                                vocab, pitch_range)[:, part, :]
        else:
            hist = _event_window(gen.events[part], model.spec.history_k,
                                 vocab, pitch_range)
        dur_logits = model.predict_duration(hist, loc)
        y_t = _sample_categorical(dur_logits, rng, temperature)
        feat = model.pitch_feature_cache(hist)
        bits = np.zeros(pitch_range.n)
        for c in range(pitch_range.n):
            logit = model.predict_pitch_bit(hist, y_t, bits,
                                            pitch_range.lo + c, feat)
            bits[c] = _sample_bit(logit, rng, temperature)

    pitches = tuple(pitch_range.lo + int(c) for c in np.flatnonzero(bits))
    ev = Event(vocab.duration_at(y_t), pitches)
    gen.advance(part, ev)
    return ev


def generate(model, n_parts: int, length_beats, seed: int | None = None,
             temperature: float = 1.0) -> Score:
    """Sample a complete score of the requested length.

    Events are drawn until every part clock reaches length_beats; final
    events are truncated at the boundary so all parts end together.
    """
    if isinstance(model, CoupledModel) and n_parts > model.max_parts:
        raise ValueError(f"{n_parts} parts exceeds model maximum {model.max_parts}")
    length = Fraction(length_beats)
    gen = GenerationState(n_parts, seed=seed)
    rng = np.random.default_rng(seed)
    while gen.min_clock() < length:
        sample_event(model, gen, rng, temperature=temperature)
    parts = []
    for p in range(n_parts):
        evs = list(gen.events[p])
        if gen.clocks[p] > length:
            last = evs[-1]
            evs[-1] = Event(last.duration - (gen.clocks[p] - length),
                            last.pitches)
        parts.append(Part(evs))
    score = Score(parts=parts)
    score.validate(max_parts=max(n_parts, 1))
    return score
