"""Synthetic corpora with controlled statistical structure.

Three families, each targeting a model diagnostic:

  iid_corpus: single-part scores whose duration and per-slot pitch bits
    are drawn independently, so a converged bias model must match the
    counting entropy of the corpus exactly.
  canon_corpus: a leader part drawing pitches uniformly at random and a
    follower repeating the leader at a fixed lag. The follower is
    unpredictable from its own history and fully determined by the
    leader's, separating coupled from independent part models.
  chorale_corpus: four parts over a random harmonic progression, spread
    across all twelve transpositions. Pitch patterns repeat at every
    transposition (rewarding interval-based prediction), duration odds
    depend on beat position and occasional syncopes keep that position
    from being read off recent durations (rewarding the beat-location
    feature), melodic direction reverses after sustained runs and leaps
    resolve by a step the other way (rewarding nonlinear history
    models). Each
    two-beat segment draws its chord uniformly at random, the bass
    sounds the root on the downbeat while the upper voices sit out the
    first half beat, so cross-part context identifies the harmony before
    a part's own line can.

Scores are built directly in the rational-time model; write_corpus
serializes them through the kern path so ingestion tests exercise the
real parser.
"""
from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import numpy as np

from .kern import serialize_kern
from .score import Event, Part, Score

HALF = Fraction(1, 2)


def _rng_for(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


# ----- i.i.d. corpus -----

IID_DURATIONS = (HALF, Fraction(1), Fraction(2))
IID_DUR_PROBS = (0.3, 0.5, 0.2)
IID_PITCHES = (60, 61, 62, 63, 64)
IID_BIT_PROBS = (0.2, 0.5, 0.35, 0.5, 0.25)


def iid_corpus(n_scores: int = 6, beats: int = 16, seed: int = 0) -> list[Score]:
    """Single-part scores of independent events.

    Durations and pitch bits are sampled from fixed marginals; the last
    event is drawn from the durations that still fit so every score has
    the exact requested length.
    """
    corpus = []
    for s in range(n_scores):
        rng = _rng_for(seed, s)
        events, t = [], Fraction(0)
        while t < beats:
            remaining = beats - t
            fits = [i for i, d in enumerate(IID_DURATIONS) if d <= remaining]
            probs = np.array([IID_DUR_PROBS[i] for i in fits])
            probs /= probs.sum()
            d = IID_DURATIONS[fits[int(rng.choice(len(fits), p=probs))]]
            pitches = tuple(p for p, q in zip(IID_PITCHES, IID_BIT_PROBS)
                            if rng.random() < q)
            events.append(Event(d, pitches))
            t += d
        corpus.append(Score(parts=[Part(events)],
                            meta={"title": f"iid {s}"}))
    return corpus


def counting_entropy_rate(corpus: list[Score]) -> tuple[float, float, float]:
    """Empirical entropy of pooled duration and pitch-bit marginals, in
    bits per beat: the exact loss floor of a converged bias model.

    Returns (total, duration part, pitch part).
    """
    durations: dict[Fraction, int] = {}
    bit_counts: dict[int, int] = {}
    n_events = 0
    total_beats = 0.0
    lo = min(p for s in corpus for pt in s.parts for e in pt.events for p in e.pitches)
    hi = max(p for s in corpus for pt in s.parts for e in pt.events for p in e.pitches)
    for s in corpus:
        total_beats += float(s.total_beats)
        for pt in s.parts:
            for e in pt.events:
                n_events += 1
                durations[e.duration] = durations.get(e.duration, 0) + 1
                for p in e.pitches:
                    bit_counts[p] = bit_counts.get(p, 0) + 1
    h_dur = 0.0
    for c in durations.values():
        f = c / n_events
        h_dur -= f * np.log2(f)
    h_bits = 0.0
    for p in range(lo, hi + 1):
        f = bit_counts.get(p, 0) / n_events
        if 0 < f < 1:
            h_bits -= f * np.log2(f) + (1 - f) * np.log2(1 - f)
    loss_t = n_events * h_dur / total_beats
    loss_n = n_events * h_bits / total_beats
    return loss_t + loss_n, loss_t, loss_n


# ----- canon corpus -----

CANON_POOL = (60, 62, 64, 65, 67, 69, 71, 72)


def canon_corpus(n_scores: int = 8, beats: int = 16, seed: int = 0,
                 lag: int = 1) -> list[Score]:
    """Two quarter-note parts: a uniformly random leader and a follower
    repeating the leader `lag` beats later."""
    corpus = []
    for s in range(n_scores):
        rng = _rng_for(seed, s)
        leader = [int(rng.choice(CANON_POOL)) for _ in range(beats)]
        follower = [CANON_POOL[0]] * lag + leader[:beats - lag]
        corpus.append(Score(
            parts=[Part([Event(Fraction(1), (p,)) for p in leader]),
                   Part([Event(Fraction(1), (p,)) for p in follower])],
            meta={"title": f"canon {s}"}))
    return corpus


# ----- chorale corpus -----

# Triad pitch classes per scale degree, relative to the key root.
_TRIADS = {
    "I": (0, 4, 7),
    "ii": (2, 5, 9),
    "iii": (4, 7, 11),
    "IV": (5, 9, 0),
    "V": (7, 11, 2),
    "vi": (9, 0, 4),
}
_DEGREES = tuple(_TRIADS)
_SCALE = (0, 2, 4, 5, 7, 9, 11)

# (center, is_bass) per part, low to high.
_REGISTERS = ((48, True), (55, False), (62, False), (69, False))
_SEGMENT = Fraction(2)  # chord duration in beats


def _nearest_pc(pc: int, around: int, lo: int, hi: int) -> int:
    """Pitch with class pc closest to `around`, kept inside [lo, hi]."""
    base = around + ((pc - around) % 12)
    best = None
    for cand in (base - 24, base - 12, base, base + 12):
        if lo <= cand <= hi:
            if best is None or abs(cand - around) < abs(best - around):
                best = cand
    if best is None:
        raise ValueError(f"register [{lo}, {hi}] cannot hold pitch class {pc}")
    return best


def _upper_duration(rng, t: Fraction) -> Fraction:
    # Mid-beat onsets usually complete the beat; sometimes they cross it
    # as a syncope, so beat position is not recoverable from recent
    # durations alone.
    if t.denominator != 1:
        return Fraction(1) if rng.random() < 0.15 else HALF
    return Fraction(1) if rng.random() < 0.55 else HALF


def _bass_line(rng, key: int, degrees: list[str], beats: int) -> list[Event]:
    lo, hi = 48 - 7, 48 + 8
    events, t = [], Fraction(0)
    while t < beats:
        seg = int(t // _SEGMENT)
        root_pc = (key + _TRIADS[degrees[seg]][0]) % 12
        fifth_pc = (key + _TRIADS[degrees[seg]][2]) % 12
        if t % _SEGMENT == 0:
            if rng.random() < 0.5 and t + 2 <= beats:
                events.append(Event(Fraction(2), (_nearest_pc(root_pc, 48, lo, hi),)))
                t += 2
                continue
            events.append(Event(Fraction(1), (_nearest_pc(root_pc, 48, lo, hi),)))
        else:
            events.append(Event(Fraction(1), (_nearest_pc(fifth_pc, 48, lo, hi),)))
        t += 1
    return events


def _upper_line(rng, key: int, degrees: list[str], beats: int, center: int,
                melodic: bool) -> list[Event]:
    lo, hi = center - 7, center + 8
    events, t = [], Fraction(0)
    prev = center
    direction, streak, last_move = 1, 0, 0
    while t < beats:
        if t % _SEGMENT == 0:
            # tacet while the bass sounds the new chord's root
            events.append(Event(HALF, ()))
            t += HALF
            continue
        seg = int(t // _SEGMENT)
        chord = [(key + o) % 12 for o in _TRIADS[degrees[seg]]]
        scale = [(key + o) % 12 for o in _SCALE]
        d = _upper_duration(rng, t)
        if t + d > beats:
            d = beats - t
        if abs(last_move) >= 3 and rng.random() < 0.9:
            # Leaps resolve: step back against the leap's direction.
            step = 1 if last_move < 0 else -1
            target = min(max(prev + step * int(rng.choice((1, 2))), lo), hi)
            pitch = min((_nearest_pc(pc, target, lo, hi) for pc in scale),
                        key=lambda p: (abs(p - target), p))
        elif melodic:
            # Runs reverse after two moves in the same direction.
            p_flip = 0.8 if streak >= 2 else 0.2
            heading = -direction if rng.random() < p_flip else direction
            target = min(max(prev + heading * int(rng.choice((1, 2))), lo), hi)
            if t.denominator == 1 and rng.random() < 0.8:
                pcs = chord
            else:
                pcs = scale
            pitch = min((_nearest_pc(pc, target, lo, hi) for pc in pcs),
                        key=lambda p: (abs(p - target), p))
        else:
            if t.denominator != 1 and rng.random() < 0.25:
                pitch = min((_nearest_pc(pc, prev, lo, hi) for pc in scale),
                            key=lambda p: (abs(p - prev), p))
            else:
                jitter = int(rng.choice((-3, -2, -1, 0, 1, 2, 3)))
                pitch = min((_nearest_pc(pc, prev + jitter, lo, hi) for pc in chord),
                            key=lambda p: (abs(p - prev - jitter), p))
        if pitch != prev:
            moved = 1 if pitch > prev else -1
            streak = streak + 1 if moved == direction else 1
            direction = moved
        last_move = pitch - prev
        events.append(Event(d, (pitch,)))
        prev = pitch
        t += d
    return events


def chorale_corpus(n_scores: int = 24, beats: int = 16, seed: int = 0) -> list[Score]:
    """Four-part scores over a random progression, one key per score
    cycling through all twelve transpositions."""
    corpus = []
    for s in range(n_scores):
        rng = _rng_for(seed, s)
        key = s % 12
        n_segments = int(Fraction(beats) / _SEGMENT)
        # Uniform independent chords: a part's own history carries no
        # information about the next segment that other parts lack.
        degrees = ["I"] + [_DEGREES[int(rng.integers(0, len(_DEGREES)))]
                           for _ in range(n_segments - 1)]
        parts = []
        for center, is_bass in _REGISTERS:
            if is_bass:
                parts.append(Part(_bass_line(rng, key, degrees, beats)))
            else:
                melodic = center == _REGISTERS[-1][0]
                parts.append(Part(_upper_line(rng, key, degrees, beats,
                                              center, melodic)))
        corpus.append(Score(parts=parts, meta={"title": f"chorale {s} key {key}"}))
    return corpus


def write_corpus(corpus: list[Score], directory, prefix: str = "score") -> list[Path]:
    """Serialize every score to `<prefix>NNN.krn` under `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, score in enumerate(corpus):
        path = directory / f"{prefix}{i:03d}.krn"
        path.write_text(serialize_kern(score), encoding="utf-8")
        paths.append(path)
    return paths
