"""Rational-time score model: events, parts, scores, and part flows.

Time is measured in beats (quarter note = 1 beat) and represented exactly
with `fractions.Fraction`; no float arithmetic touches musical time.
Pitches are MIDI semitone numbers (middle C = 60).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

# Type alias used throughout: exact beat values.
Beats = Fraction

MIDI_MIN = 0
MIDI_MAX = 127

# Default upper bound on concurrent parts, matching the corpus this model
# family targets (string quartets plus annotated piano sub-voices).
DEFAULT_MAX_PARTS = 6


def beats(num: int, den: int = 1) -> Fraction:
    """Shorthand for exact beat values in tests and fixtures."""
    return Fraction(num, den)


@dataclass(frozen=True)
class Event:
    """One homophonic event: a note, chord, or rest of exact duration.

    `pitches` is a sorted tuple of distinct MIDI numbers; empty means rest.
    """

    duration: Fraction
    pitches: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError(f"event duration must be positive, got {self.duration}")
        ps = tuple(sorted(set(self.pitches)))
        if ps != tuple(self.pitches):
            object.__setattr__(self, "pitches", ps)
        for p in ps:
            if not (MIDI_MIN <= p <= MIDI_MAX):
                raise ValueError(f"pitch {p} outside MIDI range")

    @property
    def is_rest(self) -> bool:
        return not self.pitches


def event(duration: Fraction | int, pitches: Iterable[int] = ()) -> Event:
    return Event(Fraction(duration), tuple(pitches))


@dataclass
class Part:
    """An ordered, gapless sequence of homophonic events."""

    events: list[Event] = field(default_factory=list)

    @property
    def total_beats(self) -> Fraction:
        return sum((e.duration for e in self.events), Fraction(0))

    def onsets(self) -> list[Fraction]:
        """Onset time of each event (prefix sums of durations)."""
        out, t = [], Fraction(0)
        for e in self.events:
            out.append(t)
            t += e.duration
        return out


@dataclass
class Score:
    """A fixed-order collection of equal-length parts plus part-flow history.

    `flows` records, at exact times, the 0/1 matrix mapping previous part
    slots to new part slots: row i holds 1 in column j when slot i's state
    is drawn from slot j (splits duplicate a column into two rows, merges
    sum two columns into one row). A flow-free score carries the single
    entry (0, identity).
    """

    parts: list[Part] = field(default_factory=list)
    flows: list[tuple[Fraction, np.ndarray]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.flows and self.parts:
            self.flows = [(Fraction(0), np.eye(len(self.parts)))]

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def total_beats(self) -> Fraction:
        if not self.parts:
            return Fraction(0)
        return self.parts[0].total_beats

    def n_events(self) -> int:
        return sum(len(p.events) for p in self.parts)

    def has_nonidentity_flows(self) -> bool:
        return any(not np.array_equal(m, np.eye(m.shape[0])) for _, m in self.flows)

    def validate(self, max_parts: int = DEFAULT_MAX_PARTS) -> None:
        """Check the structural invariants; raise ValueError on violation."""
        if self.parts and not (1 <= len(self.parts) <= max_parts):
            raise ValueError(f"part count {len(self.parts)} outside [1, {max_parts}]")
        lengths = {p.total_beats for p in self.parts}
        if len(lengths) > 1:
            raise ValueError(f"parts have unequal total lengths: {sorted(lengths)}")
        p = len(self.parts)
        for t, m in self.flows:
            if m.shape != (p, p):
                raise ValueError(f"flow at {t} has shape {m.shape}, expected {(p, p)}")
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"flow at {t} is not a 0/1 matrix")

    def events_in_order(self) -> list[tuple[Fraction, int, int, Event]]:
        """All events as (onset, part index, event index, event), sorted by
        onset time with ties broken by the fixed part order."""
        out = []
        for p_idx, part in enumerate(self.parts):
            for e_idx, (t, ev) in enumerate(zip(part.onsets(), part.events)):
                out.append((t, p_idx, e_idx, ev))
        out.sort(key=lambda r: (r[0], r[1], r[2]))
        return out


def score_from_events(part_events: Sequence[Sequence[Event]], meta: dict | None = None) -> Score:
    """Build a flow-free Score from per-part event lists."""
    s = Score(parts=[Part(list(evs)) for evs in part_events], meta=dict(meta or {}))
    return s


def events_equal(a: Score, b: Score) -> bool:
    """Event-level equality: same parts, same event sequences."""
    if a.n_parts != b.n_parts:
        return False
    return all(pa.events == pb.events for pa, pb in zip(a.parts, b.parts))
