"""Humdrum **kern ingestion and serialization.

Reads tab-separated **kern spines into the exact rational-time score model:
durations become beat fractions (quarter note = 1 beat), ties are merged
into single events, chords become pitch sets, and spine splits/merges are
resolved into a fixed set of part tracks plus a sequence of 0/1 flow
matrices (a split duplicates a source column into a new row, a merge sums
source columns into the surviving row).

The writer emits the same dialect, aligning simultaneous onsets on shared
data records, so generated scores are directly viewable in standard
Humdrum renderers. For flow-free scores, parse(serialize(s)) round-trips
at the event level.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .score import DEFAULT_MAX_PARTS, Event, Part, Score


class KernError(Exception):
    """Base class for kern ingestion failures."""


class UnparseableToken(KernError):
    def __init__(self, line: int, col: int, token: str, reason: str = ""):
        self.line, self.col, self.token = line, col, token
        msg = f"line {line}, spine {col}: cannot parse token {token!r}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class InconsistentSpineCount(KernError):
    def __init__(self, line: int, expected: int, got: int):
        self.line = line
        super().__init__(f"line {line}: expected {expected} spines, got {got}")


class UnsupportedConstruct(KernError):
    def __init__(self, name: str, line: int | None = None):
        self.name = name
        where = f" at line {line}" if line is not None else ""
        super().__init__(f"unsupported kern construct {name!r}{where}")


class TooManyParts(KernError):
    def __init__(self, needed: int, limit: int):
        super().__init__(f"score requires {needed} part tracks, limit is {limit}")


class UnrepresentableDuration(KernError):
    def __init__(self, value: Fraction):
        self.value = value
        super().__init__(f"duration {value} beats has no kern representation")


@dataclass(frozen=True)
class ParseOptions:
    """Knobs exposed on the CLI: strictness and the part-track ceiling."""

    max_parts: int = DEFAULT_MAX_PARTS
    strict: bool = False  # strict: unknown token characters are fatal


# Characters that decorate note tokens without affecting pitch or duration:
# beams, slurs, articulations, ornaments, editorial and layout marks.
_DECORATIONS = set("LJKkMmWwTtSsZzOoIiPpNnXxYyUuVvR$&(){}<>'\"`~^:;,/\\@+|=")

_RECIP_RE = re.compile(r"(\d+)(?:%(\d+))?")

# Pitch-class spelling used by the serializer (flats on 3 and 10, sharps
# elsewhere, matching common kern practice).
_PC_NAMES = {0: "c", 1: "c#", 2: "d", 3: "e-", 4: "e", 5: "f", 6: "f#",
             7: "g", 8: "g#", 9: "a", 10: "b-", 11: "b"}
_LETTER_PC = {"c": 0, "d": 2, "e": 4, "f": 5, "g": 7, "a": 9, "b": 11}


def recip_to_beats(recip: str, dots: int) -> Fraction:
    """Convert a kern duration number to beats.

    `n` is 1/n of a whole note (4/n beats); `0`, `00`, ... are breve,
    longa, ...; the rational extension `n%m` is m/n whole notes. Each dot
    extends by half the previous extension.
    """
    m = _RECIP_RE.fullmatch(recip)
    if m is None:
        raise ValueError(f"bad recip {recip!r}")
    num = m.group(1)
    if m.group(2) is not None:
        base = Fraction(4 * int(m.group(2)), int(num))
    elif set(num) == {"0"}:
        base = Fraction(4 * 2 ** len(num))  # breve, longa, maxima
    else:
        base = Fraction(4, int(num))
    if dots:
        base *= Fraction(2 ** (dots + 1) - 1, 2 ** dots)
    return base


def beats_to_recip(value: Fraction) -> str:
    """Inverse of recip_to_beats, preferring plain and dotted binary forms."""
    if value <= 0:
        raise UnrepresentableDuration(value)
    plain = Fraction(4, 1) / value
    if plain.denominator == 1 and plain >= 1:
        return str(plain.numerator)
    for dots in (1, 2):
        factor = Fraction(2 ** (dots + 1) - 1, 2 ** dots)
        base = Fraction(4, 1) / (value / factor)
        if base.denominator == 1 and base >= 1:
            return f"{base.numerator}{'.' * dots}"
    # Any remaining positive rational via the n%m extension: m/n whole notes.
    whole = value / 4
    return f"{whole.denominator}%{whole.numerator}"


def kern_pitch_to_midi(letters: str, accidental: int) -> int:
    """Kern pitch name to MIDI number: `c`=C4=60, `cc`=C5, `C`=C3, `CC`=C2."""
    letter = letters[0].lower()
    if letter not in _LETTER_PC or set(letters.lower()) != {letter}:
        raise ValueError(f"bad kern pitch letters {letters!r}")
    count = len(letters)
    octave = 3 + count if letters[0].islower() else 4 - count
    return 12 * (octave + 1) + _LETTER_PC[letter] + accidental


def midi_to_kern_pitch(midi: int) -> str:
    octave, pc = divmod(midi, 12)
    octave -= 1
    name = _PC_NAMES[pc]
    letter, accidental = name[0], name[1:]
    count = octave - 3 if octave >= 4 else 4 - octave
    body = letter * count if octave >= 4 else (letter.upper() * count)
    return body + accidental


@dataclass
class _NoteToken:
    """One note (or rest) inside a data token, after character scanning."""

    duration: Fraction | None
    pitch: int | None  # None for rests
    is_rest: bool
    tie_open: bool
    tie_close: bool
    tie_continue: bool
    grace: bool


def _scan_note(note: str, line_no: int, col: int, opts: ParseOptions,
               counts: dict) -> _NoteToken:
    recip_digits = ""
    dots = 0
    letters = ""
    accidental = 0
    saw_accidental = False
    is_rest = False
    tie_open = tie_close = tie_cont = grace = False
    i = 0
    while i < len(note):
        ch = note[i]
        if ch.isdigit() or ch == "%":
            if letters or is_rest:
                # trailing digits (e.g. fingering) are decoration
                counts["skipped_chars"] = counts.get("skipped_chars", 0) + 1
            else:
                recip_digits += ch
        elif ch == ".":
            dots += 1
        elif ch in "abcdefgABCDEFG" and not letters and not is_rest:
            j = i
            while j < len(note) and note[j] == ch:
                j += 1
            letters = note[i:j]
            i = j
            continue
        elif ch == "r" and not letters:
            is_rest = True
        elif ch in "#-n" and letters and not is_rest:
            saw_accidental = True
            if ch == "#":
                accidental += 1
            elif ch == "-":
                accidental -= 1
            # 'n' (natural) leaves the letter pitch unchanged
        elif ch == "[":
            tie_open = True
        elif ch == "]":
            tie_close = True
        elif ch == "_":
            tie_cont = True
        elif ch in "qQ":
            grace = True
        elif ch in _DECORATIONS:
            counts["skipped_chars"] = counts.get("skipped_chars", 0) + 1
        else:
            if opts.strict:
                raise UnparseableToken(line_no, col, note, f"unknown character {ch!r}")
            counts["skipped_chars"] = counts.get("skipped_chars", 0) + 1
        i += 1

    duration = None
    if recip_digits:
        try:
            duration = recip_to_beats(recip_digits, dots)
        except (ValueError, ZeroDivisionError):
            raise UnparseableToken(line_no, col, note, f"bad duration {recip_digits!r}")
    pitch = None
    if letters:
        try:
            pitch = kern_pitch_to_midi(letters, accidental)
        except ValueError as exc:
            raise UnparseableToken(line_no, col, note, str(exc))
    if not is_rest and pitch is None and not grace:
        raise UnparseableToken(line_no, col, note, "no pitch or rest")
    del saw_accidental
    return _NoteToken(duration, pitch, is_rest, tie_open, tie_close, tie_cont, grace)


@dataclass
class _Pending:
    """A committed-but-open event awaiting possible tie continuation."""

    duration: Fraction
    pitches: tuple[int, ...]
    open_ties: bool


@dataclass
class _Track:
    """One part slot: events so far, its clock, and liveness."""

    events: list[Event] = field(default_factory=list)
    clock: Fraction = Fraction(0)
    alive: bool = True
    pending: _Pending | None = None

    def flush(self) -> None:
        if self.pending is not None:
            self.events.append(Event(self.pending.duration, self.pending.pitches))
            self.clock += self.pending.duration
            self.pending = None

    def commit(self, duration: Fraction, pitches: tuple[int, ...]) -> None:
        self.events.append(Event(duration, pitches))
        self.clock += duration

    def pad_to(self, t: Fraction) -> None:
        self.flush()
        if self.clock < t:
            self.commit(t - self.clock, ())


@dataclass
class _Spine:
    is_kern: bool
    track: int | None  # index into tracks for kern spines


@dataclass
class _FlowEdit:
    """A split or merge, recorded before matrices are materialized."""

    time: Fraction
    kind: str  # "split" | "merge"
    dest: int
    sources: tuple[int, ...]


def _flow_matrix(edit: _FlowEdit, n: int) -> np.ndarray:
    m = np.eye(n)
    if edit.kind == "split":
        (src,) = edit.sources
        m[edit.dest, :] = 0.0
        m[edit.dest, src] = 1.0
    else:
        for s in edit.sources:
            if s != edit.dest:
                m[s, :] = 0.0
            m[edit.dest, s] = 1.0
    return m


def resolve_flows(edits: list[_FlowEdit], n_tracks: int) -> list[tuple[Fraction, np.ndarray]]:
    """Materialize the flow-matrix sequence, always starting with identity."""
    flows: list[tuple[Fraction, np.ndarray]] = [(Fraction(0), np.eye(n_tracks))]
    for e in edits:
        flows.append((e.time, _flow_matrix(e, n_tracks)))
    return flows


def parse_kern(text: str, options: ParseOptions | None = None) -> Score:
    """Parse a Humdrum **kern document into a Score.

    One part per kern spine track after split/merge resolution; ties are
    merged, grace notes dropped (counted), non-kern spines ignored, and
    short-lived tracks padded with rests so all parts span the same length.
    Skip/warning counts land in score.meta.
    """
    opts = options or ParseOptions()
    counts: dict = {}
    tracks: list[_Track] = []
    spines: list[_Spine] = []
    edits: list[_FlowEdit] = []
    meta: dict = {}
    started = False

    def alloc_track(birth: Fraction) -> int:
        for idx, tr in enumerate(tracks):
            if not tr.alive:
                tr.alive = True
                tr.pending = None
                # reborn slot: rest-pad the gap up to its new birth time
                tr.pad_to(birth)
                return idx
        if len(tracks) >= opts.max_parts:
            raise TooManyParts(len(tracks) + 1, opts.max_parts)
        tr = _Track()
        tr.pad_to(birth)
        tracks.append(tr)
        return len(tracks) - 1

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("!!"):
            m = re.match(r"!!!(\w+)[^:]*:\s*(.*)", line)
            if m:
                key, val = m.group(1), m.group(2).strip()
                if key == "OTL":
                    meta.setdefault("title", val)
                elif key == "COM":
                    meta.setdefault("composer", val)
            continue
        tokens = line.split("\t")

        if not started:
            if tokens[0].startswith("**"):
                spines = [_Spine(is_kern=(t == "**kern"), track=None) for t in tokens]
                for sp in spines:
                    if sp.is_kern:
                        sp.track = alloc_track(Fraction(0))
                if not any(sp.is_kern for sp in spines):
                    raise UnsupportedConstruct("no **kern spine", line_no)
                started = True
                continue
            raise UnparseableToken(line_no, 0, tokens[0], "data before **kern header")

        if len(tokens) != len(spines):
            raise InconsistentSpineCount(line_no, len(spines), len(tokens))

        if tokens[0].startswith("!"):
            continue

        if any(t.startswith("*") for t in tokens):
            if not all(t.startswith("*") for t in tokens):
                raise UnparseableToken(line_no, 0, line, "mixed interpretation/data record")
            if any(t in ("*+", "*x") for t in tokens):
                name = "*+" if "*+" in tokens else "*x"
                raise UnsupportedConstruct(name, line_no)
            for sp, tok in zip(spines, tokens):
                if sp.is_kern and tok.startswith('*I"'):
                    names = meta.setdefault("instruments", [])
                    if tok[3:] not in names:
                        names.append(tok[3:])
            if any(t in ("*^", "*v", "*-") for t in tokens):
                spines = _apply_manipulators(spines, tokens, tracks, edits,
                                             alloc_track, line_no)
            continue

        # data record (notes, rests, chords, barlines)
        if all(t.startswith("=") or t == "." for t in tokens):
            continue
        for col, (sp, tok) in enumerate(zip(spines, tokens)):
            if not sp.is_kern or tok == "." or tok.startswith("="):
                continue
            _consume_data_token(tracks[sp.track], tok, line_no, col, opts, counts)

    # finish: flush ties, equalize part lengths with trailing rests
    for tr in tracks:
        tr.flush()
    if tracks:
        end = max(tr.clock for tr in tracks)
        for tr in tracks:
            if tr.clock < end:
                counts["end_padded_tracks"] = counts.get("end_padded_tracks", 0) + 1
            tr.pad_to(end)

    meta.update(counts)
    parts = [Part(tr.events) for tr in tracks]
    return Score(parts=parts, flows=resolve_flows(edits, len(tracks)), meta=meta)


def _apply_manipulators(spines, tokens, tracks, edits, alloc_track, line_no):
    new_spines: list[_Spine] = []
    i = 0
    while i < len(spines):
        sp, tok = spines[i], tokens[i]
        if tok == "*^":
            new_spines.append(sp)
            if sp.is_kern:
                src = sp.track
                tracks[src].flush()
                t = tracks[src].clock
                dest = alloc_track(t)
                edits.append(_FlowEdit(t, "split", dest, (src,)))
                new_spines.append(_Spine(is_kern=True, track=dest))
            else:
                new_spines.append(_Spine(is_kern=False, track=None))
            i += 1
        elif tok == "*v":
            j = i
            group = []
            while j < len(spines) and tokens[j] == "*v":
                group.append(spines[j])
                j += 1
            if len(group) < 2:
                raise UnparseableToken(line_no, i, "*v", "merge needs adjacent *v spines")
            kinds = {g.is_kern for g in group}
            if len(kinds) > 1:
                raise UnparseableToken(line_no, i, "*v", "merge across spine types")
            if group[0].is_kern:
                srcs = tuple(g.track for g in group)
                for s in srcs:
                    tracks[s].flush()
                clocks = {tracks[s].clock for s in srcs}
                if len(clocks) > 1:
                    raise UnparseableToken(line_no, i, "*v",
                                           f"merged spines misaligned at {sorted(clocks)}")
                t = clocks.pop()
                dest = srcs[0]
                edits.append(_FlowEdit(t, "merge", dest, srcs))
                for s in srcs[1:]:
                    tracks[s].alive = False
                new_spines.append(_Spine(is_kern=True, track=dest))
            else:
                new_spines.append(_Spine(is_kern=False, track=None))
            i = j
        elif tok == "*-":
            if sp.is_kern:
                tracks[sp.track].flush()
                tracks[sp.track].alive = False
            i += 1
        else:
            new_spines.append(sp)
            i += 1
    return new_spines


def _consume_data_token(track: _Track, tok: str, line_no: int, col: int,
                        opts: ParseOptions, counts: dict) -> None:
    notes = [_scan_note(n, line_no, col, opts, counts) for n in tok.split() if n]
    if any(n.grace for n in notes):
        counts["grace_dropped"] = counts.get("grace_dropped", 0) + 1
        notes = [n for n in notes if not n.grace]
    if not notes:
        return
    duration = next((n.duration for n in notes if n.duration is not None), None)
    if duration is None:
        raise UnparseableToken(line_no, col, tok, "no duration")
    pitches = tuple(sorted({n.pitch for n in notes if n.pitch is not None}))
    all_open = bool(pitches) and all(n.tie_open for n in notes if not n.is_rest)
    all_closing = bool(pitches) and all(
        n.tie_close or n.tie_continue for n in notes if not n.is_rest)
    any_tie = any(n.tie_open or n.tie_close or n.tie_continue for n in notes)
    keeps_open = any(n.tie_continue or (n.tie_open and not n.tie_close) for n in notes)

    if track.pending is not None:
        p = track.pending
        if p.open_ties and all_closing and pitches == p.pitches:
            p.duration += duration
            p.open_ties = keeps_open
            return
        if p.open_ties and any_tie:
            counts["partial_ties"] = counts.get("partial_ties", 0) + 1
        track.flush()
    elif any(n.tie_close or n.tie_continue for n in notes):
        counts["stray_ties"] = counts.get("stray_ties", 0) + 1

    if all_open:
        track.pending = _Pending(duration, pitches, open_ties=True)
    else:
        if any(n.tie_open for n in notes):
            # mixed chord: some opens have nothing to attach to
            counts["partial_ties"] = counts.get("partial_ties", 0) + 1
        track.commit(duration, pitches)


def parse_kern_file(path: str | Path, options: ParseOptions | None = None) -> Score:
    p = Path(path)
    score = parse_kern(p.read_text(encoding="utf-8"), options)
    score.meta.setdefault("source_path", str(p))
    return score


def serialize_kern(score: Score) -> str:
    """Write a flow-free Score as a **kern document.

    Simultaneous onsets share a data record; spines without an onset at
    that time carry the null token. Chord pitches are written ascending.
    """
    if score.has_nonidentity_flows():
        raise UnsupportedConstruct("serializing scores with split/merge flows")
    lines = []
    if score.meta.get("title"):
        lines.append(f"!!!OTL: {score.meta['title']}")
    if score.meta.get("composer"):
        lines.append(f"!!!COM: {score.meta['composer']}")
    n = score.n_parts
    if n == 0:
        return "\n".join(lines + ["**kern", "*-"]) + "\n"
    lines.append("\t".join(["**kern"] * n))

    onsets = [p.onsets() for p in score.parts]
    nexts = [0] * n
    while any(nexts[i] < len(score.parts[i].events) for i in range(n)):
        t = min(onsets[i][nexts[i]] for i in range(n)
                if nexts[i] < len(score.parts[i].events))
        row = []
        for i in range(n):
            if nexts[i] < len(score.parts[i].events) and onsets[i][nexts[i]] == t:
                ev = score.parts[i].events[nexts[i]]
                row.append(_event_token(ev))
                nexts[i] += 1
            else:
                row.append(".")
        lines.append("\t".join(row))
    lines.append("\t".join(["*-"] * n))
    return "\n".join(lines) + "\n"


def _event_token(ev: Event) -> str:
    recip = beats_to_recip(ev.duration)
    if ev.is_rest:
        return f"{recip}r"
    return " ".join(f"{recip}{midi_to_kern_pitch(p)}" for p in ev.pitches)
