import numpy as np
import pytest
from fractions import Fraction as F

from partwise.kern import (InconsistentSpineCount, KernError, ParseOptions,
                           UnparseableToken, UnsupportedConstruct,
                           beats_to_recip, kern_pitch_to_midi,
                           midi_to_kern_pitch, parse_kern, parse_kern_file,
                           recip_to_beats, serialize_kern)
from partwise.score import Event, Part, Score, beats, events_equal


def test_recip_to_beats_plain():
    assert recip_to_beats("4", 0) == F(1)
    assert recip_to_beats("8", 0) == F(1, 2)
    assert recip_to_beats("16", 0) == F(1, 4)
    assert recip_to_beats("1", 0) == F(4)
    assert recip_to_beats("2", 0) == F(2)


def test_recip_to_beats_triplets():
    assert recip_to_beats("12", 0) == F(1, 3)
    assert recip_to_beats("6", 0) == F(2, 3)
    assert recip_to_beats("3", 0) == F(4, 3)
    assert recip_to_beats("24", 0) == F(1, 6)


def test_recip_to_beats_breves():
    assert recip_to_beats("0", 0) == F(8)
    assert recip_to_beats("00", 0) == F(16)


def test_recip_to_beats_dots():
    # k dots scale by (2^(k+1) - 1) / 2^k
    assert recip_to_beats("2", 1) == F(3)
    assert recip_to_beats("4", 1) == F(3, 2)
    assert recip_to_beats("4", 2) == F(7, 4)
    assert recip_to_beats("8", 1) == F(3, 4)


def test_recip_rational_form():
    # n%m reads as m wholes over n
    assert recip_to_beats("2%3", 0) == F(6)
    assert recip_to_beats("3%2", 0) == F(8, 3)
    assert recip_to_beats("2%3", 1) == F(9)


def test_beats_to_recip_round_trips():
    rng = np.random.default_rng(7)
    for _ in range(300):
        num = int(rng.integers(1, 64))
        den = int(rng.integers(1, 48))
        d = F(num, den)
        recip = beats_to_recip(d)
        dots = recip.count(".")
        assert recip_to_beats(recip.rstrip("."), dots) == d, (d, recip)


def test_beats_to_recip_prefers_plain_and_dotted():
    assert beats_to_recip(F(1)) == "4"
    assert beats_to_recip(F(1, 2)) == "8"
    assert beats_to_recip(F(3)) == "2."
    assert beats_to_recip(F(7, 4)) == "4.."
    assert beats_to_recip(F(6)) == "1."


def test_pitch_octaves():
    assert kern_pitch_to_midi("c", 0) == 60
    assert kern_pitch_to_midi("cc", 0) == 72
    assert kern_pitch_to_midi("ccc", 0) == 84
    assert kern_pitch_to_midi("C", 0) == 48
    assert kern_pitch_to_midi("CC", 0) == 36
    assert kern_pitch_to_midi("b", 0) == 71
    assert kern_pitch_to_midi("A", 0) == 57


def test_pitch_accidentals():
    assert kern_pitch_to_midi("c", 1) == 61
    assert kern_pitch_to_midi("c", 2) == 62
    assert kern_pitch_to_midi("e", -1) == 63
    assert kern_pitch_to_midi("B", -1) == 58


def test_midi_to_kern_pitch():
    assert midi_to_kern_pitch(60) == "c"
    assert midi_to_kern_pitch(72) == "cc"
    assert midi_to_kern_pitch(48) == "C"
    assert midi_to_kern_pitch(61) == "c#"
    assert midi_to_kern_pitch(63) == "e-"
    assert midi_to_kern_pitch(70) == "b-"
    assert midi_to_kern_pitch(66) == "f#"


def test_parse_single_spine():
    s = parse_kern("**kern\n4c\n2.r\n8cc 8ee\n12f#\n*-\n")
    assert s.n_parts == 1
    assert s.parts[0].events == [
        Event(F(1), (60,)),
        Event(F(3), ()),
        Event(F(1, 2), (72, 76)),
        Event(F(1, 3), (66,)),
    ]


def test_parse_two_spines_and_nulls():
    text = "**kern\t**kern\n4C\t8cc\n.\t8b\n4D 4F\t4a\n2r\t2dd\n*-\t*-\n"
    s = parse_kern(text)
    assert s.parts[0].events == [
        Event(F(1), (48,)),
        Event(F(1), (50, 53)),
        Event(F(2), ()),
    ]
    assert s.parts[1].events == [
        Event(F(1, 2), (72,)),
        Event(F(1, 2), (71,)),
        Event(F(1), (69,)),
        Event(F(2), (74,)),
    ]


def test_parse_skips_barlines_and_decoration():
    s = parse_kern("**kern\n=1\n(4c;\n8dL\n8eJ)\n=2\n2.g\n==\n*-\n")
    assert s.parts[0].events == [
        Event(F(1), (60,)),
        Event(F(1, 2), (62,)),
        Event(F(1, 2), (64,)),
        Event(F(3), (67,)),
    ]
    assert s.meta["skipped_chars"] == 5


def test_parse_metadata():
    text = ("!!!OTL: Test Piece\n!!!COM: Nobody\n**kern\n*I\"Flute\n"
            "4c\n4d\n4e\n4f\n*-\n")
    s = parse_kern(text)
    assert s.meta["title"] == "Test Piece"
    assert s.meta["composer"] == "Nobody"
    assert s.meta["instruments"] == ["Flute"]


def test_tie_merges_single_note():
    s = parse_kern("**kern\n4c\n[2d\n2d]\n*-\n")
    assert s.parts[0].events == [Event(F(1), (60,)), Event(F(4), (62,))]


def test_tie_merges_chord_with_continuation():
    s = parse_kern("**kern\n[4c [4e\n4c_ 4e_\n2c] 2e]\n*-\n")
    assert s.parts[0].events == [Event(F(4), (60, 64))]


def test_partial_tie_flushes_and_counts():
    s = parse_kern("**kern\n[4c 4e\n4c] 4e\n*-\n")
    assert s.parts[0].events == [Event(F(1), (60, 64)), Event(F(1), (60, 64))]
    assert s.meta["partial_ties"] == 1
    assert s.meta["stray_ties"] == 1


def test_tie_broken_by_different_pitch_counts_partial():
    s = parse_kern("**kern\n[2c\n2d]\n*-\n")
    assert s.parts[0].events == [Event(F(2), (60,)), Event(F(2), (62,))]
    assert s.meta["partial_ties"] == 1


def test_grace_notes_dropped_and_counted():
    s = parse_kern("**kern\n4c\nqd\n8e\n8f\n*-\n")
    assert s.parts[0].events == [
        Event(F(1), (60,)),
        Event(F(1, 2), (64,)),
        Event(F(1, 2), (65,)),
    ]
    assert s.meta["grace_dropped"] == 1


def test_spine_split_and_merge_flows():
    s = parse_kern("**kern\n4c\n*^\n4d\t4e\n*v\t*v\n4f\n*-\n")
    assert s.n_parts == 2
    assert s.parts[0].events == [
        Event(F(1), (60,)), Event(F(1), (62,)), Event(F(1), (65,))]
    assert s.parts[1].events == [
        Event(F(1), ()), Event(F(1), (64,)), Event(F(1), ())]
    times = [t for t, _ in s.flows]
    assert times == [F(0), F(1), F(2)]
    assert np.array_equal(s.flows[0][1], np.eye(2))
    assert np.array_equal(s.flows[1][1], np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert np.array_equal(s.flows[2][1], np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert s.meta["end_padded_tracks"] == 1


def test_split_then_merge_flow_composition_is_identity():
    s = parse_kern("**kern\n4c\n*^\n4d\t4e\n*v\t*v\n4f\n*-\n")
    split, merge = s.flows[1][1], s.flows[2][1]
    # boolean composition: the merged slot again draws from slot 0 only
    composed = (merge @ split) > 0
    assert np.array_equal(composed[0], np.array([True, False]))


def test_unsupported_spine_manipulators():
    with pytest.raises(UnsupportedConstruct):
        parse_kern("**kern\n*+\n4c\n*-\n")
    with pytest.raises(UnsupportedConstruct):
        parse_kern("**kern\t**kern\n*x\t*x\n4c\t4d\n*-\t*-\n")


def test_merge_with_misaligned_clocks_fails():
    with pytest.raises(KernError):
        parse_kern("**kern\n*^\n4c\t2d\n*v\t*v\n4e\t.\n*-\t*-\n")


def test_inconsistent_spine_count_fails():
    with pytest.raises(InconsistentSpineCount):
        parse_kern("**kern\t**kern\n4c\n*-\t*-\n")


def test_unparseable_token_location():
    with pytest.raises(UnparseableToken) as err:
        parse_kern("**kern\n4c\nzz9!?\n*-\n")
    assert "line 3" in str(err.value)


def test_non_kern_spines_ignored():
    text = "**kern\t**dynam\n4c\tf\n4d\t.\n*-\t*-\n"
    s = parse_kern(text)
    assert s.n_parts == 1
    assert s.parts[0].events == [Event(F(1), (60,)), Event(F(1), (62,))]


def test_serialize_simple_round_trip():
    s = Score(parts=[
        Part([Event(F(1), (48,)), Event(F(1), (50, 53)), Event(F(2), ())]),
        Part([Event(F(1, 2), (72,)), Event(F(1, 2), (71,)),
              Event(F(1), (69,)), Event(F(2), (74,))]),
    ])
    assert events_equal(parse_kern(serialize_kern(s)), s)


def test_serialize_emits_null_tokens_for_held_parts():
    s = Score(parts=[
        Part([Event(F(2), (60,))]),
        Part([Event(F(1), (67,)), Event(F(1), (69,))]),
    ])
    lines = serialize_kern(s).splitlines()
    assert lines[0] == "**kern\t**kern"
    assert lines[1] == "2c\t4g"
    assert lines[2] == ".\t4a"
    assert lines[-1] == "*-\t*-"


def test_serialize_rejects_flow_scores():
    s = parse_kern("**kern\n4c\n*^\n4d\t4e\n*v\t*v\n4f\n*-\n")
    with pytest.raises(UnsupportedConstruct):
        serialize_kern(s)


def test_serialize_triplet_and_rational_durations():
    s = Score(parts=[Part([Event(F(1, 3), (60,)), Event(F(2, 3), (62,)),
                           Event(F(5, 3), (64,)), Event(F(4, 3), (65,))])])
    assert events_equal(parse_kern(serialize_kern(s)), s)


def test_parse_serialize_fixed_point_random_scores():
    rng = np.random.default_rng(11)
    pool = [F(1, 2), F(1), F(3, 2), F(2), F(1, 3), F(2, 3)]
    for _ in range(25):
        parts = []
        n_parts = int(rng.integers(1, 4))
        total = F(4)
        for _ in range(n_parts):
            events, t = [], F(0)
            while t < total:
                d = pool[int(rng.integers(len(pool)))]
                if t + d > total:
                    d = total - t
                k = int(rng.integers(0, 3))
                pitches = tuple(sorted({int(rng.integers(55, 75)) for _ in range(k)}))
                events.append(Event(d, pitches))
                t += d
            parts.append(Part(events))
        s = Score(parts=parts)
        once = serialize_kern(s)
        s2 = parse_kern(once)
        assert events_equal(s, s2)
        assert serialize_kern(s2) == once


def test_parse_kern_file_records_source(tmp_path):
    p = tmp_path / "x.krn"
    p.write_text("**kern\n4c\n*-\n", encoding="utf-8")
    s = parse_kern_file(p)
    assert s.meta["source_path"] == str(p)
    assert s.parts[0].events == [Event(F(1), (60,))]


def test_strict_mode_rejects_unknown_characters():
    with pytest.raises(UnparseableToken):
        parse_kern("**kern\n4c?\n*-\n", ParseOptions(strict=True))
    s = parse_kern("**kern\n4c?\n*-\n")
    assert s.parts[0].events == [Event(F(1), (60,))]
