import numpy as np
import pytest
from fractions import Fraction as F

from partwise.encode import (DurationVocab, EncodingError, OOVCounter,
                             PitchEmbedding, PitchOutOfRange, PitchRange,
                             Resolution, UnknownDuration,
                             UnrepresentableAtResolution, build_frame_grid,
                             compute_resolution, decode_discrete_grid,
                             decode_runlength, embed, encode_discrete_grid,
                             encode_history, encode_part_events,
                             encode_runlength, location_feature,
                             pitch_class_feature, recenter_bits,
                             relative_view)
from partwise.score import event, score_from_events


def quartet():
    """Four staggered string parts: a florid top line over slower voices.

    Trailing rests square the parts off to six beats each; the first nine
    change points land at 0, 1, 3/2, 7/4, 2, 9/4, 5/2, 11/4, 3.
    """
    return score_from_events([
        [event(F(3, 2), (70,)), event(F(1, 4), (72,)), event(F(1, 4), (74,)),
         event(F(1, 4), (75,)), event(F(1, 4), (77,)), event(F(1, 4), (79,)),
         event(F(1, 4), (81,)), event(1, (82,)), event(2)],
        [event(1, (58,)), event(1), event(1), event(3)],
        [event(1, (62,)), event(1), event(F(1, 2)), event(F(1, 4), (75,)),
         event(F(1, 4), (77,)), event(1, (79,)), event(2)],
        [event(1, (58,)), event(1, (55,)), event(1, (51,)),
         event(F(3, 2), (46,)), event(F(3, 2))],
    ])


def quartet_encodings():
    s = quartet()
    return s, DurationVocab.from_corpus([s]), PitchRange.from_corpus([s])


def test_resolution_half_beats():
    s = score_from_events([[event(F(1, 2), (60,)), event(F(1, 2))]])
    assert compute_resolution([s]).delta == F(1, 2)
    assert compute_resolution([s]).frames_per_beat == 2


def test_resolution_mixed_denominators():
    a = score_from_events([[event(F(1, 3), (60,))] * 3])
    b = score_from_events([[event(F(3, 8), (62,))] * 8])
    r = compute_resolution([a, b])
    assert r.delta == F(1, 24)
    assert r.frames_per_beat == 24


def test_resolution_whole_beats():
    s = score_from_events([[event(1, (60,)), event(2), event(1, (64,))]])
    r = compute_resolution([s])
    assert r.delta == F(1)
    assert r.frames_per_beat == 1


def test_resolution_counts_onsets_not_just_durations():
    # two dotted quarters land an onset on 3/2 even though 3/4 is the
    # only duration denominator
    s = score_from_events([[event(F(3, 4), (60,)), event(F(3, 4), (60,)),
                            event(F(1, 2), (60,))]])
    assert compute_resolution([s]).delta == F(1, 4)


def test_resolution_empty_corpus_raises():
    with pytest.raises(EncodingError):
        compute_resolution([])


def test_resolution_json_round_trip():
    r = Resolution(F(1, 24))
    assert Resolution.from_json(r.to_json()) == r


def test_duration_vocab_from_corpus():
    s, vocab, _ = quartet_encodings()
    assert vocab.durations == (F(1, 4), F(1, 2), F(1), F(3, 2), F(2), F(3))
    assert vocab.n_real == 6
    assert vocab.size == 7


def test_duration_vocab_validation():
    with pytest.raises(ValueError):
        DurationVocab((F(1), F(1, 2)))
    with pytest.raises(ValueError):
        DurationVocab((F(1), F(1)))
    with pytest.raises(ValueError):
        DurationVocab((F(0), F(1)))


def test_duration_vocab_real_index():
    v = DurationVocab((F(1, 4), F(1, 2), F(1)))
    assert v.real_index(F(1, 4)) == 0
    assert v.real_index(F(1)) == 2
    assert v.duration_at(1) == F(1, 2)


def test_duration_vocab_oov():
    v = DurationVocab((F(1, 4), F(1, 2), F(1)))
    with pytest.raises(UnknownDuration):
        v.real_index(F(3))
    c = OOVCounter()
    assert v.real_index(F(3), c) == 2
    assert v.real_index(F(3, 8), c) == 0  # tie between 1/4 and 1/2: lower wins
    assert v.real_index(F(2, 3), c) == 1
    assert c.durations == 3
    assert c.pitches == 0


def test_duration_vocab_json_round_trip():
    v = DurationVocab((F(1, 6), F(1), F(7, 2)))
    assert DurationVocab.from_json(v.to_json()) == v


def test_pitch_range_basics():
    pr = PitchRange(60, 72)
    assert pr.n == 12
    assert pr.index(60) == 0
    assert pr.index(71) == 11
    v = pr.multi_hot((60, 64, 67))
    assert v.shape == (12,)
    assert list(np.flatnonzero(v)) == [0, 4, 7]
    with pytest.raises(ValueError):
        PitchRange(60, 60)


def test_pitch_range_oov():
    pr = PitchRange(60, 72)
    with pytest.raises(PitchOutOfRange):
        pr.index(59)
    with pytest.raises(PitchOutOfRange):
        pr.index(72)
    c = OOVCounter()
    assert pr.index(59, c) == 0
    assert pr.index(95, c) == 11
    assert c.pitches == 2
    assert c.durations == 0


def test_pitch_range_from_corpus():
    s, _, pr = quartet_encodings()
    assert (pr.lo, pr.hi) == (46, 83)
    wide = score_from_events([[event(1, (15,)), event(1, (120,))]])
    assert (PitchRange.from_corpus([wide]).lo, PitchRange.from_corpus([wide]).hi) == (21, 109)
    rests = score_from_events([[event(1), event(1)]])
    assert (PitchRange.from_corpus([rests]).lo, PitchRange.from_corpus([rests]).hi) == (21, 109)


def test_pitch_range_json_round_trip():
    pr = PitchRange(46, 83)
    assert PitchRange.from_json(pr.to_json()) == pr


def test_quartet_grid_rows():
    s, vocab, pr = quartet_encodings()
    grid = build_frame_grid(s, vocab, pr)
    assert grid.n_parts == 4
    assert grid.n_frames == 11  # 9 shown below plus the two padding rests
    assert grid.times[:9] == [F(0), F(1), F(3, 2), F(7, 4), F(2), F(9, 4),
                              F(5, 2), F(11, 4), F(3)]
    # (duration, pitches) for onset cells, None for continuation cells
    table = [
        [(F(3, 2), (70,)), (F(1), (58,)), (F(1), (62,)), (F(1), (58,))],
        [None, (F(1), ()), (F(1), ()), (F(1), (55,))],
        [(F(1, 4), (72,)), None, None, None],
        [(F(1, 4), (74,)), None, None, None],
        [(F(1, 4), (75,)), (F(1), ()), (F(1, 2), ()), (F(1), (51,))],
        [(F(1, 4), (77,)), None, None, None],
        [(F(1, 4), (79,)), None, (F(1, 4), (75,)), None],
        [(F(1, 4), (81,)), None, (F(1, 4), (77,)), None],
        [(F(1), (82,)), (F(3), ()), (F(1), (79,)), (F(3, 2), (46,))],
    ]
    # continuation cells repeat the sounding event's pitches
    sounding = [
        [(70,), (58,), (62,), (58,)],
        [(70,), (), (), (55,)],
        [(72,), (), (), (55,)],
        [(74,), (), (), (55,)],
        [(75,), (), (), (51,)],
        [(77,), (), (), (51,)],
        [(79,), (), (75,), (51,)],
        [(81,), (), (77,), (51,)],
        [(82,), (), (79,), (46,)],
    ]
    n = pr.n
    for t, row in enumerate(table):
        for p, cell in enumerate(row):
            dur_block = grid.data[t, p, n:]
            assert dur_block.sum() == 1.0
            slot = int(np.argmax(dur_block))
            if cell is None:
                assert not grid.onset[t, p]
                assert slot == 0
            else:
                d, pitches = cell
                assert grid.onset[t, p]
                assert slot == 1 + vocab.real_index(d)
            got = tuple(int(i) + pr.lo for i in np.flatnonzero(grid.data[t, p, :n]))
            assert got == sounding[t][p]


def test_grid_segments_tile_the_score():
    s, vocab, pr = quartet_encodings()
    grid = build_frame_grid(s, vocab, pr)
    for t in range(grid.n_frames - 1):
        assert grid.ends[t] == grid.times[t + 1]
    assert grid.ends[-1] == s.total_beats


def test_grid_event_index():
    s, vocab, pr = quartet_encodings()
    grid = build_frame_grid(s, vocab, pr)
    assert list(grid.event_index[:, 1]) == [0, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3]
    assert list(grid.event_index[:4, 0]) == [0, 0, 1, 2]


def test_rows_before():
    s, vocab, pr = quartet_encodings()
    grid = build_frame_grid(s, vocab, pr)
    assert grid.rows_before(F(0)) == 0
    assert grid.rows_before(F(1)) == 1
    assert grid.rows_before(F(7, 4)) == 3  # boundary row itself excluded
    assert grid.rows_before(F(15, 8)) == 4
    assert grid.rows_before(F(100)) == 11


def test_history_zero_padding():
    s, vocab, pr = quartet_encodings()
    grid = build_frame_grid(s, vocab, pr)
    h = grid.history(F(0), 3)
    assert h.shape == (3, 4, pr.n + vocab.size)
    assert not h.any()
    h = grid.history(F(3, 2), 4)
    assert not h[:2].any()
    assert np.array_equal(h[2:], grid.data[:2])


def test_grid_decode_lossless():
    s, vocab, pr = quartet_encodings()
    grid = build_frame_grid(s, vocab, pr)
    assert grid.decode() == [p.events for p in s.parts]


def test_grid_decode_rejects_mislabeled_onset():
    s, vocab, pr = quartet_encodings()
    grid = build_frame_grid(s, vocab, pr)
    n = pr.n
    grid.data[0, 0, n:] = 0.0
    grid.data[0, 0, n] = 1.0  # onset row claiming to be a continuation
    with pytest.raises(EncodingError):
        grid.decode()


def test_grid_oov_absorbed():
    s = score_from_events([[event(F(1, 2), (40,)), event(1, (90,))]])
    pr = PitchRange(50, 80)
    with pytest.raises(PitchOutOfRange):
        build_frame_grid(s, DurationVocab((F(1, 2), F(1))), pr)
    with pytest.raises(UnknownDuration):
        build_frame_grid(score_from_events([[event(F(1, 2), (60,))]]),
                         DurationVocab((F(1, 4), F(1))), pr)
    c = OOVCounter()
    grid = build_frame_grid(s, DurationVocab((F(1, 2), F(1))), pr, c)
    assert c.pitches == 2
    assert list(np.flatnonzero(grid.data[0, 0, :30])) == [0]
    assert list(np.flatnonzero(grid.data[1, 0, :30])) == [29]


def test_location_feature():
    r = Resolution(F(1, 4))
    assert list(location_feature(F(0), r)) == [1, 0, 0, 0]
    assert list(location_feature(F(7), r)) == [1, 0, 0, 0]
    assert list(location_feature(F(9, 4), r)) == [0, 1, 0, 0]
    assert list(location_feature(F(5, 2), r)) == [0, 0, 1, 0]
    assert list(location_feature(F(11, 4), r)) == [0, 0, 0, 1]


def test_location_feature_unrepresentable():
    with pytest.raises(UnrepresentableAtResolution):
        location_feature(F(1, 3), Resolution(F(1, 4)))


def test_pitch_class_feature():
    pr = PitchRange(46, 83)
    v = pitch_class_feature(70, pr)
    assert v.shape == (37,)
    assert list(np.flatnonzero(v)) == [24]


def test_recenter_bits_centers_the_query_slot():
    pr = PitchRange(60, 72)
    bits = pr.multi_hot((60, 64, 67))
    out = recenter_bits(bits, 64, pr)
    assert out.shape == (23,)
    # slot 4 (the center) lands on the middle slot 11
    assert list(np.flatnonzero(out)) == [7, 11, 14]


def test_recenter_bits_preserves_content():
    pr = PitchRange(40, 70)
    n = pr.n
    for seed in range(25):
        rng = np.random.default_rng(seed)
        bits = (rng.random(n) < 0.3).astype(float)
        center = int(rng.integers(40, 70))
        out = recenter_bits(bits, center, pr)
        start = (n - 1) - pr.index(center)
        assert np.array_equal(out[start:start + n], bits)
        assert out.sum() == bits.sum()


def test_relative_view_transposition_invariance():
    # recentering erases a rigid transposition of both history and query
    pr = PitchRange(40, 80)
    n = pr.n
    for seed in range(25):
        rng = np.random.default_rng(seed)
        shift = int(rng.integers(1, 8))
        h = np.zeros((3, n + 5))
        h[:, n:] = rng.random((3, 5))
        band = (rng.random((3, n - shift - 16)) < 0.3).astype(float)
        h[:, 8:8 + band.shape[1]] = band
        h2 = np.zeros_like(h)
        h2[:, n:] = h[:, n:]
        h2[:, 8 + shift:8 + shift + band.shape[1]] = band
        center = int(rng.integers(50, 64))
        a = relative_view(h, center, pr)
        b = relative_view(h2, center + shift, pr)
        assert np.array_equal(a, b)


def test_relative_view_keeps_duration_block():
    pr = PitchRange(60, 72)
    h = np.zeros((2, 12 + 4))
    h[:, 12:] = [[0, 1, 0, 0], [1, 0, 0, 0]]
    out = relative_view(h, 65, pr)
    assert out.shape == (2, 23 + 4)
    assert np.array_equal(out[:, 23:], h[:, 12:])


def test_fixed_octave_embedding():
    pr = PitchRange(46, 83)
    e = PitchEmbedding.fixed_octave(pr)
    assert e.dim == 12
    assert e.weights.shape == (37, 12)
    for i in range(37):
        assert list(np.flatnonzero(e.weights[i])) == [(46 + i) % 12]


def test_fixed_octave_relative_embedding():
    pr = PitchRange(60, 72)
    e = PitchEmbedding.fixed_octave_relative(pr)
    assert e.weights.shape == (23, 12)
    assert list(np.flatnonzero(e.weights[11])) == [0]   # unison at the middle
    assert list(np.flatnonzero(e.weights[18])) == [7]   # a fifth above
    assert list(np.flatnonzero(e.weights[4])) == [5]    # a fifth below
    for j in range(23):
        assert list(np.flatnonzero(e.weights[j])) == [(j - 11) % 12]


def test_learned_embedding():
    e = PitchEmbedding.learned(37, 16)
    assert e.kind == "learned"
    assert e.weights.shape == (37, 16)
    assert np.abs(e.weights).max() <= 1.0 / np.sqrt(37)
    again = PitchEmbedding.learned(37, 16)
    assert np.array_equal(e.weights, again.weights)  # deterministic default


def test_embed_replaces_pitch_block():
    pr = PitchRange(60, 72)
    e = PitchEmbedding.fixed_octave(pr)
    h = np.zeros((2, 12 + 3))
    h[0, 0] = 1.0   # C
    h[0, 7] = 1.0   # G
    h[1, 14] = 1.0
    out = embed(h, e)
    assert out.shape == (2, 12 + 3)
    assert out[0, 0] == 1.0 and out[0, 7] == 1.0
    assert out[0].sum() == 2.0
    assert np.array_equal(out[:, 12:], h[:, 12:])


def test_encode_history_window():
    s, vocab, pr = quartet_encodings()
    grid = build_frame_grid(s, vocab, pr)
    hist, loc, targets = encode_history(s, 0, 2, k=2, vocab=vocab,
                                        pitch_range=pr, grid=grid)
    assert np.array_equal(hist, grid.data[1:3])
    assert list(loc) == [0, 0, 0, 1]  # onset 7/4 at quarter-beat resolution
    assert targets.duration == F(1, 4)
    assert targets.duration_real_index == 0
    assert targets.pitches == (74,)
    assert targets.onset == F(7, 4)
    assert list(np.flatnonzero(targets.pitch_bits)) == [74 - 46]


def test_encode_history_builds_grid_when_missing():
    s, vocab, pr = quartet_encodings()
    grid = build_frame_grid(s, vocab, pr)
    hist, loc, targets = encode_history(s, 3, 1, k=3, vocab=vocab, pitch_range=pr)
    assert np.array_equal(hist, grid.history(F(1), 3))
    assert targets.pitches == (55,)


def test_encode_part_events_window():
    s, vocab, pr = quartet_encodings()
    rows, loc, targets = encode_part_events(s, 0, 2, k=3, vocab=vocab,
                                            pitch_range=pr)
    assert rows.shape == (3, pr.n + vocab.size)
    assert not rows[0].any()  # only two events precede, oldest slot padded
    n = pr.n
    assert list(np.flatnonzero(rows[1, :n])) == [70 - 46]
    assert int(np.argmax(rows[1, n:])) == 1 + vocab.real_index(F(3, 2))
    assert list(np.flatnonzero(rows[2, :n])) == [72 - 46]
    assert int(np.argmax(rows[2, n:])) == 1 + vocab.real_index(F(1, 4))
    assert targets.pitches == (74,)
    assert list(loc) == [0, 0, 0, 1]


def test_encode_part_events_has_no_continuations():
    s, vocab, pr = quartet_encodings()
    n = pr.n
    for i in range(1, 9):
        rows, _, _ = encode_part_events(s, 0, i, k=4, vocab=vocab, pitch_range=pr)
        filled = rows[rows[:, n:].sum(axis=1) > 0]
        assert not filled[:, n].any()  # continuation slot never set


def test_discrete_grid_round_trip():
    s = score_from_events([
        [event(1, (60, 64)), event(F(1, 2)), event(F(1, 2), (67,))],
        [event(2, (48,))],
    ])
    grid = encode_discrete_grid(s, F(1, 2))
    assert grid.shape == (4, 2, 128, 2)
    assert decode_discrete_grid(grid, F(1, 2)) == [p.events for p in s.parts]


def test_discrete_grid_merges_adjacent_rests():
    s = score_from_events([[event(F(1, 2)), event(F(1, 2)), event(1, (60,))]])
    grid = encode_discrete_grid(s, F(1, 2))
    assert decode_discrete_grid(grid, F(1, 2)) == [[event(1), event(1, (60,))]]


def test_discrete_grid_loses_repeated_notes_without_onset_bit():
    # same pitch restruck: the onset bit is what keeps the events apart
    s = score_from_events([[event(1, (60,)), event(1, (60,))]])
    grid = encode_discrete_grid(s, F(1, 2))
    assert decode_discrete_grid(grid, F(1, 2)) == [p.events for p in s.parts]
    grid[2, 0, 60, 1] = 0.0
    assert decode_discrete_grid(grid, F(1, 2)) == [[event(2, (60,))]]


def test_discrete_grid_refinement():
    s = score_from_events([
        [event(1, (60, 64)), event(F(1, 2)), event(F(1, 2), (67,))],
        [event(2, (48,))],
    ])
    coarse = encode_discrete_grid(s, F(1, 2))
    fine = encode_discrete_grid(s, F(1, 4))
    assert fine.shape[0] == 2 * coarse.shape[0]
    assert decode_discrete_grid(fine, F(1, 4)) == decode_discrete_grid(coarse, F(1, 2))


def test_discrete_grid_unrepresentable():
    s = score_from_events([[event(F(1, 3), (60,)), event(F(2, 3))]])
    with pytest.raises(UnrepresentableAtResolution):
        encode_discrete_grid(s, F(1, 2))


def test_runlength_round_trip():
    s = score_from_events([
        [event(1, (60, 64, 67)), event(F(1, 2)), event(F(3, 2), (59,))],
        [event(3, (48,))],
    ])
    assert decode_runlength(encode_runlength(s)) == [p.events for p in s.parts]


def test_runlength_rests_are_bare_advances():
    s = score_from_events([[event(2)]])
    assert encode_runlength(s) == [("part", 0), ("advance", F(2))]
