from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structinfill.errors import CapacityError, ConfigError, GrammarError, RangeError
from structinfill.tokenizer import (
    BAR,
    KIND_VALUES,
    VOCAB,
    VOCAB_SIZE,
    NoteEvent,
    Token,
    TokenSeq,
    decode,
    decode_bars,
    encode_bars,
    quantize,
    read_token_file,
    snap_tempo,
    validate,
    write_token_file,
)

GOLDEN = Path(__file__).parent / "golden" / "three_bars.txt"


def golden_bars():
    return [
        [NoteEvent(0, 0, 60, 4, 120), NoteEvent(0, 4, 64, 4, 120), NoteEvent(0, 4, 62, 2, 120)],
        [],
        [NoteEvent(2, 8, 67, 8, 96)],
    ]


def test_vocabulary_size_and_bijection():
    assert VOCAB_SIZE == 216
    assert sum(len(v) for v in KIND_VALUES.values()) == 213
    for i in range(VOCAB_SIZE):
        assert VOCAB.id_of(VOCAB.token_of(i)) == i
    assert (VOCAB.bos_id, VOCAB.sep_id, VOCAB.eos_id) == (213, 214, 215)


def test_tempo_row_has_47_values():
    assert len(KIND_VALUES["Tempo"]) == 47
    assert KIND_VALUES["Tempo"][0] == 28 and KIND_VALUES["Tempo"][-1] == 212


@pytest.mark.parametrize("bad", [Token, lambda: Token(BAR, 0), lambda: Token("Pitch", 108)])
def test_out_of_range_tokens_rejected(bad):
    with pytest.raises((RangeError, TypeError)):
        bad()


def test_specials_have_no_payload():
    with pytest.raises(RangeError):
        Token("BOS", 1)


def test_golden_encoding():
    lines = GOLDEN.read_text().splitlines()
    assert encode_bars(golden_bars(), [1, 1, 2], True, [120, 120, 96]).to_text() == lines[0]
    assert encode_bars(golden_bars(), [1, 1, 2], False, [120, 120, 96]).to_text() == lines[1]


def test_two_bar_countdown():
    seq = encode_bars([[NoteEvent(0, 0, 60, 4)], [NoteEvent(1, 0, 62, 4)]], [1, 1])
    bars = [t.value for t in seq if t.kind == BAR]
    assert bars == [2, 1]


def test_empty_bar_has_three_tokens():
    seq = encode_bars([[]], [0])
    assert [t.kind for t in seq] == ["Bar", "Struct", "Tempo"]


def test_three_single_note_bars_have_18_tokens():
    bars = [[NoteEvent(b, 0, 60, 4)] for b in range(3)]
    seq = encode_bars(bars, [1, 1, 1])
    assert len(seq) == 18
    for kind in ("Bar", "Struct", "Tempo", "Position", "Pitch", "Duration"):
        assert sum(t.kind == kind for t in seq) == 3


def test_non_countdown_ordinal_clips_at_32():
    bars = [[] for _ in range(34)]
    seq = encode_bars(bars, [0] * 34, countdown=False)
    assert [t.value for t in seq if t.kind == BAR][-3:] == [32, 32, 32]


def test_capacity_error_over_32_bars():
    with pytest.raises(CapacityError):
        encode_bars([[] for _ in range(33)], [0] * 33)


def test_range_error_names_kind():
    with pytest.raises(RangeError, match="Pitch"):
        encode_bars([[NoteEvent(0, 0, 120, 4)]], [0])
    with pytest.raises(RangeError, match="Struct"):
        encode_bars([[]], [16])


def test_decode_golden_roundtrip():
    seq = read_token_file(GOLDEN)[0]
    notes = decode(seq)
    assert notes == [
        NoteEvent(0, 0, 60, 4, 120),
        NoteEvent(0, 4, 62, 2, 120),
        NoteEvent(0, 4, 64, 4, 120),
        NoteEvent(2, 8, 67, 8, 96),
    ]
    assert [b.bar_value for b in decode_bars(seq)] == [3, 2, 1]


def test_missing_duration_is_grammar_error_at_index():
    seq = TokenSeq.from_text("BAR(1) STRUCT(0) TEMPO(120) POS(0) PITCH(60) POS(4)")
    with pytest.raises(GrammarError) as err:
        decode(seq)
    assert err.value.index == 5


def test_truncated_segment_is_grammar_error():
    with pytest.raises(GrammarError):
        validate(TokenSeq.from_text("BAR(1) STRUCT(0) TEMPO(120) POS(0) PITCH(60)"))


def test_decreasing_position_rejected():
    with pytest.raises(GrammarError):
        validate(TokenSeq.from_text(
            "BAR(1) STRUCT(0) TEMPO(120) POS(4) PITCH(60) DUR(1) POS(2) PITCH(60) DUR(1)"
        ))


def test_text_roundtrip(tmp_path):
    seqs = read_token_file(GOLDEN)
    out = tmp_path / "t.txt"
    write_token_file(out, seqs)
    assert out.read_bytes() == GOLDEN.read_bytes()


def test_quantize_examples():
    assert snap_tempo(30) == 28
    assert snap_tempo(31) == 32
    assert snap_tempo(500) == 212
    q = quantize(108, 0, 0, 120, 120)
    assert q.pitch == 107 and q.duration == 1 and q.tempo_bpm == 120
    q = quantize(60, 120 * 17, 120 * 40, 119, 120)
    assert (q.bar_index, q.position, q.duration, q.tempo_bpm) == (1, 1, 16, 120)
    with pytest.raises(ConfigError):
        quantize(60, 0, 10, 120, 0)


@st.composite
def note_sets(draw):
    n_bars = draw(st.integers(1, 8))
    bars, tempos = [], []
    for b in range(n_bars):
        tempo = draw(st.sampled_from(KIND_VALUES["Tempo"]))
        notes = draw(st.lists(
            st.builds(
                NoteEvent,
                st.just(b),
                st.integers(0, 15),
                st.integers(22, 107),
                st.integers(1, 16),
                st.just(tempo),
            ),
            max_size=6,
        ))
        bars.append(notes)
        tempos.append(tempo)
    structs = draw(st.lists(st.integers(0, 15), min_size=n_bars, max_size=n_bars))
    return bars, structs, tempos


@settings(max_examples=1000, deadline=None)
@given(note_sets(), st.booleans())
def test_encode_decode_roundtrip(data, countdown):
    bars, structs, tempos = data
    seq = encode_bars(bars, structs, countdown, tempos)
    expected = [n for bar in bars for n in sorted(bar, key=lambda e: (e.position, e.pitch))]
    assert decode(seq) == expected
    decoded = decode_bars(seq)
    assert [b.tempo for b in decoded] == tempos
    assert [b.struct for b in decoded] == structs
    if countdown:
        assert [b.bar_value for b in decoded] == list(range(len(bars), 0, -1))
    for t in seq:
        assert VOCAB.token_of(VOCAB.id_of(t)) == t
