"""Extended REMI vocabulary with bar-count-down numbering.

Every bar is written as ``Bar Struct Tempo (Position Pitch Duration)*``.
``Bar`` carries either the number of bars remaining in the segment
(count-down encoding, used for infilling targets) or the 1-based bar
ordinal (used for contexts and prompts).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, NamedTuple, Sequence

from .errors import CapacityError, ConfigError, GrammarError, RangeError

BAR = "Bar"
STRUCT = "Struct"
TEMPO = "Tempo"
POSITION = "Position"
PITCH = "Pitch"
DURATION = "Duration"
BOS = "BOS"
SEP = "SEP"
EOS = "EOS"

CONTENT_KINDS = (BAR, STRUCT, TEMPO, POSITION, PITCH, DURATION)
SPECIAL_KINDS = (BOS, SEP, EOS)

# Payload values per kind, in vocabulary order.
KIND_VALUES: dict[str, tuple[int, ...]] = {
    BAR: tuple(range(1, 33)),
    STRUCT: tuple(range(0, 16)),
    TEMPO: tuple(range(28, 213, 4)),
    POSITION: tuple(range(0, 16)),
    PITCH: tuple(range(22, 108)),
    DURATION: tuple(range(1, 17)),
}

MAX_BARS = 32
POSITIONS_PER_BAR = 16
DEFAULT_TEMPO = 120

_TEXT_NAMES = {
    BAR: "BAR",
    STRUCT: "STRUCT",
    TEMPO: "TEMPO",
    POSITION: "POS",
    PITCH: "PITCH",
    DURATION: "DUR",
}
_KIND_FROM_TEXT = {v: k for k, v in _TEXT_NAMES.items()}
_WORD_RE = re.compile(r"^([A-Z]+)\((-?\d+)\)$")


@dataclass(frozen=True)
class Token:
    kind: str
    value: int | None = None

    def __post_init__(self):
        if self.kind in SPECIAL_KINDS:
            if self.value is not None:
                raise RangeError(f"{self.kind} carries no payload, got {self.value}")
        elif self.kind in KIND_VALUES:
            if self.value not in _VALUE_SETS[self.kind]:
                raise RangeError(f"{self.kind} value {self.value} outside vocabulary")
        else:
            raise RangeError(f"unknown token kind {self.kind!r}")

    def __str__(self) -> str:
        if self.kind in SPECIAL_KINDS:
            return self.kind
        return f"{_TEXT_NAMES[self.kind]}({self.value})"

    @classmethod
    def parse(cls, word: str) -> Token:
        if word in SPECIAL_KINDS:
            return cls(word)
        m = _WORD_RE.match(word)
        if m is None or m.group(1) not in _KIND_FROM_TEXT:
            raise GrammarError(f"cannot parse token word {word!r}")
        return cls(_KIND_FROM_TEXT[m.group(1)], int(m.group(2)))

    @property
    def is_special(self) -> bool:
        return self.kind in SPECIAL_KINDS


_VALUE_SETS = {k: frozenset(v) for k, v in KIND_VALUES.items()}


class Vocabulary:
    """Dense id assignment: content kinds in table order, then BOS, SEP, EOS."""

    def __init__(self):
        self._tokens: list[Token] = []
        self._ranges: dict[str, range] = {}
        for kind in CONTENT_KINDS:
            start = len(self._tokens)
            self._tokens.extend(Token(kind, v) for v in KIND_VALUES[kind])
            self._ranges[kind] = range(start, len(self._tokens))
        for kind in SPECIAL_KINDS:
            self._ranges[kind] = range(len(self._tokens), len(self._tokens) + 1)
            self._tokens.append(Token(kind))
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def id_of(self, token: Token) -> int:
        return self._ids[token]

    def token_of(self, idx: int) -> Token:
        if not 0 <= idx < len(self._tokens):
            raise RangeError(f"token id {idx} outside vocabulary of size {len(self)}")
        return self._tokens[idx]

    def kind_range(self, kind: str) -> range:
        """Contiguous id range holding every token of ``kind``."""
        return self._ranges[kind]

    def kind_of_id(self, idx: int) -> str:
        return self.token_of(idx).kind

    @property
    def bos_id(self) -> int:
        return self._ranges[BOS].start

    @property
    def sep_id(self) -> int:
        return self._ranges[SEP].start

    @property
    def eos_id(self) -> int:
        return self._ranges[EOS].start


VOCAB = Vocabulary()
VOCAB_SIZE = len(VOCAB)


@dataclass(frozen=True, order=True)
class NoteEvent:
    bar_index: int
    position: int
    pitch: int
    duration: int
    tempo_bpm: int = DEFAULT_TEMPO

    def shifted(self, bars: int) -> NoteEvent:
        return replace(self, bar_index=self.bar_index + bars)


@dataclass(frozen=True)
class TokenSeq:
    """Token list with an optional parallel list of structure indices."""

    tokens: tuple[Token, ...] = ()
    indices: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.indices is not None:
            object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
            if len(self.indices) != len(self.tokens):
                raise ValueError(
                    f"indices length {len(self.indices)} != token count {len(self.tokens)}"
                )

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[Token]:
        return iter(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]

    def ids(self) -> list[int]:
        return [VOCAB.id_of(t) for t in self.tokens]

    @classmethod
    def from_ids(cls, ids: Iterable[int], indices: Sequence[int] | None = None) -> TokenSeq:
        return cls(tuple(VOCAB.token_of(int(i)) for i in ids), indices)

    def to_text(self) -> str:
        return " ".join(str(t) for t in self.tokens)

    @classmethod
    def from_text(cls, text: str) -> TokenSeq:
        return cls(tuple(Token.parse(w) for w in text.split()))

    def with_indices(self, indices: Sequence[int] | None) -> TokenSeq:
        return TokenSeq(self.tokens, indices)

    def bar_count(self) -> int:
        return sum(1 for t in self.tokens if t.kind == BAR)


class DecodedBar(NamedTuple):
    bar_value: int
    struct: int
    tempo: int
    notes: list[NoteEvent]


def quantize(
    raw_pitch: int,
    raw_onset_ticks: float,
    raw_duration_ticks: float,
    raw_bpm: float,
    ticks_per_16th: float,
) -> NoteEvent:
    """Snap one raw MIDI note onto the 16th-note grid and the table ranges."""
    if ticks_per_16th <= 0:
        raise ConfigError(f"ticks_per_16th must be positive, got {ticks_per_16th}")
    step = _round_half_up(raw_onset_ticks / ticks_per_16th)
    duration = _round_half_up(raw_duration_ticks / ticks_per_16th)
    return NoteEvent(
        bar_index=step // POSITIONS_PER_BAR,
        position=step % POSITIONS_PER_BAR,
        pitch=min(max(int(raw_pitch), 22), 107),
        duration=min(max(duration, 1), 16),
        tempo_bpm=snap_tempo(raw_bpm),
    )


def snap_tempo(bpm: float) -> int:
    """Nearest grid tempo; exact midpoints resolve to the slower value."""
    grid = KIND_VALUES[TEMPO]
    bpm = min(max(float(bpm), grid[0]), grid[-1])
    k = (bpm - grid[0]) / 4.0
    lo = math.floor(k)
    if k - lo > 0.5:
        lo += 1
    return grid[min(lo, len(grid) - 1)]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _checked(kind: str, value: int) -> Token:
    if value not in _VALUE_SETS[kind]:
        raise RangeError(f"{kind} value {value} outside vocabulary range")
    return Token(kind, value)


def bar_tempos(bars: Sequence[Sequence[NoteEvent]], default: int = DEFAULT_TEMPO) -> list[int]:
    """Bar-start tempo per bar: first note's tempo, else the previous bar's."""
    tempos = []
    current = default
    for notes in bars:
        if notes:
            current = min(notes, key=lambda n: n.position).tempo_bpm
        tempos.append(current)
    return tempos


def encode_bars(
    bars: Sequence[Sequence[NoteEvent]],
    struct_ids: Sequence[int],
    countdown: bool = True,
    tempos: Sequence[int] | None = None,
) -> TokenSeq:
    """Encode bars of notes; with ``countdown`` the Bar payloads run n..1."""
    n = len(bars)
    if n > MAX_BARS and countdown:
        raise CapacityError(f"{n} bars exceed the {MAX_BARS}-bar count-down capacity")
    if len(struct_ids) != n:
        raise ValueError(f"got {len(struct_ids)} struct ids for {n} bars")
    if tempos is None:
        tempos = bar_tempos(bars)
    elif len(tempos) != n:
        raise ValueError(f"got {len(tempos)} tempos for {n} bars")

    out: list[Token] = []
    for i, notes in enumerate(bars):
        bar_value = n - i if countdown else min(i + 1, MAX_BARS)
        out.append(_checked(BAR, bar_value))
        out.append(_checked(STRUCT, struct_ids[i]))
        out.append(_checked(TEMPO, tempos[i]))
        for note in sorted(notes, key=lambda e: (e.position, e.pitch)):
            out.append(_checked(POSITION, note.position))
            out.append(_checked(PITCH, note.pitch))
            out.append(_checked(DURATION, note.duration))
    return TokenSeq(tuple(out))


class GrammarState:
    """Incremental checker for ``(Bar Struct Tempo (Position Pitch Duration)*)*``.

    Positions inside a bar must be non-decreasing, which is what
    :func:`encode_bars` emits.
    """

    _NEXT = {
        None: (BAR,),
        BAR: (STRUCT,),
        STRUCT: (TEMPO,),
        TEMPO: (POSITION, BAR),
        POSITION: (PITCH,),
        PITCH: (DURATION,),
        DURATION: (POSITION, BAR),
    }

    def __init__(self):
        self.last_kind: str | None = None
        self.last_position = -1
        self.bars = 0
        self.count = 0

    def allowed_kinds(self) -> tuple[str, ...]:
        return self._NEXT[self.last_kind]

    def can_end(self) -> bool:
        return self.last_kind in (None, TEMPO, DURATION)

    def min_position(self) -> int:
        return max(self.last_position, 0)

    def push(self, token: Token) -> None:
        if token.kind not in self.allowed_kinds():
            raise GrammarError(
                f"{token.kind} cannot follow {self.last_kind or 'sequence start'}", self.count
            )
        if token.kind == BAR:
            self.bars += 1
            self.last_position = -1
        elif token.kind == POSITION:
            if token.value < self.last_position:
                raise GrammarError(
                    f"Position {token.value} precedes earlier Position {self.last_position}",
                    self.count,
                )
            self.last_position = token.value
        self.last_kind = token.kind
        self.count += 1

    def finish(self) -> None:
        if not self.can_end():
            expected = "/".join(self.allowed_kinds())
            raise GrammarError(f"sequence ends where {expected} is required", self.count)


def validate(seq: TokenSeq | Sequence[Token]) -> None:
    state = GrammarState()
    for tok in seq:
        if tok.is_special:
            raise GrammarError(f"special token {tok.kind} inside a segment", state.count)
        state.push(tok)
    state.finish()


def decode_bars(seq: TokenSeq | Sequence[Token], bar_offset: int = 0) -> list[DecodedBar]:
    """Split a grammar-valid segment into bars with their notes."""
    validate(seq)
    bars: list[DecodedBar] = []
    tokens = list(seq)
    i = 0
    while i < len(tokens):
        bar_value = tokens[i].value
        struct = tokens[i + 1].value
        tempo = tokens[i + 2].value
        i += 3
        notes = []
        while i < len(tokens) and tokens[i].kind == POSITION:
            notes.append(
                NoteEvent(
                    bar_index=bar_offset + len(bars),
                    position=tokens[i].value,
                    pitch=tokens[i + 1].value,
                    duration=tokens[i + 2].value,
                    tempo_bpm=tempo,
                )
            )
            i += 3
        bars.append(DecodedBar(bar_value, struct, tempo, notes))
    return bars


def decode(seq: TokenSeq | Sequence[Token], bar_offset: int = 0) -> list[NoteEvent]:
    return [n for bar in decode_bars(seq, bar_offset) for n in bar.notes]


def notes_by_bar(notes: Iterable[NoteEvent], n_bars: int | None = None) -> list[list[NoteEvent]]:
    """Group a flat note list into per-bar lists indexed by ``bar_index``."""
    notes = list(notes)
    if n_bars is None:
        n_bars = max((n.bar_index for n in notes), default=-1) + 1
    bars: list[list[NoteEvent]] = [[] for _ in range(n_bars)]
    for n in notes:
        if not 0 <= n.bar_index < n_bars:
            raise CapacityError(f"note in bar {n.bar_index} outside {n_bars} bars")
        bars[n.bar_index].append(n)
    return bars


def read_token_file(path) -> list[TokenSeq]:
    with open(path, encoding="utf-8") as fh:
        return [TokenSeq.from_text(line) for line in fh.read().splitlines()]


def write_token_file(path, seqs: Iterable[TokenSeq]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqs:
            fh.write(seq.to_text() + "\n")


__all__ = [
    "BAR", "STRUCT", "TEMPO", "POSITION", "PITCH", "DURATION", "BOS", "SEP", "EOS",
    "Token", "TokenSeq", "NoteEvent", "DecodedBar", "Vocabulary", "VOCAB", "VOCAB_SIZE",
    "GrammarState", "quantize", "snap_tempo", "encode_bars", "decode", "decode_bars",
    "validate", "bar_tempos", "notes_by_bar", "read_token_file", "write_token_file",
]
