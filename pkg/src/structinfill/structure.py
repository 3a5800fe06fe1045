"""Phrase-structure annotations such as ``i4 A8 B8 x4 A8 B8 B8 X2 c4 c4 X2 B9 o2``.

Each word is a label letter followed by a phrase length in bars.  Labels are
grouped case-insensitively; the case only records whether the phrase is
melodic.  Intro, bridge and outro labels (``i``, ``x``, ``o``) have no
structural context and map to struct id 0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

from .errors import CapacityError, CoverageError, ParseError
from .tokenizer import BAR, TokenSeq

SPECIAL_LABELS = frozenset("ixo")
MAX_STRUCT_ID = 15

_WORD_RE = re.compile(r"^([A-Za-z])(\d+)$")


@dataclass(frozen=True)
class Phrase:
    label: str
    melodic: bool
    length_bars: int
    start_bar: int

    @property
    def end_bar(self) -> int:
        return self.start_bar + self.length_bars

    @property
    def bars(self) -> range:
        return range(self.start_bar, self.end_bar)

    @property
    def is_special(self) -> bool:
        return self.label in SPECIAL_LABELS

    def word(self) -> str:
        letter = self.label.upper() if self.melodic else self.label
        return f"{letter}{self.length_bars}"


@dataclass(frozen=True)
class StructureAnnotation:
    phrases: tuple[Phrase, ...]

    @cached_property
    def struct_ids(self) -> dict[str, int]:
        """Label to struct id; non-special labels count up from 1 in order of appearance."""
        ids: dict[str, int] = {}
        for p in self.phrases:
            if p.is_special:
                ids.setdefault(p.label, 0)
            elif p.label not in ids:
                ids[p.label] = 1 + sum(1 for v in ids.values() if v > 0)
        return ids

    @property
    def n_contexts(self) -> int:
        return max(self.struct_ids.values(), default=0)

    @property
    def total_bars(self) -> int:
        return sum(p.length_bars for p in self.phrases)

    def struct_id(self, phrase: Phrase) -> int:
        return self.struct_ids[phrase.label]

    def bar_labels(self) -> list[str]:
        return [p.label for p in self.phrases for _ in range(p.length_bars)]

    def bar_struct_ids(self) -> list[int]:
        ids = self.struct_ids
        return [ids[label] for label in self.bar_labels()]

    def serialize(self) -> str:
        return " ".join(p.word() for p in self.phrases)

    def __len__(self) -> int:
        return len(self.phrases)


def parse_annotation(text: str) -> StructureAnnotation:
    phrases = []
    start = 0
    for i, word in enumerate(text.split()):
        m = _WORD_RE.match(word)
        if m is None:
            raise ParseError(f"malformed phrase word {word!r}", i)
        length = int(m.group(2))
        if length < 1:
            raise ParseError(f"phrase {word!r} has zero length", i)
        letter = m.group(1)
        phrases.append(Phrase(letter.lower(), letter.isupper(), length, start))
        start += length
    ann = StructureAnnotation(tuple(phrases))
    if ann.n_contexts > MAX_STRUCT_ID:
        raise CapacityError(
            f"{ann.n_contexts} distinct phrase labels exceed the limit of {MAX_STRUCT_ID}"
        )
    return ann


def select_structural_contexts(annotation: StructureAnnotation) -> dict[int, range]:
    """Struct id to the 0-based bar range of that label's first phrase."""
    ids = annotation.struct_ids
    chosen: dict[int, range] = {}
    for p in annotation.phrases:
        sid = ids[p.label]
        if sid and sid not in chosen:
            chosen[sid] = p.bars
    return chosen


def assign_structure_indices(seq: TokenSeq, bar_struct_ids: Sequence[int]) -> TokenSeq:
    """Attach one structure index per token, shared by every token of a bar.

    ``bar_struct_ids[b]`` is the struct id of the b-th bar in ``seq``.
    Tokens before the first bar and special tokens get index 0.
    """
    indices = []
    bar = -1
    for tok in seq:
        if tok.is_special:
            indices.append(0)
            continue
        if tok.kind == BAR:
            bar += 1
            if bar >= len(bar_struct_ids):
                raise CoverageError(f"bar {bar} of the sequence has no struct id")
        indices.append(int(bar_struct_ids[bar]) if bar >= 0 else 0)
    return seq.with_indices(indices)


def read_annotation_file(path) -> dict[str, StructureAnnotation]:
    """Read ``<song_id><TAB><annotation>`` lines."""
    out: dict[str, StructureAnnotation] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            song_id, sep, text = line.partition("\t")
            if not sep:
                raise ParseError(f"{path}:{lineno}: expected '<song_id>\\t<annotation>'")
            try:
                out[song_id.strip()] = parse_annotation(text)
            except ParseError as exc:
                raise ParseError(f"{path}:{lineno}: song {song_id}: {exc}") from exc
    return out


def write_annotation_file(path, annotations: dict[str, StructureAnnotation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for song_id, ann in annotations.items():
            fh.write(f"{song_id}\t{ann.serialize()}\n")
