"""Songs, the synthetic corpus and infilling-example construction."""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import mido
import numpy as np

from .errors import CoverageError, IoError, MissingTrackError
from .structure import (
    StructureAnnotation,
    assign_structure_indices,
    parse_annotation,
    read_annotation_file,
    select_structural_contexts,
)
from .tokenizer import (
    BOS,
    DEFAULT_TEMPO,
    EOS,
    SEP,
    Token,
    MAX_BARS,
    POSITIONS_PER_BAR,
    NoteEvent,
    TokenSeq,
    bar_tempos,
    encode_bars,
    quantize,
    snap_tempo,
)

log = logging.getLogger(__name__)

MELODY_TRACKS = ("MELODY", "BRIDGE")
CONTEXT_BARS = 6


@dataclass
class Song:
    id: str
    bars: list[list[NoteEvent]]
    annotation: StructureAnnotation
    tempos: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.tempos:
            self.tempos = bar_tempos(self.bars)

    @property
    def n_bars(self) -> int:
        return len(self.bars)

    def encode(self, start: int, stop: int, countdown: bool = False, struct_ids=None) -> TokenSeq:
        """Encode bars ``[start, stop)`` with per-token structure indices attached."""
        if struct_ids is None:
            struct_ids = self.annotation.bar_struct_ids()[start:stop]
        seq = encode_bars(self.bars[start:stop], struct_ids, countdown, self.tempos[start:stop])
        return assign_structure_indices(seq, struct_ids)


@dataclass(frozen=True)
class InfillingExample:
    """One infilling item; ``past``, ``future`` and ``target`` carry their indices."""

    past: TokenSeq
    future: TokenSeq
    target: TokenSeq
    contexts: tuple[TokenSeq, ...]
    target_bars: int
    song_id: str | None = None
    phrase_index: int | None = None

    @property
    def indices(self) -> list[int]:
        """Structure indices for the full ``BOS past SEP future SEP target EOS`` order."""
        return reorder_and_wrap(self)[0].indices

    @property
    def bar_plan(self) -> list[int]:
        idx = self.target.indices or ()
        return [i for tok, i in zip(self.target, idx) if tok.kind == "Bar"]


@dataclass(frozen=True)
class Segments:
    """Index ranges of the three content segments inside a wrapped sequence."""

    past: range
    future: range
    target: range
    length: int

    def groups(self) -> list[int]:
        """Order group per token: 0 past, 1 target, 2 future.

        Each special token joins the segment that follows it; the final EOS
        belongs to the target.
        """
        g = [1] * self.length
        for i in range(0, self.future.start - 1):
            g[i] = 0
        for i in range(self.future.start - 1, self.target.start - 1):
            g[i] = 2
        return g


# --------------------------------------------------------------------- MIDI


def _tempo_map(mid: mido.MidiFile) -> tuple[list[int], list[float]]:
    changes: list[tuple[int, float]] = []
    for track in mid.tracks:
        tick = 0
        for msg in track:
            tick += msg.time
            if msg.type == "set_tempo":
                changes.append((tick, mido.tempo2bpm(msg.tempo)))
    changes.sort(key=lambda c: c[0])
    if not changes or changes[0][0] > 0:
        changes.insert(0, (0, float(DEFAULT_TEMPO)))
    return [c[0] for c in changes], [c[1] for c in changes]


def _track_notes(track: mido.MidiTrack) -> list[tuple[int, int, int]]:
    """(onset tick, pitch, duration ticks) for every closed note in the track."""
    open_notes: dict[tuple[int, int], list[int]] = {}
    notes = []
    tick = 0
    for msg in track:
        tick += msg.time
        if msg.type == "note_on" and msg.velocity > 0:
            open_notes.setdefault((msg.channel, msg.note), []).append(tick)
        elif msg.type in ("note_off", "note_on"):
            starts = open_notes.get((msg.channel, msg.note))
            if starts:
                start = starts.pop(0)
                notes.append((start, msg.note, tick - start))
    return notes


def load_midi(
    path, annotation: StructureAnnotation | str | None = None, song_id: str | None = None
) -> Song:
    """Merge the MELODY and BRIDGE tracks of a MIDI file into a quantized song.

    The song spans exactly the annotated bars.  Without an annotation the
    whole file is treated as one unlabeled (``x``) phrase.
    """
    if isinstance(annotation, str):
        annotation = parse_annotation(annotation)
    path = Path(path)
    try:
        mid = mido.MidiFile(path)
    except (OSError, EOFError, ValueError) as exc:
        raise IoError(f"cannot read MIDI file {path}: {exc}") from exc

    tracks = [t for t in mid.tracks if t.name.strip().upper() in MELODY_TRACKS]
    if not tracks:
        raise MissingTrackError(f"{path}: no track named {' or '.join(MELODY_TRACKS)}")
    tracks.sort(key=lambda t: MELODY_TRACKS.index(t.name.strip().upper()))

    ticks, bpms = _tempo_map(mid)
    tp16 = mid.ticks_per_beat / 4

    def bpm_at(tick: float) -> float:
        return bpms[bisect.bisect_right(ticks, tick) - 1]

    raw = [
        quantize(pitch, onset, dur, bpm_at(onset), tp16)
        for track in tracks
        for onset, pitch, dur in _track_notes(track)
    ]
    if annotation is None:
        n = max((note.bar_index for note in raw), default=-1) + 1
        annotation = parse_annotation(f"x{n}" if n else "")
    n_bars = annotation.total_bars
    seen: set[tuple[int, int, int]] = set()
    bars: list[list[NoteEvent]] = [[] for _ in range(n_bars)]
    dropped = 0
    for note in raw:
        key = (note.bar_index, note.position, note.pitch)
        if key in seen:
            continue
        seen.add(key)
        if note.bar_index >= n_bars:
            dropped += 1
            continue
        bars[note.bar_index].append(note)
    if dropped:
        log.warning("%s: %d notes after the annotated %d bars dropped", path, dropped, n_bars)

    tempos = [snap_tempo(bpm_at(b * POSITIONS_PER_BAR * tp16)) for b in range(n_bars)]
    for b in bars:
        b.sort(key=lambda n: (n.position, n.pitch))
    return Song(song_id or path.stem, bars, annotation, tempos)


def write_midi(
    path,
    bars: Sequence[Sequence[NoteEvent]],
    tempos: Sequence[int] | None = None,
    ticks_per_beat: int = 480,
    track_name: str = "MELODY",
) -> None:
    """Write bars of notes as a type-1 MIDI file with one named melody track."""
    if tempos is None:
        tempos = bar_tempos(bars)
    tp16 = ticks_per_beat // 4
    bar_ticks = tp16 * POSITIONS_PER_BAR

    mid = mido.MidiFile(type=1, ticks_per_beat=ticks_per_beat)
    conductor = mido.MidiTrack()
    conductor.append(mido.MetaMessage("time_signature", numerator=4, denominator=4, time=0))
    last_tick, last_tempo = 0, None
    for b, tempo in enumerate(tempos):
        if tempo != last_tempo:
            tick = b * bar_ticks
            conductor.append(
                mido.MetaMessage("set_tempo", tempo=mido.bpm2tempo(tempo), time=tick - last_tick)
            )
            last_tick, last_tempo = tick, tempo
    conductor.append(mido.MetaMessage("end_of_track", time=0))
    mid.tracks.append(conductor)

    events = []
    for b, notes in enumerate(bars):
        for n in notes:
            start = b * bar_ticks + n.position * tp16
            # note_off sorts before note_on at equal ticks
            events.append((start + n.duration * tp16, 0, n.pitch))
            events.append((start, 1, n.pitch))
    events.sort()
    track = mido.MidiTrack()
    track.append(mido.MetaMessage("track_name", name=track_name, time=0))
    now = 0
    for tick, on, pitch in events:
        kind = "note_on" if on else "note_off"
        track.append(mido.Message(kind, note=pitch, velocity=80 if on else 0, time=tick - now))
        now = tick
    track.append(mido.MetaMessage("end_of_track", time=0))
    mid.tracks.append(track)
    try:
        mid.save(path)
    except OSError as exc:
        raise IoError(f"cannot write MIDI file {path}: {exc}") from exc


def load_corpus_dir(directory, annotation_file: str = "annotations.tsv") -> list[Song]:
    """Songs from ``<dir>/annotations.tsv`` plus ``<song_id>.mid`` files anywhere below."""
    directory = Path(directory)
    ann_path = directory / annotation_file
    midis = {p.stem: p for p in sorted(directory.rglob("*.mid"))}
    if not ann_path.exists() or not midis:
        raise CoverageError(f"{directory}: needs {annotation_file} and at least one .mid file")
    songs = []
    for song_id, ann in read_annotation_file(ann_path).items():
        if song_id not in midis:
            log.warning("song %s annotated but no MIDI file found", song_id)
            continue
        songs.append(load_midi(midis[song_id], ann, song_id))
    return songs


# ---------------------------------------------------------------- synthetic

DEFAULT_FORMS = (
    "i2 A4 B4 A4 B4 o2",
    "A4 B4 A4 B4",
    "i2 A4 A4 B4 B4 o2",
    "A4 B4 C4 A4 B4",
    "i1 A4 B4 x2 A4 B4 o1",
    "A4 B4 B4 A4",
)

_MAJOR = (0, 2, 4, 5, 7, 9, 11)
_RHYTHMS = (
    (0, 4, 8, 12),
    (0, 8),
    (0, 4, 8),
    (0, 6, 8, 12),
    (0, 2, 4, 8, 12),
    (0, 8, 12),
    (0, 4, 6, 8),
    (0, 12),
)


def _random_bar(rng: np.random.Generator, root: int, degree: int) -> tuple[list, int]:
    onsets = _RHYTHMS[rng.integers(len(_RHYTHMS))]
    notes = []
    for k, pos in enumerate(onsets):
        degree = int(np.clip(degree + rng.integers(-2, 3), 0, 13))
        pitch = root + 12 * (degree // 7) + _MAJOR[degree % 7]
        end = onsets[k + 1] if k + 1 < len(onsets) else POSITIONS_PER_BAR
        notes.append((pos, pitch, end - pos))
    return notes, degree


def _motif(rng, root, n_bars) -> list[list[tuple[int, int, int]]]:
    degree = int(rng.integers(2, 10))
    bars = []
    for _ in range(n_bars):
        bar, degree = _random_bar(rng, root, degree)
        bars.append(bar)
    return bars


def make_song(rng: np.random.Generator, form: str, song_id: str, vary: bool = True) -> Song:
    """One song whose phrases sharing a label reuse one motif.

    Repeats of a label may be displaced by an octave (``vary``), which keeps
    every pitch class.  Intro, bridge and outro bars are drawn fresh.
    """
    ann = parse_annotation(form)
    root = int(rng.integers(55, 67))
    tempo = int(rng.choice(np.arange(80, 144, 4)))
    motifs: dict[str, list] = {}
    bars: list[list[NoteEvent]] = []
    for p in ann.phrases:
        if p.is_special:
            content = _motif(rng, root, p.length_bars)
            shift = 0
        else:
            first = p.label not in motifs
            if first:
                motifs[p.label] = _motif(rng, root, p.length_bars)
            m = motifs[p.label]
            content = [m[i % len(m)] for i in range(p.length_bars)]
            shift = 0 if first or not vary else int(rng.choice((0, 12, -12)))
        for bar in content:
            bars.append(
                [
                    NoteEvent(len(bars), pos, min(max(pitch + shift, 22), 107), dur, tempo)
                    for pos, pitch, dur in bar
                ]
            )
    return Song(song_id, bars, ann, [tempo] * len(bars))


def make_synthetic_corpus(
    seed: int, n_songs: int, forms: Sequence[str] = DEFAULT_FORMS, vary: bool = True
) -> list[Song]:
    """Deterministic toy corpus standing in for a real annotated dataset."""
    rng = np.random.default_rng(seed)
    songs = []
    for i in range(n_songs):
        form = forms[int(rng.integers(len(forms)))]
        songs.append(make_song(rng, form, f"synth{seed}_{i:04d}", vary))
    return songs


# ----------------------------------------------------------------- examples


def _example(song: Song, phrase_index: int, context_bars: int) -> InfillingExample | None:
    ann = song.annotation
    phrase = ann.phrases[phrase_index]
    if phrase.length_bars > MAX_BARS:
        log.warning(
            "%s: phrase %d spans %d bars, over the %d-bar limit; skipped",
            song.id, phrase_index, phrase.length_bars, MAX_BARS,
        )
        return None
    start, stop = phrase.start_bar, phrase.end_bar
    past = song.encode(max(0, start - context_bars), start)
    future = song.encode(stop, min(song.n_bars, stop + context_bars))
    target = song.encode(start, stop, countdown=True)
    return InfillingExample(
        past=past,
        future=future,
        target=target,
        contexts=structural_contexts(song),
        target_bars=phrase.length_bars,
        song_id=song.id,
        phrase_index=phrase_index,
    )


def structural_contexts(song: Song) -> tuple[TokenSeq, ...]:
    """Encoded first-occurrence phrases, ordered by struct id (G_1 first)."""
    chosen = select_structural_contexts(song.annotation)
    return tuple(song.encode(r.start, r.stop) for _, r in sorted(chosen.items()))


def build_training_examples(song: Song, context_bars: int = CONTEXT_BARS) -> list[InfillingExample]:
    """One example per phrase, excluding the first and the last phrase of the song."""
    n = len(song.annotation.phrases)
    out = []
    for i in range(1, n - 1):
        ex = _example(song, i, context_bars)
        if ex is not None:
            out.append(ex)
    return out


def build_test_cases(
    songs: Iterable[Song], context_bars: int = CONTEXT_BARS, target_bars: int = 4
) -> list[InfillingExample]:
    """4-bar phrases sharing their label with exactly one of their two neighbours."""
    out = []
    for song in songs:
        phrases = song.annotation.phrases
        for i in range(1, len(phrases) - 1):
            p = phrases[i]
            if p.is_special or p.length_bars != target_bars:
                continue
            same_prev = phrases[i - 1].label == p.label
            same_next = phrases[i + 1].label == p.label
            if same_prev != same_next:
                ex = _example(song, i, context_bars)
                if ex is not None:
                    out.append(ex)
    return out


def reorder_and_wrap(example: InfillingExample) -> tuple[TokenSeq, Segments]:
    """Lay out ``BOS past SEP future SEP target EOS`` with spliced indices."""
    parts = [example.past, example.future, example.target]
    tokens = [Token(BOS)]
    indices = [0]
    ranges = []
    for seg, closer in zip(parts, (Token(SEP), Token(SEP), Token(EOS))):
        start = len(tokens)
        tokens.extend(seg.tokens)
        indices.extend(seg.indices if seg.indices is not None else [0] * len(seg))
        ranges.append(range(start, len(tokens)))
        tokens.append(closer)
        indices.append(0)
    segments = Segments(ranges[0], ranges[1], ranges[2], len(tokens))
    return TokenSeq(tuple(tokens), indices), segments


def split_corpus(songs: Sequence, ratio: float = 0.9, seed: int = 0) -> tuple[list, list]:
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(songs))
    n_train = int(math.floor(ratio * len(songs) + 1e-9))
    return [songs[i] for i in order[:n_train]], [songs[i] for i in order[n_train:]]


# ------------------------------------------------------------- dataset file


def example_to_line(example: InfillingExample) -> str:
    wrapped, _ = reorder_and_wrap(example)
    fields = [example.past.to_text(), example.future.to_text(), example.target.to_text()]
    fields += [c.to_text() for c in example.contexts]
    fields.append(" ".join(str(i) for i in wrapped.indices))
    return " | ".join(fields)


def example_from_line(line: str) -> InfillingExample:
    fields = [f.strip() for f in line.split("|")]
    if len(fields) < 4:
        raise CoverageError(f"dataset line has {len(fields)} fields, need at least 4")
    past, future, target = (TokenSeq.from_text(f) for f in fields[:3])
    contexts = tuple(
        TokenSeq.from_text(f).with_indices([n] * len(f.split()))
        for n, f in enumerate(fields[3:-1], 1)
    )
    indices = [int(x) for x in fields[-1].split()]
    expected = len(past) + len(future) + len(target) + 4
    if len(indices) != expected:
        raise CoverageError(f"index list has {len(indices)} entries, expected {expected}")
    a = 1 + len(past)
    b = a + 1 + len(future)
    past = past.with_indices(indices[1:a])
    future = future.with_indices(indices[a + 1 : b])
    target = target.with_indices(indices[b + 1 : b + 1 + len(target)])
    return InfillingExample(past, future, target, contexts, target.bar_count())


def write_dataset(path, examples: Iterable[InfillingExample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(example_to_line(ex) + "\n")
            n += 1
    return n


def read_dataset(path) -> list[InfillingExample]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [example_from_line(line) for line in fh if line.strip()]
    except OSError as exc:
        raise IoError(f"cannot read dataset {path}: {exc}") from exc
