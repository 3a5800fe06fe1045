"""Structure-aware symbolic-music infilling."""

from .errors import InfillError
from .tokenizer import VOCAB, NoteEvent, Token, TokenSeq, decode, encode_bars
from .structure import parse_annotation
from .ingest import InfillingExample, Song, make_synthetic_corpus

__version__ = "0.1.0"

__all__ = [
    "InfillError", "VOCAB", "NoteEvent", "Token", "TokenSeq", "decode", "encode_bars",
    "parse_annotation", "InfillingExample", "Song", "make_synthetic_corpus",
]
