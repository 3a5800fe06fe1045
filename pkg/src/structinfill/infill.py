"""Constrained autoregressive infilling, nucleus sampling and the Copy baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from .errors import CapacityError, ConfigError, DistributionError, StructureIndexError
from .ingest import InfillingExample, load_midi, write_midi
from .model import StructureAwareTransformer
from .structure import assign_structure_indices
from .tokenizer import (
    BAR,
    DEFAULT_TEMPO,
    MAX_BARS,
    POSITION,
    STRUCT,
    VOCAB,
    GrammarState,
    Token,
    TokenSeq,
    decode_bars,
    encode_bars,
    read_token_file,
)


@dataclass
class Sampling:
    top_p: float = 0.9
    temperature: float = 1.0
    seed: int = 0
    greedy: bool = False


@dataclass
class InfillRequest:
    past: TokenSeq
    future: TokenSeq
    contexts: list[TokenSeq]
    bar_count: int
    bar_plan: list[int]
    sampling: Sampling = field(default_factory=Sampling)
    max_tokens: int = 1024

    def validate(self) -> None:
        if not 1 <= self.bar_count <= MAX_BARS:
            raise CapacityError(f"bar_count must lie in [1, {MAX_BARS}], got {self.bar_count}")
        if len(self.bar_plan) != self.bar_count:
            raise ConfigError(
                f"bar_plan has {len(self.bar_plan)} entries for {self.bar_count} bars"
            )
        for y in self.bar_plan:
            if not 0 <= y <= len(self.contexts):
                raise StructureIndexError(
                    f"bar_plan index {y} but only {len(self.contexts)} structural contexts"
                )
        if not 0.0 <= self.sampling.top_p <= 1.0:
            raise ConfigError(f"top_p must lie in [0, 1], got {self.sampling.top_p}")
        if self.sampling.temperature <= 0:
            raise ConfigError("temperature must be positive")


@dataclass
class Infilled:
    tokens: TokenSeq
    complete: bool = True


def request_from_example(
    example: InfillingExample,
    sampling: Sampling | None = None,
    bar_count: int | None = None,
    bar_plan: Sequence[int] | None = None,
) -> InfillRequest:
    """Request that regenerates ``example.target`` from its contexts."""
    plan = list(bar_plan) if bar_plan is not None else example.bar_plan
    n = bar_count if bar_count is not None else len(plan)
    if bar_plan is None and n != len(plan):
        plan = [plan[i % len(plan)] if plan else 0 for i in range(n)]
    return InfillRequest(
        past=example.past,
        future=example.future,
        contexts=list(example.contexts),
        bar_count=n,
        bar_plan=plan,
        sampling=sampling or Sampling(),
    )


# ----------------------------------------------------------------- sampling


def _check_distribution(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise DistributionError("distribution must be a non-empty vector")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise DistributionError("distribution has NaN, infinite or negative entries")
    total = probs.sum()
    if abs(total - 1.0) > 1e-6:
        raise DistributionError(f"distribution sums to {total}, not 1")
    return probs


def nucleus(probs, top_p: float) -> np.ndarray:
    """Ids of the smallest probability-sorted prefix whose mass reaches ``top_p``.

    Equal probabilities are ordered by ascending id before accumulating.
    """
    probs = _check_distribution(probs)
    order = np.lexsort((np.arange(probs.size), -probs))
    cum = np.cumsum(probs[order])
    reached = np.nonzero(cum >= top_p - 1e-12)[0]
    k = int(reached[0]) if reached.size else probs.size - 1
    return order[: k + 1]


def nucleus_sample(probs, top_p: float, rng: np.random.Generator) -> int:
    probs = _check_distribution(probs)
    ids = nucleus(probs, top_p)
    weights = probs[ids]
    cum = np.cumsum(weights)
    j = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    choice = int(ids[min(j, ids.size - 1)])
    assert choice in ids
    return choice


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits[np.isfinite(logits)].max()
    e = np.exp(z)
    return e / e.sum()


# --------------------------------------------------------------- generation


def _struct_indices(seq: TokenSeq, n_contexts: int) -> TokenSeq:
    """Use explicit indices if present, else each bar's Struct payload."""
    if seq.indices is None:
        ids = [t.value for t in seq if t.kind == STRUCT]
        seq = assign_structure_indices(seq, ids)
    if any(i > n_contexts for i in seq.indices):
        raise StructureIndexError(
            f"structure index {max(seq.indices)} but only {n_contexts} structural contexts"
        )
    return seq


def _allowed(state: GrammarState, bar_count: int, plan: Sequence[int]) -> np.ndarray:
    allowed = np.zeros(len(VOCAB), dtype=bool)
    for kind in state.allowed_kinds():
        if kind == BAR:
            remaining = bar_count - state.bars
            if remaining >= 1:
                allowed[VOCAB.id_of(Token(BAR, remaining))] = True
        elif kind == STRUCT:
            allowed[VOCAB.id_of(Token(STRUCT, plan[state.bars - 1]))] = True
        elif kind == POSITION:
            r = VOCAB.kind_range(POSITION)
            allowed[r.start + state.min_position() : r.stop] = True
        else:
            r = VOCAB.kind_range(kind)
            allowed[r.start : r.stop] = True
    if state.bars == bar_count and state.can_end():
        allowed[VOCAB.eos_id] = True
    return allowed


@torch.no_grad()
def generate(request: InfillRequest, model: StructureAwareTransformer) -> Infilled:
    """Sample a target of exactly ``bar_count`` bars.

    The first token is forced to ``Bar(bar_count)``.  At every later step
    grammatically impossible tokens, wrong count-down Bar payloads and
    Struct payloads other than the plan are masked out before nucleus
    sampling.  Generated token ``k`` in bar ``b`` gets structure index
    ``bar_plan[b]``.
    """
    request.validate()
    model.eval()
    cfg = model.config
    s = request.sampling
    top_p = 0.0 if s.greedy else s.top_p
    rng = np.random.default_rng(s.seed)
    n_ctx = len(request.contexts)
    past = _struct_indices(request.past, n_ctx)
    future = _struct_indices(request.future, n_ctx)

    ids = [VOCAB.bos_id] + past.ids() + [VOCAB.sep_id] + future.ids() + [VOCAB.sep_id]
    idx = [0, *past.indices, 0, *future.indices, 0]
    groups = [0] * (1 + len(past)) + [2] * (1 + len(future)) + [1]
    positions = [p + cfg.order_offsets[g] for p, g in enumerate(groups)]

    dtype = model.output.weight.dtype
    if n_ctx:
        L = max(max(len(c) for c in request.contexts), 1)
        ctx_ids = torch.full((1, n_ctx, L), VOCAB.eos_id, dtype=torch.long)
        ctx_mask = torch.zeros((1, n_ctx, L), dtype=torch.bool)
        for c, ctx in enumerate(request.contexts):
            if len(ctx):
                ctx_ids[0, c, : len(ctx)] = torch.tensor(ctx.ids())
                ctx_mask[0, c, : len(ctx)] = True
            else:
                ctx_mask[0, c, 0] = True
        memories = model.encode(ctx_ids, ctx_mask)
    else:
        ctx_mask = torch.zeros((1, 0, 1), dtype=torch.bool)
        memories = torch.zeros((1, 0, 1, cfg.d_model), dtype=dtype)

    state = GrammarState()
    out: list[Token] = []
    out_idx: list[int] = []

    def push(tok: Token) -> None:
        state.push(tok)
        out.append(tok)
        out_idx.append(request.bar_plan[state.bars - 1])
        ids.append(VOCAB.id_of(tok))
        idx.append(out_idx[-1])
        positions.append(len(positions) + cfg.order_offsets[1])

    push(Token(BAR, request.bar_count))
    complete = False
    while len(out) < request.max_tokens:
        logits = model.decode(
            torch.tensor([ids]),
            torch.tensor([positions]),
            torch.tensor([idx]),
            torch.ones((1, len(ids)), dtype=torch.bool),
            memories,
            ctx_mask,
        )[0, -1]
        logits = logits.double().numpy() / s.temperature
        logits = np.where(_allowed(state, request.bar_count, request.bar_plan), logits, -np.inf)
        choice = nucleus_sample(_softmax(logits), top_p, rng)
        if choice == VOCAB.eos_id:
            complete = True
            break
        push(VOCAB.token_of(choice))
    return Infilled(TokenSeq(tuple(out), out_idx), complete)


def copy_baseline(request: InfillRequest) -> TokenSeq:
    """Fill each planned bar with the matching bar of its structural context.

    Bar ``b`` copies bar ``b mod len(G_n)`` of context ``G_n``; bars planned
    as 0 (or pointing at an empty context) stay empty.
    """
    request.validate()
    decoded = [decode_bars(c) for c in request.contexts]
    past_bars = decode_bars(request.past) if len(request.past) else []
    tempo = past_bars[-1].tempo if past_bars else DEFAULT_TEMPO
    bars, tempos = [], []
    for b, n in enumerate(request.bar_plan):
        src = decoded[n - 1] if n else []
        if src:
            bar = src[b % len(src)]
            bars.append(bar.notes)
            tempo = bar.tempo
        else:
            bars.append([])
        tempos.append(tempo)
    seq = encode_bars(bars, request.bar_plan, countdown=True, tempos=tempos)
    return assign_structure_indices(seq, request.bar_plan)


# ------------------------------------------------------------ request files


def load_segment(path, struct_ids: Sequence[int] | int | None = None) -> TokenSeq:
    """First line of a token file, or the melody of a MIDI file encoded per bar."""
    path = Path(path)
    if path.suffix.lower() in (".mid", ".midi"):
        song = load_midi(path)
        if struct_ids is None:
            struct_ids = 0
        if isinstance(struct_ids, int):
            struct_ids = [struct_ids] * song.n_bars
        return encode_bars(song.bars, list(struct_ids), countdown=False, tempos=song.tempos)
    seqs = read_token_file(path)
    return seqs[0] if seqs else TokenSeq()


def load_request(path, **overrides) -> InfillRequest:
    """Read a YAML/JSON request; relative paths resolve against its directory.

    Keys: ``past``, ``future``, ``contexts`` (paths), ``bar_count``,
    ``bar_plan``, optional ``sampling`` {top_p, temperature, seed, greedy},
    ``max_tokens`` and per-segment ``*_struct`` lists for MIDI inputs.
    """
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    base = path.parent

    def seg(key, struct=None):
        value = raw.get(key)
        if not value:
            return TokenSeq()
        return load_segment(base / value, raw.get(f"{key}_struct", struct))

    ctx_structs = raw.get("contexts_struct") or []
    contexts = []
    for i, p in enumerate(raw.get("contexts") or []):
        struct = ctx_structs[i] if i < len(ctx_structs) else i + 1
        contexts.append(load_segment(base / p, struct))
    bar_count = overrides.get("bar_count") or raw.get("bar_count")
    plan = overrides.get("bar_plan") or raw.get("bar_plan")
    if bar_count is None and plan is not None:
        bar_count = len(plan)
    if bar_count is None:
        raise ConfigError(f"{path}: request needs bar_count or bar_plan")
    if plan is None:
        plan = [1 if contexts else 0] * int(bar_count)
    sampling = Sampling(**(raw.get("sampling") or {}))
    for key in ("top_p", "seed", "temperature"):
        if overrides.get(key) is not None:
            setattr(sampling, key, overrides[key])
    return InfillRequest(
        past=seg("past"),
        future=seg("future"),
        contexts=contexts,
        bar_count=int(bar_count),
        bar_plan=[int(y) for y in plan],
        sampling=sampling,
        max_tokens=int(raw.get("max_tokens", 1024)),
    )


def write_outputs(result: TokenSeq, request: InfillRequest, midi_out) -> dict[str, Path]:
    """Target MIDI, target spliced between the prompts, and the token line."""
    midi_out = Path(midi_out)
    target = decode_bars(result)
    write_midi(midi_out, [b.notes for b in target], [b.tempo for b in target])
    past = decode_bars(request.past) if len(request.past) else []
    future = decode_bars(request.future) if len(request.future) else []
    full = past + target + future
    spliced = midi_out.with_name(midi_out.stem + "_spliced" + midi_out.suffix)
    write_midi(spliced, [b.notes for b in full], [b.tempo for b in full])
    tokens = midi_out.with_suffix(".txt")
    tokens.write_text(result.to_text() + "\n")
    return {"target": midi_out, "spliced": spliced, "tokens": tokens}


__all__ = [
    "Sampling", "InfillRequest", "Infilled", "request_from_example", "nucleus",
    "nucleus_sample", "generate", "copy_baseline", "load_segment", "load_request",
    "write_outputs",
]
