"""Seq2seq Transformer with order embeddings and attention selecting.

The decoder reads ``BOS past SEP future SEP target EOS`` under a single
causal mask.  Its positional embeddings are looked up at *effective*
positions: the model-view index plus a per-segment offset, so that the
real temporal order past < target < future is restored after reordering.
The encoder turns each structural context into a memory; at every decoder
layer a selector lets token ``k`` cross-attend only to memory ``y_k``
(or skip cross-attention entirely when ``y_k`` is 0).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CapacityError, ConfigError, IoError, StructureIndexError
from .ingest import InfillingExample, Segments, reorder_and_wrap
from .tokenizer import VOCAB, VOCAB_SIZE

CHECKPOINT_FORMAT = "structinfill-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_model: int = 512
    encoder_layers: int = 6
    decoder_layers: int = 6
    heads: int = 8
    ffn_dim: int = 2048
    cross_attention_heads: int = 8
    max_position: int = 2048
    order_offsets: tuple[int, int, int] | None = None
    vocab_size: int = VOCAB_SIZE
    dropout: float = 0.1

    def __post_init__(self):
        if self.order_offsets is None:
            self.order_offsets = (0, 0, self.max_position // 2)
        self.order_offsets = tuple(int(o) for o in self.order_offsets)
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "heads", "ffn_dim", "cross_attention_heads", "max_position"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("encoder_layers", "decoder_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.d_model % self.heads or self.d_model % self.cross_attention_heads:
            raise ConfigError("d_model must be divisible by the number of heads")
        if len(self.order_offsets) != 3 or min(self.order_offsets) < 0:
            raise ConfigError(f"order_offsets must be three non-negative ints: {self.order_offsets}")
        if self.vocab_size != VOCAB_SIZE:
            raise ConfigError(f"vocab_size must be {VOCAB_SIZE}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @classmethod
    def tiny(cls, **overrides) -> ModelConfig:
        base = dict(
            d_model=64,
            encoder_layers=2,
            decoder_layers=2,
            heads=4,
            ffn_dim=128,
            cross_attention_heads=4,
            max_position=1024,
            dropout=0.0,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["order_offsets"] = list(self.order_offsets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ---------------------------------------------------------------- positions


def effective_positions(segments: Segments, order_offsets: Sequence[int]) -> list[int]:
    """Model-view position plus the order offset of each token's segment.

    Raises ConfigError when the offsets fail to place every past token
    before every target token and every target token before every future
    token.
    """
    groups = segments.groups()
    eff = [p + order_offsets[g] for p, g in enumerate(groups)]
    spans = [[eff[i] for i in r] for r in (segments.past, segments.target, segments.future)]
    for before, after, names in (
        (spans[0], spans[1], "past/target"),
        (spans[1], spans[2], "target/future"),
        (spans[0], spans[2], "past/future"),
    ):
        if before and after and max(before) >= min(after):
            raise ConfigError(
                f"order offsets {tuple(order_offsets)} break the {names} ordering "
                f"({max(before)} >= {min(after)})"
            )
    return eff


# -------------------------------------------------------------------- batch


@dataclass
class Batch:
    ids: torch.Tensor  # (B, T) token ids, padded
    positions: torch.Tensor  # (B, T) effective positions
    indices: torch.Tensor  # (B, T) structure indices
    mask: torch.Tensor  # (B, T) True for real tokens
    targets: torch.Tensor  # (B, T) next-token ids
    loss_mask: torch.Tensor  # (B, T) True where the next token is scored
    ctx_ids: torch.Tensor  # (B, N, L)
    ctx_mask: torch.Tensor  # (B, N, L)
    n_contexts: torch.Tensor  # (B,)
    example_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass(frozen=True)
class EncodedExample:
    """Id-level view of one wrapped example, ready for collation."""

    ids: tuple[int, ...]
    positions: tuple[int, ...]
    indices: tuple[int, ...]
    target_start: int  # first token of the {T, EOS} region
    contexts: tuple[tuple[int, ...], ...]


def encode_example(example: InfillingExample, config: ModelConfig) -> EncodedExample:
    wrapped, segments = reorder_and_wrap(example)
    positions = effective_positions(segments, config.order_offsets)
    if max(positions) >= config.max_position:
        raise CapacityError(
            f"effective position {max(positions)} exceeds max_position {config.max_position}"
        )
    for c in example.contexts:
        if len(c) > config.max_position:
            raise CapacityError(f"context of {len(c)} tokens exceeds max_position")
    return EncodedExample(
        ids=tuple(wrapped.ids()),
        positions=tuple(positions),
        indices=tuple(wrapped.indices),
        target_start=segments.target.start,
        contexts=tuple(tuple(c.ids()) for c in example.contexts),
    )


def collate(
    items: Sequence[EncodedExample], loss_region: str = "target", example_ids=None
) -> Batch:
    """Pad encoded examples into a batch.

    ``loss_region`` is ``"target"`` (score T and the closing EOS) or
    ``"full"`` (score every next token).
    """
    if loss_region not in ("target", "full"):
        raise ConfigError(f"unknown loss region {loss_region!r}")
    B = len(items)
    T = max(len(it.ids) for it in items)
    N = max(len(it.contexts) for it in items)
    L = max([len(c) for it in items for c in it.contexts] + [1])
    pad = VOCAB.eos_id

    ids = torch.full((B, T), pad, dtype=torch.long)
    positions = torch.zeros((B, T), dtype=torch.long)
    indices = torch.zeros((B, T), dtype=torch.long)
    mask = torch.zeros((B, T), dtype=torch.bool)
    targets = torch.full((B, T), pad, dtype=torch.long)
    loss_mask = torch.zeros((B, T), dtype=torch.bool)
    ctx_ids = torch.full((B, N, L), pad, dtype=torch.long)
    ctx_mask = torch.zeros((B, N, L), dtype=torch.bool)
    n_contexts = torch.zeros(B, dtype=torch.long)

    for b, it in enumerate(items):
        n = len(it.ids)
        ids[b, :n] = torch.tensor(it.ids)
        positions[b, :n] = torch.tensor(it.positions)
        indices[b, :n] = torch.tensor(it.indices)
        mask[b, :n] = True
        targets[b, : n - 1] = torch.tensor(it.ids[1:])
        first = it.target_start - 1 if loss_region == "target" else 0
        loss_mask[b, first : n - 1] = True
        n_contexts[b] = len(it.contexts)
        for c, ctx in enumerate(it.contexts):
            if ctx:
                ctx_ids[b, c, : len(ctx)] = torch.tensor(ctx)
                ctx_mask[b, c, : len(ctx)] = True
    # Unused or empty context slots get one visible key so softmax stays finite;
    # the selector never reads them.
    empty = ~ctx_mask.any(-1)
    ctx_mask[..., 0] |= empty
    return Batch(
        ids, positions, indices, mask, targets, loss_mask, ctx_ids, ctx_mask, n_contexts,
        list(example_ids) if example_ids is not None else list(range(B)),
    )


def make_batch(
    examples: Sequence[InfillingExample], config: ModelConfig, loss_region: str = "target"
) -> Batch:
    return collate([encode_example(e, config) for e in examples], loss_region)


# ------------------------------------------------------------------- layers


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.heads, self.d_head).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        causal: bool = False,
    ) -> torch.Tensor:
        """``key_mask`` is (B, Lk) with True on visible keys."""
        B, Lq, D = query.shape
        Lk = key.shape[1]
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(key))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)

        blocked = torch.zeros((B, 1, Lq, Lk), dtype=torch.bool, device=query.device)
        if key_mask is not None:
            blocked = blocked | ~key_mask[:, None, None, :]
        if causal:
            future = torch.ones(Lq, Lk, dtype=torch.bool, device=query.device).triu(1)
            blocked = blocked | future
        scores = scores.masked_fill(blocked, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(B, Lq, D)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, key_mask):
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, key_mask))
        return x + self.dropout(self.ffn(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.dropout)
        self.norm_cross = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.cross_attention_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def cross_all(self, x, memories, mem_mask):
        """Cross-attention of every position against every memory: (B, N, T, D)."""
        B, T, D = x.shape
        N, L = memories.shape[1], memories.shape[2]
        q = self.norm_cross(x).unsqueeze(1).expand(B, N, T, D).reshape(B * N, T, D)
        out = self.cross_attn(q, memories.reshape(B * N, L, D), mem_mask.reshape(B * N, L))
        return self.dropout(out).view(B, N, T, D)

    def select_cross_attention(self, x, memories, mem_mask, indices):
        """Residual cross-attention sublayer filtered by the structure index.

        Positions with index 0 pass through unchanged; index n adds the
        cross-attention result against memory n.
        """
        if memories is None or memories.shape[1] == 0:
            if bool((indices > 0).any()):
                raise StructureIndexError("structure index > 0 but no structural contexts")
            return x
        B, T, D = x.shape
        attended = self.cross_all(x, memories, mem_mask)
        pick = (indices - 1).clamp(min=0)[:, None, :, None].expand(B, 1, T, D)
        chosen = attended.gather(1, pick).squeeze(1)
        return torch.where((indices > 0).unsqueeze(-1), x + chosen, x)

    def forward(self, x, pad_mask, memories, mem_mask, indices):
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, pad_mask, causal=True))
        x = self.select_cross_attention(x, memories, mem_mask, indices)
        return x + self.dropout(self.ffn(self.norm2(x)))


def select_cross_attention(layer: DecoderLayer, decoder_states, memories, mem_mask, indices):
    return layer.select_cross_attention(decoder_states, memories, mem_mask, indices)


def select_cross_attention_reference(
    layer: DecoderLayer, decoder_states: torch.Tensor, memories: Sequence[torch.Tensor], indices
) -> torch.Tensor:
    """Token-by-token selector: one query against exactly one unpadded memory.

    ``decoder_states`` is (T, D) for a single sequence, ``memories`` a list of
    (L_n, D) tensors, ``indices`` a length-T sequence.
    """
    rows = []
    for k, y in enumerate(int(i) for i in indices):
        x_k = decoder_states[k : k + 1]
        if y == 0:
            rows.append(x_k)
            continue
        if y > len(memories):
            raise StructureIndexError(f"structure index {y} but only {len(memories)} contexts")
        q = layer.norm_cross(x_k).unsqueeze(0)
        out = layer.cross_attn(q, memories[y - 1].unsqueeze(0))
        rows.append(x_k + layer.dropout(out).squeeze(0))
    return torch.cat(rows, dim=0)


# -------------------------------------------------------------------- model


class StructureAwareTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.encoder_positions = nn.Embedding(config.max_position, d)
        self.decoder_positions = nn.Embedding(config.max_position, d)
        self.encoder_layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.encoder_layers))
        self.encoder_norm = nn.LayerNorm(d)
        self.decoder_layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.decoder_layers))
        self.decoder_norm = nn.LayerNorm(d)
        self.output = nn.Linear(d, config.vocab_size)
        self.embed_dropout = nn.Dropout(config.dropout)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for name, p in self.named_parameters():
            if p.dim() > 1:
                nn.init.normal_(p, std=0.02)
            elif name.endswith("bias"):
                nn.init.zeros_(p)

    def encode(self, ctx_ids: torch.Tensor, ctx_mask: torch.Tensor) -> torch.Tensor:
        """(B, N, L) context ids -> (B, N, L, D) memories."""
        B, N, L = ctx_ids.shape
        if N == 0:
            return ctx_ids.new_zeros((B, 0, L, self.config.d_model), dtype=self.output.weight.dtype)
        if L > self.config.max_position:
            raise CapacityError(f"context length {L} exceeds max_position")
        flat = ctx_ids.reshape(B * N, L)
        m = ctx_mask.reshape(B * N, L)
        pos = torch.arange(L, device=flat.device)
        x = self.embed_dropout(self.token_embedding(flat) + self.encoder_positions(pos))
        for layer in self.encoder_layers:
            x = layer(x, m)
        return self.encoder_norm(x).view(B, N, L, -1)

    def encode_contexts(self, contexts: Sequence[Sequence[int]]) -> list[torch.Tensor]:
        """One (len, d_model) memory per context id list."""
        out = []
        for ctx in contexts:
            ids = torch.tensor([list(ctx)], dtype=torch.long).view(1, 1, -1)
            mask = torch.ones_like(ids, dtype=torch.bool)
            out.append(self.encode(ids, mask)[0, 0])
        return out

    def decode(self, ids, positions, indices, pad_mask, memories, mem_mask, n_contexts=None):
        if int(positions.max()) >= self.config.max_position:
            raise CapacityError(
                f"effective position {int(positions.max())} exceeds max_position "
                f"{self.config.max_position}"
            )
        if n_contexts is not None and bool((indices > n_contexts[:, None]).any()):
            raise StructureIndexError("structure index exceeds the number of structural contexts")
        x = self.embed_dropout(self.token_embedding(ids) + self.decoder_positions(positions))
        for layer in self.decoder_layers:
            x = layer(x, pad_mask, memories, mem_mask, indices)
        return self.output(self.decoder_norm(x))

    def forward(self, batch: Batch, memories: torch.Tensor | None = None) -> torch.Tensor:
        """Logits of shape (B, T, vocab_size)."""
        if memories is None:
            memories = self.encode(batch.ctx_ids, batch.ctx_mask)
        return self.decode(
            batch.ids, batch.positions, batch.indices, batch.mask,
            memories, batch.ctx_mask, batch.n_contexts,
        )


def build_model(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> StructureAwareTransformer:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = StructureAwareTransformer(config).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


# --------------------------------------------------------------- checkpoint


def save_checkpoint(path, model: StructureAwareTransformer, extra: dict | None = None) -> None:
    """npz container: JSON header (format, version, config) plus float64 weights."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "extra": extra or {},
    }
    arrays = {
        name: t.detach().cpu().to(torch.float64).numpy()
        for name, t in model.state_dict().items()
    }
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(
    path, expected: ModelConfig | None = None, dtype=torch.float32
) -> StructureAwareTransformer:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    with data:
        if "__header__" not in data.files:
            raise ConfigError(f"{path}: not a structinfill checkpoint")
        header = json.loads(str(data["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {header.get('version')}")
        config = ModelConfig.from_dict(header["config"])
        if expected is not None and expected.to_dict() != config.to_dict():
            raise ConfigError(f"{path}: checkpoint config does not match the requested config")
        model = StructureAwareTransformer(config).to(dtype)
        state = {k: torch.from_numpy(data[k]).to(dtype) for k in data.files if k != "__header__"}
    model.load_state_dict(state)
    return model


def checkpoint_header(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return json.loads(str(data["__header__"]))
