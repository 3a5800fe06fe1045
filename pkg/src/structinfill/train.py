"""Teacher-forced maximum-likelihood training and finite-difference checks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, MaskError, TrainingDivergedError
from .ingest import InfillingExample
from .model import (
    Batch,
    ModelConfig,
    StructureAwareTransformer,
    build_model,
    collate,
    encode_example,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0
    loss_region: str = "target"
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_steps < 0:
            raise ConfigError("learning_rate and batch_size must be positive, max_steps >= 0")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.loss_region not in ("target", "full"):
            raise ConfigError(f"unknown loss region {self.loss_region!r}")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def loss(logits: torch.Tensor, batch: Batch) -> torch.Tensor:
    """Mean negative log-likelihood over the positions selected by ``batch.loss_mask``."""
    m = batch.loss_mask
    if not bool(m.any()):
        raise MaskError("loss mask selects no positions")
    return F.cross_entropy(logits[m], batch.targets[m])


@dataclass
class TrainResult:
    model: StructureAwareTransformer
    losses: list[float] = field(default_factory=list)


def train_loop(
    examples: Sequence[InfillingExample],
    model_config: ModelConfig,
    config: TrainConfig,
    model: StructureAwareTransformer | None = None,
    checkpoint_path=None,
    log_path=None,
) -> TrainResult:
    """Adam with gradient clipping over uniformly reshuffled mini-batches.

    Runs are reproducible for a fixed ``config.seed``: parameter init,
    dropout and batch order all derive from it.
    """
    if not examples:
        raise ConfigError("training needs at least one example")
    torch.manual_seed(config.seed)
    if model is None:
        model = build_model(model_config, seed=config.seed)
    encoded = [encode_example(e, model.config) for e in examples]
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    losses: list[float] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    order: list[int] = []
    model.train()
    try:
        for step in range(1, config.max_steps + 1):
            if len(order) < config.batch_size:
                order.extend(rng.permutation(len(encoded)).tolist())
            ids, order = order[: config.batch_size], order[config.batch_size :]
            batch = collate([encoded[i] for i in ids], config.loss_region, ids)

            value = loss(model(batch), batch)
            if not torch.isfinite(value):
                raise TrainingDivergedError(step, ids, value.item())
            opt.zero_grad()
            value.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            opt.step()

            losses.append(value.item())
            if log_fh:
                log_fh.write(f"{step},{losses[-1]:.6f}\n")
            if config.log_every and step % config.log_every == 0:
                log.info("step %d loss %.4f", step, losses[-1])
            if checkpoint_path and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, {"step": step})
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, {"step": config.max_steps})
    return TrainResult(model, losses)


@torch.no_grad()
def evaluate_loss(model: StructureAwareTransformer, examples, loss_region="target", batch_size=16):
    """Token-weighted mean loss over ``examples`` in eval mode."""
    model.eval()
    encoded = [encode_example(e, model.config) for e in examples]
    total, count = 0.0, 0
    for i in range(0, len(encoded), batch_size):
        batch = collate(encoded[i : i + batch_size], loss_region)
        n = int(batch.loss_mask.sum())
        total += float(loss(model(batch), batch)) * n
        count += n
    return total / count


# ------------------------------------------------------------ gradient check


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a|| + ||n||, floor)``; 0 when both vectors agree.

    The floor keeps tensors whose true gradient is zero (the key-projection
    bias cancels inside the softmax) from dividing rounding noise by itself.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.linalg.norm(a - n)
    if diff == 0.0:
        return 0.0
    return float(diff / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_group: dict[str, float]
    entries_checked: int

    def worst(self) -> tuple[str, float]:
        name = max(self.per_group, key=self.per_group.get)
        return name, self.per_group[name]


def gradient_check(
    config: ModelConfig,
    batch: Batch,
    epsilon: float = 1e-5,
    seed: int = 0,
    entries_per_group: int = 12,
) -> GradCheckReport:
    """Compare autograd gradients with central differences for every parameter tensor.

    Runs in float64 with dropout disabled.  In each tensor the entries with
    the largest analytic gradient plus a random sample are perturbed; the
    error of a tensor is the norm-wise relative error over those entries.
    """
    cfg = ModelConfig.from_dict({**config.to_dict(), "dropout": 0.0})
    model = build_model(cfg, seed=seed, dtype=torch.float64)
    model.eval()

    def objective() -> torch.Tensor:
        return loss(model(batch), batch)

    model.zero_grad()
    objective().backward()
    rng = np.random.default_rng(seed)
    per_group: dict[str, float] = {}
    checked = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            grad = p.grad.detach().reshape(-1).clone()
            flat = p.data.view(-1)
            k = min(entries_per_group, flat.numel())
            top = torch.topk(grad.abs(), max(1, k // 2)).indices.tolist()
            rest = rng.choice(flat.numel(), size=k - len(top), replace=False).tolist()
            picks = sorted(set(top) | set(rest))
            numeric = []
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = objective().item()
                flat[i] = orig - epsilon
                down = objective().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * epsilon))
            per_group[name] = relative_error(grad[picks].numpy(), numeric)
            checked += len(picks)
    worst = max(per_group.values()) if per_group else 0.0
    if math.isnan(worst):
        worst = math.inf
    return GradCheckReport(worst, per_group, checked)


def read_loss_log(path) -> list[tuple[int, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        step, value = line.split(",")
        rows.append((int(step), float(value)))
    return rows
