"""Cross-entropy and self-critical (CIDEr reward) training."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np
import torch
import torch.nn.functional as F

from gebc.caption import Vocabulary, build_vocab, greedy_decode, sample_decode, tokenize
from gebc.datamodel import CaptionKind, ModelConfig, dataclass_from_mapping, split_by_kind
from gebc.errors import ConfigError, NumericError
from gebc.metrics import CiderD
from gebc.model import GEBCModel, VideoTensors, pad_targets, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    initial_lr: float = 5e-5
    weight_decay: float = 1e-4
    batch_size: int = 8
    decay_start_epoch: int = 8
    decay_factor: float = 0.5
    decay_every: int = 3
    num_epochs: int = 30
    rl_enabled: bool = False
    rl_start_epoch: int = 20
    grad_clip: float = 1.0
    early_stop_loss: float | None = None
    checkpoint_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (self.initial_lr > 0 and self.weight_decay >= 0 and self.grad_clip > 0):
            raise ConfigError("train: initial_lr and grad_clip must be positive, weight_decay non-negative")
        if not 0 < self.decay_factor < 1:
            raise ConfigError(f"train.decay_factor must be in (0, 1), got {self.decay_factor}")
        for name in ("batch_size", "decay_every", "num_epochs", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.decay_start_epoch < 0 or self.rl_start_epoch < 0:
            raise ConfigError("train: epoch indices must be >= 0")

    @classmethod
    def from_dict(cls, data: Mapping, prefix: str = "train") -> TrainConfig:
        return dataclass_from_mapping(cls, data, prefix)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    """Step decay: constant until ``decay_start_epoch``, then one factor per ``decay_every`` epochs."""
    if epoch < config.decay_start_epoch:
        return config.initial_lr
    steps = (epoch - config.decay_start_epoch) // config.decay_every + 1
    return config.initial_lr * config.decay_factor**steps


def xe_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over positions where ``mask`` is set."""
    mask = mask.to(logits.dtype)
    count = mask.sum()
    if count.item() == 0:
        raise ValueError("xe_loss called on a fully masked batch")
    nll = F.cross_entropy(logits.flatten(0, 1), targets.flatten(), reduction="none")
    return (nll * mask.flatten()).sum() / count


def scst_loss(
    sample_logprob: torch.Tensor,
    sampled: Sequence[Sequence[str]],
    greedy: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    metric: Callable,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Self-critical policy gradient with the greedy decode as baseline.

    ``sample_logprob`` (B,) is the summed log-probability of each sampled
    sequence. Returns the batch-mean loss and the per-example advantages.
    """
    adv = [metric(s, refs) - metric(g, refs) for s, g, refs in zip(sampled, greedy, references)]
    advantage = torch.tensor(adv, dtype=sample_logprob.dtype, device=sample_logprob.device)
    return -(advantage * sample_logprob).mean(), advantage


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    loss: float
    lr: float
    steps: int


@dataclass
class TrainResult:
    model: GEBCModel
    vocab: Vocabulary
    history: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _words(vocab: Vocabulary, ids: Sequence[int]) -> list[str]:
    return [vocab.itos[i] for i in ids]


def train(
    videos: Sequence[VideoTensors],
    targets: Mapping[tuple[str, int], str],
    kind: CaptionKind | str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    log: TextIO | None = None,
    vocab: Vocabulary | None = None,
) -> TrainResult:
    """Train one caption-kind model.

    ``targets`` maps (video_id, boundary index) to the caption of ``kind``;
    build it with :func:`kind_targets` so the other two caption fields are
    never read.
    """
    kind = CaptionKind.parse(kind)
    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    sampler = torch.Generator().manual_seed(train_config.seed)

    vocab = vocab or build_vocab(targets.values())
    model_config = dataclasses.replace(model_config, vocab_size=vocab.size)
    model = GEBCModel(model_config, kind)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=train_config.initial_lr, weight_decay=train_config.weight_decay)
    token_ids = {key: vocab.encode(text) for key, text in targets.items()}
    cider = CiderD([[t] for _, t in sorted(targets.items())]) if train_config.rl_enabled else None

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        vocab.save(out / f"{kind.value}_vocab.txt")
    result = TrainResult(model, vocab)
    step = 0
    for epoch in range(train_config.num_epochs):
        lr = lr_at_epoch(epoch, train_config)
        for group in opt.param_groups:
            group["lr"] = lr
        rl = train_config.rl_enabled and epoch >= train_config.rl_start_epoch
        order = rng.permutation(len(videos))
        losses = []
        for start in range(0, len(order), train_config.batch_size):
            batch = [videos[i] for i in order[start : start + train_config.batch_size]]
            enc = model.encode(batch)
            if rl:
                sample = sample_decode(model.head, enc.events, enc.memory, enc.reference, sampler)
                with torch.no_grad():
                    greedy = greedy_decode(
                        model.head, enc.events.detach(), enc.memory.detach(), enc.reference
                    )
                refs = [[targets[o]] for o in enc.owners]
                loss, _ = scst_loss(
                    sample.logprob,
                    [_words(vocab, s) for s in sample.tokens],
                    [_words(vocab, g) for g in greedy],
                    refs,
                    cider,
                )
            else:
                tgt, mask = pad_targets([token_ids[o] for o in enc.owners], model_config.max_caption_len)
                loss = xe_loss(model.xe_logits(enc, tgt), tgt, mask)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {start // train_config.batch_size}")
            opt.zero_grad()
            loss.backward()
            norm = torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
            if not torch.isfinite(norm):
                raise NumericError(f"non-finite gradient at epoch {epoch} batch {start // train_config.batch_size}")
            if norm > train_config.grad_clip:
                logger.debug("gradient clipped at epoch %d step %d (norm %.4g)", epoch, step, float(norm))
            opt.step()
            losses.append(loss.item())
            if log is not None:
                log.write(f"epoch={epoch} step={step} loss={loss.item():.10g} lr={lr:.6g}\n")
            step += 1
        rec = EpochRecord(epoch, "scst" if rl else "xe", float(np.mean(losses)), lr, len(losses))
        result.history.append(rec)
        logger.info("epoch %d %s loss %.5f lr %.3g", epoch, rec.phase, rec.loss, lr)
        last = epoch == train_config.num_epochs - 1
        stop = (
            train_config.early_stop_loss is not None
            and not rl
            and not train_config.rl_enabled
            and rec.loss < train_config.early_stop_loss
        )
        if out is not None and ((epoch + 1) % train_config.checkpoint_every == 0 or last or stop):
            path = out / f"{kind.value}_epoch{epoch}.ckpt"
            save_checkpoint(path, model, vocab, epoch, {"train_config": train_config.to_dict(), "loss": rec.loss})
            result.checkpoints.append(path)
        if stop:
            break
    model.eval()
    return result


def kind_targets(records, kind: CaptionKind | str) -> dict[tuple[str, int], str]:
    return {(p.video_id, p.boundary_index): p.target for p in split_by_kind(records, kind)}


def evaluate_model(model: GEBCModel, vocab: Vocabulary, videos: Sequence[VideoTensors], targets) -> dict[str, float]:
    """Greedy-decode every boundary; CIDEr-D (IDF from ``targets``) and exact-match rate."""
    preds = {}
    for i in range(0, len(videos), 8):
        for owner, ids in model.predict(videos[i : i + 8]):
            preds[owner] = vocab.decode(ids)
    keys = sorted(preds)
    scorer = CiderD([[targets[k]] for k in keys])
    scores = [scorer(preds[k], [targets[k]]) for k in keys]
    exact = [preds[k].split() == tokenize(targets[k]) for k in keys]
    return {
        "cider": math.fsum(scores) / len(scores),
        "exact_match": sum(exact) / len(exact),
        "count": len(keys),
    }
