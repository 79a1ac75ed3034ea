"""Full captioner (context network + caption head), batching and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from gebc.caption import CaptionHead, Vocabulary, caption_targets, greedy_decode
from gebc.datamodel import CaptionKind, ModelConfig, atomic_write_bytes
from gebc.errors import ConfigError, DataError
from gebc.features import PreparedVideo
from gebc.network import ContextNetwork

CHECKPOINT_VERSION = 1


@dataclass
class VideoTensors:
    video_id: str
    frames: torch.Tensor  # (L, d_in)
    regions: torch.Tensor  # (clips, N_o, d_r)
    region_mask: torch.Tensor  # (clips, N_o)
    boundaries: tuple[float, ...]
    duration: float

    @classmethod
    def from_prepared(cls, video: PreparedVideo, dtype=torch.float32) -> VideoTensors:
        rec = video.record
        return cls(
            rec.video_id,
            torch.as_tensor(video.frames.features, dtype=dtype),
            torch.as_tensor(video.regions.features, dtype=dtype),
            torch.as_tensor(video.regions.valid_mask),
            rec.boundaries,
            rec.duration,
        )

    @property
    def num_boundaries(self) -> int:
        return len(self.boundaries)


@dataclass
class EncodedBatch:
    events: torch.Tensor  # (total N, d)
    memory: torch.Tensor  # (total N, L, d), each boundary's own video
    reference: torch.Tensor  # (total N,)
    owners: list[tuple[str, int]]  # (video_id, boundary index) per row


class GEBCModel(nn.Module):
    """One model per caption kind."""

    def __init__(self, config: ModelConfig, kind: CaptionKind | str):
        super().__init__()
        if not config.vocab_size:
            raise ConfigError("model.vocab_size must be set before building a model")
        self.config = config
        self.kind = CaptionKind.parse(kind)
        self.network = ContextNetwork(config)
        self.head = CaptionHead(
            config.hidden_dim, config.vocab_size, config.max_caption_len,
            config.attention_heads, config.sampling_points,
        )

    def encode(self, videos: Sequence[VideoTensors]) -> EncodedBatch:
        frames = torch.stack([v.frames for v in videos])
        memory = self.network.encode_frames(frames)  # one encoder pass for the whole batch
        events, refs, owners, rows = [], [], [], []
        for b, v in enumerate(videos):
            out = self.network.decode_video(
                memory[b], v.regions, v.region_mask, v.boundaries, v.duration, self.kind
            )
            events.append(out.embeddings)
            refs.append(out.reference_points)
            owners.extend((v.video_id, i) for i in range(v.num_boundaries))
            rows.extend([b] * v.num_boundaries)
        idx = torch.tensor(rows, dtype=torch.long)
        return EncodedBatch(torch.cat(events), memory.index_select(0, idx), torch.cat(refs), owners)

    def xe_logits(self, enc: EncodedBatch, targets: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits (B, T, V) for targets (B, T) (pad-filled)."""
        inputs = torch.cat([targets.new_full((targets.shape[0], 1), Vocabulary.BOS), targets[:, :-1]], dim=1)
        return self.head(enc.events, enc.memory, enc.reference, inputs)

    @torch.no_grad()
    def predict(self, videos: Sequence[VideoTensors]) -> list[tuple[tuple[str, int], list[int]]]:
        enc = self.encode(videos)
        seqs = greedy_decode(self.head, enc.events, enc.memory, enc.reference)
        return list(zip(enc.owners, seqs))


def pad_targets(sequences: Sequence[Sequence[int]], max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Targets (B, T) and a float mask of real positions; T = longest target."""
    rows = [caption_targets(s, max_len) for s in sequences]
    T = max(len(r) for r in rows)
    out = torch.full((len(rows), T), Vocabulary.PAD, dtype=torch.long)
    mask = torch.zeros(len(rows), T)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
        mask[i, : len(r)] = 1.0
    return out, mask


def save_checkpoint(path: str | os.PathLike, model: GEBCModel, vocab: Vocabulary, epoch: int, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind.value,
        "epoch": int(epoch),
        "model_config": model.config.to_dict(),
        "vocab": list(vocab.tokens),
        "vocab_hash": vocab.hash,
        "state_dict": model.state_dict(),
        "extra": dict(extra or {}),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | os.PathLike, expected_config: ModelConfig | None = None):
    """Returns ``(model, vocab, payload)``; the model is in eval mode."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise DataError(f"missing checkpoint {path}") from None
    except Exception as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from None
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    config = ModelConfig.from_dict(payload["model_config"])
    vocab = Vocabulary(payload["vocab"])
    if vocab.hash != payload["vocab_hash"] or vocab.size != config.vocab_size:
        raise ConfigError(f"{path}: vocabulary does not match the stored hash/config")
    if expected_config is not None:
        want = dataclasses.replace(expected_config, vocab_size=config.vocab_size, seed=config.seed)
        if want != config:
            diff = [
                f"model.{k}: checkpoint={v!r} expected={getattr(want, k)!r}"
                for k, v in config.to_dict().items()
                if want.to_dict()[k] != v
            ]
            raise ConfigError(f"{path}: config mismatch ({'; '.join(diff)})")
    model = GEBCModel(config, payload["kind"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, vocab, payload
