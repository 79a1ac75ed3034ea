"""Transformer stack that turns a whole video into one feature per boundary.

Data flow for one video::

    frames (L, d_in) -> input projection -> FrameEncoder -> memory (L, d)
    boundaries -> ProposalEmbedder -> proposals (N, d)
    proposals x region tokens -> RegionDecoder -> (N, d)
    (N, d) x memory -> ContextDecoder -> event embeddings (N, d)

All layers are pre-norm residual blocks, so zeroing the last projection of
every branch turns a layer into the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from gebc.datamodel import CaptionKind, ModelConfig
from gebc.features import clip_spans
from gebc.proposals import ProposalBatch, ProposalEmbedder, TimeBox, embed_proposals, sinusoidal_encoding


def sample_linear(values: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    """Linearly interpolate rows of ``values`` at fractional positions.

    values: (B, H, L, c); loc: (B, H, P) positions in [0, L - 1].
    Returns (B, H, P, c).
    """
    B, H, L, c = values.shape
    P = loc.shape[-1]
    if L == 1:
        return values.expand(B, H, P, c)
    lo = loc.detach().floor().long().clamp(0, L - 2)
    frac = (loc - lo.to(loc.dtype)).unsqueeze(-1)
    idx = lo.unsqueeze(-1).expand(B, H, P, c)
    left = values.gather(2, idx)
    right = values.gather(2, idx + 1)
    # this form is exact at both frac == 0 and frac == 1 (the clamped last row)
    return (1 - frac) * left + frac * right


class DeformableAttention1D(nn.Module):
    """Temporal deformable attention over a single feature scale.

    For every (query, head) a linear layer predicts ``points`` offsets in
    normalized time around the query's reference point and a softmax over
    ``points`` weights. Values are read by linear interpolation.
    """

    def __init__(self, dim: int, heads: int = 8, points: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.points = dim, heads, points
        self.value_proj = nn.Linear(dim, dim)
        self.sampling_offsets = nn.Linear(dim, heads * points)
        self.attention_weights = nn.Linear(dim, heads * points)
        self.output_proj = nn.Linear(dim, dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # zero offsets and uniform weights at initialization
        for layer in (self.sampling_offsets, self.attention_weights):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)
        for layer in (self.value_proj, self.output_proj):
            nn.init.xavier_uniform_(layer.weight)
            nn.init.zeros_(layer.bias)

    def sampling(self, query: torch.Tensor, reference: torch.Tensor, length: int):
        """Sampling locations (B, Q, H, K) in row units and weights (B, Q, H, K)."""
        B, Q, _ = query.shape
        offsets = self.sampling_offsets(query).view(B, Q, self.heads, self.points)
        logits = self.attention_weights(query).view(B, Q, self.heads, self.points)
        weights = logits.softmax(dim=-1)
        loc = ((reference[:, :, None, None] + offsets) * (length - 1)).clamp(0, length - 1)
        return loc, weights

    def forward(
        self,
        query: torch.Tensor,
        reference: torch.Tensor,
        values: torch.Tensor,
        return_weights: bool = False,
    ):
        """query (B, Q, d), reference (B, Q) in [0, 1], values (B, L, d)."""
        B, Q, _ = query.shape
        L = values.shape[1]
        if L < 1:
            raise ValueError("deformable attention needs at least one value row")
        H, K, c = self.heads, self.points, self.dim // self.heads
        v = self.value_proj(values).view(B, L, H, c).transpose(1, 2)  # (B, H, L, c)
        loc, weights = self.sampling(query, reference, L)
        flat_loc = loc.permute(0, 2, 1, 3).reshape(B, H, Q * K)
        sampled = sample_linear(v, flat_loc).view(B, H, Q, K, c)
        w = weights.permute(0, 2, 1, 3).unsqueeze(-1)  # (B, H, Q, K, 1)
        out = (w * sampled).sum(dim=3)  # (B, H, Q, c)
        out = self.output_proj(out.transpose(1, 2).reshape(B, Q, self.dim))
        if return_weights:
            return out, weights
        return out


def deformable_attend(
    query: torch.Tensor, reference_point: float, values: torch.Tensor, attn: DeformableAttention1D
) -> torch.Tensor:
    """Single-query form: query (d,), values (L, d) -> (d,)."""
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("values must be a non-empty (L x d) matrix")
    ref = torch.as_tensor(reference_point, dtype=values.dtype).reshape(1, 1)
    return attn(query.reshape(1, 1, -1), ref, values.unsqueeze(0))[0, 0]


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


def frame_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype)
    return sinusoidal_encoding(pos, dim)


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, points: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = DeformableAttention1D(dim, heads, points)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, x, pos, reference):
        h = self.norm1(x)
        x = x + self.self_attn(h + pos, reference, h)
        return x + self.ffn(self.norm2(x))


class FrameEncoder(nn.Module):
    """Deformable self-attention over frames; each frame's reference is its own position."""

    def __init__(self, dim: int, layers: int, heads: int, points: int, ffn_dim: int):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, points, ffn_dim) for _ in range(layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, L, d) -> (B, L, d)."""
        if not torch.all(torch.isfinite(x)):
            raise FloatingPointError("non-finite frame features entering the encoder")
        B, L, _ = x.shape
        pos = frame_positions(L, self.dim, x.dtype).to(x.device)
        ref = torch.linspace(0, 1, L, dtype=x.dtype, device=x.device) if L > 1 else x.new_zeros(1)
        ref = ref.expand(B, L)
        for layer in self.layers:
            x = layer(x, pos, ref)
        return x


def region_attention_mask(
    boxes: Sequence[TimeBox],
    boundaries: Sequence[float],
    duration: float,
    valid_mask: torch.Tensor,
) -> torch.Tensor:
    """Which region tokens each proposal may attend to.

    A token is visible when it is a real (unpadded) detection of a clip whose
    span overlaps the proposal's time box by a positive amount. Returns a bool
    tensor (N, clips * N_o), True meaning visible.
    """
    spans = clip_spans(boundaries, duration)
    overlap = torch.tensor(
        [[s < box.end and e > box.start for (s, e) in spans] for box in boxes], dtype=torch.bool
    )  # (N, clips)
    if overlap.shape[1] != valid_mask.shape[0]:
        raise ValueError(f"{overlap.shape[1]} clips from boundaries, {valid_mask.shape[0]} in regions")
    visible = overlap[:, :, None] & valid_mask.to(torch.bool).cpu()[None]
    return visible.flatten(1).to(valid_mask.device)


class RegionDecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, q: torch.Tensor, tokens: torch.Tensor, visible: torch.Tensor, return_weights=False):
        """q (N, d), tokens (T, d), visible (N, T) bool."""
        has_any = visible.any(dim=1)
        # rows with nothing visible are computed against all tokens, then discarded
        safe = visible | ~has_any[:, None]
        h = self.norm1(q)
        att, weights = self.cross_attn(
            h.unsqueeze(0), tokens.unsqueeze(0), tokens.unsqueeze(0),
            attn_mask=~safe, need_weights=return_weights, average_attn_weights=False,
        )
        out = q + att[0]
        out = out + self.ffn(self.norm2(out))
        out = torch.where(has_any[:, None], out, q)
        if return_weights:
            return out, weights[0]
        return out


class ContextDecoderLayer(nn.Module):
    """Self-attention among event queries, deformable cross-attention into frames, FFN."""

    def __init__(self, dim: int, heads: int, points: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = DeformableAttention1D(dim, heads, points)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, tgt, query_pos, reference, memory):
        """tgt, query_pos (N, d); reference (N,); memory (L, d)."""
        h = self.norm1(tgt)
        q = (h + query_pos).unsqueeze(0)
        tgt = tgt + self.self_attn(q, q, h.unsqueeze(0), need_weights=False)[0][0]
        h = self.norm2(tgt) + query_pos
        tgt = tgt + self.cross_attn(h.unsqueeze(0), reference.unsqueeze(0), memory.unsqueeze(0))[0]
        return tgt + self.ffn(self.norm3(tgt))


@dataclass
class EventEmbeddings:
    embeddings: torch.Tensor  # (N, d); row i belongs to boundary i
    reference_points: torch.Tensor  # (N,)
    boxes: list[TimeBox]
    provenance: str = "context_decoder"


class ContextNetwork(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, H, K, ff = config.hidden_dim, config.attention_heads, config.sampling_points, config.ffn_dim
        self.frame_proj = nn.Linear(config.frame_input_dim, d)
        self.encoder = FrameEncoder(d, config.encoder_layers, H, K, ff)
        self.proposal_embedder = ProposalEmbedder(d)
        self.region_proj = nn.Linear(config.region_dim, d)
        self.region_layers = nn.ModuleList(
            RegionDecoderLayer(d, H, ff) for _ in range(config.region_decoder_layers)
        )
        self.context_layers = nn.ModuleList(
            ContextDecoderLayer(d, H, K, ff) for _ in range(config.frame_decoder_layers)
        )

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, L, d_in) or (L, d_in) -> encoded frames of matching rank with width d."""
        squeeze = frames.ndim == 2
        x = self.encoder(self.frame_proj(frames.unsqueeze(0) if squeeze else frames))
        return x[0] if squeeze else x

    def make_proposals(self, boundaries, duration, kind) -> ProposalBatch:
        return embed_proposals(boundaries, duration, kind, self.proposal_embedder)

    def decode_regions(
        self,
        proposals: ProposalBatch,
        regions: torch.Tensor,
        valid_mask: torch.Tensor,
        boundaries: Sequence[float],
        duration: float,
    ) -> torch.Tensor:
        """proposals (N, d) query region tokens (clips, N_o, d_r) -> (N, d)."""
        visible = region_attention_mask(proposals.boxes, boundaries, duration, valid_mask)
        tokens = self.region_proj(regions.flatten(0, 1))
        x = proposals.embeddings
        for layer in self.region_layers:
            x = layer(x, tokens, visible)
        return x

    def decode_context(self, queries, memory, reference_points, query_pos=None) -> torch.Tensor:
        if query_pos is None:
            query_pos = torch.zeros_like(queries)
        x = queries
        for layer in self.context_layers:
            x = layer(x, query_pos, reference_points, memory)
        return x

    def decode_video(
        self,
        memory: torch.Tensor,
        regions: torch.Tensor,
        valid_mask: torch.Tensor,
        boundaries: Sequence[float],
        duration: float,
        kind: CaptionKind | str,
    ) -> EventEmbeddings:
        proposals = self.make_proposals(boundaries, duration, kind)
        x = self.decode_regions(proposals, regions, valid_mask, boundaries, duration)
        x = self.decode_context(x, memory, proposals.reference_points, proposals.embeddings)
        return EventEmbeddings(x, proposals.reference_points, proposals.boxes)

    def forward(self, frames, regions, valid_mask, boundaries, duration, kind):
        """Single video, all boundaries at once. Returns (EventEmbeddings, memory)."""
        memory = self.encode_frames(frames)
        return self.decode_video(memory, regions, valid_mask, boundaries, duration, kind), memory
