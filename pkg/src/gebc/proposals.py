"""Event proposals: one query vector per boundary for a given caption kind.

Each boundary gets a time box built from its neighbours (the video start and
end stand in for the missing neighbours of the first and last boundary). The
box is normalized by the duration, mapped through the inverse sigmoid,
sinusoidally encoded per coordinate, layer-normalized and projected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from gebc.datamodel import CaptionKind

INVERSE_SIGMOID_EPS = 1e-5


@dataclass(frozen=True)
class TimeBox:
    start: float
    end: float
    duration: float

    @property
    def normalized(self) -> tuple[float, float]:
        return self.start / self.duration, self.end / self.duration

    @property
    def logit_box(self) -> tuple[float, float]:
        s, e = self.normalized
        return inverse_sigmoid(s), inverse_sigmoid(e)

    @property
    def center(self) -> float:
        s, e = self.normalized
        return 0.5 * (s + e)


def make_time_boxes(boundaries: Sequence[float], duration: float, kind: CaptionKind | str) -> list[TimeBox]:
    kind = CaptionKind.parse(kind)
    edges = [0.0, *map(float, boundaries), float(duration)]
    boxes = []
    for i in range(1, len(edges) - 1):
        if kind is CaptionKind.SUBJECT:
            start, end = edges[i - 1], edges[i + 1]
        elif kind is CaptionKind.BEFORE:
            start, end = edges[i - 1], edges[i]
        else:
            start, end = edges[i], edges[i + 1]
        if not start < end:
            raise ValueError(f"degenerate time box ({start}, {end}) for boundary {i - 1}")
        boxes.append(TimeBox(start, end, float(duration)))
    return boxes


def inverse_sigmoid(x, eps: float = INVERSE_SIGMOID_EPS):
    """log(x / (1 - x)) with x clamped to [eps, 1 - eps]; accepts floats or tensors."""
    if not 0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    if isinstance(x, torch.Tensor):
        if torch.any((x < 0) | (x > 1) | torch.isnan(x)):
            raise ValueError("inverse_sigmoid input outside [0, 1]")
        x = x.clamp(eps, 1 - eps)
        return torch.log(x / (1 - x))
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"inverse_sigmoid input outside [0, 1]: {x}")
    x = min(max(x, eps), 1 - eps)
    return math.log(x / (1 - x))


def sinusoidal_encoding(x: torch.Tensor, dim: int, max_period: float = 1e4) -> torch.Tensor:
    """Encode each scalar of ``x`` as ``dim`` sin/cos features.

    Divisors run geometrically from 1 to ``max_period``; the first half of the
    output holds sines, the second half cosines.
    """
    n_sin = (dim + 1) // 2
    n_cos = dim - n_sin
    if n_sin == 1:
        div = torch.ones(1, dtype=x.dtype, device=x.device)
    else:
        div = torch.logspace(0, math.log10(max_period), n_sin, dtype=x.dtype, device=x.device)
    phase = x.unsqueeze(-1) / div
    return torch.cat([phase.sin(), phase[..., :n_cos].cos()], dim=-1)


@dataclass
class ProposalBatch:
    embeddings: torch.Tensor  # (N, d)
    boxes: list[TimeBox]
    reference_points: torch.Tensor  # (N,)
    kind: CaptionKind

    def __len__(self) -> int:
        return len(self.boxes)


class ProposalEmbedder(nn.Module):
    def __init__(self, hidden_dim: int):
        super().__init__()
        if hidden_dim % 2:
            raise ValueError(f"hidden_dim must be even, got {hidden_dim}")
        self.hidden_dim = hidden_dim
        # small eps keeps the normalized rows at unit variance to ~1e-6
        self.norm = nn.LayerNorm(hidden_dim, eps=1e-9)
        self.proj = nn.Linear(hidden_dim, hidden_dim)

    def pre_projection(self, logit_boxes: torch.Tensor) -> torch.Tensor:
        if not torch.all(torch.isfinite(logit_boxes)):
            raise ValueError("logit boxes must be finite")
        half = self.hidden_dim // 2
        enc = sinusoidal_encoding(logit_boxes, half)  # (N, 2, d/2)
        return self.norm(enc.flatten(-2))

    def forward(self, logit_boxes: torch.Tensor) -> torch.Tensor:
        return self.proj(self.pre_projection(logit_boxes))


def embed_proposals(
    boundaries: Sequence[float],
    duration: float,
    kind: CaptionKind | str,
    embedder: ProposalEmbedder,
) -> ProposalBatch:
    kind = CaptionKind.parse(kind)
    boxes = make_time_boxes(boundaries, duration, kind)
    param = next(embedder.parameters())
    norm = torch.tensor([b.normalized for b in boxes], dtype=param.dtype, device=param.device)
    logits = inverse_sigmoid(norm)
    return ProposalBatch(
        embeddings=embedder(logits),
        boxes=boxes,
        reference_points=norm.mean(dim=-1),
        kind=kind,
    )
