"""Caption head: an LSTM whose per-step context comes from deformable attention.

At every step the head builds an attention query from the LSTM hidden state
and the event embedding, reads a context vector from the encoded frames
around the event's reference point, and feeds
``[word embedding, context, event embedding]`` into the LSTM cell.
"""

from __future__ import annotations

import hashlib
import os
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from gebc.datamodel import atomic_write_text
from gebc.network import DeformableAttention1D

_PUNCT = re.compile(r"[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Vocabulary:
    PAD, BOS, END, UNK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<bos>", "<end>", "<unk>")

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens:
            raise ValueError("vocabulary needs at least one non-special token")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        clash = set(tokens) & set(self.SPECIALS)
        if clash:
            raise ValueError(f"reserved tokens in vocabulary: {sorted(clash)}")
        self.tokens = tokens
        self.itos = [*self.SPECIALS, *tokens]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def size(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, self.UNK) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == self.END:
                break
            if i in (self.PAD, self.BOS):
                continue
            words.append(self.itos[i])
        return " ".join(words)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: str | os.PathLike) -> None:
        """One token per line; line k holds id k + 4 (specials are implicit)."""
        atomic_write_text(path, "".join(f"{t}\n" for t in self.tokens))

    @classmethod
    def load(cls, path: str | os.PathLike) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(captions: Iterable[str], min_count: int = 1) -> Vocabulary:
    counts = Counter()
    n = 0
    for cap in captions:
        counts.update(tokenize(cap))
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def caption_targets(ids: Sequence[int], max_len: int) -> list[int]:
    """Training target: tokens truncated to ``max_len``, then <end> if there is room."""
    ids = list(ids)[:max_len]
    if len(ids) < max_len:
        ids.append(Vocabulary.END)
    return ids


@dataclass
class DecoderState:
    hidden: torch.Tensor  # (B, d)
    cell: torch.Tensor  # (B, d)
    step: int = 0


class CaptionHead(nn.Module):
    def __init__(self, dim: int, vocab_size: int, max_len: int = 30, heads: int = 8, points: int = 4):
        super().__init__()
        self.dim, self.vocab_size, self.max_len = dim, vocab_size, max_len
        self.embed = nn.Embedding(vocab_size, dim)
        self.query_proj = nn.Linear(2 * dim, dim)
        self.attn = DeformableAttention1D(dim, heads, points)
        self.lstm = nn.LSTMCell(3 * dim, dim)
        self.logit = nn.Linear(dim, vocab_size)

    def init_state(self, batch: int, like: torch.Tensor) -> DecoderState:
        zeros = like.new_zeros(batch, self.dim)
        return DecoderState(zeros, zeros.clone(), 0)

    def context(self, hidden, event, memory, reference) -> torch.Tensor:
        query = self.query_proj(torch.cat([hidden, event], dim=-1))
        return self.attn(query.unsqueeze(1), reference.unsqueeze(1), memory)[:, 0]

    def step(self, state: DecoderState, prev_tokens, event, memory, reference):
        """One decoding step for a batch of boundaries.

        prev_tokens (B,), event (B, d), memory (B, L, d), reference (B,).
        Returns the next state and logits (B, V).
        """
        if state.step >= self.max_len:
            raise ValueError(f"decoder already produced {state.step} steps (max {self.max_len})")
        ctx = self.context(state.hidden, event, memory, reference)
        x = torch.cat([self.embed(prev_tokens), ctx, event], dim=-1)
        h, c = self.lstm(x, (state.hidden, state.cell))
        return DecoderState(h, c, state.step + 1), self.logit(h)

    def forward(self, event, memory, reference, inputs: torch.Tensor) -> torch.Tensor:
        """Teacher forcing: inputs (B, T) starting with <bos> -> logits (B, T, V)."""
        state = self.init_state(inputs.shape[0], event)
        out = []
        for t in range(inputs.shape[1]):
            state, logits = self.step(state, inputs[:, t], event, memory, reference)
            out.append(logits)
        return torch.stack(out, dim=1)


def sequence_log_likelihood(head: CaptionHead, event, memory, reference, targets: torch.Tensor, mask) -> torch.Tensor:
    """Sum of per-step log-softmax values at the target ids, per sequence."""
    inputs = torch.cat([targets.new_full((targets.shape[0], 1), Vocabulary.BOS), targets[:, :-1]], dim=1)
    logp = head(event, memory, reference, inputs).log_softmax(-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (picked * mask).sum(dim=1)


def _as_batch(event, memory, reference):
    if event.ndim == 1:
        return event.unsqueeze(0), memory.unsqueeze(0), torch.as_tensor(reference, dtype=event.dtype).reshape(1), True
    return event, memory, torch.as_tensor(reference, dtype=event.dtype), False


@dataclass
class SampleResult:
    tokens: list[list[int]]
    step_logprobs: torch.Tensor  # (B, T), zero after termination
    logprob: torch.Tensor  # (B,) sum over emitted tokens including <end>


def _decode(head: CaptionHead, event, memory, reference, max_len, choose):
    max_len = min(max_len, head.max_len)
    B = event.shape[0]
    state = head.init_state(B, event)
    prev = torch.full((B,), Vocabulary.BOS, dtype=torch.long, device=event.device)
    done = torch.zeros(B, dtype=torch.bool, device=event.device)
    seqs: list[list[int]] = [[] for _ in range(B)]
    logps = []
    for _ in range(max_len):
        state, logits = head.step(state, prev, event, memory, reference)
        tok, lp = choose(logits)
        logps.append(torch.where(done, torch.zeros_like(lp), lp))
        for b in range(B):
            if not done[b] and int(tok[b]) != Vocabulary.END:
                seqs[b].append(int(tok[b]))
        done = done | (tok == Vocabulary.END)
        prev = torch.where(done, torch.full_like(tok, Vocabulary.PAD), tok)
        if bool(done.all()):
            break
    step_lp = torch.stack(logps, dim=1) if logps else event.new_zeros(B, 0)
    return seqs, step_lp


def greedy_decode(head: CaptionHead, event, memory, reference, max_len: int | None = None):
    """Argmax decoding (ties go to the lowest id); <bos>/<end> are stripped.

    Accepts a single boundary (event (d,), memory (L, d), scalar reference) or a
    batch; returns one id list or a list of them accordingly.
    """
    event, memory, reference, single = _as_batch(event, memory, reference)

    def choose(logits):
        lp = logits.log_softmax(-1)
        tok = logits.argmax(-1)
        return tok, lp.gather(-1, tok.unsqueeze(-1)).squeeze(-1)

    seqs, _ = _decode(head, event, memory, reference, max_len or head.max_len, choose)
    return seqs[0] if single else seqs


def sample_decode(
    head: CaptionHead,
    event,
    memory,
    reference,
    generator: torch.Generator,
    max_len: int | None = None,
    temperature: float = 1.0,
) -> SampleResult:
    """Multinomial sampling; keeps the graph so log-probabilities can be trained."""
    event, memory, reference, _ = _as_batch(event, memory, reference)

    def choose(logits):
        if temperature <= 0:
            tok = logits.argmax(-1)
            lp = logits.log_softmax(-1)
        else:
            lp = (logits / temperature).log_softmax(-1)
            tok = torch.multinomial(lp.detach().exp(), 1, generator=generator).squeeze(-1)
        return tok, lp.gather(-1, tok.unsqueeze(-1)).squeeze(-1)

    seqs, step_lp = _decode(head, event, memory, reference, max_len or head.max_len, choose)
    return SampleResult(seqs, step_lp, step_lp.sum(dim=1))
