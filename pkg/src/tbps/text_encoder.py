"""Caption encoder producing sentence, sub-sentence and word features.

A small bidirectional transformer over word embeddings; the sentence
feature is read at the global marker (position 0), sub-sentence features
at each segment marker, and word features at the word positions. The
sentence feature doubles as the conditioning vector for the
semantic-driven proposal branch.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .tokenizer import TokenSequence


@dataclass
class SemanticFeatures:
    sentence: torch.Tensor        # (D,)
    subsentences: torch.Tensor    # (#segments, D)
    words: torch.Tensor           # (#words, D)

    @property
    def parts(self) -> torch.Tensor:
        """Mixed textual parts (n, D): sentence, sub-sentences, words."""
        return torch.cat([self.sentence.unsqueeze(0), self.subsentences, self.words])


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.ReLU(inplace=True),
                                 nn.Linear(dim * 2, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        attended, _ = self.attn(x, x, x, key_padding_mask=pad_mask, need_weights=False)
        x = self.norm1(x + attended)
        return self.norm2(x + self.mlp(x))


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, dim: int = 128, heads: int = 4,
                 layers: int = 2, max_tokens: int = 48) -> None:
        super().__init__()
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=0)
        self.pos = nn.Parameter(torch.zeros(max_tokens, dim))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads) for _ in range(layers))
        self.dim = dim
        self.max_tokens = max_tokens

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Final hidden states (B, L, D) for id/mask batches."""
        if ids.dim() != 2:
            raise ValueError("ids must be B x L")
        if ids.shape[1] > self.max_tokens:
            raise ValueError(
                f"sequence length {ids.shape[1]} exceeds max_tokens {self.max_tokens}")
        x = self.embed(ids) + self.pos[: ids.shape[1]].to(self.embed.weight.dtype)
        pad_mask = mask == 0
        for block in self.blocks:
            x = block(x, pad_mask)
        return x

    def encode(self, seqs: list[TokenSequence]) -> list[SemanticFeatures]:
        device = self.embed.weight.device
        dtype = self.embed.weight.dtype
        ids = torch.stack([torch.as_tensor(s.ids, device=device) for s in seqs])
        mask = torch.stack([torch.as_tensor(s.mask, device=device, dtype=dtype)
                            for s in seqs])
        hidden = self.forward(ids, mask)
        out = []
        for row, seq in zip(hidden, seqs):
            out.append(SemanticFeatures(
                sentence=row[seq.sentence_position],
                subsentences=row[list(seq.segment_positions)],
                words=row[list(seq.word_positions)]))
        return out
