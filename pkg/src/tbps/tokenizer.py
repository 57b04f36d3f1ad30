"""Word-level tokenization with sentence and sub-sentence marker positions."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

PAD, CLS, UNK = 0, 1, 2
RESERVED = ("<pad>", "<cls>", "<unk>")

_WORD = re.compile(r"[a-z]+")


def split_words(text: str) -> list[str]:
    """Lowercase alphabetic runs; digits and punctuation act as separators."""
    return _WORD.findall(text.lower())


class Vocabulary:
    """Token/id mapping with fixed reserved slots for pad, cls and unk."""

    def __init__(self, tokens: list[str]) -> None:
        for reserved in RESERVED:
            if reserved in tokens:
                raise ValueError(f"token list may not contain reserved token {reserved!r}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("token list contains duplicates")
        self._tokens = list(RESERVED) + list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]


@dataclass
class TokenSequence:
    """Fixed-length id/mask arrays plus marker positions for feature readout.

    Position 0 is a global marker covering the whole caption; each comma
    segment gets its own marker directly before its words. unk ids still
    occupy word positions so unknown words keep their slot in attention.
    """
    ids: np.ndarray                 # (max_tokens,) int64
    mask: np.ndarray                # (max_tokens,) float32, 1 = real token
    segment_positions: list[int]    # one marker position per comma segment
    word_positions: list[int]

    @property
    def sentence_position(self) -> int:
        return 0

    @property
    def num_parts(self) -> int:
        return 1 + len(self.segment_positions) + len(self.word_positions)

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def tokenize(text: str, vocab: Vocabulary, max_tokens: int) -> TokenSequence:
    segments = [split_words(part) for part in text.split(",")]
    segments = [seg for seg in segments if seg]
    if not segments:
        raise ValueError(f"caption has no words: {text!r}")

    ids = [CLS]
    segment_positions: list[int] = []
    word_positions: list[int] = []
    for seg in segments:
        if len(ids) >= max_tokens:
            break
        segment_positions.append(len(ids))
        ids.append(CLS)
        for word in seg:
            if len(ids) >= max_tokens:
                break
            word_positions.append(len(ids))
            ids.append(vocab.id_of(word))
    ids = ids[:max_tokens]

    out_ids = np.full(max_tokens, PAD, dtype=np.int64)
    out_ids[: len(ids)] = ids
    mask = np.zeros(max_tokens, dtype=np.float32)
    mask[: len(ids)] = 1.0
    return TokenSequence(ids=out_ids, mask=mask,
                         segment_positions=segment_positions,
                         word_positions=word_positions)
