from __future__ import annotations

import re
from collections import Counter
from typing import Iterable

PAD, UNK = "<pad>", "<unk>"
_TOKEN_RE = re.compile(r"<pad>|<unk>|\w+|[^\w\s]")


def split_words(text: str) -> list:
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    """Word-level tokenizer: id 0 is padding, id 1 is unknown."""

    def __init__(self, words: Iterable[str]):
        self.vocab = [PAD, UNK] + [w for w in words if w not in (PAD, UNK)]
        self.index = {w: i for i, w in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("duplicate vocabulary entries")

    pad_id = 0
    unk_id = 1

    @classmethod
    def build(cls, texts: Iterable[str], vocab_size: int) -> "Tokenizer":
        """Most frequent words first (ties alphabetical), capped at ``vocab_size - 2``."""
        counts = Counter(w for t in texts for w in split_words(t))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ranked[:max(vocab_size - 2, 0)])

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list:
        return [self.index.get(w, self.unk_id) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    def to_dict(self) -> dict:
        return {"vocab": self.vocab}

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        return cls(d["vocab"][2:])
