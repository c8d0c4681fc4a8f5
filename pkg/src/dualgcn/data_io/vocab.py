from __future__ import annotations

import json
from collections import Counter
from typing import Iterable, Sequence

from ..metrics import tokenize

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = (PAD, BOS, EOS, UNK)


class Vocabulary:
    """Token/id bijection with reserved ids ``<pad>=0, <bos>=1, <eos>=2, <unk>=3``."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, text, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        ids = [self.stoi.get(t, UNK_ID) for t in tokenize(text)]
        return ([BOS_ID] if add_bos else []) + ids + ([EOS_ID] if add_eos else [])

    def decode(self, ids: Sequence[int], strip: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD_ID, BOS_ID):
                continue
            if strip and i == EOS_ID:
                break
            words.append(self.itos[i])
        return " ".join(words)

    def to_json(self) -> str:
        return json.dumps(self.itos)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        itos = json.loads(text)
        if tuple(itos[:4]) != RESERVED:
            raise ValueError("vocabulary does not start with the reserved tokens")
        return cls(itos[4:])


def build_vocab(captions: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Tokens seen at least ``min_count`` times, most frequent first (ties alphabetical)."""
    counts = Counter()
    for c in captions:
        counts.update(tokenize(c))
    for r in RESERVED:
        counts.pop(r, None)
    kept = sorted((t for t, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    if not kept and not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(kept)
