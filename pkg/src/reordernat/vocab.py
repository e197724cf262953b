"""Token/id mapping with fixed special symbols."""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

from .numcore import ContractError

PAD, BOS, EOS, UNK, NULL = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>", "<null>")


class VocabError(KeyError):
    pass


class Vocab:
    """Bijection between tokens and contiguous ids; specials occupy ids 0-4."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.itos):
                raise VocabError(f"id {i} outside vocabulary of size {len(self)}")
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]]) -> "Vocab":
        """Frequency-ordered vocabulary (ties broken by first appearance)."""
        counts: Counter[str] = Counter()
        for sent in sentences:
            counts.update(sent)
        if not counts:
            raise ContractError("cannot build a vocabulary from empty input")
        ordered = sorted(counts, key=lambda t: -counts[t])  # stable: keeps first-seen order on ties
        return cls([t for t in ordered if t not in SPECIALS])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf8") as f:
            for tok in self.itos[len(SPECIALS):]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf8") as f:
            return cls([line.rstrip("\n") for line in f if line.strip()])
