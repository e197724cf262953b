"""Synthetic reordering tasks, parallel-corpus files, and batching.

A synthetic pair is built as: sample source tokens, permute them with a
reorder rule, then translate position-wise through a bijective dictionary.
The permuted source is, by construction, the gold pseudo-translation, and
the permutation gives gold alignment links.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numcore import ContractError
from .vocab import NULL, PAD, SPECIALS, Vocab

NULL_TOKEN = SPECIALS[NULL]
DATA_DIR_ENV = "REORDERNAT_DATA"
RULES = ("identity", "reverse", "rotate", "swap_halves", "rule_based")


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


# ---------------------------------------------------------------------------
# reorder rules
# ---------------------------------------------------------------------------


def reorder_permutation(rule: str, tokens: Sequence[str], k: int = 1, verbs: frozenset = frozenset()) -> list[int]:
    """Source index feeding each target position under ``rule``."""
    n = len(tokens)
    idx = list(range(n))
    if rule == "identity":
        return idx
    if rule == "reverse":
        return idx[::-1]
    if rule == "rotate":
        k %= max(n, 1)
        return idx[k:] + idx[:k]
    if rule == "swap_halves":
        h = n // 2
        return idx[h:] + idx[:h]
    if rule == "rule_based":
        # SVO -> SOV analogue: verbs move to the end, relative order kept
        return [i for i in idx if tokens[i] not in verbs] + [i for i in idx if tokens[i] in verbs]
    raise ValueError(f"unknown reorder rule {rule!r}")


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 64
    min_len: int = 5
    max_len: int = 12
    pairs: int = 1000
    rule: str = "swap_halves"
    rotate_k: int = 1
    # fraction of source types treated as verbs by ``rule_based``
    verb_fraction: float = 0.15
    # source types with two equiprobable translations, flipped per occurrence
    ambiguous: tuple[int, ...] = ()
    # second reorder rule picked with probability 1/2 per pair (two-mode task)
    alt_rule: str | None = None
    seed: int = 0

    def __post_init__(self):
        for r in (self.rule, self.alt_rule):
            if r is not None and r not in RULES:
                raise ValueError(f"unknown reorder rule {r!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")


@dataclass
class Corpus:
    src: list[list[str]]
    tgt: list[list[str]]
    pseudo: list[list[str]] | None = None
    links: list[list[int | None]] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.src)
        for name in ("tgt", "pseudo", "links"):
            col = getattr(self, name)
            if col is not None and len(col) != n:
                raise ContractError(f"corpus column {name} has {len(col)} rows, src has {n}")

    def __len__(self) -> int:
        return len(self.src)

    def subset(self, idx: Sequence[int]) -> "Corpus":
        pick = lambda col: None if col is None else [col[i] for i in idx]  # noqa: E731
        return Corpus(pick(self.src), pick(self.tgt), pick(self.pseudo), pick(self.links), dict(self.meta))

    def split(self, n_first: int) -> tuple["Corpus", "Corpus"]:
        return self.subset(range(n_first)), self.subset(range(n_first, len(self)))


class SyntheticTask:
    """Dictionary and rules of a synthetic task; :meth:`generate` samples pairs."""

    def __init__(self, spec: SyntheticTaskSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.source_types = [f"s{i}" for i in range(spec.vocab_size)]
        perm = rng.permutation(spec.vocab_size)
        self.token_map = {f"s{i}": f"t{int(perm[i])}" for i in range(spec.vocab_size)}
        self.alt_map = {f"s{i}": f"t{int(perm[i])}b" for i in spec.ambiguous}
        n_verbs = max(1, int(round(spec.verb_fraction * spec.vocab_size)))
        self.verbs = frozenset(self.source_types[-n_verbs:])
        self._rng = np.random.default_rng([spec.seed, 1])

    def translate(self, pseudo: Sequence[str], flips: Sequence[bool] | None = None) -> list[str]:
        out = []
        for j, tok in enumerate(pseudo):
            if flips is not None and flips[j] and tok in self.alt_map:
                out.append(self.alt_map[tok])
            else:
                out.append(self.token_map[tok])
        return out

    def translations(self, tok: str) -> set[str]:
        return {self.token_map[tok]} | ({self.alt_map[tok]} if tok in self.alt_map else set())

    def sample_pair(self, rng: np.random.Generator):
        s = self.spec
        n = int(rng.integers(s.min_len, s.max_len + 1))
        src = [self.source_types[i] for i in rng.integers(0, s.vocab_size, size=n)]
        rule = s.rule
        if s.alt_rule is not None and rng.random() < 0.5:
            rule = s.alt_rule
        perm = reorder_permutation(rule, src, s.rotate_k, self.verbs)
        pseudo = [src[i] for i in perm]
        flips = rng.random(n) < 0.5
        tgt = self.translate(pseudo, flips)
        return src, tgt, pseudo, perm

    def generate(self, pairs: int | None = None, rng: np.random.Generator | None = None) -> Corpus:
        rng = rng if rng is not None else self._rng
        out = Corpus([], [], [], [])
        for _ in range(pairs if pairs is not None else self.spec.pairs):
            src, tgt, pseudo, perm = self.sample_pair(rng)
            out.src.append(src)
            out.tgt.append(tgt)
            out.pseudo.append(pseudo)
            out.links.append(list(perm))
        out.meta["task"] = self.spec
        return out


def gen_synthetic(spec: SyntheticTaskSpec) -> Corpus:
    return SyntheticTask(spec).generate()


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _atomic_write_lines(path: Path, lines: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf8") as f:
        for line in lines:
            f.write(line + "\n")
    os.replace(tmp, path)


def read_lines(path) -> list[list[str]]:
    with open(path, encoding="utf8") as f:
        return [line.split() for line in f]


def write_sentences(path, sentences: Sequence[Sequence[str]]) -> None:
    _atomic_write_lines(path, [" ".join(s) for s in sentences])


def format_pharaoh(links: Sequence[int | None]) -> str:
    """``links[j] = i`` becomes ``i-j``; unaligned target positions are omitted."""
    return " ".join(f"{i}-{j}" for j, i in enumerate(links) if i is not None)


def parse_pharaoh(line: str, tgt_len: int) -> list[int | None]:
    links: list[int | None] = [None] * tgt_len
    for item in line.split():
        i, j = item.split("-")
        i, j = int(i), int(j)
        if not 0 <= j < tgt_len:
            raise ContractError(f"alignment link {item} outside target length {tgt_len}")
        if links[j] is not None:
            raise ContractError(f"target position {j} aligned twice")
        links[j] = i
    return links


def write_corpus(corpus: Corpus, prefix) -> dict[str, Path]:
    """Write ``prefix.src``/``.tgt`` and, when present, ``.pseudo``/``.align``."""
    prefix = str(prefix)
    paths = {"src": Path(prefix + ".src"), "tgt": Path(prefix + ".tgt")}
    write_sentences(paths["src"], corpus.src)
    write_sentences(paths["tgt"], corpus.tgt)
    if corpus.pseudo is not None:
        paths["pseudo"] = Path(prefix + ".pseudo")
        write_sentences(paths["pseudo"], corpus.pseudo)
    if corpus.links is not None:
        paths["align"] = Path(prefix + ".align")
        _atomic_write_lines(paths["align"], [format_pharaoh(l) for l in corpus.links])
    return paths


def read_corpus(prefix) -> Corpus:
    prefix = str(prefix)
    src = read_lines(prefix + ".src")
    tgt = read_lines(prefix + ".tgt")
    if len(src) != len(tgt):
        raise ContractError(f"{prefix}.src has {len(src)} lines but .tgt has {len(tgt)}")
    pseudo = read_lines(prefix + ".pseudo") if os.path.exists(prefix + ".pseudo") else None
    links = None
    if os.path.exists(prefix + ".align"):
        with open(prefix + ".align", encoding="utf8") as f:
            links = [parse_pharaoh(line, len(t)) for line, t in zip(f, tgt)]
    return Corpus(src, tgt, pseudo, links)


def build_vocab(*corpora: Corpus) -> Vocab:
    sents = []
    for c in corpora:
        sents.extend(c.src)
        sents.extend(c.tgt)
    return Vocab.build(sents)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    src: np.ndarray
    src_mask: np.ndarray
    tgt: np.ndarray
    tgt_mask: np.ndarray
    pseudo: np.ndarray | None
    index: np.ndarray

    @property
    def src_len(self) -> np.ndarray:
        return self.src_mask.sum(axis=1)

    @property
    def tgt_len(self) -> np.ndarray:
        return self.tgt_mask.sum(axis=1)

    def __len__(self) -> int:
        return self.src.shape[0]


def pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


@dataclass
class EncodedCorpus:
    src: list[list[int]]
    tgt: list[list[int]]
    pseudo: list[list[int]] | None

    def __len__(self) -> int:
        return len(self.src)


def encode_corpus(corpus: Corpus, vocab: Vocab) -> EncodedCorpus:
    pseudo = None if corpus.pseudo is None else [vocab.encode(z) for z in corpus.pseudo]
    return EncodedCorpus([vocab.encode(s) for s in corpus.src], [vocab.encode(t) for t in corpus.tgt], pseudo)


def make_batch(data: EncodedCorpus, idx: Sequence[int]) -> Batch:
    src, src_mask = pad([data.src[i] for i in idx])
    tgt, tgt_mask = pad([data.tgt[i] for i in idx])
    pseudo = None
    if data.pseudo is not None:
        for i in idx:
            if len(data.pseudo[i]) != len(data.tgt[i]):
                raise ContractError(f"example {i}: pseudo-translation length differs from target length")
        pseudo, _ = pad([data.pseudo[i] for i in idx])
    return Batch(src, src_mask, tgt, tgt_mask, pseudo, np.asarray(idx))


class BatchStream:
    """Deterministic batch schedule: batch ``k`` depends only on (seed, k).

    Each epoch is a fresh seeded shuffle cut into consecutive batches, so a
    run resumed at step ``k`` sees exactly the batches the uninterrupted run
    would have seen.
    """

    def __init__(self, data: EncodedCorpus, batch_size: int, seed: int = 0):
        if len(data) == 0:
            raise ContractError("cannot batch an empty corpus")
        self.data = data
        self.batch_size = batch_size
        self.seed = seed
        self.per_epoch = -(-len(data) // batch_size)
        self._order: dict[int, np.ndarray] = {}

    def epoch_order(self, epoch: int) -> np.ndarray:
        if epoch not in self._order:
            self._order = {epoch: np.random.default_rng([self.seed, epoch]).permutation(len(self.data))}
        return self._order[epoch]

    def indices(self, k: int) -> np.ndarray:
        epoch, pos = divmod(k, self.per_epoch)
        return self.epoch_order(epoch)[pos * self.batch_size : (pos + 1) * self.batch_size]

    def batch(self, k: int) -> Batch:
        return make_batch(self.data, self.indices(k))

    def epoch(self, epoch: int) -> Iterator[Batch]:
        for pos in range(self.per_epoch):
            yield self.batch(epoch * self.per_epoch + pos)


def batch_iter(data: EncodedCorpus, batch_size: int, seed: int = 0, epoch: int = 0) -> Iterator[Batch]:
    return BatchStream(data, batch_size, seed).epoch(epoch)
