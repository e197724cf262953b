"""IBM Model 1 word alignment and pseudo-translation construction.

Each target word is explained by exactly one source word or by the NULL
source word.  EM estimates the lexical table t(f | e); Viterbi links then
pick, for every target position, the source position with the highest
t(y_j | x_i).  A pseudo-translation replaces each target word by the source
word it is linked to, or by the NULL symbol when it is unlinked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import NULL_TOKEN, Corpus
from .numcore import ContractError

Links = list  # list[int | None], indexed by target position


@dataclass
class TranslationTable:
    """Dense t(f | e) with row 0 reserved for the NULL source word."""

    src_index: dict[str, int]
    tgt_index: dict[str, int]
    t: np.ndarray
    log_likelihood: list[float] = field(default_factory=list)

    def prob(self, f: str, e: str | None) -> float:
        """t(f | e); ``e=None`` is the NULL word.  Unseen pairs have probability 0."""
        i = 0 if e is None else self.src_index.get(e)
        j = self.tgt_index.get(f)
        if i is None or j is None:
            return 0.0
        return float(self.t[i, j])

    def row_sums(self) -> np.ndarray:
        return self.t.sum(axis=1)


def _index(sentences: Sequence[Sequence[str]], offset: int = 0) -> dict[str, int]:
    idx: dict[str, int] = {}
    for s in sentences:
        for tok in s:
            if tok not in idx:
                idx[tok] = len(idx) + offset
    return idx


def _encode(pairs, src_index, tgt_index):
    out = []
    for src, tgt in pairs:
        e = np.array([0] + [src_index[w] for w in src], dtype=np.int64)
        f = np.array([tgt_index[w] for w in tgt], dtype=np.int64)
        out.append((e, f))
    return out


def _log_likelihood(enc, t) -> float:
    """Sum over pairs of log P(f | e) up to the constant alignment prior."""
    ll = 0.0
    for e, f in enc:
        if len(f) == 0:
            continue
        probs = t[np.ix_(e, f)].sum(axis=0) / len(e)
        ll += float(np.log(probs).sum())
    return ll


def ibm1_em_train(pairs: Sequence[tuple[Sequence[str], Sequence[str]]], iterations: int = 10, seed: int = 0) -> TranslationTable:
    """EM for IBM Model 1 with a NULL source word.

    ``t`` starts uniform over the target words each source word co-occurs
    with.  The result records the corpus log-likelihood before every
    iteration and after the last one.  Initialization is deterministic;
    ``seed`` is accepted for interface symmetry and unused.
    """
    del seed
    pairs = list(pairs)
    if not pairs:
        raise ContractError("cannot train an aligner on an empty corpus")
    if iterations < 1:
        raise ContractError("iterations must be >= 1")
    src_index = _index([p[0] for p in pairs], offset=1)
    tgt_index = _index([p[1] for p in pairs])
    enc = _encode(pairs, src_index, tgt_index)

    cooc = np.zeros((len(src_index) + 1, len(tgt_index)), dtype=bool)
    for e, f in enc:
        cooc[np.ix_(e, f)] = True
    t = cooc / np.maximum(cooc.sum(axis=1, keepdims=True), 1)

    history = []
    for _ in range(iterations):
        history.append(_log_likelihood(enc, t))
        counts = np.zeros_like(t)
        for e, f in enc:
            if len(f) == 0:
                continue
            block = t[np.ix_(e, f)]
            post = block / block.sum(axis=0, keepdims=True)
            np.add.at(counts, (e[:, None], f[None, :]), post)
        totals = counts.sum(axis=1, keepdims=True)
        t = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 0.0)
    history.append(_log_likelihood(enc, t))
    return TranslationTable(src_index, tgt_index, t, history)


def viterbi_align(src: Sequence[str], tgt: Sequence[str], table: TranslationTable) -> Links:
    """Best source position per target position, or None when NULL wins outright.

    Among source words, ties go to the smaller position; NULL wins only when
    strictly better than every source word.  Unknown tokens have probability
    0, so a target word unseen in training is left unlinked.
    """
    links: Links = []
    null_p = [table.prob(f, None) for f in tgt]
    for j, f in enumerate(tgt):
        best_i, best_p = None, 0.0
        for i, e in enumerate(src):
            p = table.prob(f, e)
            if p > best_p:
                best_i, best_p = i, p
        if best_i is None or null_p[j] > best_p:
            links.append(None)
        else:
            links.append(best_i)
    return links


def build_pseudo_translation(src: Sequence[str], tgt: Sequence[str], links: Links) -> list[str]:
    """Source word linked to each target position, NULL symbol where unlinked."""
    if len(links) != len(tgt):
        raise ContractError(f"{len(links)} links for a target of length {len(tgt)}")
    out = []
    for j, i in enumerate(links):
        if i is None:
            out.append(NULL_TOKEN)
        elif not 0 <= i < len(src):
            raise ContractError(f"link {i}-{j} points outside a source of length {len(src)}")
        else:
            out.append(src[i])
    return out


def align_corpus(corpus: Corpus, table: TranslationTable) -> Corpus:
    """Copy of ``corpus`` with Viterbi links and the pseudo-translations they induce."""
    links = [viterbi_align(s, t, table) for s, t in zip(corpus.src, corpus.tgt)]
    pseudo = [build_pseudo_translation(s, t, l) for s, t, l in zip(corpus.src, corpus.tgt, links)]
    return Corpus(corpus.src, corpus.tgt, pseudo, links, dict(corpus.meta))


def alignment_accuracy(src_sents, links_pred, links_gold) -> float:
    """Fraction of target positions whose predicted link points at the gold source word.

    Links are compared by the source token they select, so a link to another
    occurrence of the same source word counts as correct.
    """
    hit = total = 0
    for src, pred, gold in zip(src_sents, links_pred, links_gold):
        for p, g in zip(pred, gold):
            total += 1
            if p is None or g is None:
                hit += p is None and g is None
            else:
                hit += src[p] == src[g]
    return hit / max(total, 1)
