"""Translation metrics: corpus BLEU, RIBES, duplicate/missing token ratios,
and forward-pass accounting.

All metric functions take whitespace-tokenized sentences (lists of strings)
and are pure.

Definitions used for the multimodality ratios:

* dup_ratio: tokens equal to their immediate predecessor / all tokens.
* mis_ratio: per sentence and token type, max(0, ref count - hyp count),
  summed and divided by the number of reference tokens.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .numcore import ContractError

Sentence = Sequence[str]

RIBES_ALPHA = 0.25
RIBES_BETA = 0.10


def _ngrams(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sentence], references: Sequence[Sentence], max_n: int = 4) -> float:
    """Corpus BLEU-4 on a 0-100 scale, without smoothing.

    An order with no hypothesis n-grams at all (every hypothesis shorter than
    n) is left out of the geometric mean; an order with n-grams but no
    matches makes the score 0.
    """
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractError("BLEU of an empty corpus is undefined")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += sum(h.values())
    if hyp_len == 0:
        return 0.0
    log_p = []
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        if m == 0:
            return 0.0
        log_p.append(math.log(m / t))
    bp = min(0.0, 1.0 - ref_len / hyp_len)
    return 100.0 * math.exp(bp + sum(log_p) / len(log_p))


def _align_words(hyp: Sentence, ref: Sentence) -> list[int]:
    """Reference positions of hypothesis words, in hypothesis order.

    The k-th occurrence of a word in the hypothesis is matched to its k-th
    occurrence in the reference; surplus occurrences stay unmatched.
    """
    positions: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        positions.setdefault(w, []).append(j)
    seen: Counter = Counter()
    out = []
    for w in hyp:
        k = seen[w]
        seen[w] += 1
        if k < len(positions.get(w, ())):
            out.append(positions[w][k])
    return out


def kendall_tau(ranks: Sequence[int]) -> float:
    n = len(ranks)
    pairs = n * (n - 1) // 2
    if pairs == 0:
        return 0.0
    conc = sum(1 for i in range(n) for j in range(i + 1, n) if ranks[i] < ranks[j])
    return (2 * conc - pairs) / pairs


def sentence_ribes(hyp: Sentence, ref: Sentence, alpha: float = RIBES_ALPHA, beta: float = RIBES_BETA) -> float:
    """NKT * P^alpha * BP^beta for one sentence, on a 0-1 scale."""
    if not hyp or not ref:
        return 0.0
    ranks = _align_words(hyp, ref)
    if len(ranks) < 2:
        return 0.0
    nkt = (kendall_tau(ranks) + 1.0) / 2.0
    precision = len(ranks) / len(hyp)
    bp = min(1.0, math.exp(1.0 - len(ref) / len(hyp)))
    return nkt * precision**alpha * bp**beta


def ribes(hypotheses: Sequence[Sentence], references: Sequence[Sentence]) -> float:
    """Mean sentence RIBES on a 0-100 scale."""
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractError("RIBES of an empty corpus is undefined")
    return 100.0 * sum(sentence_ribes(h, r) for h, r in zip(hypotheses, references)) / len(hypotheses)


def dup_ratio(hypotheses: Sequence[Sentence]) -> float:
    total = sum(len(h) for h in hypotheses)
    if total == 0:
        return 0.0
    dups = sum(1 for h in hypotheses for a, b in zip(h, h[1:]) if a == b)
    return dups / total


def mis_ratio(hypotheses: Sequence[Sentence], references: Sequence[Sentence]) -> float:
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    total = sum(len(r) for r in references)
    if total == 0:
        return 0.0
    missing = 0
    for h, r in zip(hypotheses, references):
        hc = Counter(h)
        missing += sum(max(0, c - hc[w]) for w, c in Counter(r).items())
    return missing / total


def relative_increment(system: float, baseline: float) -> float | None:
    """Signed percentage change of ``system`` over ``baseline``; None if baseline is 0."""
    if baseline == 0:
        return None
    return 100.0 * (system - baseline) / baseline


@dataclass
class MetricReport:
    system: str
    bleu: float
    ribes: float
    dup_ratio: float
    mis_ratio: float
    dup_increment: float | None = None
    mis_increment: float | None = None
    pass_counts: dict[str, int] = field(default_factory=dict)

    def records(self) -> list[str]:
        """Line-oriented ``key=value`` form (the golden-file format)."""
        lines = [
            f"system={self.system}",
            f"bleu={self.bleu:.4f}",
            f"ribes={self.ribes:.4f}",
            f"dup_ratio={self.dup_ratio:.6f}",
            f"mis_ratio={self.mis_ratio:.6f}",
        ]
        if self.dup_increment is not None or self.mis_increment is not None:
            lines.append(f"dup_increment={_fmt_inc(self.dup_increment)}")
            lines.append(f"mis_increment={_fmt_inc(self.mis_increment)}")
        for k in sorted(self.pass_counts):
            lines.append(f"passes.{k}={self.pass_counts[k]}")
        return lines


def _fmt_inc(v: float | None) -> str:
    return "n/a" if v is None else f"{v:+.2f}"


def evaluate(
    system: str,
    hypotheses: Sequence[Sentence],
    references: Sequence[Sentence],
    baseline: MetricReport | None = None,
    pass_counts: Mapping[str, int] | None = None,
) -> MetricReport:
    rep = MetricReport(
        system,
        corpus_bleu(hypotheses, references),
        ribes(hypotheses, references),
        dup_ratio(hypotheses),
        mis_ratio(hypotheses, references),
        pass_counts=dict(pass_counts or {}),
    )
    if baseline is not None:
        rep.dup_increment = relative_increment(rep.dup_ratio, baseline.dup_ratio)
        rep.mis_increment = relative_increment(rep.mis_ratio, baseline.mis_ratio)
    return rep


def parse_records(lines: Sequence[str]) -> MetricReport:
    kv = {}
    for line in lines:
        line = line.strip()
        if line and "=" in line:
            k, v = line.split("=", 1)
            kv[k] = v
    inc = lambda k: None if kv.get(k, "n/a") == "n/a" else float(kv[k])  # noqa: E731
    passes = {k[len("passes."):]: int(v) for k, v in kv.items() if k.startswith("passes.")}
    return MetricReport(
        kv["system"], float(kv["bleu"]), float(kv["ribes"]), float(kv["dup_ratio"]), float(kv["mis_ratio"]),
        inc("dup_increment"), inc("mis_increment"), passes,
    )


HEADER = (
    "# dup_ratio = adjacent repeated tokens / hypothesis tokens; "
    "mis_ratio = clipped reference-count deficit / reference tokens; "
    "increments are % relative to the baseline system"
)


def render_table(reports: Sequence[MetricReport], speedups: Mapping[str, float] | None = None) -> str:
    """Human-readable comparison table."""
    cols = ["system", "BLEU", "RIBES", "Dup", "Mis", "Dup+%", "Mis+%", "dec.passes", "speedup"]
    speedups = speedups or {}
    rows = []
    for r in reports:
        sp = speedups.get(r.system)
        rows.append([
            r.system, f"{r.bleu:.2f}", f"{r.ribes:.2f}", f"{r.dup_ratio:.4f}", f"{r.mis_ratio:.4f}",
            _fmt_inc(r.dup_increment), _fmt_inc(r.mis_increment),
            str(r.pass_counts.get("decoder", "-")),
            "-" if sp is None else f"{sp:.2f}x",
        ])
    widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(cols)]
    fmt = lambda row: "  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip()  # noqa: E731
    return "\n".join([HEADER, fmt(cols), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


@dataclass
class LatencyReport:
    passes: dict[str, dict[str, int]]
    speedup: dict[str, float]
    reference: str


def latency_report(results: Mapping[str, Sequence], reference: str = "at_teacher") -> LatencyReport:
    """Total forward passes per system and per module, and the decoder-pass
    speedup of each system relative to ``reference``.

    ``results`` maps a system name to its per-sentence decode results (objects
    with a ``passes`` dict).
    """
    sizes = {name: len(rs) for name, rs in results.items()}
    if len(set(sizes.values())) > 1:
        raise ContractError(f"systems were decoded on different corpora: {sizes}")
    totals = {}
    for name, rs in results.items():
        c: Counter = Counter()
        for r in rs:
            c.update(r.passes)
        totals[name] = {k: int(c.get(k, 0)) for k in ("encoder", "reorder", "decoder")}
    ref = totals[reference]["decoder"]
    speedup = {name: ref / t["decoder"] if t["decoder"] else float("inf") for name, t in totals.items()}
    return LatencyReport(totals, speedup, reference)
