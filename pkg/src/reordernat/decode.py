"""Inference: guided decoding (DGD / NDGD), length-parallel decoding, the
plain-NAT baseline, and greedy / beam decoding for the autoregressive teacher.

Every result carries forward-pass counts per module.  For autoregressive
loops, a pass counts when it emits an output token; the final step that only
emits EOS is not counted, so an m-token output costs m passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .model import (
    ATTransformer,
    EncoderOutput,
    GuidanceDistribution,
    PlainNAT,
    ReorderNAT,
    restricted_mask,
    restricted_vocab,
)
from .numcore import ContractError
from .vocab import BOS, EOS, PAD

STRATEGIES = ("dgd", "ndgd", "lpd", "nat_baseline", "at_greedy", "at_beam")


@dataclass
class DecodeConfig:
    strategy: str = "dgd"
    temperature: float | None = None  # None: the model's configured T
    beam: int = 4
    lpd_samples: int = 1
    lpd_guide: str = "dgd"
    max_len: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.beam < 1:
            raise ValueError("beam size must be >= 1")
        if self.lpd_samples < 1 or self.lpd_samples % 2 == 0:
            raise ValueError("lpd_samples must be odd and >= 1")
        if self.lpd_guide not in ("dgd", "ndgd"):
            raise ValueError("lpd_guide must be dgd or ndgd")


@dataclass
class DecodeResult:
    tokens: list[int]
    pseudo: list[int] | None = None
    guidance: GuidanceDistribution | None = None
    log_probs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    passes: dict[str, int] = field(default_factory=dict)
    length: int = 0
    score: float = 0.0
    truncated: bool = False
    candidates: list["DecodeResult"] = field(default_factory=list)


class _PassMeter:
    def __init__(self, model):
        self.model = model
        self.start = dict(model.passes)

    def read(self) -> dict[str, int]:
        now = self.model.passes
        return {k: now.get(k, 0) - self.start.get(k, 0) for k in ("encoder", "reorder", "decoder")}


def _check_source(x: Sequence[int]) -> None:
    if len(x) == 0:
        raise ContractError("cannot decode an empty source sentence")


def _reorder(model: ReorderNAT, enc: EncoderOutput, length: int | None, max_len: int | None):
    """Pseudo tokens, restricted scores (m, V) and the chosen length."""
    if model.config.reorder_kind == "at":
        tokens, scores, truncated = model.reorder_at_greedy(enc, max_len)
        return tokens, scores, len(tokens), truncated
    m = int(length) if length is not None else int(model.predict_length(enc)[1][0])
    m = max(1, m)
    scores = model.reorder_nat_scores(enc.states, enc.src, enc.src_mask, np.array([m])).data[0]
    return [int(t) for t in scores.argmax(axis=-1)], scores, m, False


def _guided(model: ReorderNAT, x, enc: EncoderOutput, guide: str, T: float, length=None, max_len=None) -> DecodeResult:
    meter = _PassMeter(model)
    pseudo, scores, m, truncated = _reorder(model, enc, length, max_len)
    support = restricted_mask(enc.src, enc.src_mask, model.config.vocab_size)[0]
    z_logp = nc.log_softmax(nc.Tensor(scores), support).data
    z_lp = z_logp[np.arange(m), pseudo]
    rv = restricted_vocab(x)
    q = nc.softmax(nc.Tensor(scores), T, support).data
    dist = GuidanceDistribution(q[:, rv], rv)
    if guide == "dgd":
        inp = model.guide_dgd(np.array([pseudo]))
    else:
        inp = model.guide_ndgd(nc.Tensor(q[None]))
    logits = model.decoder_module(inp, enc.states, enc.src_mask, np.ones((1, m), dtype=bool))
    logp = nc.log_softmax(logits).data[0]
    y = [int(t) for t in logp.argmax(axis=-1)]
    y_lp = logp[np.arange(m), y]
    passes = meter.read()
    return DecodeResult(
        tokens=y,
        pseudo=pseudo,
        guidance=dist,
        log_probs=y_lp,
        passes=passes,
        length=m,
        score=float((y_lp.sum() + z_lp.sum()) / m),
        truncated=truncated,
    )


def _temperature(model, config: DecodeConfig) -> float:
    return model.config.temperature if config.temperature is None else config.temperature


def dgd_decode(x: Sequence[int], model: ReorderNAT, config: DecodeConfig | None = None, length: int | None = None) -> DecodeResult:
    """Most probable pseudo-translation first, then translate conditioned on it."""
    config = config or DecodeConfig("dgd")
    _check_source(x)
    meter = _PassMeter(model)
    res = _guided(model, x, model.encode(x), "dgd", _temperature(model, config), length, config.max_len)
    res.passes = meter.read()
    return res


def ndgd_decode(x: Sequence[int], model: ReorderNAT, config: DecodeConfig | None = None, length: int | None = None) -> DecodeResult:
    """Translate from embeddings weighted by the guidance distribution."""
    config = config or DecodeConfig("ndgd")
    _check_source(x)
    meter = _PassMeter(model)
    res = _guided(model, x, model.encode(x), "ndgd", _temperature(model, config), length, config.max_len)
    res.passes = meter.read()
    return res


def lpd_decode(x: Sequence[int], model, config: DecodeConfig, length: int | None = None) -> DecodeResult:
    """Decode at ``s`` lengths around the prediction; keep the best normalized score.

    ``length`` overrides the predicted centre length.
    """
    _check_source(x)
    if isinstance(model, ReorderNAT) and model.config.reorder_kind != "nat":
        raise ContractError("length-parallel decoding needs a non-autoregressive reordering module")
    meter = _PassMeter(model)
    enc = model.encode(x)
    centre = int(length) if length is not None else int(model.predict_length(enc)[1][0])
    half = config.lpd_samples // 2
    lengths = sorted({max(1, centre + k) for k in range(-half, half + 1)})
    cands = []
    for m in lengths:
        if isinstance(model, PlainNAT):
            cands.append(_plain(model, enc, m))
        else:
            cands.append(_guided(model, x, enc, config.lpd_guide, _temperature(model, config), m))
    # ties keep the earliest (shortest) candidate
    best = max(range(len(cands)), key=lambda i: (cands[i].score, -i))
    res = cands[best]
    out = DecodeResult(**{**res.__dict__, "candidates": cands})
    out.passes = meter.read()
    return out


def _plain(model: PlainNAT, enc: EncoderOutput, m: int) -> DecodeResult:
    meter = _PassMeter(model)
    logits = model.forward(enc.states, enc.src, enc.src_mask, np.array([m]))
    logp = nc.log_softmax(logits).data[0]
    y = [int(t) for t in logp.argmax(axis=-1)]
    lp = logp[np.arange(m), y]
    return DecodeResult(tokens=y, log_probs=lp, passes=meter.read(), length=m, score=float(lp.mean()))


def nat_baseline_decode(x: Sequence[int], model: PlainNAT, config: DecodeConfig | None = None, length: int | None = None) -> DecodeResult:
    """Predicted length, uniform-copy input, per-position argmax."""
    _check_source(x)
    meter = _PassMeter(model)
    enc = model.encode(x)
    m = int(length) if length is not None else int(model.predict_length(enc)[1][0])
    res = _plain(model, enc, max(1, m))
    res.passes = meter.read()
    return res


def _at_step_logp(model: ATTransformer, enc: EncoderOutput, prefixes: np.ndarray) -> np.ndarray:
    B = prefixes.shape[0]
    states = enc.states if B == 1 else nc.Tensor(np.repeat(enc.states.data, B, axis=0))
    src_mask = np.repeat(enc.src_mask, B, axis=0)
    logits = model.forward(states, src_mask, prefixes, np.ones(prefixes.shape, dtype=bool))
    logp = nc.log_softmax(logits[:, -1]).data
    logp[:, [PAD, BOS]] = -np.inf
    return logp


def at_decode(x: Sequence[int], model: ATTransformer, config: DecodeConfig | None = None) -> DecodeResult:
    """Left-to-right decoding: greedy when ``beam == 1`` or strategy is ``at_greedy``."""
    config = config or DecodeConfig("at_greedy", beam=1)
    _check_source(x)
    beam = 1 if config.strategy == "at_greedy" else config.beam
    max_len = config.max_len or model.config.max_len
    meter = _PassMeter(model)
    enc = model.encode(x)
    res = _at_greedy(model, enc, max_len) if beam == 1 else _at_beam(model, enc, beam, max_len)
    passes = meter.read()
    # the terminal EOS-only step is not an output pass
    if not res.truncated:
        passes["decoder"] -= 1
    res.passes = passes
    return res


def _at_greedy(model, enc, max_len) -> DecodeResult:
    prefix = [BOS]
    lps: list[float] = []
    truncated = True
    for _ in range(max_len + 1):
        logp = _at_step_logp(model, enc, np.array([prefix]))[0]
        if len(prefix) == 1:
            logp[EOS] = -np.inf
        tok = int(np.argmax(logp))
        lps.append(float(logp[tok]))
        if tok == EOS:
            truncated = False
            break
        if len(prefix) > max_len:
            lps.pop()
            break
        prefix.append(tok)
    tokens = prefix[1:]
    lp = np.array(lps)
    return DecodeResult(tokens=tokens, log_probs=lp, length=len(tokens), score=float(lp.sum() / len(lp)), truncated=truncated)


def _at_beam(model, enc, beam: int, max_len: int) -> DecodeResult:
    # The greedy path is kept alive until it ends, so the returned hypothesis
    # never scores below greedy decoding under the same normalization.
    alive: list[tuple[list[int], float, list[float]]] = [([BOS], 0.0, [])]
    finished: list[tuple[list[int], float, list[float]]] = []
    greedy: list[int] | None = [BOS]
    for step in range(max_len + 1):
        prefixes = np.array([h[0] for h in alive])
        logp = _at_step_logp(model, enc, prefixes)
        if step == 0:
            logp[:, EOS] = -np.inf
        if step == max_len:
            logp[:, [i for i in range(logp.shape[1]) if i != EOS]] = -np.inf
        total = np.array([h[1] for h in alive])[:, None] + logp
        flat = np.argsort(-total, axis=None, kind="stable")[: 2 * beam]
        follow = None
        if greedy is not None:
            g = next(i for i, h in enumerate(alive) if h[0] == greedy)
            follow = (g, int(np.argmax(logp[g])))
        nxt = []
        for b, tok in [divmod(int(f), logp.shape[1]) for f in flat] + ([follow] if follow else []):
            if not np.isfinite(total[b, tok]):
                continue
            toks, _, lps = alive[b]
            cand = (toks + [tok], float(total[b, tok]), lps + [float(logp[b, tok])])
            is_greedy = (b, tok) == follow
            if any(h[0] == cand[0] for h in finished + nxt):
                continue
            if tok == EOS:
                finished.append(cand)
            elif len(nxt) < beam or is_greedy:
                nxt.append(cand)
        if follow is not None:
            greedy = None if follow[1] == EOS else alive[follow[0]][0] + [follow[1]]
        alive = nxt
        if (len(finished) >= beam and greedy is None) or not alive:
            break
    truncated = not finished
    pool = finished or alive
    # length-normalized score; EOS counts as a token
    best = max(pool, key=lambda h: h[1] / len(h[2]))
    tokens = [t for t in best[0][1:] if t != EOS]
    lp = np.array(best[2])
    return DecodeResult(tokens=tokens, log_probs=lp, length=len(tokens), score=float(lp.sum() / len(lp)), truncated=truncated)


def decode(x: Sequence[int], model, config: DecodeConfig, length: int | None = None) -> DecodeResult:
    """Dispatch on ``config.strategy``."""
    s = config.strategy
    if s == "dgd":
        return dgd_decode(x, model, config, length)
    if s == "ndgd":
        return ndgd_decode(x, model, config, length)
    if s == "lpd":
        return lpd_decode(x, model, config, length)
    if s == "nat_baseline":
        return nat_baseline_decode(x, model, config, length)
    return at_decode(x, model, config)


def decode_corpus(sources: Sequence[Sequence[int]], model, config: DecodeConfig, lengths=None) -> list[DecodeResult]:
    return [decode(x, model, config, None if lengths is None else lengths[i]) for i, x in enumerate(sources)]
