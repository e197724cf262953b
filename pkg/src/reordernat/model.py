"""ReorderNAT and the two reference architectures it is compared against.

* :class:`ReorderNAT` -- encoder, a reordering module that emits a
  pseudo-translation (source words in target order), and a non-autoregressive
  decoder module guided by that pseudo-translation.  The reordering module is
  either non-autoregressive (Transformer decoder blocks over uniform-copied
  source embeddings) or autoregressive (one GRU decoder block).
* :class:`PlainNAT` -- the same encoder and decoder without reordering; the
  decoder reads uniform-copied source embeddings directly.
* :class:`ATTransformer` -- a left-to-right Transformer used as the
  distillation teacher and the autoregressive baseline.

Batched methods take padded id matrices and boolean masks (True = real
token).  The embedding table is shared by every input path.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import blocks
from . import numcore as nc
from .blocks import BlockParams
from .numcore import ContractError, ParameterError, Tensor
from .vocab import BOS, EOS, NULL, PAD, VocabError

ARCHS = ("reordernat", "plain_nat", "at_teacher")


@dataclass
class ModelConfig:
    vocab_size: int
    arch: str = "reordernat"
    reorder_kind: str = "nat"
    n_layers: int = 3
    reorder_layers: int = 1
    model_dim: int = 32
    hidden_dim: int = 64
    head_count: int = 2
    dropout_rate: float = 0.0
    temperature: float = 0.2
    label_smoothing: float = 0.15
    max_len_offset: int = 20
    max_len: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ParameterError(f"unknown arch {self.arch!r}")
        if self.reorder_kind not in ("nat", "at"):
            raise ParameterError(f"reorder_kind must be 'nat' or 'at', got {self.reorder_kind!r}")
        if self.arch == "reordernat":
            if not 1 <= self.reorder_layers < self.n_layers:
                raise ParameterError(
                    f"need 1 <= reorder_layers < n_layers, got K={self.reorder_layers}, N={self.n_layers}"
                )
            if self.reorder_kind == "at" and self.reorder_layers != 1:
                raise ParameterError("an autoregressive reordering module has exactly one block")
        if self.model_dim % self.head_count or self.model_dim % 2:
            raise ParameterError("model_dim must be even and divisible by head_count")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if not 0 <= self.label_smoothing < 1:
            raise ParameterError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")

    @property
    def decoder_layers(self) -> int:
        if self.arch == "reordernat":
            return self.n_layers - self.reorder_layers
        if self.arch == "plain_nat":
            return self.n_layers - 1
        return self.n_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class EncoderOutput:
    states: Tensor  # (n, d) for one sentence, (B, n, d) batched
    src: np.ndarray
    src_mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.src_mask.sum(axis=-1).max())


@dataclass
class GuidanceDistribution:
    """Per-position distribution over the restricted reordering vocabulary."""

    probs: np.ndarray  # (m, V_r)
    restricted_vocab: list[int]

    def argmax(self) -> list[int]:
        return [self.restricted_vocab[j] for j in self.probs.argmax(axis=-1)]


def restricted_vocab(x: Sequence[int]) -> list[int]:
    """Distinct source tokens in first-occurrence order, then NULL."""
    seen: dict[int, None] = {}
    for tok in x:
        if tok != PAD:
            seen.setdefault(int(tok), None)
    seen.pop(NULL, None)
    return list(seen) + [NULL]


def restricted_mask(src: np.ndarray, src_mask: np.ndarray, vocab_size: int, eos: bool = False) -> np.ndarray:
    """(B, V) boolean support: every source token of the row, NULL, optionally EOS."""
    src = np.atleast_2d(src)
    src_mask = np.atleast_2d(src_mask)
    out = np.zeros((src.shape[0], vocab_size), dtype=bool)
    rows = np.broadcast_to(np.arange(src.shape[0])[:, None], src.shape)
    out[rows[src_mask], src[src_mask]] = True
    out[:, NULL] = True
    if eos:
        out[:, EOS] = True
    return out


def guidance_from_scores(scores, temperature: float, mask=None) -> Tensor:
    """Row-wise ``softmax(scores / T)``, optionally restricted to ``mask``."""
    return nc.softmax(nc.as_tensor(scores), temperature, mask)


def length_offset_indices(n: np.ndarray, m: np.ndarray, delta: int) -> np.ndarray:
    return np.clip(np.asarray(m) - np.asarray(n), -delta, delta) + delta


def _pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, ids != PAD


class _Seq2Seq:
    """Shared embedding/encoder/length-predictor machinery."""

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.passes: Counter[str] = Counter()
        self.params = params if params is not None else self.init_params(np.random.default_rng(config.seed))
        self._pe = blocks.sinusoidal_positions(config.max_len + 2, config.model_dim)

    # -- parameters -------------------------------------------------------
    def _common_params(self, rng) -> dict:
        c = self.config
        d, V = c.model_dim, c.vocab_size
        blk = (d, c.head_count, c.hidden_dim, c.dropout_rate)
        return {
            "emb": Tensor(rng.normal(0.0, d**-0.5, size=(V, d)), requires_grad=True),
            "enc": [blocks.init_encoder_block(rng, *blk) for _ in range(c.n_layers)],
        }

    def _length_params(self, rng) -> dict:
        c = self.config
        k = 2 * c.max_len_offset + 1
        return {
            "len_w": Tensor(nc.xavier(rng, c.model_dim, k), requires_grad=True),
            "len_b": Tensor(np.zeros(k), requires_grad=True),
        }

    def _head(self, rng, name: str) -> dict:
        c = self.config
        return {
            f"{name}_w": Tensor(nc.xavier(rng, c.model_dim, c.vocab_size), requires_grad=True),
            f"{name}_b": Tensor(np.zeros(c.vocab_size), requires_grad=True),
        }

    def init_params(self, rng) -> dict:
        raise NotImplementedError

    def named_parameters(self):
        """Flat ``(name, tensor)`` pairs in a fixed order."""
        for key, val in self.params.items():
            if isinstance(val, Tensor):
                yield key, val
            elif isinstance(val, BlockParams):
                yield from val.named_parameters(key + ".")
            else:
                for i, blk in enumerate(val):
                    yield from blk.named_parameters(f"{key}.{i}.")

    def parameter_census(self) -> dict[str, int]:
        census: Counter[str] = Counter()
        for name, t in self.named_parameters():
            census[name.split(".")[0]] += t.size
        census["total"] = sum(v for k, v in census.items())
        return dict(census)

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def _rng(self, rng):
        return rng if self.config.dropout_rate > 0 else None

    # -- embeddings and encoder ------------------------------------------
    def embed(self, ids: np.ndarray) -> Tensor:
        """Scaled token embeddings plus sinusoidal positions."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise VocabError(f"token id outside vocabulary of size {self.config.vocab_size}")
        x = nc.scale(nc.embedding(self.params["emb"], ids), math.sqrt(self.config.model_dim))
        return x + self._pe[: ids.shape[-1]]

    def add_positions(self, x: Tensor) -> Tensor:
        return x + self._pe[: x.shape[-2]]

    def encode_batch(self, src: np.ndarray, src_mask: np.ndarray, rng=None) -> Tensor:
        if src.shape[-1] > self.config.max_len:
            raise ContractError(f"source length {src.shape[-1]} exceeds max_len {self.config.max_len}")
        h = self.embed(src)
        key_mask = src_mask[:, None, :]
        for blk in self.params["enc"]:
            h = blocks.encoder_block(h, blk, key_mask, self._rng(rng))
        self.passes["encoder"] += 1
        return h

    def encode(self, x: Sequence[int]) -> EncoderOutput:
        """Encode one sentence; states have shape (1, n, d)."""
        if len(x) == 0:
            raise ContractError("cannot encode an empty sentence")
        src, mask = _pad_ids([list(x)])
        return EncoderOutput(self.encode_batch(src, mask), src, mask)

    # -- length predictor -------------------------------------------------
    def length_logits(self, states: Tensor, src_mask: np.ndarray) -> Tensor:
        """Offset logits over [-D, +D] from mean-pooled, gradient-stopped encoder states."""
        m = src_mask[..., None].astype(float)
        pooled = (states.data * m).sum(axis=-2) / m.sum(axis=-2)
        return Tensor(pooled) @ self.params["len_w"] + self.params["len_b"]

    def predict_length(self, enc: EncoderOutput) -> tuple[np.ndarray, np.ndarray]:
        """Returns (offset distribution (B, 2D+1), predicted lengths (B,)).

        Ties resolve to the smallest offset.
        """
        logits = self.length_logits(enc.states, enc.src_mask)
        probs = nc.softmax(logits).data
        delta = np.argmax(probs, axis=-1) - self.config.max_len_offset
        n = enc.src_mask.sum(axis=-1)
        return probs, np.clip(n + delta, 1, self.config.max_len)

    def length_loss(self, states: Tensor, src_mask: np.ndarray, tgt_len: np.ndarray) -> Tensor:
        logits = self.length_logits(states, src_mask)
        logp = nc.log_softmax(logits)
        gold = length_offset_indices(src_mask.sum(-1), tgt_len, self.config.max_len_offset)
        onehot = np.zeros(logp.shape)
        onehot[np.arange(len(gold)), gold] = 1.0
        return nc.scale(nc.sum(logp * onehot), -1.0 / len(gold))

    # -- non-autoregressive decoder stack ------------------------------------
    def _nat_stack(self, layers, h: Tensor, states: Tensor, src_mask, tgt_mask, rng=None) -> Tensor:
        self_mask = tgt_mask[:, None, :]
        key_mask = src_mask[:, None, :]
        for blk in layers:
            h = blocks.transformer_decoder_block(h, states, blk, self_mask, key_mask, self._rng(rng))
        return h

    def uniform_copy_input(self, src: np.ndarray, src_mask: np.ndarray, tgt_len: np.ndarray) -> Tensor:
        """Uniform-copied scaled source embeddings (B, m_max, d) plus positions."""
        n = src_mask.sum(axis=-1)
        width = int(np.max(tgt_len))
        idx = np.zeros((src.shape[0], width), dtype=np.int64)
        for b in range(src.shape[0]):
            idx[b, : tgt_len[b]] = blocks.uniform_copy_indices(int(n[b]), int(tgt_len[b]))
        emb = nc.scale(nc.embedding(self.params["emb"], src), math.sqrt(self.config.model_dim))
        return self.add_positions(nc.gather_rows(emb, idx))


def lengths_mask(lengths: np.ndarray) -> np.ndarray:
    lengths = np.asarray(lengths)
    return np.arange(int(lengths.max()))[None, :] < lengths[:, None]


class ReorderNAT(_Seq2Seq):
    def init_params(self, rng) -> dict:
        c = self.config
        blk = (c.model_dim, c.head_count, c.hidden_dim, c.dropout_rate)
        p = self._common_params(rng)
        if c.reorder_kind == "nat":
            p["reorder"] = [blocks.init_decoder_block(rng, *blk) for _ in range(c.reorder_layers)]
        else:
            gru = blocks.init_gru_block(rng, *blk)
            gru.weights["w_init"] = Tensor(nc.xavier(rng, c.model_dim, c.model_dim), requires_grad=True)
            gru.weights["b_init"] = Tensor(np.zeros(c.model_dim), requires_grad=True)
            p["reorder"] = gru
        p["dec"] = [blocks.init_decoder_block(rng, *blk) for _ in range(c.decoder_layers)]
        p.update(self._head(rng, "reorder_out"))
        p.update(self._head(rng, "trans_out"))
        p.update(self._length_params(rng))
        return p

    # -- reordering module ------------------------------------------------
    def reorder_nat_scores(self, states, src, src_mask, tgt_len, rng=None, restrict: bool = True) -> Tensor:
        """Pre-softmax scores (B, m, V), masked to each row's restricted vocabulary
        unless ``restrict`` is False."""
        if np.max(tgt_len) > self.config.max_len:
            raise ContractError(f"target length {np.max(tgt_len)} exceeds max_len")
        h = self.uniform_copy_input(src, src_mask, tgt_len)
        h = self._nat_stack(self.params["reorder"], h, states, src_mask, lengths_mask(tgt_len), rng)
        logits = h @ self.params["reorder_out_w"] + self.params["reorder_out_b"]
        self.passes["reorder"] += 1
        if not restrict:
            return logits
        support = restricted_mask(src, src_mask, self.config.vocab_size)
        return nc.where(support[:, None, :], logits, nc.MASK_FILL)

    def _gru_init(self, states: Tensor, src_mask: np.ndarray) -> Tensor:
        gru = self.params["reorder"]
        m = src_mask[..., None].astype(float)
        pooled = nc.sum(states * m, axis=-2) * (1.0 / m.sum(axis=-2))
        return nc.tanh(pooled @ gru["w_init"] + gru["b_init"])

    def _gru_scores(self, r: Tensor, support: np.ndarray | None) -> Tensor:
        logits = r @ self.params["reorder_out_w"] + self.params["reorder_out_b"]
        return logits if support is None else nc.where(support, logits, nc.MASK_FILL)

    def reorder_at_scores(self, states, src, src_mask, pseudo, pseudo_len, free_running=False, restrict=True) -> Tensor:
        """Teacher-forced GRU reordering scores (B, m_max + 1, V).

        Step ``t`` reads the previous gold pseudo token (BOS at ``t=0``) and
        scores the token at ``t``; the step after the last gold token scores
        EOS.  Support is the restricted vocabulary plus EOS.  With
        ``free_running`` each step reads the previous step's restricted argmax
        instead.  ``restrict=False`` leaves the scores unmasked.
        """
        gru = self.params["reorder"]
        B, width = pseudo.shape
        scale = math.sqrt(self.config.model_dim)
        prev = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), pseudo], axis=1)
        prev_emb = nc.scale(nc.embedding(self.params["emb"], prev), scale)
        support = restricted_mask(src, src_mask, self.config.vocab_size, eos=True)
        r = self._gru_init(states, src_mask)
        out = []
        for t in range(width + 1):
            if free_running and t > 0:
                best = np.where(support, out[-1].data, -np.inf).argmax(axis=-1)
                step_in = nc.scale(nc.embedding(self.params["emb"], best), scale)
            else:
                step_in = prev_emb[:, t]
            r = blocks.gru_block_step(r, step_in, states, gru, src_mask)
            out.append(self._gru_scores(r, support if restrict else None))
        self.passes["reorder"] += width + 1
        return nc.stack(out, axis=1)

    def reorder_at_greedy(self, enc: EncoderOutput, max_steps: int | None = None):
        """Greedy pseudo-translation for one sentence.

        Returns ``(tokens, scores (m, V), truncated)``; ``scores`` holds the
        pre-softmax scores of the emitted steps (EOS step excluded).  EOS is
        disallowed at the first step so the output is never empty.
        """
        gru = self.params["reorder"]
        max_steps = max_steps or self.config.max_len
        support = restricted_mask(enc.src, enc.src_mask, self.config.vocab_size, eos=True)
        r = self._gru_init(enc.states, enc.src_mask)
        prev = BOS
        tokens: list[int] = []
        scores: list[np.ndarray] = []
        truncated = True
        for step in range(max_steps + 1):
            emb = nc.scale(nc.embedding(self.params["emb"], np.array([prev])), math.sqrt(self.config.model_dim))
            r = blocks.gru_block_step(r, emb, enc.states, gru, enc.src_mask)
            s = self._gru_scores(r, support).data[0]
            if step == 0:
                s = s.copy()
                s[EOS] = nc.MASK_FILL
            tok = int(np.argmax(s))
            if tok == EOS:
                truncated = False
                break
            if step == max_steps:
                break
            self.passes["reorder"] += 1
            tokens.append(tok)
            scores.append(s)
            prev = tok
        return tokens, np.stack(scores), truncated

    # -- decoder module ---------------------------------------------------
    def guide_dgd(self, pseudo: np.ndarray) -> Tensor:
        """Decoder input from hard pseudo tokens: scaled embeddings plus positions."""
        return self.embed(pseudo)

    def guide_ndgd(self, q: Tensor) -> Tensor:
        """Decoder input from a guidance distribution over the vocabulary.

        ``q`` is (B, m, V) with zero mass outside the restricted vocabulary,
        so ``q @ Emb`` weights exactly the source types and NULL.
        """
        x = nc.scale(q @ self.params["emb"], math.sqrt(self.config.model_dim))
        return self.add_positions(x)

    def decoder_module(self, guide: Tensor, states: Tensor, src_mask, tgt_mask, rng=None) -> Tensor:
        """All target positions in one pass: logits (B, m, V)."""
        h = self._nat_stack(self.params["dec"], guide, states, src_mask, tgt_mask, rng)
        self.passes["decoder"] += 1
        return h @ self.params["trans_out_w"] + self.params["trans_out_b"]

    def reorder_scores_for_training(self, states, src, src_mask, pseudo, tgt_len, rng=None, restrict=True) -> Tensor:
        """Scores whose softmax gives P(pseudo | X) at every gold position."""
        if self.config.reorder_kind == "nat":
            return self.reorder_nat_scores(states, src, src_mask, tgt_len, rng, restrict)
        return self.reorder_at_scores(states, src, src_mask, pseudo, tgt_len, restrict=restrict)


class PlainNAT(_Seq2Seq):
    def init_params(self, rng) -> dict:
        c = self.config
        blk = (c.model_dim, c.head_count, c.hidden_dim, c.dropout_rate)
        p = self._common_params(rng)
        p["dec"] = [blocks.init_decoder_block(rng, *blk) for _ in range(c.decoder_layers)]
        p.update(self._head(rng, "trans_out"))
        p.update(self._length_params(rng))
        return p

    def forward(self, states, src, src_mask, tgt_len, rng=None) -> Tensor:
        h = self.uniform_copy_input(src, src_mask, tgt_len)
        h = self._nat_stack(self.params["dec"], h, states, src_mask, lengths_mask(tgt_len), rng)
        self.passes["decoder"] += 1
        return h @ self.params["trans_out_w"] + self.params["trans_out_b"]


class ATTransformer(_Seq2Seq):
    def init_params(self, rng) -> dict:
        c = self.config
        blk = (c.model_dim, c.head_count, c.hidden_dim, c.dropout_rate)
        p = self._common_params(rng)
        p["dec"] = [blocks.init_decoder_block(rng, *blk) for _ in range(c.decoder_layers)]
        p.update(self._head(rng, "trans_out"))
        return p

    def forward(self, states, src_mask, prefix: np.ndarray, prefix_mask: np.ndarray, rng=None) -> Tensor:
        """Next-token logits (B, L, V) for every position of a BOS-led prefix."""
        h = self.embed(prefix)
        L = prefix.shape[-1]
        self_mask = blocks.causal_mask(L)[None] & prefix_mask[:, None, :]
        key_mask = src_mask[:, None, :]
        for blk in self.params["dec"]:
            h = blocks.transformer_decoder_block(h, states, blk, self_mask, key_mask, self._rng(rng))
        self.passes["decoder"] += 1
        return h @ self.params["trans_out_w"] + self.params["trans_out_b"]


MODEL_CLASSES = {"reordernat": ReorderNAT, "plain_nat": PlainNAT, "at_teacher": ATTransformer}


def build_model(config: ModelConfig, params: dict | None = None):
    return MODEL_CLASSES[config.arch](config, params)
