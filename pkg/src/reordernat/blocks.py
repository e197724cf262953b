"""Transformer and GRU building blocks on top of :mod:`reordernat.numcore`.

All blocks accept inputs with arbitrary leading batch axes, ``(..., L, d)``,
and use post-norm residual connections: ``LayerNorm(x + sublayer(x))``.
Attention masks are boolean with True marking attendable keys; a mask whose
rank equals the input rank gets a head axis inserted before the last two
dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ContractError, ParameterError, ShapeError, Tensor

LN_EPS = 1e-6


@dataclass
class BlockParams:
    """Weights of one block plus the dimensions needed to apply them."""

    weights: dict[str, Tensor]
    head_count: int
    model_dim: int
    hidden_dim: int
    dropout_rate: float = 0.0
    children: dict[str, "BlockParams"] = field(default_factory=dict)

    def __post_init__(self):
        if self.model_dim % self.head_count:
            raise ParameterError(
                f"model_dim {self.model_dim} not divisible by head_count {self.head_count}"
            )

    def __getitem__(self, key: str) -> Tensor:
        return self.weights[key]

    def named_parameters(self, prefix: str = ""):
        for name, t in self.weights.items():
            yield prefix + name, t
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")


def _weight(rng, fan_in, fan_out):
    return Tensor(nc.xavier(rng, fan_in, fan_out), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape):
    return Tensor(np.ones(shape), requires_grad=True)


def init_attention(rng, d, heads, hidden, dropout=0.0, norm=True) -> BlockParams:
    w = {}
    for name in ("q", "k", "v", "o"):
        w["w" + name] = _weight(rng, d, d)
        w["b" + name] = _zeros(d)
    if norm:
        w["ln_g"] = _ones(d)
        w["ln_b"] = _zeros(d)
    return BlockParams(w, heads, d, hidden, dropout)


def init_feed_forward(rng, d, heads, hidden, dropout=0.0) -> BlockParams:
    w = {
        "w1": _weight(rng, d, hidden),
        "b1": _zeros(hidden),
        "w2": _weight(rng, hidden, d),
        "b2": _zeros(d),
        "ln_g": _ones(d),
        "ln_b": _zeros(d),
    }
    return BlockParams(w, heads, d, hidden, dropout)


def init_encoder_block(rng, d, heads, hidden, dropout=0.0) -> BlockParams:
    return BlockParams(
        {},
        heads,
        d,
        hidden,
        dropout,
        children={
            "self": init_attention(rng, d, heads, hidden, dropout),
            "ffn": init_feed_forward(rng, d, heads, hidden, dropout),
        },
    )


def init_decoder_block(rng, d, heads, hidden, dropout=0.0) -> BlockParams:
    return BlockParams(
        {},
        heads,
        d,
        hidden,
        dropout,
        children={
            "self": init_attention(rng, d, heads, hidden, dropout),
            "inter": init_attention(rng, d, heads, hidden, dropout),
            "ffn": init_feed_forward(rng, d, heads, hidden, dropout),
        },
    )


def init_gru_block(rng, d, heads, hidden, dropout=0.0) -> BlockParams:
    """GRU decoder block: an inter-attention (no residual) feeding a GRU cell.

    The cell input is ``[context; embedding]`` so it has width ``2d``.
    """
    k = 2 * d
    w = {}
    for gate in ("r", "z", "h"):
        w["w" + gate] = _weight(rng, k + d, d)
        w["b" + gate] = _zeros(d)
    return BlockParams(
        w,
        heads,
        d,
        hidden,
        dropout,
        children={"attn": init_attention(rng, d, heads, hidden, dropout, norm=False)},
    )


# ---------------------------------------------------------------------------
# positional encodings and uniform copy
# ---------------------------------------------------------------------------


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """``pe[p, 2i] = sin(p / 10000^(2i/dim))``, ``pe[p, 2i+1] = cos(...)``."""
    if dim % 2:
        raise ParameterError(f"positional dim must be even, got {dim}")
    if length < 1:
        raise ParameterError(f"length must be positive, got {length}")
    pos = np.arange(length)[:, None]
    div = np.power(10000.0, np.arange(0, dim, 2) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div)
    return pe


def uniform_copy_indices(n: int, m: int) -> np.ndarray:
    """Source row feeding each of ``m`` target slots: ``floor(i * n / m)``."""
    if n < 1 or m < 1:
        raise ContractError(f"uniform copy needs n, m >= 1 (got n={n}, m={m})")
    return (np.arange(m) * n) // m


def uniform_copy(src_emb: Tensor, target_len: int) -> Tensor:
    """Stretch or squeeze ``(n, d)`` source rows to ``(target_len, d)``."""
    idx = uniform_copy_indices(src_emb.shape[0], target_len)
    return nc.gather_rows(nc.reshape(src_emb, (1,) + src_emb.shape), idx[None])[0]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, d = x.shape
    x = nc.reshape(x, (*lead, length, heads, d // heads))
    n = len(lead)
    return nc.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    n = len(lead)
    x = nc.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return nc.reshape(x, (*lead, length, heads * dh))


def _head_mask(mask, rank: int):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("attention mask has a query row with no attendable key")
    if mask.ndim == rank:
        mask = np.expand_dims(mask, -3)
    return mask


def multi_head_attention(query: Tensor, memory: Tensor, p: BlockParams, mask=None):
    """Scaled dot-product attention of ``query`` rows over ``memory`` rows.

    Returns ``(projected_output, weights)`` with weights shaped
    ``(..., heads, Lq, Lk)`` (a plain array).  No residual or normalization
    is applied here.
    """
    if query.shape[-1] != p.model_dim or memory.shape[-1] != p.model_dim:
        raise ShapeError(
            f"attention width mismatch: query {query.shape}, memory {memory.shape}, d={p.model_dim}"
        )
    w = [p[k] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
    return nc.attention(query, memory, w, p.head_count, _head_mask(mask, query.data.ndim))


def composed_attention(query: Tensor, memory: Tensor, p: BlockParams, mask=None):
    """Same as :func:`multi_head_attention`, built from elementary ops.

    Slower; kept as the reference the fused kernel is tested against.
    """
    heads = p.head_count
    q = _split_heads(query @ p["wq"] + p["bq"], heads)
    k = _split_heads(memory @ p["wk"] + p["bk"], heads)
    v = _split_heads(memory @ p["wv"] + p["bv"], heads)
    rank = k.data.ndim
    scores = nc.scale(q @ nc.transpose(k, tuple(range(rank - 2)) + (rank - 1, rank - 2)),
                      1.0 / math.sqrt(p.model_dim // heads))
    weights = nc.softmax(scores, mask=_head_mask(mask, query.data.ndim))
    ctx = _merge_heads(weights @ v)
    return ctx @ p["wo"] + p["bo"], weights


def _residual_norm(x: Tensor, sub: Tensor, p: BlockParams, rng) -> Tensor:
    return nc.layer_norm(x + nc.dropout(sub, p.dropout_rate, rng), p["ln_g"], p["ln_b"], LN_EPS)


def self_attention(h: Tensor, p: BlockParams, mask=None, rng=None, return_weights=False):
    out, weights = multi_head_attention(h, h, p, mask)
    y = _residual_norm(h, out, p, rng)
    return (y, weights) if return_weights else y


def inter_attention(h: Tensor, s: Tensor, p: BlockParams, mask=None, rng=None, return_weights=False):
    """Queries from ``h``, keys and values from the source representation ``s``."""
    if h.shape[-1] != s.shape[-1]:
        raise ShapeError(f"inter-attention width mismatch: {h.shape} vs {s.shape}")
    out, weights = multi_head_attention(h, s, p, mask)
    y = _residual_norm(h, out, p, rng)
    return (y, weights) if return_weights else y


def feed_forward(h: Tensor, p: BlockParams, rng=None) -> Tensor:
    inner = nc.relu(h @ p["w1"] + p["b1"])
    inner = nc.dropout(inner, p.dropout_rate, rng)
    return _residual_norm(h, inner @ p["w2"] + p["b2"], p, rng)


def encoder_block(h: Tensor, p: BlockParams, mask=None, rng=None) -> Tensor:
    """``FFN(SelfAtt(h))``; ``mask`` restricts keys (source padding)."""
    return feed_forward(self_attention(h, p.children["self"], mask, rng), p.children["ffn"], rng)


def transformer_decoder_block(
    h: Tensor, s: Tensor, p: BlockParams, mask=None, src_mask=None, rng=None
) -> Tensor:
    """``FFN(InterAtt(s, SelfAtt(h)))``.

    ``mask`` is the self-attention mask: all-True for non-autoregressive use,
    lower-triangular for autoregressive use.  ``src_mask`` restricts the keys
    of the inter-attention.
    """
    x = self_attention(h, p.children["self"], mask, rng)
    x = inter_attention(x, s, p.children["inter"], src_mask, rng)
    return feed_forward(x, p.children["ffn"], rng)


def gru_step(h_prev: Tensor, x: Tensor, p: BlockParams) -> Tensor:
    """One GRU update with input ``x`` and previous state ``h_prev``.

    r = sig(W_r [x; h]), z = sig(W_z [x; h]), c = tanh(W_h [x; r*h]),
    h' = (1 - z) * h + z * c.
    """
    if h_prev.shape[-1] != p.model_dim:
        raise ShapeError(f"GRU state width {h_prev.shape[-1]} != {p.model_dim}")
    if x.shape[-1] + p.model_dim != p["wr"].shape[0]:
        raise ShapeError(f"GRU input width {x.shape[-1]} does not match gate matrices")
    return nc.gru_cell(h_prev, x, [p[k] for k in ("wr", "br", "wz", "bz", "wh", "bh")])


def composed_gru_step(h_prev: Tensor, x: Tensor, p: BlockParams) -> Tensor:
    """:func:`gru_step` from elementary ops; the fused cell's test reference."""
    xh = nc.concat([x, h_prev], axis=-1)
    r = nc.sigmoid(xh @ p["wr"] + p["br"])
    z = nc.sigmoid(xh @ p["wz"] + p["bz"])
    cand = nc.tanh(nc.concat([x, r * h_prev], axis=-1) @ p["wh"] + p["bh"])
    return h_prev + z * (cand - h_prev)


def gru_block_step(
    r_prev: Tensor, emb_prev: Tensor, s: Tensor, p: BlockParams, src_mask=None
) -> Tensor:
    """One step of the GRU decoder block: ``GRU(R_prev, [C_prev; emb_prev])``.

    ``C_prev`` attends from ``R_prev`` over the source representation ``s``.
    ``r_prev`` and ``emb_prev`` are ``(..., d)``; ``s`` is ``(..., n, d)``.
    """
    query = nc.reshape(r_prev, r_prev.shape[:-1] + (1, r_prev.shape[-1]))
    mask = None if src_mask is None else np.expand_dims(np.asarray(src_mask, dtype=bool), -2)
    ctx, _ = multi_head_attention(query, s, p.children["attn"], mask)
    ctx = nc.reshape(ctx, r_prev.shape)
    return gru_step(r_prev, nc.concat([ctx, emb_prev], axis=-1), p)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def full_mask(length: int) -> np.ndarray:
    return np.ones((length, length), dtype=bool)
