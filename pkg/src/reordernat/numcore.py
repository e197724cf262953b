"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op is a plain function that computes its output with numpy and, when a
:class:`Tape` is active and some input requires a gradient, appends a record
holding a backward closure.  :func:`backward` replays the records in reverse
creation order, which is a valid reverse topological order because an op can
only consume tensors that already exist.

Gradients accumulate with ``+=`` into ``Tensor.grad`` so that a tensor used at
several places (an embedding table, a shared weight) sums its contributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
MASK_FILL = -1e9


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=DTYPE))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # op outputs: already float64, possibly a strided view
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded.  Outside any tape, ops run without bookkeeping.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_TAPES: list[Tape] = []


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple[Tensor, ...], fn) -> Tensor:
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].records.append(_Record(out, parents, fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every tensor on the tape that feeds ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        for parent, pg in zip(rec.parents, rec.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=DTYPE, copy=True).reshape(parent.shape)
            else:
                parent.grad += pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._wrap(a.data + b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._wrap(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._wrap(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    out = Tensor._wrap(np.where(pos, a.data, 0.0))
    return _record(out, (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = Tensor._wrap(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor._wrap(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor._wrap(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor._wrap(np.matmul(a.data, b.data))

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # shared weight: fold the batch axes into one product
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _record(out, (a, b), fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor._wrap(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = [0] * len(axes)
    for i, ax in enumerate(axes):
        inv[ax] = i
    out = Tensor._wrap(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=axis))
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _record(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    out = Tensor._wrap(np.stack([p.data for p in parts], axis=axis))

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _record(out, parts, fn)


def getitem(a: Tensor, index) -> Tensor:
    out = Tensor._wrap(a.data[index])

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(out, (a,), fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range for table of {table.shape[0]} rows")
    out = Tensor._wrap(table.data[ids])

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(out, (table,), fn)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather: ``out[b, i] = x[b, idx[b, i]]`` for ``x`` of shape (B, n, d)."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]
    out = Tensor._wrap(x.data[rows, idx])

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (np.broadcast_to(rows, idx.shape), idx), g)
        return (full,)

    return _record(out, (x,), fn)


def where(mask: np.ndarray, a: Tensor, fill: float) -> Tensor:
    """Keep ``a`` where ``mask`` holds, else the constant ``fill``."""
    mask = np.asarray(mask, dtype=bool)
    out = Tensor._wrap(np.where(mask, a.data, fill))
    return _record(out, (a,), lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor._wrap(np.sum(a.data, axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# normalizers
# ---------------------------------------------------------------------------


def softmax(x: Tensor, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of ``x / temperature``.

    ``mask`` (broadcastable, True = keep) removes entries from the support;
    removed entries get probability exactly 0.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("softmax row with an empty support")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(y)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / temperature,)

    return _record(out, (x,), fn)


def log_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Log-softmax over the last axis; entries outside ``mask`` come out as 0.

    The zero fill keeps every value finite; callers weight those entries by
    zero target mass, so the fill never reaches a loss.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    p = np.exp(logp)
    if mask is not None:
        logp = np.where(mask, logp, 0.0)
    out = Tensor._wrap(logp)

    def fn(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), fn)


def attention(query: Tensor, memory: Tensor, w: Sequence[Tensor], heads: int, mask: np.ndarray | None = None):
    """Fused multi-head scaled dot-product attention.

    ``w`` is ``(wq, bq, wk, bk, wv, bv, wo, bo)``.  ``query`` is ``(..., Lq, d)``,
    ``memory`` is ``(..., Lk, d)`` and ``mask`` broadcasts against
    ``(..., heads, Lq, Lk)`` with True marking attendable keys.  Returns the
    projected context (recorded as one op) and the attention weights as a
    plain array.  Equivalent to composing the primitives above, with far
    less per-op bookkeeping.
    """
    wq, bq, wk, bk, wv, bv, wo, bo = w
    xq, xm = query.data, memory.data
    *lead, lq, d = xq.shape
    lk = xm.shape[-2]
    dh = d // heads
    c = 1.0 / math.sqrt(dh)

    def split(a, n):
        return a.reshape(*a.shape[:-2], n, heads, dh).swapaxes(-2, -3)

    def merge(a):
        a = a.swapaxes(-2, -3)
        return a.reshape(*a.shape[:-2], d)

    qh = split(xq @ wq.data + bq.data, lq)
    kh = split(xm @ wk.data + bk.data, lk)
    vh = split(xm @ wv.data + bv.data, lk)
    z = (qh @ kh.swapaxes(-1, -2)) * c
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    a = np.exp(z)
    a /= a.sum(axis=-1, keepdims=True)
    ctx = merge(a @ vh)
    out = Tensor._wrap(ctx @ wo.data + bo.data)

    def wgrad(x, g):
        return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    def fn(g):
        g_ctx = g @ wo.data.T
        gc = split(g_ctx, lq)
        ga = gc @ vh.swapaxes(-1, -2)
        gv = merge(a.swapaxes(-1, -2) @ gc)
        gz = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * c
        gq = merge(gz @ kh)
        gk = merge(gz.swapaxes(-1, -2) @ qh)
        gq_in = gq @ wq.data.T if query.requires_grad else None
        gm_in = gk @ wk.data.T + gv @ wv.data.T if memory.requires_grad else None
        return (
            gq_in,
            gm_in,
            wgrad(xq, gq), gq.reshape(-1, d).sum(axis=0),
            wgrad(xm, gk), gk.reshape(-1, d).sum(axis=0),
            wgrad(xm, gv), gv.reshape(-1, d).sum(axis=0),
            wgrad(ctx, g), g.reshape(-1, d).sum(axis=0),
        )

    return _record(out, (query, memory, wq, bq, wk, bk, wv, bv, wo, bo), fn), a


def gru_cell(h: Tensor, x: Tensor, w: Sequence[Tensor]) -> Tensor:
    """Fused GRU update; ``w`` is ``(wr, br, wz, bz, wh, bh)``.

    r = sig([x; h] W_r + b_r), z = sig([x; h] W_z + b_z),
    c = tanh([x; r*h] W_h + b_h), h' = h + z * (c - h).
    """
    wr, br, wz, bz, wh, bh = w
    hd, xd = h.data, x.data
    kx = xd.shape[-1]
    xh = np.concatenate([xd, hd], axis=-1)
    r = 0.5 * (1.0 + np.tanh(0.5 * (xh @ wr.data + br.data)))
    z = 0.5 * (1.0 + np.tanh(0.5 * (xh @ wz.data + bz.data)))
    xrh = np.concatenate([xd, r * hd], axis=-1)
    cand = np.tanh(xrh @ wh.data + bh.data)
    out = Tensor._wrap(hd + z * (cand - hd))

    def wgrad(a, g):
        return a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    def fn(g):
        gac = g * z * (1.0 - cand * cand)
        g_xrh = gac @ wh.data.T
        g_rh = g_xrh[..., kx:]
        gaz = g * (cand - hd) * z * (1.0 - z)
        gar = g_rh * hd * r * (1.0 - r)
        gxh = gaz @ wz.data.T + gar @ wr.data.T
        gh = g * (1.0 - z) + g_rh * r + gxh[..., kx:]
        gx = g_xrh[..., :kx] + gxh[..., :kx]
        return (
            gh, gx,
            wgrad(xh, gar), gar.reshape(-1, gar.shape[-1]).sum(axis=0),
            wgrad(xh, gaz), gaz.reshape(-1, gaz.shape[-1]).sum(axis=0),
            wgrad(xrh, gac), gac.reshape(-1, gac.shape[-1]).sum(axis=0),
        )

    return _record(out, (h, x, wr, br, wz, bz, wh, bh), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm dim {d} vs gain {gain.shape} / bias {bias.shape}")
    k = 1.0 / d
    xc = x.data - x.data.sum(axis=-1, keepdims=True) * k
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) * k + eps)
    xhat = xc * inv
    out = Tensor._wrap(xhat * gain.data + bias.data)

    def fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.sum(axis=-1, keepdims=True) * k - xhat * ((gh * xhat).sum(axis=-1, keepdims=True) * k))
        return (
            gx,
            _unbroadcast(g * xhat, gain.shape),
            _unbroadcast(g, bias.shape),
        )

    return _record(out, (x, gain, bias), fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise.

    The floor keeps coordinates whose true gradient is below the finite-difference
    noise level (~1e-10 at h=1e-5) from dominating the report.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], float], x: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x`` (mutated in place, then restored)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the taped gradient of scalar ``f(x)`` with central differences."""
    x = Tensor(np.array(as_tensor(x).data, dtype=DTYPE), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    backward(y, tape)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    numeric = numeric_grad(lambda: f(x).item(), x, h)
    rel = relative_error(analytic, numeric)
    worst = np.unravel_index(int(rel.argmax()), rel.shape) if rel.size else None
    return GradCheckReport(float(rel.max(initial=0.0)), worst, rel.size, tol)


def is_finite(t: Tensor) -> bool:
    return bool(np.isfinite(t.data).all()) and (t.grad is None or bool(np.isfinite(t.grad).all()))


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))
