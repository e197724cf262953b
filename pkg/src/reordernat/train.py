"""Joint reordering + translation objective and the training loop.

The objective is ``L = L_R + L_T``: the reordering loss scores the gold
pseudo-translation under the reordering module; the translation loss scores
the target under the decoder module, fed either the gold pseudo-translation
embeddings (``dgd``) or the temperature-sharpened guidance distribution
(``ndgd``).  The length predictor reads gradient-stopped encoder states and
is trained by its own term, kept out of ``L``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .data import Batch, BatchStream, EncodedCorpus, make_batch
from .model import ATTransformer, PlainNAT, ReorderNAT, restricted_mask
from .numcore import ContractError, Tensor
from .vocab import BOS, EOS, NULL, PAD

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "dgd"
    schedule: str = "warmup"
    warmup_steps: int = 4000
    lr_scale: float = 1.0
    lr_start: float = 3e-4
    lr_end: float = 1e-5
    total_steps: int = 1000
    batch_size: int = 32
    label_smoothing: float = 0.15
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 0.0
    seed: int = 0
    distill: bool = False
    # how NDGD builds guidance for a GRU reorderer at training time:
    # "gold" feeds gold pseudo prefixes, "greedy" feeds the module's own argmax
    ndgd_prefix: str = "gold"
    # normalization of P(Z | X) inside L_R: "full" vocabulary or the
    # "restricted" source-word set; decoding is always restricted
    reorder_support: str = "full"
    # opt-in curriculum: for the first k steps L_T is reported but not
    # optimized, so the shared encoder keeps positional detail the
    # reordering module needs; 0 trains L_R + L_T from the start
    reorder_warmup: int = 0

    def __post_init__(self):
        if self.mode not in ("dgd", "ndgd"):
            raise ValueError(f"mode must be dgd or ndgd, got {self.mode!r}")
        if self.schedule not in ("warmup", "linear"):
            raise ValueError(f"schedule must be warmup or linear, got {self.schedule!r}")
        if self.ndgd_prefix not in ("gold", "greedy"):
            raise ValueError(f"ndgd_prefix must be gold or greedy, got {self.ndgd_prefix!r}")
        if self.reorder_support not in ("full", "restricted"):
            raise ValueError(f"reorder_support must be full or restricted, got {self.reorder_support!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainStats:
    step: int
    loss: float
    loss_r: float
    loss_t: float
    loss_len: float
    lr: float
    grad_norm: float

    def log_line(self) -> str:
        return f"{self.step}\t{self.loss:.6f}\t{self.loss_r:.6f}\t{self.loss_t:.6f}\t{self.lr:.6e}\t{self.grad_norm:.6f}"


def parse_log_line(line: str) -> dict:
    step, loss, lr_, lt, lr, gn = line.rstrip("\n").split("\t")
    return {"step": int(step), "L": float(loss), "L_R": float(lr_), "L_T": float(lt), "lr": float(lr), "gradnorm": float(gn)}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def smoothing_targets(gold: np.ndarray, vocab_size: int, eps: float, support=None) -> np.ndarray:
    """q = (1 - eps) * onehot(gold) + eps / V' over a support of size V'."""
    gold = np.asarray(gold)
    shape = gold.shape + (vocab_size,)
    if support is None:
        sup = np.ones(shape, dtype=bool)
    else:
        sup = np.broadcast_to(np.asarray(support, dtype=bool), shape)
    onehot = np.zeros(shape)
    np.put_along_axis(onehot, gold[..., None], 1.0, axis=-1)
    if not np.take_along_axis(sup, gold[..., None], axis=-1).all():
        raise ContractError("gold token outside the loss support")
    size = sup.sum(axis=-1, keepdims=True)
    return (1.0 - eps) * onehot + np.where(sup, eps / size, 0.0)


def smoothing_floor(vocab_size: int, eps: float) -> float:
    """Entropy of the smoothed target: the minimum attainable smoothed loss."""
    q = smoothing_targets(np.array([0]), vocab_size, eps)[0]
    q = q[q > 0]
    return float(-(q * np.log(q)).sum())


def smoothed_cross_entropy(
    logits: Tensor,
    gold: np.ndarray,
    eps: float,
    support=None,
    pad_mask=None,
    reduction: str = "sum",
) -> tuple[Tensor, int]:
    """Label-smoothed NLL summed (or averaged) over non-PAD positions.

    Returns ``(loss, token_count)``.
    """
    gold = np.asarray(gold)
    if pad_mask is None:
        pad_mask = np.ones(gold.shape, dtype=bool)
    if support is not None:
        sup = np.broadcast_to(np.asarray(support, dtype=bool), gold.shape + (logits.shape[-1],))
        # padded positions borrow any supported id so they never trip the support check
        safe_gold = np.where(pad_mask, gold, np.argmax(sup, axis=-1))
    else:
        sup = None
        safe_gold = np.where(pad_mask, gold, 0)
    q = smoothing_targets(safe_gold, logits.shape[-1], eps, sup) * pad_mask[..., None]
    logp = nc.log_softmax(logits, sup)
    total = nc.scale(nc.sum(logp * q), -1.0)
    count = int(pad_mask.sum())
    if reduction == "mean":
        total = nc.scale(total, 1.0 / max(count, 1))
    return total, count


def _check_pseudo(batch: Batch, vocab_size: int) -> np.ndarray:
    support = restricted_mask(batch.src, batch.src_mask, vocab_size)
    ok = np.take_along_axis(support, np.where(batch.tgt_mask, batch.pseudo, NULL), axis=1)
    if not ok.all():
        bad = int(batch.index[np.argmin(ok.all(axis=1))])
        raise DataError(f"example {bad}: pseudo-translation token outside the source vocabulary")
    return support


def reorder_scores(model: ReorderNAT, batch: Batch, states: Tensor, cfg: TrainConfig, rng=None) -> Tensor:
    restrict = cfg.reorder_support == "restricted"
    if model.config.reorder_kind == "at" and cfg.mode == "ndgd" and cfg.ndgd_prefix == "greedy":
        return model.reorder_at_scores(
            states, batch.src, batch.src_mask, batch.pseudo, batch.tgt_len, free_running=True, restrict=restrict
        )
    return model.reorder_scores_for_training(states, batch.src, batch.src_mask, batch.pseudo, batch.tgt_len, rng, restrict)


def reordering_loss_from_scores(
    model: ReorderNAT, batch: Batch, scores: Tensor, eps: float, reduction="mean", restricted: bool = False
):
    support = _check_pseudo(batch, model.config.vocab_size)
    if model.config.reorder_kind == "nat":
        sup = support[:, None, :] if restricted else None
        return smoothed_cross_entropy(scores, batch.pseudo, eps, sup, batch.tgt_mask, reduction)
    B, m = batch.pseudo.shape
    gold = np.concatenate([batch.pseudo, np.full((B, 1), PAD)], axis=1)
    gold[np.arange(B), batch.tgt_len] = EOS
    mask = np.arange(m + 1)[None, :] <= batch.tgt_len[:, None]
    support = support.copy()
    support[:, EOS] = True
    return smoothed_cross_entropy(scores, gold, eps, support[:, None, :] if restricted else None, mask, reduction)


def reordering_loss(model: ReorderNAT, batch: Batch, cfg: TrainConfig, reduction="mean") -> Tensor:
    states = model.encode_batch(batch.src, batch.src_mask)
    scores = reorder_scores(model, batch, states, cfg)
    return reordering_loss_from_scores(
        model, batch, scores, cfg.label_smoothing, reduction, cfg.reorder_support == "restricted"
    )[0]


def guidance(model: ReorderNAT, batch: Batch, scores: Tensor, temperature: float) -> Tensor:
    """Q over the vocabulary (B, m, V), zero outside each row's restricted vocabulary."""
    m = batch.pseudo.shape[1]
    if model.config.reorder_kind == "at":
        scores = scores[:, :m]
    support = restricted_mask(batch.src, batch.src_mask, model.config.vocab_size)
    return nc.softmax(scores, temperature, support[:, None, :])


def translation_loss_from_guide(model: ReorderNAT, batch: Batch, guide: Tensor, states, eps, reduction="mean", rng=None):
    logits = model.decoder_module(guide, states, batch.src_mask, batch.tgt_mask, rng)
    return smoothed_cross_entropy(logits, batch.tgt, eps, None, batch.tgt_mask, reduction)


def translation_loss_dgd(model: ReorderNAT, batch: Batch, cfg: TrainConfig, reduction="mean") -> Tensor:
    states = model.encode_batch(batch.src, batch.src_mask)
    guide = model.guide_dgd(batch.pseudo)
    return translation_loss_from_guide(model, batch, guide, states, cfg.label_smoothing, reduction)[0]


def translation_loss_ndgd(
    model: ReorderNAT, batch: Batch, cfg: TrainConfig, temperature: float | None = None, reduction="mean"
) -> Tensor:
    T = model.config.temperature if temperature is None else temperature
    states = model.encode_batch(batch.src, batch.src_mask)
    scores = reorder_scores(model, batch, states, cfg)
    guide = model.guide_ndgd(guidance(model, batch, scores, T))
    return translation_loss_from_guide(model, batch, guide, states, cfg.label_smoothing, reduction)[0]


@dataclass
class LossTerms:
    total: Tensor  # L = L_R + L_T
    reorder: Tensor | None
    translate: Tensor
    length: Tensor | None

    @property
    def objective(self) -> Tensor:
        """What the optimizer minimizes: L plus the detached length term."""
        return self.total if self.length is None else self.total + self.length

    def warmup_objective(self) -> Tensor:
        """L_R plus the length term, for reordering warm-up steps."""
        base = self.reorder if self.reorder is not None else self.total
        return base if self.length is None else base + self.length


def compute_losses(model, batch: Batch, cfg: TrainConfig, rng=None, temperature: float | None = None) -> LossTerms:
    """All loss terms for one batch, token-mean reduced, for any architecture."""
    eps = cfg.label_smoothing
    states = model.encode_batch(batch.src, batch.src_mask, rng)
    if isinstance(model, ATTransformer):
        B = len(batch)
        prefix = np.concatenate([np.full((B, 1), BOS), batch.tgt], axis=1)
        pmask = np.concatenate([np.ones((B, 1), dtype=bool), batch.tgt_mask], axis=1)
        logits = model.forward(states, batch.src_mask, prefix, pmask, rng)
        gold = np.concatenate([batch.tgt, np.full((B, 1), PAD)], axis=1)
        gold[np.arange(B), batch.tgt_len] = EOS
        lt, _ = smoothed_cross_entropy(logits, gold, eps, None, pmask, "mean")
        return LossTerms(lt, None, lt, None)
    length = model.length_loss(states, batch.src_mask, batch.tgt_len)
    if isinstance(model, PlainNAT):
        logits = model.forward(states, batch.src, batch.src_mask, batch.tgt_len, rng)
        lt, _ = smoothed_cross_entropy(logits, batch.tgt, eps, None, batch.tgt_mask, "mean")
        return LossTerms(lt, None, lt, length)
    if batch.pseudo is None:
        raise DataError("ReorderNAT training needs pseudo-translations")
    scores = reorder_scores(model, batch, states, cfg, rng)
    lr_, _ = reordering_loss_from_scores(model, batch, scores, eps, "mean", cfg.reorder_support == "restricted")
    if cfg.mode == "dgd":
        guide = model.guide_dgd(batch.pseudo)
    else:
        T = model.config.temperature if temperature is None else temperature
        guide = model.guide_ndgd(guidance(model, batch, scores, T))
    lt, _ = translation_loss_from_guide(model, batch, guide, states, eps, "mean", rng)
    return LossTerms(lr_ + lt, lr_, lt, length)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def lr_schedule(step: int, cfg: TrainConfig, model_dim: int) -> float:
    """Warm-up (inverse square root) or linear-anneal learning rate at ``step >= 1``."""
    if step < 1:
        raise ContractError(f"learning-rate step must be >= 1, got {step}")
    if cfg.schedule == "warmup":
        return cfg.lr_scale * model_dim**-0.5 * min(step**-0.5, step * cfg.warmup_steps**-1.5)
    frac = min(1.0, (step - 1) / max(cfg.total_steps - 1, 1))
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


class Adam:
    """Adaptive-moment optimizer over a fixed list of named tensors."""

    def __init__(self, named: Sequence[tuple[str, Tensor]], beta1=0.9, beta2=0.98, eps=1e-9):
        self.names = [n for n, _ in named]
        self.params = [t for _, t in named]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def grad_norm(params: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))


def _find_bad_example(model, batch: Batch, cfg: TrainConfig) -> int | None:
    data = EncodedCorpus(
        [list(r[m]) for r, m in zip(batch.src, batch.src_mask)],
        [list(r[m]) for r, m in zip(batch.tgt, batch.tgt_mask)],
        None if batch.pseudo is None else [list(r[m]) for r, m in zip(batch.pseudo, batch.tgt_mask)],
    )
    for i in range(len(batch)):
        terms = compute_losses(model, make_batch(data, [i]), cfg)
        if not math.isfinite(terms.objective.item()):
            return int(batch.index[i])
    return None


def joint_step(batch: Batch, model, opt: Adam, cfg: TrainConfig, step: int) -> TrainStats:
    """Forward, backward and one optimizer update on ``batch`` (``step`` is 1-based)."""
    rng = np.random.default_rng([cfg.seed, step]) if model.config.dropout_rate > 0 else None
    model.zero_grad()
    with nc.Tape() as tape:
        terms = compute_losses(model, batch, cfg, rng)
        warm = isinstance(model, ReorderNAT) and step <= cfg.reorder_warmup
        objective = terms.warmup_objective() if warm else terms.objective
    if not math.isfinite(objective.item()):
        bad = _find_bad_example(model, batch, cfg)
        raise TrainingError(f"non-finite loss at step {step}; offending example: {bad}")
    nc.backward(objective, tape)
    gn = grad_norm(opt.params)
    if cfg.grad_clip > 0 and gn > cfg.grad_clip:
        for p in opt.params:
            if p.grad is not None:
                p.grad *= cfg.grad_clip / gn
    lr = lr_schedule(step, cfg, model.config.model_dim)
    opt.step(lr)
    return TrainStats(
        step,
        terms.total.item(),
        terms.reorder.item() if terms.reorder is not None else 0.0,
        terms.translate.item(),
        terms.length.item() if terms.length is not None else 0.0,
        lr,
        gn,
    )


class Trainer:
    """Owns the optimizer and the deterministic batch schedule for one model."""

    def __init__(self, model, data: EncodedCorpus, cfg: TrainConfig, log_fn: Callable[[str], None] | None = None):
        self.model = model
        self.cfg = cfg
        self.stream = BatchStream(data, cfg.batch_size, cfg.seed)
        self.opt = Adam(list(model.named_parameters()), cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.step_count = 0
        self.history: list[TrainStats] = []
        self.log_fn = log_fn

    def step(self) -> TrainStats:
        batch = self.stream.batch(self.step_count)
        stats = joint_step(batch, self.model, self.opt, self.cfg, self.step_count + 1)
        self.step_count += 1
        self.history.append(stats)
        if self.log_fn is not None:
            self.log_fn(stats.log_line())
        return stats

    def train(self, steps: int) -> list[TrainStats]:
        return [self.step() for _ in range(steps)]


def evaluate_loss(model, batch: Batch, cfg: TrainConfig, temperature: float | None = None) -> LossTerms:
    """Loss terms without recording a tape (dropout off)."""
    return compute_losses(model, batch, cfg, None, temperature)


def init_ndgd_from_dgd(checkpoint, expected=None):
    """Model and fresh training state for NDGD fine-tuning from a DGD checkpoint.

    All parameters are copied verbatim; optimizer moments are not carried
    over.  ``expected`` (a model) makes the call verify that every parameter
    name and shape matches.
    """
    from .checkpoint import CheckpointError

    model = checkpoint.build_model()
    if expected is not None:
        want = {n: t.shape for n, t in expected.named_parameters()}
        have = {n: t.shape for n, t in model.named_parameters()}
        if want != have:
            diffs = sorted(
                f"{n}: checkpoint {have.get(n)} vs expected {want.get(n)}"
                for n in set(want) | set(have)
                if want.get(n) != have.get(n)
            )
            raise CheckpointError("architecture mismatch: " + "; ".join(diffs))
    cfg = TrainConfig.from_dict({**checkpoint.train_config, "mode": "ndgd"})
    return model, cfg


def distill_corpus(teacher: ATTransformer, corpus, vocab, beam: int = 4, max_len: int | None = None):
    """Replace each target with the teacher's beam-search output.

    Returns ``(distilled, skipped)``.  Sentences whose decode fails, is
    truncated, or comes back empty are dropped and counted in ``skipped``.
    The distilled corpus carries no pseudo-translations; align it (together
    with the original pairs) before ReorderNAT training.
    """
    from .data import Corpus
    from .decode import DecodeConfig, at_decode

    cfg = DecodeConfig("at_beam", beam=beam, max_len=max_len)
    src, tgt = [], []
    skipped = 0
    for s in corpus.src:
        try:
            res = at_decode(vocab.encode(s), teacher, cfg)
        except (ContractError, ValueError) as e:
            log.warning("distillation skipped a sentence: %s", e)
            skipped += 1
            continue
        if res.truncated or not res.tokens:
            skipped += 1
            continue
        src.append(list(s))
        tgt.append(vocab.decode(res.tokens))
    if skipped:
        log.warning("distillation skipped %d of %d sentences", skipped, len(corpus))
    return Corpus(src, tgt, meta={**corpus.meta, "distilled": True}), skipped
