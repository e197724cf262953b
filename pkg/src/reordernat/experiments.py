"""Desk-scale experiment harness.

Generates a synthetic task, builds pseudo-translations with the IBM-1
aligner, trains the four systems (AT teacher, ReorderNAT with each kind of
reordering module, plain NAT) and decodes a held-out set.  Every step is
seeded, so a given :class:`DeskSetup` always produces the same numbers
within a build.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .align import align_corpus, alignment_accuracy, ibm1_em_train
from .data import Corpus, EncodedCorpus, SyntheticTask, SyntheticTaskSpec, build_vocab, encode_corpus
from .decode import DecodeConfig, DecodeResult, decode_corpus
from .evaluation import MetricReport, evaluate, latency_report
from .model import ModelConfig, build_model
from .train import TrainConfig, Trainer, distill_corpus
from .vocab import Vocab

log = logging.getLogger(__name__)

# system name -> (arch, reorder_kind, decode strategy)
SYSTEMS = {
    "at_teacher": ("at_teacher", "nat", "at_beam"),
    "reordernat_at": ("reordernat", "at", "dgd"),
    "reordernat_nat": ("reordernat", "nat", "dgd"),
    "plain_nat": ("plain_nat", "nat", "nat_baseline"),
}


@dataclass
class DeskSetup:
    task: SyntheticTaskSpec = field(default_factory=lambda: SyntheticTaskSpec(vocab_size=64, rule="swap_halves", seed=1))
    n_train: int = 5000
    n_test: int = 500
    n_layers: int = 3
    model_dim: int = 32
    hidden_dim: int = 64
    head_count: int = 2
    steps: int = 2000
    batch_size: int = 32
    warmup_steps: int = 300
    lr_scale: float = 1.0
    reorder_warmup: int = 500
    align_iterations: int = 10
    distill: bool = False
    beam: int = 4
    seed: int = 0

    def model_config(self, name: str, vocab_size: int) -> ModelConfig:
        arch, kind, _ = SYSTEMS[name]
        return ModelConfig(
            vocab_size=vocab_size,
            arch=arch,
            reorder_kind=kind,
            n_layers=self.n_layers,
            model_dim=self.model_dim,
            hidden_dim=self.hidden_dim,
            head_count=self.head_count,
            seed=self.seed,
        )

    def train_config(self, mode: str = "dgd") -> TrainConfig:
        return TrainConfig(
            mode=mode,
            batch_size=self.batch_size,
            warmup_steps=self.warmup_steps,
            lr_scale=self.lr_scale,
            total_steps=self.steps,
            reorder_warmup=self.reorder_warmup,
            seed=self.seed,
        )


@dataclass
class PreparedTask:
    task: SyntheticTask
    train: Corpus  # pseudo-translations from the aligner
    test: Corpus  # gold pseudo-translations from the generator
    vocab: Vocab
    data: EncodedCorpus
    test_data: EncodedCorpus
    align_accuracy: float


def prepare(setup: DeskSetup, targets: Corpus | None = None, vocab: Vocab | None = None) -> PreparedTask:
    """Sample train/test pairs, align the training side, encode both.

    ``targets`` replaces the training corpus (used for distilled data); the
    aligner is then trained on the union of the original and given pairs.
    ``vocab`` fixes the token ids (students must share the teacher's).
    """
    task = SyntheticTask(setup.task)
    corpus = task.generate(setup.n_train + setup.n_test)
    train, test = corpus.split(setup.n_train)
    student = targets if targets is not None else train
    pairs = list(zip(student.src, student.tgt))
    if targets is not None:
        pairs = list(zip(train.src, train.tgt)) + pairs
    table = ibm1_em_train(pairs, setup.align_iterations)
    aligned = align_corpus(Corpus(student.src, student.tgt, meta=dict(student.meta)), table)
    acc = alignment_accuracy(train.src, align_corpus(train, table).links, train.links)
    if vocab is None:
        vocab = build_vocab(train, test) if targets is None else build_vocab(train, test, targets)
    return PreparedTask(task, aligned, test, vocab, encode_corpus(aligned, vocab), encode_corpus(test, vocab), acc)


def train_system(name: str, prep: PreparedTask, setup: DeskSetup, steps: int | None = None, log_fn=None):
    model = build_model(setup.model_config(name, len(prep.vocab)))
    trainer = Trainer(model, prep.data, setup.train_config(), log_fn)
    trainer.train(steps if steps is not None else setup.steps)
    return model, trainer


def decode_system(name: str, model, prep: PreparedTask, setup: DeskSetup, strategy: str | None = None, lengths=None):
    strategy = strategy or SYSTEMS[name][2]
    cfg = DecodeConfig(strategy, beam=setup.beam if strategy == "at_beam" else 1)
    return decode_corpus(prep.test_data.src, model, cfg, lengths)


def hypotheses(results: list[DecodeResult], vocab: Vocab) -> list[list[str]]:
    return [vocab.decode(r.tokens) for r in results]


@dataclass
class DeskResult:
    reports: dict[str, MetricReport]
    results: dict[str, list[DecodeResult]]
    models: dict[str, object]
    seconds: dict[str, float]
    prep: PreparedTask
    speedup: dict[str, float] = field(default_factory=dict)

    def bleu(self, name: str) -> float:
        return self.reports[name].bleu


def run_desk(setup: DeskSetup, systems=tuple(SYSTEMS), progress: Callable[[str], None] | None = None) -> DeskResult:
    """Train and evaluate ``systems`` on one task; the teacher is the Dup/Mis baseline."""
    say = progress or (lambda msg: log.info(msg))
    t0 = time.time()
    prep = prepare(setup)
    say(f"prepared task: {len(prep.train)} train / {len(prep.test)} test, vocab {len(prep.vocab)}, "
        f"alignment accuracy {prep.align_accuracy:.4f}")
    models, results, seconds = {}, {}, {"prepare": time.time() - t0}

    order = list(systems)
    if setup.distill and "at_teacher" not in order:
        order.insert(0, "at_teacher")
    if "at_teacher" in order:
        order.remove("at_teacher")
        order.insert(0, "at_teacher")

    student_prep = prep
    for name in order:
        t = time.time()
        use = prep if name == "at_teacher" else student_prep
        model, _ = train_system(name, use, setup)
        models[name] = model
        seconds[f"train.{name}"] = time.time() - t
        t = time.time()
        results[name] = decode_system(name, model, use, setup)
        seconds[f"decode.{name}"] = time.time() - t
        say(f"{name}: trained {seconds[f'train.{name}']:.0f}s, decoded {seconds[f'decode.{name}']:.0f}s")
        if name == "at_teacher" and setup.distill:
            t = time.time()
            distilled, skipped = distill_corpus(model, prep.train, prep.vocab, setup.beam)
            student_prep = prepare(setup, targets=distilled, vocab=prep.vocab)
            seconds["distill"] = time.time() - t
            say(f"distilled {len(distilled)} pairs ({skipped} skipped) in {seconds['distill']:.0f}s")

    refs = prep.test.tgt
    reports = {}
    base = None
    if "at_teacher" in results:
        base = evaluate("at_teacher", hypotheses(results["at_teacher"], prep.vocab), refs)
    for name in order:
        if name not in systems:
            continue
        res = results[name]
        passes = latency_report({name: res}, reference=name).passes[name]
        reports[name] = evaluate(name, hypotheses(res, prep.vocab), refs, base if name != "at_teacher" else None, passes)
    speedup = {}
    if "at_teacher" in results:
        speedup = latency_report({k: v for k, v in results.items()}, "at_teacher").speedup
    seconds["total"] = time.time() - t0
    return DeskResult(reports, results, models, seconds, prep, speedup)


def corrupt_lengths(model, prep: PreparedTask, magnitude: int = 2, seed: int = 0) -> list[int]:
    """Predicted lengths with uniform noise in [-magnitude, magnitude] added (clamped to >= 1)."""
    rng = np.random.default_rng(seed)
    out = []
    for x in prep.test_data.src:
        m = int(model.predict_length(model.encode(x))[1][0])
        out.append(max(1, m + int(rng.integers(-magnitude, magnitude + 1))))
    return out


def two_mode_setup(**overrides) -> DeskSetup:
    """Task where each sentence is reordered by one of two rules at random."""
    task = SyntheticTaskSpec(vocab_size=64, rule="swap_halves", alt_rule="reverse", seed=2)
    return replace(DeskSetup(task=task), **overrides)
