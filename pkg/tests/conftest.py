import numpy as np
import pytest

from reordernat.data import SyntheticTask, SyntheticTaskSpec, build_vocab, encode_corpus, make_batch
from reordernat.model import ModelConfig, build_model


def tiny_task(n=6, vocab_size=4, min_len=3, max_len=5, rule="swap_halves", seed=0, **kw):
    task = SyntheticTask(SyntheticTaskSpec(vocab_size=vocab_size, min_len=min_len, max_len=max_len, rule=rule, seed=seed, **kw))
    corpus = task.generate(n)
    vocab = build_vocab(corpus)
    return task, corpus, vocab, encode_corpus(corpus, vocab)


def tiny_model(vocab, arch="reordernat", kind="nat", d=8, n_layers=2, seed=1, **kw):
    cfg = ModelConfig(vocab_size=len(vocab), arch=arch, reorder_kind=kind, n_layers=n_layers,
                      model_dim=d, hidden_dim=d, head_count=2, seed=seed, **kw)
    return build_model(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="module")
def tiny():
    task, corpus, vocab, data = tiny_task()
    return task, corpus, vocab, data, make_batch(data, [0, 1])
