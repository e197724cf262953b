import math
from types import SimpleNamespace

import pytest
from hypothesis import given, strategies as st

from reordernat.evaluation import (
    corpus_bleu,
    dup_ratio,
    evaluate,
    kendall_tau,
    latency_report,
    mis_ratio,
    parse_records,
    relative_increment,
    render_table,
    ribes,
    sentence_ribes,
)
from reordernat.numcore import ContractError


def s(text):
    return text.split()


def test_bleu_examples():
    assert corpus_bleu([s("a b c d e")], [s("a b c d e")]) == pytest.approx(100.0)
    assert corpus_bleu([s("a b c")], [s("a b c d")]) == pytest.approx(100 * math.exp(1 - 4 / 3), abs=5e-5)
    assert round(corpus_bleu([s("a b c")], [s("a b c d")]), 2) == 71.65
    assert corpus_bleu([s("a a a a")], [s("a b c d")]) == 0.0


def test_bleu_errors():
    with pytest.raises(ContractError):
        corpus_bleu([], [])
    with pytest.raises(ContractError):
        corpus_bleu([s("a")], [s("a"), s("b")])


sentences = st.lists(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=8), min_size=1, max_size=6)


@given(sentences, st.randoms(use_true_random=False))
def test_bleu_is_order_invariant(hyps, rnd):
    refs = [list(reversed(h)) + ["z"] for h in hyps]
    order = list(range(len(hyps)))
    rnd.shuffle(order)
    a = corpus_bleu(hyps, refs)
    b = corpus_bleu([hyps[i] for i in order], [refs[i] for i in order])
    assert a == pytest.approx(b, abs=1e-9)
    assert 0.0 <= a <= 100.0


def test_ribes_examples():
    assert ribes([s("a b c d")], [s("a b c d")]) == pytest.approx(100.0)
    assert ribes([s("d c b a")], [s("a b c d")]) == pytest.approx(0.0, abs=1e-12)
    assert ribes([s("b a c d")], [s("a b c d")]) == pytest.approx(83.3, abs=0.1)
    assert kendall_tau([1, 0, 2, 3]) == pytest.approx(4 / 6)


def test_ribes_needs_two_aligned_words():
    assert sentence_ribes(s("a x y"), s("a b c")) == 0.0


@given(st.lists(st.sampled_from("abcdefgh"), min_size=2, max_size=10).filter(lambda h: len(set(h)) >= 2))
def test_ribes_of_identical_text_is_100(h):
    assert ribes([h], [h]) == pytest.approx(100.0)


def test_dup_examples():
    assert dup_ratio([s("a a b")]) == pytest.approx(1 / 3)
    assert dup_ratio([s("a b c")]) == 0.0
    assert dup_ratio([s("a a a")]) == pytest.approx(2 / 3)


def test_mis_examples():
    assert mis_ratio([s("a b c")], [s("a b c")]) == 0.0
    assert mis_ratio([s("a b")], [s("a b c")]) == pytest.approx(1 / 3)
    assert mis_ratio([s("a")], [s("a a")]) == pytest.approx(1 / 2)


@given(sentences, sentences)
def test_ratios_lie_in_unit_interval(h, r):
    r = (r * len(h))[: len(h)]
    assert 0.0 <= dup_ratio(h) <= 1.0
    assert 0.0 <= mis_ratio(h, r) <= 1.0
    assert mis_ratio(h, h) == 0.0


def test_relative_increment_examples():
    assert relative_increment(0.02, 0.02) == 0.0
    assert relative_increment(0.03, 0.02) == pytest.approx(50.0)
    assert relative_increment(0.01, 0.02) == pytest.approx(-50.0)
    assert relative_increment(0.01, 0.0) is None


def test_records_round_trip_and_table():
    hyps, refs = [s("a a b"), s("c d")], [s("a b"), s("c d e")]
    base = evaluate("at_teacher", refs, refs)
    rep = evaluate("plain_nat", hyps, refs, baseline=base, pass_counts={"decoder": 2, "encoder": 2})
    assert rep.dup_increment is None  # the baseline has no repeats
    back = parse_records(rep.records())
    assert back.system == rep.system and back.pass_counts == rep.pass_counts
    assert back.bleu == pytest.approx(rep.bleu, abs=1e-4)
    assert back.mis_ratio == pytest.approx(rep.mis_ratio, abs=1e-6)
    assert back.dup_increment is None
    table = render_table([base, rep], {"plain_nat": 2.5})
    assert table.startswith("#") and "2.50x" in table and "n/a" in table


def test_latency_accounting():
    res = lambda e, r, d: SimpleNamespace(passes={"encoder": e, "reorder": r, "decoder": d})  # noqa: E731
    rep = latency_report({
        "at_teacher": [res(1, 0, 4), res(1, 0, 6)],
        "reordernat_nat": [res(1, 1, 1), res(1, 1, 1)],
        "reordernat_at": [res(1, 4, 1), res(1, 6, 1)],
    })
    assert rep.passes["at_teacher"]["decoder"] == 10
    assert rep.passes["reordernat_nat"]["decoder"] == 2
    assert rep.passes["reordernat_at"] == {"encoder": 2, "reorder": 10, "decoder": 2}
    assert rep.speedup["reordernat_nat"] == pytest.approx(5.0)
    with pytest.raises(ContractError):
        latency_report({"at_teacher": [res(1, 0, 3)], "x": []})
