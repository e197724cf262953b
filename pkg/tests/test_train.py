import math

import numpy as np
import pytest

from reordernat import numcore as nc
from reordernat.checkpoint import CheckpointError, from_model
from reordernat.data import Corpus, build_vocab, encode_corpus, make_batch
from reordernat.numcore import Tape, Tensor, backward
from reordernat.train import (
    TrainConfig,
    Trainer,
    compute_losses,
    distill_corpus,
    evaluate_loss,
    init_ndgd_from_dgd,
    lr_schedule,
    parse_log_line,
    reordering_loss,
    smoothed_cross_entropy,
    smoothing_floor,
    smoothing_targets,
    translation_loss_dgd,
    translation_loss_ndgd,
)

from conftest import tiny_model, tiny_task


def test_smoothing_targets_example():
    q = smoothing_targets(np.array([0]), 4, 0.15)[0]
    np.testing.assert_allclose(q, [0.8875, 0.0375, 0.0375, 0.0375], atol=1e-15)


def test_uniform_logits_give_ln_v():
    for eps in (0.0, 0.15, 0.7):
        loss, n = smoothed_cross_entropy(Tensor(np.zeros((1, 3, 4))), np.array([[0, 2, 3]]), eps, reduction="mean")
        assert n == 3
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_confident_logits_without_smoothing():
    logits = np.zeros((1, 2, 4))
    logits[0, 0, 1] = logits[0, 1, 3] = 30.0
    loss, _ = smoothed_cross_entropy(Tensor(logits), np.array([[1, 3]]), 0.0, reduction="mean")
    assert loss.item() < 1e-9


def test_smoothing_floor_is_loss_of_q_against_itself():
    q = smoothing_targets(np.array([2]), 6, 0.15)[0]
    loss, _ = smoothed_cross_entropy(Tensor(np.log(q)[None, None]), np.array([[2]]), 0.15)
    assert loss.item() == pytest.approx(smoothing_floor(6, 0.15), abs=1e-12)


def test_pad_positions_do_not_count():
    logits = np.random.default_rng(0).normal(size=(1, 3, 5))
    mask = np.array([[True, True, False]])
    a, _ = smoothed_cross_entropy(Tensor(logits), np.array([[1, 2, 0]]), 0.1, pad_mask=mask)
    b, _ = smoothed_cross_entropy(Tensor(logits[:, :2]), np.array([[1, 2]]), 0.1)
    assert a.item() == pytest.approx(b.item(), abs=1e-12)


def test_lr_schedule_examples():
    warm = TrainConfig(schedule="warmup", warmup_steps=4000)
    got = lr_schedule(4000, warm, 512)
    assert got == pytest.approx(512**-0.5 * 4000**-0.5, rel=1e-12)
    # the quoted hand value is 6.989e-4; the exact product is 6.98771e-4
    assert got == pytest.approx(6.989e-4, rel=3e-4)
    lin = TrainConfig(schedule="linear", total_steps=100)
    assert lr_schedule(1, lin, 32) == pytest.approx(3e-4)
    assert lr_schedule(100, lin, 32) == pytest.approx(1e-5)
    assert lr_schedule(50, lin, 32) < lr_schedule(49, lin, 32)
    with pytest.raises(nc.ContractError):
        lr_schedule(0, warm, 32)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(mode="greedy")
    cfg = TrainConfig(mode="ndgd", seed=3)
    assert TrainConfig.from_dict({**cfg.to_dict(), "unknown": 1}) == cfg


@pytest.mark.parametrize("kind", ["nat", "at"])
@pytest.mark.parametrize("mode", ["dgd", "ndgd"])
def test_total_is_sum_of_components(tiny, kind, mode):
    _, _, vocab, data, batch = tiny
    model = tiny_model(vocab, kind=kind)
    terms = compute_losses(model, batch, TrainConfig(mode=mode))
    assert terms.total.item() == pytest.approx(terms.reorder.item() + terms.translate.item(), abs=1e-12)
    assert terms.objective.item() == pytest.approx(terms.total.item() + terms.length.item(), abs=1e-12)


def test_losses_are_additive_over_examples(tiny):
    _, _, vocab, data, _ = tiny
    model = tiny_model(vocab)
    cfg = TrainConfig()
    both = make_batch(data, [0, 1])
    for fn in (reordering_loss, translation_loss_dgd):
        whole = fn(model, both, cfg, reduction="sum").item()
        parts = sum(fn(model, make_batch(data, [i]), cfg, reduction="sum").item() for i in (0, 1))
        assert whole == pytest.approx(parts, abs=1e-12)


def test_padding_does_not_change_translation_loss(tiny):
    _, _, vocab, data, _ = tiny
    model = tiny_model(vocab)
    cfg = TrainConfig()
    lens = [len(t) for t in data.tgt]
    short, long = int(np.argmin(lens)), int(np.argmax(lens))
    assert lens[short] < lens[long]
    alone = translation_loss_dgd(model, make_batch(data, [short]), cfg, reduction="sum").item()
    padded = make_batch(data, [short, long])
    both = translation_loss_dgd(model, padded, cfg, reduction="sum").item()
    other = translation_loss_dgd(model, make_batch(data, [long]), cfg, reduction="sum").item()
    assert both - other == pytest.approx(alone, abs=1e-12)


def test_one_hot_guidance_matches_dgd(tiny):
    _, _, vocab, data, batch = tiny
    model = tiny_model(vocab)
    cfg = TrainConfig(mode="ndgd")
    dgd = translation_loss_dgd(model, batch, cfg).item()
    # a huge gold score and a vanishing temperature make Q one-hot at the gold pseudo-translation
    states = model.encode_batch(batch.src, batch.src_mask)
    onehot = np.zeros(batch.pseudo.shape + (len(vocab),))
    np.put_along_axis(onehot, batch.pseudo[..., None], 1.0, axis=-1)
    guide = model.guide_ndgd(Tensor(onehot))
    logits = model.decoder_module(guide, states, batch.src_mask, batch.tgt_mask)
    ndgd, _ = smoothed_cross_entropy(logits, batch.tgt, cfg.label_smoothing, None, batch.tgt_mask, "mean")
    assert ndgd.item() == pytest.approx(dgd, abs=1e-10)


def test_temperature_is_observable(tiny):
    _, _, vocab, data, batch = tiny
    model = tiny_model(vocab)
    cfg = TrainConfig(mode="ndgd")
    a = translation_loss_ndgd(model, batch, cfg, temperature=0.2).item()
    b = translation_loss_ndgd(model, batch, cfg, temperature=1.0).item()
    assert abs(a - b) > 1e-6


@pytest.mark.parametrize("kind", ["nat", "at"])
def test_ndgd_translation_gradient_reaches_reorderer(tiny, kind):
    _, _, vocab, data, batch = tiny
    model = tiny_model(vocab, kind=kind)
    model.zero_grad()
    with Tape() as tape:
        loss = translation_loss_ndgd(model, batch, TrainConfig(mode="ndgd"))
    backward(loss, tape)
    reorder = [t for n, t in model.named_parameters() if n.startswith("reorder")]
    assert reorder
    assert sum(float(np.abs(t.grad).sum()) for t in reorder if t.grad is not None) > 0


def _train(kind="nat", steps=50, seed=0, mode="dgd"):
    _, corpus, vocab, data = tiny_task(n=24, vocab_size=6, min_len=2, max_len=6, seed=4)
    model = tiny_model(vocab, kind=kind, d=16)
    cfg = TrainConfig(mode=mode, schedule="linear", lr_start=3e-3, lr_end=3e-3, batch_size=8, seed=seed)
    return Trainer(model, data, cfg), data


def test_training_is_deterministic():
    a, _ = _train()
    b, _ = _train()
    la = [s.loss for s in a.train(50)]
    lb = [s.loss for s in b.train(50)]
    assert la == lb
    for (n, x), (_, y) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes(), n


def test_loss_decreases_over_200_steps():
    trainer, _ = _train(steps=200)
    losses = np.array([s.loss for s in trainer.train(200)])
    assert losses[-20:].mean() < 0.7 * losses[:20].mean()


def test_log_lines_parse_back():
    trainer, _ = _train()
    lines = []
    trainer.log_fn = lines.append
    stats = trainer.train(2)
    rec = parse_log_line(lines[-1])
    assert rec["step"] == 2
    assert rec["L"] == pytest.approx(stats[-1].loss, rel=1e-6)
    assert rec["L"] == pytest.approx(rec["L_R"] + rec["L_T"], abs=5e-6)


def test_copy_task_translation_loss_drops():
    _, corpus, _, _ = tiny_task(n=64, vocab_size=8, min_len=3, max_len=6, rule="identity", seed=2)
    # shared vocabulary: the target is the source, so the pseudo-translation is the reference
    copy = Corpus(corpus.src, corpus.src, pseudo=corpus.src)
    vocab = build_vocab(copy)
    data = encode_corpus(copy, vocab)
    model = tiny_model(vocab, d=32)
    cfg = TrainConfig(schedule="linear", lr_start=3e-3, lr_end=3e-3, batch_size=16, label_smoothing=0.0)
    trainer = Trainer(model, data, cfg)
    for _ in range(500):
        trainer.step()
        if trainer.step_count % 50 == 0:
            lt = translation_loss_dgd(model, make_batch(data, range(len(data))), cfg).item()
            if lt < 0.1:
                break
    assert lt < 0.1


def test_overfit_reorderer_reaches_the_smoothing_floor():
    _, corpus, vocab, data = tiny_task(n=4, vocab_size=4, min_len=3, max_len=4, seed=5)
    model = tiny_model(vocab, d=16)
    cfg = TrainConfig(schedule="linear", lr_start=1e-2, lr_end=1e-2, batch_size=4)
    trainer = Trainer(model, data, cfg)
    trainer.train(300)
    lr_ = reordering_loss(model, make_batch(data, range(4)), cfg).item()
    assert lr_ < smoothing_floor(len(vocab), cfg.label_smoothing) + 0.05


def test_init_ndgd_copies_parameters_and_checks_architecture(tiny):
    _, _, vocab, data, batch = tiny
    dgd = tiny_model(vocab)
    ckpt = from_model(dgd, TrainConfig(label_smoothing=0.1).to_dict(), step=7)
    model, cfg = init_ndgd_from_dgd(ckpt, expected=dgd)
    assert cfg.mode == "ndgd" and cfg.label_smoothing == 0.1
    for (n, a), (_, b) in zip(dgd.named_parameters(), model.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n
        assert a.data is not b.data
    # at a near-zero temperature NDGD sees essentially the DGD guidance
    a = evaluate_loss(dgd, batch, TrainConfig()).translate.item()
    b = evaluate_loss(model, batch, cfg, temperature=1e-6).translate.item()
    assert b == pytest.approx(a, rel=0.05)
    with pytest.raises(CheckpointError):
        init_ndgd_from_dgd(ckpt, expected=tiny_model(vocab, kind="at"))


def test_distillation_with_a_copying_teacher():
    _, corpus, vocab, data = tiny_task(n=6, vocab_size=4, min_len=2, max_len=4, rule="identity", seed=1)
    teacher = tiny_model(vocab, arch="at_teacher", d=16)
    trainer = Trainer(teacher, data, TrainConfig(schedule="linear", lr_start=1e-2, lr_end=1e-2, batch_size=6, label_smoothing=0.0))
    trainer.train(300)
    distilled, skipped = distill_corpus(teacher, corpus, vocab, beam=2)
    assert skipped == 0
    assert len(distilled) == len(corpus)
    assert distilled.src == corpus.src
    assert distilled.tgt == corpus.tgt
