import numpy as np
import pytest

from reordernat.checkpoint import (
    CheckpointError,
    CheckpointVersionError,
    from_model,
    load_checkpoint,
    save_checkpoint,
)
from reordernat.config import ConfigError, default_config_text, load_config, parse_config
from reordernat.data import (
    BatchStream,
    Corpus,
    SyntheticTask,
    SyntheticTaskSpec,
    build_vocab,
    encode_corpus,
    gen_synthetic,
    make_batch,
    read_corpus,
    reorder_permutation,
    write_corpus,
)
from reordernat.numcore import ContractError
from reordernat.train import TrainConfig, Trainer
from reordernat.vocab import NULL, PAD, UNK, Vocab

from conftest import tiny_model, tiny_task


def test_identity_task_with_identity_map_copies():
    task = SyntheticTask(SyntheticTaskSpec(vocab_size=5, rule="identity", pairs=20, seed=1))
    task.token_map = {s: s for s in task.source_types}
    c = task.generate()
    assert all(t == s and z == s for s, t, z in zip(c.src, c.tgt, c.pseudo))


def test_reverse_rule_example():
    task = SyntheticTask(SyntheticTaskSpec(vocab_size=3, rule="reverse"))
    src = ["s0", "s1", "s2"]
    z = [src[i] for i in reorder_permutation("reverse", src)]
    assert z == ["s2", "s1", "s0"]
    assert task.translate(z) == [task.token_map[t] for t in ("s2", "s1", "s0")]


@pytest.mark.parametrize("rule", ["identity", "reverse", "rotate", "swap_halves", "rule_based"])
def test_rules_are_permutations_and_pseudo_maps_to_target(rule):
    task = SyntheticTask(SyntheticTaskSpec(vocab_size=20, min_len=1, max_len=9, pairs=300, rule=rule, rotate_k=2, seed=4))
    c = task.generate()
    for s, t, z, links in zip(c.src, c.tgt, c.pseudo, c.links):
        assert sorted(links) == list(range(len(s)))
        assert z == [s[i] for i in links]
        assert task.translate(z) == t


def test_token_map_is_bijective():
    task = SyntheticTask(SyntheticTaskSpec(vocab_size=40))
    assert len(set(task.token_map.values())) == 40


def test_ambiguous_token_flips_fairly():
    task = SyntheticTask(SyntheticTaskSpec(vocab_size=4, min_len=1, max_len=3, pairs=2000, ambiguous=(0,), seed=7))
    c = task.generate()
    main, alt = task.token_map["s0"], task.alt_map["s0"]
    n_main = sum(t.count(main) for t in c.tgt)
    n_alt = sum(t.count(alt) for t in c.tgt)
    assert abs(n_main / (n_main + n_alt) - 0.5) <= 0.03


def test_generation_is_seeded():
    spec = SyntheticTaskSpec(vocab_size=10, pairs=30, seed=5)
    assert gen_synthetic(spec).src == gen_synthetic(spec).src
    assert gen_synthetic(spec).src != gen_synthetic(SyntheticTaskSpec(vocab_size=10, pairs=30, seed=6)).src


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticTaskSpec(rule="shuffle")
    with pytest.raises(ValueError):
        SyntheticTaskSpec(min_len=4, max_len=2)
    with pytest.raises(ContractError):
        Corpus([["a"]], [])


def test_vocab_examples():
    c = Corpus([["a", "b"]], [["b"]])
    v = build_vocab(c)
    assert len(v) == 7
    assert v.itos[:5] == ["<pad>", "<s>", "</s>", "<unk>", "<null>"] and v.stoi["<null>"] == NULL
    assert v.itos[5] == "b"  # most frequent first
    assert build_vocab(c) == v
    assert v.encode(["zzz"]) == [UNK]
    with pytest.raises(ContractError):
        build_vocab(Corpus([], []))


def test_vocab_file_round_trip(tmp_path):
    v = Vocab(["x", "y", "z"])
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == v


def test_corpus_file_round_trip(tmp_path):
    c = gen_synthetic(SyntheticTaskSpec(vocab_size=9, pairs=25, rule="reverse", seed=2))
    write_corpus(c, tmp_path / "c")
    back = read_corpus(tmp_path / "c")
    assert (back.src, back.tgt, back.pseudo, back.links) == (c.src, c.tgt, c.pseudo, c.links)
    (tmp_path / "c.tgt").write_text("t1\n")
    with pytest.raises(ContractError):
        read_corpus(tmp_path / "c")


def test_padding_and_masks():
    c = Corpus([["a", "b", "c"], ["a", "b", "c", "d", "e"]], [["x"], ["y", "z"]])
    b = make_batch(encode_corpus(c, build_vocab(c)), [0, 1])
    assert b.src.shape == (2, 5)
    assert (b.src[0, 3:] == PAD).all() and b.src_mask.sum() == 8
    assert b.tgt_len.tolist() == [1, 2]


def test_batch_stream_covers_each_epoch_once():
    _, _, _, data = tiny_task(n=23)
    a, b = BatchStream(data, 5, seed=3), BatchStream(data, 5, seed=3)
    for epoch in range(2):
        idx = np.concatenate([a.indices(epoch * a.per_epoch + k) for k in range(a.per_epoch)])
        assert sorted(idx.tolist()) == list(range(23))
    assert all((a.indices(k) == b.indices(k)).all() for k in range(12))
    assert not all((a.indices(k) == BatchStream(data, 5, seed=4).indices(k)).all() for k in range(5))


def _trained_checkpoint():
    _, _, vocab, data = tiny_task(n=8)
    model = tiny_model(vocab, kind="at")
    trainer = Trainer(model, data, TrainConfig(batch_size=4))
    trainer.train(3)
    return from_model(model, trainer.cfg.to_dict(), trainer.step_count, "dgd", trainer.opt, {"vocab": vocab.itos[5:]}), model


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    ckpt, model = _trained_checkpoint()
    back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "m.ckpt"))
    assert back.model_config == ckpt.model_config and back.step == 3 and back.extra == ckpt.extra
    for n, a in ckpt.params.items():
        assert back.params[n].tobytes() == a.tobytes(), n
    assert back.adam["t"] == ckpt.adam["t"]
    for x, y in zip(back.adam["m"] + back.adam["v"], ckpt.adam["m"] + ckpt.adam["v"]):
        assert x.tobytes() == y.tobytes()
    rebuilt = back.build_model()
    for (n, a), (_, b) in zip(model.named_parameters(), rebuilt.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n


def test_corrupt_checkpoints_are_rejected(tmp_path):
    ckpt, _ = _trained_checkpoint()
    path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())

    bad = bytearray(raw)
    bad[0] ^= 0xFF
    (tmp_path / "magic").write_bytes(bad)
    with pytest.raises(CheckpointError, match="magic") as e:
        load_checkpoint(tmp_path / "magic")
    assert e.value.offset == 0

    bad = bytearray(raw)
    bad[8] += 1
    (tmp_path / "version").write_bytes(bad)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "version")

    (tmp_path / "short").write_bytes(raw[:-9])
    with pytest.raises(CheckpointError, match="truncated") as e:
        load_checkpoint(tmp_path / "short")
    assert e.value.offset is not None

    (tmp_path / "long").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "long")

    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_config_parsing(tmp_path):
    rc = parse_config("model_dim = 32  # comment\nmode = ndgd\ntemperature = 0.5\ndistill = yes\n")
    assert rc.model(vocab_size=20).model_dim == 32
    assert rc.train().mode == "ndgd" and rc.train().distill is True
    assert rc.decode().temperature == 0.5
    with pytest.raises(ConfigError):
        parse_config("bogus = 1")
    with pytest.raises(ConfigError):
        parse_config("model_dim = big")
    with pytest.raises(ConfigError):
        parse_config("mode = sideways").train()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.cfg")
    defaults = parse_config(default_config_text())
    assert defaults.train() == TrainConfig()
