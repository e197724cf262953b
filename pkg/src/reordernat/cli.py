"""Command-line console: ``python3 -m reordernat <command> ...``.

Commands::

    gen-data   sample a synthetic corpus with gold pseudo-translations
    align      IBM-1 alignment, writes Pharaoh links and pseudo-translations
    distill    replace targets with an AT teacher's beam output
    train      train a model, writes a checkpoint and a tab-separated log
    translate  decode a source file, writes hypotheses and a pass-count sidecar
    evaluate   score hypotheses, writes key=value metric records
    report     render metric records as a comparison table

Exit status is 0 on success, 1 for usage errors and 2 for data errors
(missing or malformed files).  Relative paths for corpus prefixes are taken
from ``$REORDERNAT_DATA`` when that variable is set.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .align import align_corpus, alignment_accuracy, ibm1_em_train
from .checkpoint import CheckpointError, from_model, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, default_config_text, load_config
from .data import (
    DATA_DIR_ENV,
    Corpus,
    SyntheticTask,
    SyntheticTaskSpec,
    build_vocab,
    encode_corpus,
    read_corpus,
    read_lines,
    write_corpus,
    write_sentences,
    RULES,
)
from .decode import STRATEGIES, DecodeConfig, decode_corpus
from .evaluation import MetricReport, evaluate, parse_records, render_table
from .model import ARCHS, build_model
from .numcore import ContractError
from .train import DataError, Trainer, distill_corpus, init_ndgd_from_dgd
from .vocab import Vocab, VocabError

log = logging.getLogger("reordernat")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def data_path(p: str) -> Path:
    path = Path(p)
    base = os.environ.get(DATA_DIR_ENV)
    if base and not path.is_absolute():
        return Path(base) / path
    return path


def _need(path: Path) -> Path:
    if not path.exists():
        raise InputError(f"no such file: {path}")
    return path


def _corpus(prefix: str) -> Corpus:
    p = data_path(prefix)
    for ext in (".src", ".tgt"):
        _need(Path(str(p) + ext))
    return read_corpus(p)


def _write_lines(path: Path, lines) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf8")
    os.replace(tmp, path)


def _vocab_of(ckpt) -> Vocab:
    toks = ckpt.extra.get("vocab")
    if toks is None:
        raise InputError("checkpoint carries no vocabulary")
    return Vocab(toks)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(a) -> int:
    ambiguous = tuple(int(t) for t in a.ambiguous.split(",")) if a.ambiguous else ()
    spec = SyntheticTaskSpec(
        vocab_size=a.vocab_size, min_len=a.min_len, max_len=a.max_len, pairs=a.pairs,
        rule=a.rule, rotate_k=a.rotate_k, ambiguous=ambiguous, alt_rule=a.alt_rule, seed=a.seed,
    )
    corpus = SyntheticTask(spec).generate(a.pairs + a.test_pairs)
    out = data_path(a.out)
    if a.test_pairs:
        train, test = corpus.split(a.pairs)
        write_corpus(train, str(out) + ".train")
        write_corpus(test, str(out) + ".test")
        print(f"wrote {len(train)} pairs to {out}.train.* and {len(test)} to {out}.test.*")
    else:
        write_corpus(corpus, out)
        print(f"wrote {len(corpus)} pairs to {out}.*")
    return EXIT_OK


def cmd_align(a) -> int:
    corpus = _corpus(a.corpus)
    pairs = list(zip(corpus.src, corpus.tgt))
    if a.extra:
        extra = _corpus(a.extra)
        pairs += list(zip(extra.src, extra.tgt))
    table = ibm1_em_train(pairs, a.iterations)
    aligned = align_corpus(Corpus(corpus.src, corpus.tgt), table)
    out = data_path(a.out) if a.out else Path(str(data_path(a.corpus)) + ".ibm1")
    write_corpus(aligned, out)
    msg = f"aligned {len(aligned)} pairs -> {out}.align, {out}.pseudo; log-likelihood {table.log_likelihood[-1]:.2f}"
    if corpus.links is not None:
        msg += f"; accuracy vs given links {alignment_accuracy(corpus.src, aligned.links, corpus.links):.4f}"
    print(msg)
    return EXIT_OK


def cmd_distill(a) -> int:
    ckpt = load_checkpoint(_need(Path(a.teacher)))
    if ckpt.model_config.get("arch") != "at_teacher":
        raise UsageError(f"{a.teacher} is not an at_teacher checkpoint")
    teacher, vocab = ckpt.build_model(), _vocab_of(ckpt)
    corpus = _corpus(a.corpus)
    distilled, skipped = distill_corpus(teacher, corpus, vocab, a.beam)
    write_corpus(distilled, data_path(a.out))
    print(f"distilled {len(distilled)} pairs ({skipped} skipped) -> {data_path(a.out)}.src/.tgt")
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = load_config(_need(Path(a.config))) if a.config else RunConfig()
    corpus = _corpus(a.corpus)
    resume = None
    if a.resume:
        resume = load_checkpoint(_need(Path(a.resume)))
        vocab = _vocab_of(resume)
        model = resume.build_model()
        from .train import TrainConfig

        tcfg = TrainConfig.from_dict(resume.train_config)
    elif a.init_from:
        if a.mode != "ndgd":
            raise UsageError("--init-from is the DGD -> NDGD hand-off; pass --mode ndgd")
        base = load_checkpoint(_need(Path(a.init_from)))
        vocab = _vocab_of(base)
        model, tcfg = init_ndgd_from_dgd(base)
        if cfg.values:
            tcfg = cfg.train(**{**tcfg.to_dict(), **cfg.values, "mode": "ndgd"})
    else:
        vocab = build_vocab(corpus)
        overrides = {k: v for k, v in (("arch", a.arch), ("reorder_kind", a.reorder_kind)) if v is not None}
        model = build_model(cfg.model(vocab_size=len(vocab), **overrides))
        tcfg = cfg.train(**({"mode": a.mode} if a.mode else {}))
    if a.steps is not None:
        tcfg.total_steps = a.steps
    if a.seed is not None and resume is None:
        tcfg.seed = a.seed
    if model.config.arch == "reordernat" and corpus.pseudo is None:
        raise InputError(f"{a.corpus}: ReorderNAT training needs a .pseudo file (run `align` first)")
    if model.config.arch != "reordernat":
        corpus = Corpus(corpus.src, corpus.tgt)

    out = Path(a.out)
    log_path = Path(a.log) if a.log else out.with_suffix(out.suffix + ".log")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(log_path, "a" if resume else "w", encoding="utf8")
    try:
        trainer = Trainer(model, encode_corpus(corpus, vocab), tcfg, lambda line: (fh.write(line + "\n"), fh.flush()))
        if resume is not None:
            trainer.step_count = resume.step
            if resume.adam is not None:
                trainer.opt.load_state(resume.adam)
        t0 = time.time()
        while trainer.step_count < tcfg.total_steps:
            trainer.step()
            if a.save_every and trainer.step_count % a.save_every == 0:
                _save(model, tcfg, trainer, vocab, out)
        _save(model, tcfg, trainer, vocab, out)
    finally:
        fh.close()
    last = trainer.history[-1] if trainer.history else None
    tail = f"; final loss {last.loss:.4f}" if last else ""
    print(f"trained {model.config.arch}/{tcfg.mode} to step {trainer.step_count} in {time.time() - t0:.0f}s{tail} -> {out}")
    return EXIT_OK


def _save(model, tcfg, trainer, vocab, out: Path) -> None:
    ckpt = from_model(model, tcfg.to_dict(), trainer.step_count, tcfg.mode, trainer.opt, {"vocab": vocab.itos[5:]})
    save_checkpoint(ckpt, out)


def cmd_translate(a) -> int:
    ckpt = load_checkpoint(_need(Path(a.model)))
    model, vocab = ckpt.build_model(), _vocab_of(ckpt)
    arch = model.config.arch
    strategy = a.strategy or {"reordernat": "dgd", "plain_nat": "nat_baseline", "at_teacher": "at_beam"}[arch]
    allowed = {"reordernat": ("dgd", "ndgd", "lpd"), "plain_nat": ("nat_baseline", "lpd"), "at_teacher": ("at_greedy", "at_beam")}
    if strategy not in allowed[arch]:
        raise UsageError(f"strategy {strategy} does not apply to a {arch} model (use {', '.join(allowed[arch])})")
    guide = a.lpd_guide or ("ndgd" if ckpt.mode == "ndgd" else "dgd")
    cfg = DecodeConfig(strategy, a.temperature, a.beam, a.samples, guide)
    sources = read_lines(_need(data_path(a.input)))
    results = decode_corpus([vocab.encode(s) for s in sources], model, cfg)
    out = data_path(a.out)
    write_sentences(out, [vocab.decode(r.tokens) for r in results])
    side = Path(a.sidecar) if a.sidecar else out.with_name(out.name + ".passes.tsv")
    rows = ["#pseudo\tencoder\treorder\tdecoder"]
    for r in results:
        z = " ".join(vocab.decode(r.pseudo, strip=False)) if r.pseudo is not None else "-"
        p = r.passes
        rows.append(f"{z}\t{p.get('encoder', 0)}\t{p.get('reorder', 0)}\t{p.get('decoder', 0)}")
    _write_lines(side, rows)
    print(f"translated {len(results)} sentences with {strategy} -> {out} (passes: {side})")
    return EXIT_OK


def _read_passes(path: Path) -> dict[str, int]:
    totals = {"encoder": 0, "reorder": 0, "decoder": 0}
    for line in _need(path).read_text(encoding="utf8").splitlines():
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise InputError(f"{path}: expected 4 tab-separated columns, got {len(cols)}")
        for k, v in zip(("encoder", "reorder", "decoder"), cols[1:]):
            totals[k] += int(v)
    return totals


def cmd_evaluate(a) -> int:
    hyps = read_lines(_need(data_path(a.hyp)))
    refs = read_lines(_need(data_path(a.ref)))
    if len(hyps) != len(refs):
        raise InputError(f"{a.hyp} has {len(hyps)} lines but {a.ref} has {len(refs)}")
    base = None
    if a.baseline:
        bh = read_lines(_need(data_path(a.baseline)))
        if len(bh) != len(refs):
            raise InputError(f"{a.baseline} has {len(bh)} lines but {a.ref} has {len(refs)}")
        base = evaluate("baseline", bh, refs)
    passes = _read_passes(Path(a.passes)) if a.passes else None
    if passes is None:
        side = Path(str(data_path(a.hyp)) + ".passes.tsv")
        passes = _read_passes(side) if side.exists() else None
    name = a.system or Path(a.hyp).stem
    rep = evaluate(name, hyps, refs, base, passes)
    lines = rep.records()
    if a.out:
        _write_lines(Path(a.out), lines)
    print("\n".join(lines))
    return EXIT_OK


def cmd_report(a) -> int:
    reports: list[MetricReport] = []
    for p in a.records:
        text = _need(Path(p)).read_text(encoding="utf8").splitlines()
        try:
            reports.append(parse_records(text))
        except (KeyError, ValueError) as e:
            raise InputError(f"{p}: malformed metric records ({e})") from e
    ref = next((r for r in reports if r.system == a.reference), reports[0])
    speed = {}
    if ref.pass_counts.get("decoder"):
        for r in reports:
            d = r.pass_counts.get("decoder")
            if d:
                speed[r.system] = ref.pass_counts["decoder"] / d
    table = render_table(reports, speed)
    if a.out:
        _write_lines(Path(a.out), table.splitlines())
    print(table)
    return EXIT_OK


def cmd_config(a) -> int:
    sys.stdout.write(default_config_text())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reordernat", description="Non-autoregressive translation with a reordering module.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="sample a synthetic parallel corpus")
    g.add_argument("--out", required=True, help="output prefix (writes .src .tgt .pseudo .align)")
    g.add_argument("--pairs", type=int, default=1000)
    g.add_argument("--test-pairs", type=int, default=0, help="also write a held-out split to <out>.test.*")
    g.add_argument("--vocab-size", type=int, default=64)
    g.add_argument("--min-len", type=int, default=5)
    g.add_argument("--max-len", type=int, default=12)
    g.add_argument("--rule", choices=RULES, default="swap_halves")
    g.add_argument("--alt-rule", choices=RULES, default=None, help="second rule picked per pair with probability 1/2")
    g.add_argument("--rotate-k", type=int, default=1)
    g.add_argument("--ambiguous", default="", help="comma-separated source type indices with two translations")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    g = sub.add_parser("align", help="IBM-1 word alignment and pseudo-translations")
    g.add_argument("--corpus", required=True, help="corpus prefix")
    g.add_argument("--extra", help="additional corpus prefix used only to train the table")
    g.add_argument("--iterations", type=int, default=10)
    g.add_argument("--out", help="output prefix (default <corpus>.ibm1)")
    g.set_defaults(fn=cmd_align)

    g = sub.add_parser("distill", help="sequence-level knowledge distillation")
    g.add_argument("--teacher", required=True, help="at_teacher checkpoint")
    g.add_argument("--corpus", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--beam", type=int, default=4)
    g.set_defaults(fn=cmd_distill)

    g = sub.add_parser("train", help="train a model")
    g.add_argument("--corpus", required=True, help="corpus prefix; ReorderNAT needs .pseudo")
    g.add_argument("--out", required=True, help="checkpoint path")
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--arch", choices=ARCHS)
    g.add_argument("--reorder-kind", choices=("nat", "at"))
    g.add_argument("--mode", choices=("dgd", "ndgd"))
    g.add_argument("--init-from", help="DGD checkpoint to start NDGD fine-tuning from")
    g.add_argument("--resume", help="continue a run from its checkpoint")
    g.add_argument("--steps", type=int, help="train until this total step count")
    g.add_argument("--seed", type=int)
    g.add_argument("--save-every", type=int, default=0)
    g.add_argument("--log", help="training log path (default <out>.log)")
    g.set_defaults(fn=cmd_train)

    g = sub.add_parser("translate", help="decode a source file")
    g.add_argument("--model", required=True)
    g.add_argument("--input", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--strategy", choices=STRATEGIES)
    g.add_argument("--samples", type=int, default=1, help="LPD candidate lengths (odd)")
    g.add_argument("--lpd-guide", choices=("dgd", "ndgd"))
    g.add_argument("--beam", type=int, default=4)
    g.add_argument("--temperature", type=float)
    g.add_argument("--sidecar", help="pass-count TSV (default <out>.passes.tsv)")
    g.set_defaults(fn=cmd_translate)

    g = sub.add_parser("evaluate", help="score hypotheses against references")
    g.add_argument("--hyp", required=True)
    g.add_argument("--ref", required=True)
    g.add_argument("--baseline", help="baseline hypotheses for Dup/Mis relative increments")
    g.add_argument("--passes", help="pass-count sidecar (default <hyp>.passes.tsv if present)")
    g.add_argument("--system", help="system name (default: hypothesis file stem)")
    g.add_argument("--out", help="write key=value records here")
    g.set_defaults(fn=cmd_evaluate)

    g = sub.add_parser("report", help="render metric records as a table")
    g.add_argument("records", nargs="+")
    g.add_argument("--reference", default="at_teacher", help="system whose decoder passes define speedup 1x")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_report)

    g = sub.add_parser("config", help="print every config key with its default")
    g.set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        # --help and --version exit 0; parse errors exit through _Parser.error
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.fn(a)
    except UsageError as e:
        print(f"reordernat {a.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as e:
        if isinstance(e, (ContractError, DataError)):
            print(f"reordernat {a.command}: data error: {e}", file=sys.stderr)
            return EXIT_DATA
        if isinstance(e, ConfigError):
            print(f"reordernat {a.command}: {e}", file=sys.stderr)
            return EXIT_DATA
        print(f"reordernat {a.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, CheckpointError, VocabError, OSError) as e:
        msg = e.args[0] if isinstance(e, VocabError) and e.args else e
        print(f"reordernat {a.command}: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
