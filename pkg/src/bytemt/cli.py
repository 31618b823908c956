"""Command line entry point: ``bytemt <command> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training divergence.
The default seed comes from ``$BYTEMT_SEED`` when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig, parse_config_text, parse_overrides
from .corpus import CorpusError, load_parallel, read_lines
from .decoding import TranslateStats, translate_lines
from .evaluation import BLEU_TOKENIZERS, corpus_bleu, corpus_stats, format_stats
from .experiment import (ExperimentSpec, ablate, check_cells, format_gains, format_results, prepare_data,
                         run_training)
from .model import ConfigError, Model
from .tokenization import BpeModel, Tokenizer, bpe_train, build_char_vocab
from .training import TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("bytemt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get("BYTEMT_SEED", "1")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"BYTEMT_SEED must be an integer, got {raw!r}") from None


def _csv(cast):
    def parse(text: str):
        try:
            return tuple(cast(x) for x in text.split(",") if x.strip())
        except ValueError as err:
            raise argparse.ArgumentTypeError(str(err)) from None
    return parse


def cmd_prepare(args) -> int:
    valid = (args.valid_src, args.valid_tgt) if args.valid_src else None
    test = (args.test_src, args.test_tgt) if args.test_src else None
    if (valid is None) != (test is None):
        raise UsageError("--valid-src/--valid-tgt and --test-src/--test-tgt go together")
    summary = prepare_data(args.src, args.tgt, args.out_dir, seed=args.seed, max_bytes=args.max_bytes,
                           drop_fraction=args.drop_fraction, schemes=args.schemes,
                           bpe_merges=args.bpe_merges, valid=valid, test=test)
    print(f"train={summary.train} valid={summary.valid} test={summary.test} "
          f"removed={summary.removed} schemes={','.join(summary.schemes)}")
    return EXIT_OK


def cmd_bpe_train(args) -> int:
    sentences = []
    for path in args.input:
        sentences += read_lines(path)
    model = bpe_train(sentences, args.merges, marker=args.marker)
    model.save(args.output)
    if args.vocab:
        model.vocab.save(args.vocab)
    print(f"merges={len(model.merges)} vocab={len(model.vocab)}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = parse_overrides(args.set)
    if args.data_dir:
        overrides["data_dir"] = args.data_dir
    file_values = parse_config_text(Path(args.config).read_text(encoding="utf-8"), args.config) if args.config else {}
    run = RunConfig.build({"seed": str(_default_seed())}, file_values, overrides)
    if not run.get("data_dir"):
        raise UsageError("no data_dir in the config and no --data-dir given")
    if run["steps"] == 0:
        log.warning("steps = 0: only the initialisation checkpoint will be written")
    try:
        outcome = run_training(run, args.out_dir)
    except TrainingDiverged as err:
        if err.last_good is not None:
            err.last_good.save(Path(args.out_dir) / "last_good.bin")
        raise
    res = outcome.result
    print(f"init_valid_loss={res.init_valid_loss!r} averaged_valid_loss={outcome.valid_loss!r} "
          f"kept={','.join(str(c.step) for c in res.top)} out={args.out_dir}")
    return EXIT_OK


def cmd_translate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    tok_dir = Path(args.tokenizer_dir) if args.tokenizer_dir else Path(args.checkpoint).parent / "tokenizer"
    tokenizer = Tokenizer.load(tok_dir)
    lines = read_lines(args.input)
    stats = TranslateStats()
    out = translate_lines(Model(ckpt.config, ckpt.params), tokenizer, lines, beam_size=args.beam,
                          alpha=args.alpha, max_len=args.max_len, stats=stats)
    with open(args.output, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(line + "\n" for line in out)
    print(f"lines={stats.lines} malformed_utf8={stats.malformed} truncated={stats.truncated}",
          file=sys.stderr)
    return EXIT_OK


def cmd_score(args) -> int:
    hyps, refs = read_lines(args.hyp), read_lines(args.ref)
    if len(hyps) != len(refs):
        raise CorpusError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    report = corpus_bleu(hyps, refs, args.tokenizer)
    print(report.line())
    if args.json:
        record = {"bleu": report.bleu, "precisions": list(report.precisions),
                  "brevity_penalty": report.brevity_penalty, "hyp_len": report.hyp_len,
                  "ref_len": report.ref_len, "tokenizer": report.tokenizer}
        Path(args.json).write_text(json.dumps(record) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_stats(args) -> int:
    if args.data_dir:
        corpus = load_parallel(Path(args.data_dir) / "train.src", Path(args.data_dir) / "train.tgt")
        tok_root = Path(args.data_dir) / "tokenizers"
        tokenizers = {s: Tokenizer.load(tok_root / s, s) for s in ("bpe", "char", "byte") if (tok_root / s).exists()}
    else:
        if not (args.src and args.tgt):
            raise UsageError("give --data-dir, or --src and --tgt")
        corpus = load_parallel(args.src, args.tgt)
        both = corpus.sources + corpus.targets
        tokenizers = {}
        if args.bpe_model:
            tokenizers["bpe"] = Tokenizer.from_bpe(BpeModel.load(args.bpe_model))
        tokenizers["char"] = Tokenizer("char", build_char_vocab(both))
        tokenizers["byte"] = Tokenizer.byte()
    table = corpus_stats({corpus.src_lang: corpus.sources, corpus.tgt_lang: corpus.targets}, tokenizers)
    print(format_stats(table))
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        spec = ExperimentSpec(
            data_dir=args.data_dir, schemes=args.schemes, dropouts=args.dropout,
            token_dropouts=args.token_dropout, seeds=args.seeds or (args.seed,),
            overrides=tuple(parse_overrides(args.set).items()), direction=args.direction, beam_size=args.beam,
        )
    except ConfigError:
        raise
    except ValueError as err:
        raise UsageError(str(err)) from None
    # fail fast on bad overrides or widths instead of in every cell
    check_cells(spec)
    results, gains = ablate(spec, args.out_dir, workers=args.workers)
    print(format_results(results))
    print()
    print("token-dropout gain (treated - baseline), averaged over dropout values and seeds")
    print(format_gains(gains, spec.direction))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bytemt", description="Byte-level and embeddingless NMT toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="clean, split and build vocabularies")
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--valid-src")
    s.add_argument("--valid-tgt")
    s.add_argument("--test-src")
    s.add_argument("--test-tgt")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-bytes", type=int, default=800)
    s.add_argument("--drop-fraction", type=float, default=0.05)
    s.add_argument("--schemes", type=_csv(str), default=("byte", "char", "bpe"))
    s.add_argument("--bpe-merges", type=int, default=10_000)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("bpe-train", help="learn BPE merges from text files")
    s.add_argument("--input", required=True, action="append")
    s.add_argument("--merges", type=int, default=10_000)
    s.add_argument("--output", required=True)
    s.add_argument("--vocab")
    s.add_argument("--marker", default="@@")
    s.set_defaults(func=cmd_bpe_train)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--data-dir")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="decode a file with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--tokenizer-dir")
    s.add_argument("--beam", type=int, default=5)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--max-len", type=int)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("score", help="corpus BLEU of a hypothesis file")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--tokenizer", choices=sorted(BLEU_TOKENIZERS), default="13a")
    s.add_argument("--json")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("stats", help="average sequence length per tokenization")
    s.add_argument("--data-dir")
    s.add_argument("--src")
    s.add_argument("--tgt")
    s.add_argument("--bpe-model")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("ablate", help="scheme x dropout x token-dropout grid")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--schemes", type=_csv(str), default=("byte", "byte-embeddingless"))
    s.add_argument("--dropout", type=_csv(float), default=(0.2, 0.3))
    s.add_argument("--token-dropout", type=_csv(float), default=(0.0, 0.2))
    s.add_argument("--seeds", type=_csv(int))
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--direction", default="src-tgt")
    s.add_argument("--beam", type=int, default=1)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "seed", 1) is None:
            args.seed = _default_seed()
        return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"bytemt: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as err:
        print(f"bytemt: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CorpusError, CheckpointError, UnicodeError, OSError, ValueError) as err:
        print(f"bytemt: data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
