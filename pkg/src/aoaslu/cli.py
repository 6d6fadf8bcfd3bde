"""Command-line entry point.

Exit codes: 0 success, 1 usage or validation error, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import builder as B
from .config import RunConfig, write_manifest
from .corpus import LintReport, Tokenizer, read_corpus, read_predictions, write_corpus, write_predictions
from .decoding import predict_batch
from .errors import (AlignmentError, AoASLUError, BuilderError, CheckpointError, ConfigError, ConversionError,
                     CorpusParseError, EmptyUtteranceError, GrammarParseError, TruncationError, VocabularyError)
from .gradcheck import run_gradcheck
from .grammar import LabelVocabulary
from .metrics import evaluate
from .trainer import TrainConfig, load_checkpoint, prepare, save_checkpoint, train

log = logging.getLogger("aoaslu")

VALIDATION_ERRORS = (ConfigError, CorpusParseError, ConversionError, VocabularyError, BuilderError,
                     AlignmentError, CheckpointError, EmptyUtteranceError, TruncationError, GrammarParseError,
                     FileNotFoundError, IsADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p):
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="master seed (sets run, model, train and builder seeds)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aoaslu", description="Generative multi-intent spoken language understanding.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on a corpus, selecting by dev overall accuracy")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="score a checkpoint or a predictions file against a corpus")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="directory for report.json / report.txt")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("predict", help="write predictions for a corpus")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--unconstrained", action="store_true", help="disable grammar masking")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("build-dataset", help="generate a multi-intent corpus from single-intent sources")
    _add_common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--scorer", choices=["heuristic", "constant", "remote"])
    p.add_argument("--affinity")
    p.add_argument("--endpoint")
    p.add_argument("--workers", type=int)
    p.add_argument("--dedup", action="store_true")

    p = sub.add_parser("analyze", help="intent co-occurrence matrix and uniformity statistics")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--output")

    p = sub.add_parser("gradcheck", help="64-bit finite-difference check of the training loss")
    _add_common(p)
    p.add_argument("--entries", type=int, default=4, help="entries probed per parameter")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--no-aoa", action="store_true")
    p.add_argument("--out")
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.set_pairs(args.set)
    if args.seed is not None:
        cfg.update({"run.seed": args.seed, "model.seed": args.seed, "train.seed": args.seed,
                    "builder.seed": args.seed})
    return cfg


def _read(path) -> list:
    lint = LintReport()
    corpus = read_corpus(path, lint=lint)
    for line, msg in lint.entries:
        print(f"{path}: line {line}: {msg} (record skipped)", file=sys.stderr)
    return corpus


def cmd_train(args, cfg: RunConfig, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_corpus, dev_corpus = _read(args.train), _read(args.dev)
    if not train_corpus or not dev_corpus:
        raise ConfigError("training and dev corpora must be non-empty")
    tokenizer = Tokenizer.build(train_corpus)
    vocab = LabelVocabulary.from_corpus(train_corpus)
    model_cfg = cfg.model_config(vocab_size=len(tokenizer), n_categories=vocab.size)
    train_cfg = TrainConfig(**{**cfg.section("train"), "checkpoint_dir": None})
    with open(out / "train.log", "w", encoding="utf-8") as fh:
        fh.write("epoch\tstep\tloss\tlr\n")
        outcome = train(train_corpus, dev_corpus, model_cfg, train_cfg, tokenizer, vocab,
                        log_line=lambda s: fh.write(s + "\n"))
    save_checkpoint(outcome.best, out / "model.gslu")
    with open(out / "curves.tsv", "w", encoding="utf-8") as fh:
        fh.write("lr\tepoch\tloss\tdev_overall\tdev_intent\tdev_slot_f1\n")
        for r in outcome.curves:
            vals = [r.dev_overall, r.dev_intent, r.dev_slot_f1]
            fh.write(f"{r.learning_rate:g}\t{r.epoch}\t{r.loss:.6f}\t" +
                     "\t".join("" if v is None else f"{v:.6f}" for v in vals) + "\n")
    write_manifest(out / "manifest.txt", "train", argv, cfg, {"train": args.train, "dev": args.dev},
                   {"best.epoch": outcome.best.epoch, "best.learning_rate": outcome.best.learning_rate,
                    "aborted_learning_rates": ",".join(f"{x:g}" for x in outcome.aborted)})
    print(f"best lr={outcome.best.learning_rate:g} epoch={outcome.best.epoch} "
          f"dev_overall={outcome.best.metrics.get('overall_accuracy', 0.0):.4f}")
    return 0


def _predict(ckpt, corpus, workers, constrained=True, max_steps=None):
    prepare(corpus, ckpt.tokenizer)
    return predict_batch(corpus, ckpt.model_params(), ckpt.model_config, ckpt.labels,
                         max_steps or ckpt.max_steps, constrained, workers)


def cmd_eval(args, cfg, argv) -> int:
    corpus = _read(args.corpus)
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        pred = [p.scored() for _, p in _predict(ckpt, corpus, args.workers)]
    else:
        pred = read_predictions(args.predictions)
    report = evaluate([u.target() for u in corpus], pred)
    print(report.to_text(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
        write_manifest(out / "manifest.txt", "eval", argv, cfg,
                       {"corpus": args.corpus, "checkpoint": args.checkpoint, "predictions": args.predictions})
    return 0


def cmd_predict(args, cfg, argv) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    corpus = _read(args.corpus)
    results = _predict(ckpt, corpus, args.workers, not args.unconstrained, args.max_steps)
    write_predictions([p.scored() for _, p in results], args.output)
    bad = sum(p.error is not None for _, p in results)
    if bad:
        print(f"{bad} predictions were truncated or malformed", file=sys.stderr)
    write_manifest(args.output + ".manifest", "predict", argv, cfg,
                   {"checkpoint": args.checkpoint, "corpus": args.corpus})
    return 0


def cmd_build(args, cfg, argv) -> int:
    overrides = {"builder.tau": args.tau, "builder.scorer": args.scorer, "builder.affinity_path": args.affinity,
                 "builder.endpoint": args.endpoint, "builder.workers": args.workers}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.dedup:
        cfg.update({"builder.dedup": True})
    bcfg = cfg.builder_config()
    source = _read(args.source)
    result = B.build(source, bcfg, B.make_scorer(bcfg))
    write_corpus(result.corpus, args.output)
    result.write_audit(args.output + ".audit.tsv")
    (Path(args.output + ".cooccurrence.tsv")).write_text(B.cooccurrence_matrix(result.corpus).to_text(),
                                                         encoding="utf-8")
    inputs = {"source": args.source, "affinity": bcfg.affinity_path or None}
    write_manifest(args.output + ".manifest", "build-dataset", argv, cfg, inputs,
                   {"shortfalls": result.shortfalls, "n_output": len(result.corpus)})
    counts = {}
    for u in result.corpus:
        counts[len(u.intents)] = counts.get(len(u.intents), 0) + 1
    print("intent_count_histogram " + " ".join(f"{k}:{v}" for k, v in sorted(counts.items())))
    return 0


def cmd_analyze(args, cfg, argv) -> int:
    report = B.cooccurrence_matrix(_read(args.corpus))
    text = report.to_text()
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
        write_manifest(args.output + ".manifest", "analyze", argv, cfg, {"corpus": args.corpus})
    print(text, end="")
    return 0


def cmd_gradcheck(args, cfg, argv) -> int:
    report = run_gradcheck(seed=cfg["run.seed"], entries_per_param=args.entries, tolerance=args.tolerance,
                           aoa_enabled=not args.no_aoa)
    if args.verbose:
        print(report.to_text(), end="")
    else:
        print(f"max_relative_error={report.max_rel_error:.3e} tolerance={args.tolerance:g} "
              f"elapsed={report.elapsed:.1f}s {'PASS' if report.passed else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(report.to_text(), encoding="utf-8")
        write_manifest(out / "manifest.txt", "gradcheck", argv, cfg, {})
    return 0 if report.passed else 2


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "build-dataset": cmd_build,
            "analyze": cmd_analyze, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg, argv)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (AoASLUError, OSError, FloatingPointError, MemoryError) as exc:
        print(f"fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
