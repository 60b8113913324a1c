"""Command-line entry point: preprocess, train, eval, analyze, params, dump-config.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import bpe as bpe_mod
from .config import ConfigError, RunConfig, load_preset, preset_names, tiny
from .data import EVAL_SENTENCE_ALIGNED, TRAIN_CONTIGUOUS, BatchIterator, make_blocks, sentence_blocks
from .evaluate import EvalReport, bin_loss, evaluate, stream_frequencies, word_level
from .optim import LrSchedule, NonFiniteError
from .params import count_parameters
from .trainer import CheckpointError, Trainer, load_model
from .vocab import Vocabulary, build_vocabulary, encode_corpus, read_tokens, split_sentences, write_tokens

OUTPUT_ENV = "ADAPTIVE_LM_OUTPUT_DIR"
SPLITS = ("train", "valid", "test")
log = logging.getLogger("adaptive_lm")


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- shared helpers -------------------------------------------------------------


def _read_lines(path) -> list[str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p.read_text(encoding="utf-8").splitlines()


def _resolve_config(args) -> RunConfig:
    cfg = load_preset(args.preset) if getattr(args, "preset", None) else RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.parse(Path(args.config).read_text(encoding="utf-8"), base=cfg)
    if getattr(args, "tiny", False):
        cfg = tiny(cfg)
    if getattr(args, "set", None):
        cfg.set(args.set)
    return cfg


def _output_dir(args, cfg: RunConfig | None = None) -> Path:
    chosen = getattr(args, "output_dir", None) or (cfg["output_dir"] if cfg else "") or os.environ.get(OUTPUT_ENV) or "runs"
    out = Path(chosen)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(data_dir) -> tuple[Vocabulary, dict[str, list[np.ndarray]], Path]:
    root = Path(data_dir)
    vocab_path = root / "vocab.txt"
    if not vocab_path.is_file():
        raise UsageError(f"{root} has no vocab.txt; run preprocess first")
    vocab = Vocabulary.load(vocab_path)
    splits = {}
    for name in SPLITS:
        path = root / f"{name}.bin"
        if path.is_file():
            splits[name] = split_sentences(read_tokens(path, vocab), vocab.eos_id)
    return vocab, splits, root


def _eval_blocks(cfg: RunConfig, sentences, eos_id: int, block_size=None, context=None):
    if cfg["data.batching"] == "sentences":
        # models trained on isolated sentences are scored the same way
        if context:
            log.warning("context %d ignored: this model scores each sentence on its own", context)
        return sentence_blocks(sentences, block_size or cfg["eval.block_size"], eos_id)
    return make_blocks(
        sentences,
        block_size or cfg["eval.block_size"],
        EVAL_SENTENCE_ALIGNED,
        context_size=cfg["eval.context_size"] if context is None else context,
        eos_id=eos_id,
    )


# -- subcommands ----------------------------------------------------------------


def cmd_preprocess(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    texts = {"train": _read_lines(args.train)}
    for name in ("valid", "test"):
        path = getattr(args, name)
        if path:
            texts[name] = _read_lines(path)
    ends = {}
    if args.bpe_codes is not None:
        try:
            model = bpe_mod.learn_bpe(texts["train"], args.bpe_codes)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        model.save(out / "bpe.codes")
        for name, lines in list(texts.items()):
            seg_lines, flags = [], []
            for line in lines:
                seg = bpe_mod.apply_bpe(model, line)
                seg_lines.append(" ".join(seg.units))
                flags.extend(seg.word_ends + [True])
            texts[name] = seg_lines
            ends[name] = np.asarray(flags, dtype=bool)
        min_count = 0
        print(f"bpe: {len(model.merges)} merges")
    else:
        min_count = args.min_count
    try:
        vocab = build_vocabulary(texts["train"], min_count=min_count)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    vocab.save(out / "vocab.txt")
    print(f"vocab: {len(vocab)} types (min_count {min_count})")
    for name, lines in texts.items():
        sents = encode_corpus(vocab, lines)
        ids = np.concatenate(sents) if sents else np.zeros(0, dtype=np.int64)
        write_tokens(out / f"{name}.bin", ids, vocab)
        if name in ends:
            np.save(out / f"{name}.ends.npy", ends[name])
        words = ids[ids != vocab.eos_id]
        oov = float((words == vocab.unk_id).mean()) if words.size else 0.0
        print(f"{name}: {ids.size} tokens, {np.unique(ids).size} types, oov {100 * oov:.2f}%")
    return 0


def _check_snapshot(args, snapshot: RunConfig) -> None:
    if not getattr(args, "config", None) and not getattr(args, "preset", None):
        return
    wanted = _resolve_config(args)
    diff = [line for line in wanted.diff(snapshot) if line.startswith("model.") and not line.startswith("model.vocab_size")]
    if diff:
        raise UsageError("configuration does not match the checkpoint:\n  " + "\n  ".join(diff))


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    vocab, splits, root = _load_data(args.data)
    if "train" not in splits:
        raise UsageError(f"{root} has no train.bin")
    v = len(vocab)
    if cfg["model.vocab_size"] and cfg["model.vocab_size"] != v:
        log.warning("model.vocab_size %d replaced by the data vocabulary size %d", cfg["model.vocab_size"], v)
    cfg.update({"model.vocab_size": v})
    cfg.validate(v)
    out = _output_dir(args, cfg)
    cfg.save(out / "config.cfg")

    from .model import LanguageModel

    words = vocab.words if cfg["model.input"] == "charcnn" else None
    model = LanguageModel(cfg, v, words)
    if cfg["data.batching"] == "blocks":
        examples = make_blocks(splits["train"], cfg["data.block_size"], TRAIN_CONTIGUOUS, eos_id=vocab.eos_id)
        if not examples:  # corpus shorter than one block
            examples = make_blocks(
                splits["train"], cfg["data.block_size"], TRAIN_CONTIGUOUS, eos_id=vocab.eos_id, keep_partial=True
            )
    else:
        examples = sentence_blocks(splits["train"], cfg["data.block_size"], vocab.eos_id)
    iterator = BatchIterator(examples, cfg["data.token_budget"], seed=cfg["seed"], pad_id=vocab.eos_id)
    total = args.total_steps or cfg["optim.max_steps"] or LrSchedule.from_config(cfg).total_steps

    valid_fn = None
    if "valid" in splits:
        blocks = _eval_blocks(cfg, splits["valid"], vocab.eos_id)
        valid_fn = lambda m: evaluate(m, blocks, cfg["eval.token_budget"]).mean_nll  # noqa: E731

    ckpt_path = out / "checkpoint.bin"
    with open(out / "train.log", "a", encoding="utf-8") as log_file:
        trainer = Trainer(model, iterator, cfg, log_stream=_Tee(log_file, sys.stdout))
        if args.resume and ckpt_path.is_file():
            trainer.load(ckpt_path)
            print(f"resumed at step {trainer.step}")
        try:
            trainer.run(total, checkpoint_path=ckpt_path, best_path=out / "best.bin", valid_fn=valid_fn)
        except NonFiniteError as exc:
            raise RuntimeFailure(f"{exc}; last good checkpoint kept at {ckpt_path}") from exc
    if valid_fn is not None and math.isfinite(trainer.best_valid):
        print(f"best valid loss {trainer.best_valid:.4f} ppl {math.exp(trainer.best_valid):.2f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


class _Tee:
    def __init__(self, *streams):
        self.streams = streams

    def write(self, text):
        for s in self.streams:
            s.write(text)

    def flush(self):
        for s in self.streams:
            s.flush()


def _load_for_eval(args):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"no such checkpoint: {path}")
    try:
        model, ckpt = load_model(path)
    except CheckpointError as exc:
        raise RuntimeFailure(str(exc)) from exc
    _check_snapshot(args, ckpt.config)
    return model, ckpt.config


def _run_eval(args, model, cfg, vocab, splits, root) -> tuple[EvalReport, list[np.ndarray]]:
    if args.split not in splits:
        raise UsageError(f"{root} has no {args.split}.bin")
    if len(vocab) != model.vocab_size:
        raise UsageError(f"data vocabulary has {len(vocab)} types but the model expects {model.vocab_size}")
    block = args.block_size or cfg["eval.block_size"]
    context = cfg["eval.context_size"] if args.context is None else args.context
    if not 0 <= context < block:
        raise UsageError(f"--context {context} must be in [0, block size {block})")
    blocks = _eval_blocks(cfg, splits[args.split], vocab.eos_id, block, context)
    try:
        report = evaluate(model, blocks, args.token_budget or cfg["eval.token_budget"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return report, blocks


def cmd_eval(args) -> int:
    model, cfg = _load_for_eval(args)
    vocab, splits, root = _load_data(args.data)
    report, _ = _run_eval(args, model, cfg, vocab, splits, root)
    summary = {"split": args.split, "tokens": report.n_tokens, "nll": report.total_nll, "perplexity": report.perplexity}
    print(f"{args.split}: {report.n_tokens} tokens scored, loss {report.mean_nll:.4f}, perplexity {report.perplexity:.3f}")
    ends_path = root / f"{args.split}.ends.npy"
    if ends_path.is_file():
        words = word_level(report, np.load(ends_path))
        summary.update({"words": words.n_tokens, "word_perplexity": words.perplexity})
        print(f"{args.split}: {words.n_tokens} words, word-level perplexity {words.perplexity:.3f}")
    out = _output_dir(args)
    report.save_losses(out / f"eval_{args.split}.losses")
    (out / f"eval_{args.split}.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    return 0


_MODES = {"current": "current", "current-word": "current", "previous": "previous", "previous-word": "previous"}


def cmd_analyze(args) -> int:
    vocab, splits, root = _load_data(args.data)
    if args.losses:
        report = EvalReport.load_losses(args.losses)
    else:
        if not args.checkpoint:
            raise UsageError("analyze needs --checkpoint or --losses")
        model, cfg = _load_for_eval(args)
        report, _ = _run_eval(args, model, cfg, vocab, splits, root)
    if args.bin_by == "train":
        freq = vocab.freq
    else:
        freq = stream_frequencies(report.token_ids, len(vocab))
    binned = bin_loss(report, freq, _MODES[args.mode])
    out = Path(args.csv) if args.csv else _output_dir(args) / f"bins_{_MODES[args.mode]}.csv"
    binned.write_csv(out)
    print(f"{'bin':>6} {'types':>8} {'tokens':>10} {'mean loss':>10}")
    for label, types, count, mean in binned.rows():
        print(f"{label:>6} {types:>8} {count:>10} {mean:>10.4f}")
    if binned.excluded:
        print(f"excluded {binned.excluded} token(s) with no predecessor")
    print(f"wrote {out}")
    return 0


def cmd_params(args) -> int:
    if args.list:
        print("\n".join(preset_names()))
        return 0
    cfg = _resolve_config(args)
    if args.vocab_size:
        cfg.update({"model.vocab_size": args.vocab_size})
    label = args.preset or args.config or "defaults"
    b = count_parameters(cfg)
    print(f"{label}: vocabulary {cfg['model.vocab_size']}")
    print(b.format(), end="")
    if args.baseline:
        base = count_parameters(load_preset(args.baseline))
        print(f"baseline {args.baseline}: input+output layers {base.embedding_total:,d}")
        print(f"candidate input+output layers {b.embedding_total:,d}")
        print(f"input+output reduction vs {args.baseline}: {100 * b.reduction_vs(base):.1f}%")
    return 0


def cmd_dump_config(args) -> int:
    sys.stdout.write(_resolve_config(args).dump())
    return 0


# -- parser ---------------------------------------------------------------------


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=preset_names(), help="start from a shipped preset")
    p.add_argument("--config", help="key = value file applied over the preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
    p.add_argument("--tiny", action="store_true", help="shrink the model and schedule to a smoke-test size")


def _eval_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=p.prog.endswith("eval"))
    p.add_argument("--data", required=True, help="preprocessed data directory")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--block-size", type=int)
    p.add_argument("--context", type=int, help="context tokens per evaluation block")
    p.add_argument("--token-budget", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--preset", choices=preset_names(), help="expected configuration, checked against the checkpoint")
    p.add_argument("--config", help="expected configuration file, checked against the checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaptive-lm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="build the vocabulary and binarize corpus splits")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=3, help="keep words seen more than this many times")
    p.add_argument("--bpe-codes", type=int, help="learn this many BPE merges and model sub-word units")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model")
    _config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--resume", action="store_true", help="continue from OUTPUT_DIR/checkpoint.bin")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint")
    _eval_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="loss binned by word frequency")
    _eval_args(p)
    p.add_argument("--mode", default="current-word", choices=sorted(_MODES))
    p.add_argument("--bin-by", default="train", choices=("train", "test"))
    p.add_argument("--losses", help="reuse a per-token loss file written by eval")
    p.add_argument("--csv", help="output CSV path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("params", help="parameter counts without building weights")
    _config_args(p)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--baseline", choices=preset_names(), help="report input+output reduction against this preset")
    p.add_argument("--list", action="store_true", help="list presets")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("dump-config", help="print the effective configuration")
    _config_args(p)
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeFailure, OSError, FloatingPointError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
