"""Command-line interface: prepare, train, eval, generate.

Exit codes: 0 success, 2 bad input, 3 numeric failure, 4 artifact mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import read_checkpoint, write_checkpoint
from .config import Config, load_config
from .corpus import (FORMATS, dataset_stats, generate_synthetic_corpus, load_reviews_counted, read_split,
                     split, tokenize, write_split)
from .errors import FitError, InputError, TrainingDivergedError
from .evaluation import evaluate, majority_baseline, render_table
from .langmodel import detokenize, generate
from .pipeline import METHODS, TrainedModel, data_vocabulary, lm_checkpoint, lm_from_checkpoint, train_method

log = logging.getLogger("fitcls")
DATA_ENV = "FITCLS_DATA_DIR"


def _data_dir(arg: str | None) -> Path:
    value = arg or os.environ.get(DATA_ENV)
    if not value:
        raise InputError(f"no data directory given (use --data or set {DATA_ENV})")
    return Path(value)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_trace(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# prepare

def cmd_prepare(args) -> int:
    skipped = 0
    if args.format == "synthetic":
        reviews = generate_synthetic_corpus(args.n, args.seed)
        dataset_id = f"synthetic-{args.n}-{args.seed}"
    else:
        if args.input is None:
            raise InputError(f"--input is required for format {args.format!r}")
        if not Path(args.input).is_file():
            raise InputError(f"input file not found: {args.input}")
        reviews, skipped = load_reviews_counted(args.input, args.format, include_summary=not args.no_summary)
        dataset_id = args.format
    ds = split(reviews, args.seed)
    meta = write_split(ds, args.out, {"dataset_id": dataset_id, "format": args.format,
                                      "skipped_records": skipped, "total": len(reviews)})
    stats = {"all": dataset_stats(reviews)}
    for name in ("train", "validation", "test"):
        stats[name] = dataset_stats(ds.part(name))
    _write_json(Path(args.out) / "stats.json", stats)
    c = meta["counts"]
    print(f"{dataset_id}: {len(reviews)} reviews -> train {c['train']}, validation {c['validation']}, "
          f"test {c['test']} ({skipped} records skipped)")
    print(f"avg tokens {stats['all']['avg_tokens']:.2f}, vocab size {stats['all']['vocab_size']}")
    return 0


# ---------------------------------------------------------------------------
# train

def _resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.lm_epochs is not None:
        cfg.lm = dataclasses.replace(cfg.lm, epochs=args.lm_epochs)
    if args.lr is not None:
        cfg.lm = dataclasses.replace(cfg.lm, lr=args.lr)
        cfg.finetune = dataclasses.replace(cfg.finetune, lr=args.lr)
        cfg.classifier = dataclasses.replace(cfg.classifier, lr=args.lr)
    if args.batch is not None:
        cfg.lm = dataclasses.replace(cfg.lm, batch_size=args.batch)
        cfg.finetune = dataclasses.replace(cfg.finetune, batch_size=args.batch)
        cfg.classifier = dataclasses.replace(cfg.classifier, batch_size=args.batch)
    if args.embeddings is not None:
        cfg.embeddings = dataclasses.replace(cfg.embeddings, path=str(args.embeddings))
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    ds, meta = read_split(_data_dir(args.data))
    out = Path(args.out)
    trace_path = Path(args.trace) if args.trace else out.with_name(out.name + ".trace.jsonl")
    pretrained = pretrained_vocab = None
    if args.lm_ckpt:
        if args.method != "ulmfit":
            raise InputError("--lm-ckpt only applies to --method ulmfit")
        pretrained, pretrained_vocab = lm_from_checkpoint(read_checkpoint(args.lm_ckpt))
    try:
        outcome = train_method(args.method, ds, cfg, pretrained=pretrained, pretrained_vocab=pretrained_vocab)
    except TrainingDivergedError as exc:
        _write_trace(trace_path, exc.trace)
        raise TrainingDivergedError(f"{exc} (trace written to {trace_path})", exc.trace) from None
    ckpt = outcome.model.to_checkpoint()
    ckpt.meta.update(dataset_id=meta.get("dataset_id", ""), dataset_checksum=meta.get("checksum", ""))
    write_checkpoint(out, ckpt)
    _write_trace(trace_path, outcome.trace)
    for stage, lm in outcome.language_models.items():
        lm_path = out.with_name(f"{out.stem}.lm-{stage}{out.suffix or '.fitc'}")
        write_checkpoint(lm_path, lm_checkpoint(lm, outcome.model.vocab, cfg.to_dict(), stage))
        print(f"wrote {stage} language model to {lm_path}")
    for stage, ppl in outcome.perplexities.items():
        print(f"{stage} LM validation perplexity {ppl:.3f}")
    print(f"wrote {args.method} checkpoint to {out} (trace: {trace_path})")
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    ds, meta = read_split(_data_dir(args.data))
    reviews = ds.part(args.split)
    dataset_id = meta.get("dataset_id", "")
    if args.baseline:
        report = majority_baseline([r.label for r in ds.train], [r.label for r in reviews], dataset_id=dataset_id,
                                   split=args.split, checksum=meta.get("checksum", ""))
    else:
        if not args.ckpt:
            raise InputError("eval needs --ckpt (or --baseline)")
        ckpt = read_checkpoint(args.ckpt)
        model = TrainedModel.from_checkpoint(ckpt)
        # rebuild the vocabulary this data would produce under the checkpoint's settings
        data_vocab = data_vocabulary(ds, Config.from_dict(ckpt.config))
        report = evaluate(model.predict, reviews, model_vocab_hash=ckpt.vocab_hash, data_vocab_hash=data_vocab.hash,
                          dataset_id=dataset_id, split=args.split, model_id=f"{model.method}:{Path(args.ckpt).name}",
                          config=ckpt.config, config_hash=ckpt.config_hash)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    print(render_table([report]))
    print(f"n={report.n}  micro-F1={report.micro_f1:.4f}")
    return 0


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    lm, vocab = lm_from_checkpoint(read_checkpoint(args.ckpt))
    words = generate(lm, vocab, tokenize(args.seed_text), args.length, args.temperature, args.rng_seed)
    print(detokenize(words))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fitcls", description="Clothing-fit review classification.")
    p.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="load or generate reviews and write a seeded split")
    s.add_argument("--input", help="raw JSON-lines review file")
    s.add_argument("--format", required=True, choices=FORMATS + ("synthetic",))
    s.add_argument("--n", type=int, default=600, help="synthetic corpus size")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--no-summary", action="store_true", help="ignore the review summary/title field")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a classifier on a prepared split")
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--config", help="JSON configuration file")
    s.add_argument("--data", help=f"prepared data directory (default ${DATA_ENV})")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--trace", help="trace path (default: <out>.trace.jsonl)")
    s.add_argument("--lm-epochs", type=int, default=None, help="LM pretraining epochs (config default 20)")
    s.add_argument("--lr", type=float, default=None, help="learning rate for all ULMFit stages (default 0.02)")
    s.add_argument("--batch", type=int, default=None, help="batch size for all ULMFit stages (default 32)")
    s.add_argument("--lm-ckpt", help="start from this language model instead of pretraining")
    s.add_argument("--embeddings", help="text embedding file for embed-mean")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint (or the majority baseline) on a split")
    s.add_argument("--ckpt")
    s.add_argument("--data", help=f"prepared data directory (default ${DATA_ENV})")
    s.add_argument("--split", default="test", choices=("train", "validation", "test"))
    s.add_argument("--out", help="report JSON path")
    s.add_argument("--baseline", action="store_true", help="evaluate the majority-class baseline")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("generate", help="sample text from a language model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seed-text", default="i have been")
    s.add_argument("--length", type=int, default=40)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--rng-seed", type=int, default=7)
    s.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
