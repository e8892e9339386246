"""Command-line entry point wiring the pipeline stages together.

Subcommands: corpus, tokenizer, train, generate, tune, perplexity,
bleu, eval, demo. Configuration layers as defaults < config file <
HEADLINER_* environment variables < flags, and every run with an output
directory writes its resolved configuration there. Exit codes: 0 on
success, 1 on runtime failure (with a diagnostic on stderr), 2 on usage
errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import (
    corpus, decode, evalkit, gp_tune, metrics, model, pipeline, synthetic,
    tokenizer, trainer,
)

ENV_PREFIX = "HEADLINER_"


def _coerce(raw: str, like) -> object:
    if isinstance(like, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def resolve_config(
    defaults: dict, config_path: str | None, flags: dict
) -> dict:
    """defaults < config file < environment < explicit flags."""
    resolved = dict(defaults)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    for key, default in defaults.items():
        raw = os.environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            resolved[key] = _coerce(raw, default)
    for key, value in flags.items():
        if key in defaults and value is not None:
            resolved[key] = value
    return resolved


def _echo_config(out_dir: Path | str, resolved: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def _read_records(path: str) -> list[corpus.ArticleRecord]:
    result = corpus.read_records(path)
    if result.skipped:
        print(f"skipped {result.skipped} malformed lines", file=sys.stderr)
    return list(result.records)


# ---------------------------------------------------------------- corpus

def _cmd_corpus(args) -> int:
    if args.action == "ingest":
        records = _read_records(args.infile)
        corpus.write_records(records, args.out)
        print(f"wrote {len(records)} records to {args.out}")
    elif args.action == "filter":
        records = _read_records(args.infile)
        drop = tuple(b for b in (args.drop_brands or "").split(",") if b)
        kept = corpus.filter_for_finetune(records, non_news_brands=drop)
        corpus.write_records(kept, args.out)
        print(f"kept {len(kept)} of {len(records)} records")
    elif args.action == "split":
        records = _read_records(args.infile)
        ratios = tuple(float(x) for x in args.ratios.split(","))
        if len(ratios) != 3:
            raise ValueError("--ratios needs three comma-separated numbers")
        splits = corpus.split(records, ratios, args.seed)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("train", "valid", "test"):
            part = getattr(splits, name)
            corpus.write_records(part, out / f"{name}.jsonl")
            print(f"{name}: {len(part)} records")
    else:  # synth
        records = synthetic.generate(args.n, args.seed)
        corpus.write_records(records, args.out)
        print(f"wrote {len(records)} synthetic records to {args.out}")
    return 0


# ------------------------------------------------------------- tokenizer

def _cmd_tokenizer(args) -> int:
    if args.action == "learn":
        records = _read_records(args.infile)
        texts = [r.body for r in records]
        texts += [r.title for r in records if r.title is not None]
        vocab = tokenizer.learn(texts, args.target)
        tokenizer.save_vocab(vocab, args.out)
        print(f"vocab size {vocab.size} ({len(vocab.merges)} merges) "
              f"-> {args.out}")
    elif args.action == "encode":
        vocab = tokenizer.load_vocab(args.vocab)
        text = args.text if args.text is not None else sys.stdin.read()
        print(" ".join(str(i) for i in tokenizer.encode(text, vocab)))
    else:  # decode
        vocab = tokenizer.load_vocab(args.vocab)
        raw = args.ids if args.ids is not None else sys.stdin.read()
        ids = [int(x) for x in raw.split()]
        print(tokenizer.decode(ids, vocab))
    return 0


# ----------------------------------------------------------------- train

_MODEL_DEFAULTS = dict(pipeline.SCALES["desk"]["model"])
_PRETRAIN_DEFAULTS = dict(pipeline.SCALES["desk"]["pretrain"])
_FINETUNE_DEFAULTS = dict(pipeline.SCALES["desk"]["finetune"])


def _train_flags(args) -> dict:
    return {
        "peak_lr": args.peak_lr, "batch_rows": args.batch_rows,
        "seq_len": args.seq_len, "n_warmup": args.n_warmup,
        "max_steps": args.max_steps, "epochs": args.epochs,
        "checkpoint_every": args.checkpoint_every,
    }


def _cmd_train(args) -> int:
    vocab = tokenizer.load_vocab(args.vocab)
    records = _read_records(args.corpus)
    valid = _read_records(args.valid) if args.valid else []
    if args.action == "pretrain":
        resolved = resolve_config(
            _PRETRAIN_DEFAULTS, args.config, _train_flags(args)
        )
        mdl = resolve_config(_MODEL_DEFAULTS, None, {
            "n_layers": args.n_layers, "d_model": args.d_model,
            "n_heads": args.n_heads, "context": args.context,
        })
        _echo_config(args.out, {"train": resolved, "model": mdl,
                                "seed": args.seed})
        mcfg = model.ModelConfig(vocab_size=vocab.size, seed=args.seed, **mdl)
        tcfg = trainer.TrainConfig(seed=args.seed, **resolved)
        params = model.init(mcfg)
        docs = [tokenizer.encode(r.body, vocab) for r in records]
        val_docs = [tokenizer.encode(r.body, vocab) for r in valid] or None
        result = trainer.pretrain(
            params, docs, vocab, tcfg, mcfg,
            valid_docs=val_docs, out_dir=args.out,
        )
    else:  # finetune
        ckpt = trainer.load_checkpoint(args.ckpt)
        resolved = resolve_config(
            _FINETUNE_DEFAULTS, args.config, _train_flags(args)
        )
        _echo_config(args.out, {"train": resolved, "seed": args.seed,
                                "ckpt": str(args.ckpt)})
        tcfg = trainer.TrainConfig(seed=args.seed, **resolved)

        def to_example(r):
            return trainer.format_finetune_example(
                tokenizer.encode(r.body, vocab),
                tokenizer.encode(r.title, vocab), vocab,
            )

        titled = [r for r in records if r.title]
        examples = [to_example(r) for r in titled]
        val_examples = [to_example(r) for r in valid if r.title] or None
        result = trainer.finetune(
            ckpt, examples, vocab, tcfg,
            valid_examples=val_examples, out_dir=args.out,
        )
    log_path = Path(args.out) / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    if result.aborted:
        print("training diverged; restored last checkpointed state",
              file=sys.stderr)
        return 1
    print(f"finished at step {result.optimizer.step}; "
          f"checkpoints: {[str(p) for p in result.checkpoint_paths]}")
    return 0


# -------------------------------------------------------------- generate

def _decode_config(args) -> decode.DecodeConfig:
    return decode.DecodeConfig(
        n_groups=args.groups, beams_per_group=args.beams,
        diversity_penalty=args.diversity, repeat_penalty=args.repeat,
        length_decay=args.decay, max_len=args.max_len,
        temperature=args.temperature, top_k=args.top_k, top_p=args.top_p,
        seed=args.seed,
    )


def _cmd_generate(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    vocab = tokenizer.load_vocab(args.vocab)
    if ckpt.vocab_sha256 != tokenizer.vocab_sha256(vocab):
        raise ValueError("vocabulary does not match the checkpoint")
    body = (Path(args.body_file).read_text(encoding="utf-8")
            if args.body_file else sys.stdin.read())
    cfg = _decode_config(args)
    if args.algo == "dbs":
        for line in decode.generate_headlines(ckpt, vocab, body, cfg):
            print(line)
        return 0
    scorer = model.as_scorer(ckpt.params, ckpt.model_config)
    eos = tokenizer.special_id("<eos>", vocab)
    prompt = (tokenizer.encode(body, vocab)[: trainer.BODY_CLIP]
              + [tokenizer.special_id("<special1>", vocab)])
    if args.algo == "greedy":
        ids = decode.greedy(scorer, prompt, cfg.max_len, eos)
    elif args.algo == "sample":
        ids = decode.generate_sampling(
            scorer, prompt, cfg.max_len, eos,
            temperature=cfg.temperature, top_k=cfg.top_k, top_p=cfg.top_p,
            seed=cfg.seed,
        )
    else:  # beam
        beams = decode.beam_search(
            scorer, prompt, cfg.n_groups * cfg.beams_per_group, cfg.max_len,
            eos, length_decay=cfg.length_decay,
            repeat_penalty=cfg.repeat_penalty,
        )
        ids = list(beams[0].ids)
    if ids and ids[-1] == eos:
        ids = ids[:-1]
    print(tokenizer.decode(ids, vocab))
    return 0


# ------------------------------------------------------------------ tune

def _cmd_tune(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    vocab = tokenizer.load_vocab(args.vocab)
    records = [r for r in _read_records(args.articles) if r.title]
    records = records[: args.n_articles]
    if not records:
        raise ValueError("no titled articles to tune against")
    scorer = model.as_scorer(ckpt.params, ckpt.model_config)
    sep = tokenizer.special_id("<special1>", vocab)
    eos = tokenizer.special_id("<eos>", vocab)
    prompts = [
        tokenizer.encode(r.body, vocab)[: trainer.BODY_CLIP] + [sep]
        for r in records
    ]
    references = [tokenizer.encode(r.title, vocab) for r in records]

    def objective(point) -> float:
        diversity, repeat, decay = point
        cfg = decode.DecodeConfig(
            n_groups=args.groups, beams_per_group=args.beams,
            diversity_penalty=diversity, repeat_penalty=repeat,
            length_decay=decay, max_len=args.max_len,
        )
        sets = []
        for prompt in prompts:
            groups = decode.diverse_beam_search(scorer, prompt, cfg, eos)
            sets.append([
                list(g[0].ids[:-1]) if g[0].ids and g[0].ids[-1] == eos
                else list(g[0].ids)
                for g in groups
            ])
        return metrics.mean_headline_set_bleu(sets, references)

    result = gp_tune.tune(
        objective, gp_tune.decoding_bounds(), args.budget,
        n_init=args.n_init, seed=args.seed,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        for entry in result.trace:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print(json.dumps({
        "best_point": result.best_point,
        "best_value": result.best_value,
        "n_failures": result.n_failures,
    }, sort_keys=True))
    return 0


# ------------------------------------------------- perplexity and BLEU

def _cmd_perplexity(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    vocab = tokenizer.load_vocab(args.vocab)
    records = _read_records(args.corpus)
    if not records:
        raise ValueError("empty corpus")
    seq_fn = model.sequence_log_prob_fn(ckpt.params, ckpt.model_config)
    docs = [
        trainer.wrap_document(tokenizer.encode(r.body, vocab), vocab)
        [: ckpt.model_config.context]
        for r in records
    ]
    report = metrics.perplexity(seq_fn, docs)
    print(json.dumps({
        "ppl": report.ppl, "mean_nll": report.mean_nll,
        "token_count": report.token_count,
    }, sort_keys=True))
    return 0


def _cmd_bleu(args) -> int:
    hyp_lines = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    ref_lines = Path(args.ref).read_text(encoding="utf-8").splitlines()
    if args.vocab:
        vocab = tokenizer.load_vocab(args.vocab)
        tok = lambda s: tokenizer.encode(s, vocab)
    else:
        tok = metrics.words
    k = args.set_size
    if k > 1:
        if len(hyp_lines) != k * len(ref_lines):
            raise ValueError(
                f"{len(hyp_lines)} hypotheses != {k} x {len(ref_lines)} references"
            )
        sets = [
            [tok(h) for h in hyp_lines[i * k : (i + 1) * k]]
            for i in range(len(ref_lines))
        ]
        value = metrics.mean_headline_set_bleu(
            sets, [tok(r) for r in ref_lines]
        )
    else:
        if len(hyp_lines) != len(ref_lines):
            raise ValueError("hypothesis/reference line counts differ")
        scores = [
            metrics.sentence_bleu(tok(h), tok(r)).value
            for h, r in zip(hyp_lines, ref_lines)
        ]
        value = sum(scores) / len(scores) if scores else 0.0
    print(f"{value:.6f}")
    return 0


# ------------------------------------------------------------------ eval

def _cmd_eval(args) -> int:
    if args.action == "worksheet":
        records = _read_records(args.articles)
        with open(args.generated, encoding="utf-8") as fh:
            generated = {
                obj["article_id"]: obj["headlines"]
                for obj in (json.loads(line) for line in fh if line.strip())
            }
        titled = [r for r in records if r.title]
        articles = [(r.id, r.body) for r in titled if r.id in generated]
        real = {r.id: r.title for r in titled}
        rows, key = evalkit.build_worksheet(articles, generated, real,
                                            args.seed)
        evalkit.write_worksheet(args.out, rows)
        evalkit.write_key(args.key, key)
        print(f"{len(articles)} articles -> {len(rows)} worksheet rows")
    elif args.action == "ingest":
        key = evalkit.load_key(args.key)
        brands = None
        if args.brands:
            with open(args.brands, encoding="utf-8") as fh:
                brands = json.load(fh)
        filled = {Path(p).stem: p for p in args.filled}
        result = evalkit.ingest_annotations(filled, key, brands)
        evalkit._write_csv(
            args.out,
            ("article_id", "slot", "evaluator", "language", "usable",
             "good", "real", "brand"),
            [{
                "article_id": r.article_id, "slot": r.slot,
                "evaluator": r.evaluator, "language": r.language,
                "usable": r.usable, "good": r.good,
                "real": int(r.real), "brand": r.brand or "",
            } for r in result.records],
        )
        for w in result.warnings:
            print(f"warning: {w}", file=sys.stderr)
        print(f"{result.n_complete} complete records, "
              f"{len(result.missing)} missing, "
              f"{len(result.warnings)} normalizations")
    else:  # report
        import csv as _csv

        records = []
        with open(args.records, encoding="utf-8", newline="") as fh:
            for row in _csv.DictReader(fh):
                records.append(evalkit.AnnotationRecord(
                    article_id=row["article_id"], slot=int(row["slot"]),
                    evaluator=row["evaluator"],
                    language=int(row["language"]), usable=int(row["usable"]),
                    good=int(row["good"]), real=bool(int(row["real"])),
                    brand=row["brand"] or None,
                ))
        tables = evalkit.acceptance_tables(records)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)

        def rate_rows(name, table):
            return [{
                "group": name, "criterion": c, "n": table.n,
                "passed": table.passed[c],
                "conditional": _fmt(table.conditional[c]),
                "total": _fmt(table.total[c]),
            } for c in evalkit.CRITERIA]

        def _fmt(v):
            return "" if v is None else f"{v:.4f}"

        columns = ("group", "criterion", "n", "passed", "conditional", "total")
        evalkit._write_csv(out / "per_evaluator.csv", columns, [
            row for name, table in tables.per_evaluator.items()
            for row in rate_rows(name, table)
        ])
        evalkit._write_csv(out / "majority.csv", columns,
                           rate_rows("generated", tables.majority_generated)
                           + rate_rows("real", tables.majority_real))
        evalkit._write_csv(out / "per_brand.csv", columns, [
            row for name, table in tables.per_brand.items()
            for row in rate_rows(name, table)
        ])
        kappa_rows = []
        for criterion in evalkit.CRITERIA:
            matrix = evalkit.ratings_matrix(records, criterion)
            try:
                value = evalkit.fleiss_kappa(matrix)
                kappa_rows.append({"criterion": criterion,
                                   "kappa": f"{value:.4f}"})
            except ValueError as exc:
                kappa_rows.append({"criterion": criterion,
                                   "kappa": f"undefined ({exc})"})
        evalkit._write_csv(out / "kappa.csv", ("criterion", "kappa"),
                           kappa_rows)
        print(f"wrote evaluation tables to {out}")
    return 0


# ------------------------------------------------------------------ demo

def _cmd_demo(args) -> int:
    report = pipeline.pipeline_demo(
        seed=args.seed, scale=args.scale, out_dir=args.out
    )
    sys.stdout.write(pipeline.report_bytes(report).decode("utf-8"))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="headliner",
        description="Headline-generation pipeline: corpus, tokenizer, "
                    "training, decoding, tuning, and evaluation tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="ingest, filter, split, or synthesize")
    ps = p.add_subparsers(dest="action", required=True)
    q = ps.add_parser("ingest")
    q.add_argument("--in", dest="infile", required=True)
    q.add_argument("--out", required=True)
    q = ps.add_parser("filter")
    q.add_argument("--in", dest="infile", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--drop-brands", default="")
    q = ps.add_parser("split")
    q.add_argument("--in", dest="infile", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--ratios", default="0.8,0.1,0.1")
    q.add_argument("--seed", type=int, default=0)
    q = ps.add_parser("synth")
    q.add_argument("--n", type=int, default=640)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_corpus)

    p = sub.add_parser("tokenizer", help="learn or apply a BPE vocabulary")
    ps = p.add_subparsers(dest="action", required=True)
    q = ps.add_parser("learn")
    q.add_argument("--in", dest="infile", required=True)
    q.add_argument("--target", type=int, required=True)
    q.add_argument("--out", required=True)
    q = ps.add_parser("encode")
    q.add_argument("--vocab", required=True)
    q.add_argument("--text")
    q = ps.add_parser("decode")
    q.add_argument("--vocab", required=True)
    q.add_argument("--ids")
    p.set_defaults(func=_cmd_tokenizer)

    p = sub.add_parser("train", help="pre-train or fine-tune a model")
    ps = p.add_subparsers(dest="action", required=True)
    for name in ("pretrain", "finetune"):
        q = ps.add_parser(name)
        q.add_argument("--corpus", required=True)
        q.add_argument("--valid")
        q.add_argument("--vocab", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--config")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--peak-lr", type=float, dest="peak_lr")
        q.add_argument("--batch-rows", type=int, dest="batch_rows")
        q.add_argument("--seq-len", type=int, dest="seq_len")
        q.add_argument("--n-warmup", type=int, dest="n_warmup")
        q.add_argument("--max-steps", type=int, dest="max_steps")
        q.add_argument("--epochs", type=int)
        q.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
        if name == "pretrain":
            q.add_argument("--n-layers", type=int, dest="n_layers")
            q.add_argument("--d-model", type=int, dest="d_model")
            q.add_argument("--n-heads", type=int, dest="n_heads")
            q.add_argument("--context", type=int)
        else:
            q.add_argument("--ckpt", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="decode headlines for one body")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--body-file", dest="body_file")
    p.add_argument("--algo", choices=("greedy", "sample", "beam", "dbs"),
                   default="dbs")
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--beams", type=int, default=2)
    p.add_argument("--diversity", type=float, default=0.71)
    p.add_argument("--repeat", type=float, default=3.0)
    p.add_argument("--decay", type=float, default=0.87)
    p.add_argument("--max-len", type=int, dest="max_len", default=48)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, dest="top_k", default=0)
    p.add_argument("--top-p", type=float, dest="top_p", default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("tune", help="tune decoding parameters against BLEU")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--articles", required=True)
    p.add_argument("--n-articles", type=int, dest="n_articles", default=16)
    p.add_argument("--budget", type=int, default=30)
    p.add_argument("--n-init", type=int, dest="n_init")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--beams", type=int, default=2)
    p.add_argument("--max-len", type=int, dest="max_len", default=24)
    p.set_defaults(func=_cmd_tune)

    p = sub.add_parser("perplexity", help="perplexity of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=_cmd_perplexity)

    p = sub.add_parser("bleu", help="BLEU between hypothesis and reference files")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--set-size", type=int, dest="set_size", default=1)
    p.add_argument("--vocab")
    p.set_defaults(func=_cmd_bleu)

    p = sub.add_parser("eval", help="human-evaluation worksheets and reports")
    ps = p.add_subparsers(dest="action", required=True)
    q = ps.add_parser("worksheet")
    q.add_argument("--articles", required=True)
    q.add_argument("--generated", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--key", required=True)
    q = ps.add_parser("ingest")
    q.add_argument("--key", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--brands")
    q.add_argument("filled", nargs="+")
    q = ps.add_parser("report")
    q.add_argument("--records", required=True)
    q.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("demo", help="run the synthetic end-to-end pipeline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", choices=sorted(pipeline.SCALES), default="desk")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
