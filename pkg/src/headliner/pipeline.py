"""End-to-end synthetic pipeline: corpus to vocabulary to trained model
to decoded headlines, with a deterministic quality report.

The demo generates its own corpus, learns a vocabulary, pre-trains and
fine-tunes a small model, decodes held-out articles with diverse beam
search, and reports validation perplexity, the planted-entity match
rate, first-token diversity, and mean headline-set BLEU. Two scales
ship: ``desk`` (the quality gate) and ``tiny`` (fast, used to check
byte-for-byte reproducibility of the report). The report contains no
timestamps or timings, so identical seeds yield identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from . import corpus, decode, metrics, model, synthetic, tokenizer, trainer

SCALES: dict[str, dict[str, Any]] = {
    "desk": {
        "n_articles": 640,
        "vocab_target": 768,
        "model": {"n_layers": 4, "d_model": 128, "n_heads": 4, "context": 512},
        "pretrain": {
            "peak_lr": 2e-3, "batch_rows": 16, "seq_len": 64,
            "n_warmup": 200, "max_steps": 700, "epochs": 10_000,
            "checkpoint_every": 200,
        },
        "finetune": {
            "peak_lr": 1e-3, "batch_rows": 16, "seq_len": 64,
            "n_warmup": 200, "max_steps": 500, "epochs": 10_000,
            "checkpoint_every": 200,
        },
        "n_eval_articles": 64,
        "decode": {
            "n_groups": 4, "beams_per_group": 2, "diversity_penalty": 0.71,
            "repeat_penalty": 3.0, "length_decay": 0.87, "max_len": 24,
        },
    },
    "tiny": {
        "n_articles": 96,
        "vocab_target": 300,
        "model": {"n_layers": 2, "d_model": 32, "n_heads": 2, "context": 160},
        "pretrain": {
            "peak_lr": 2e-3, "batch_rows": 8, "seq_len": 64,
            "n_warmup": 50, "max_steps": 60, "epochs": 10_000,
            "checkpoint_every": 50,
        },
        "finetune": {
            "peak_lr": 1e-3, "batch_rows": 8, "seq_len": 64,
            "n_warmup": 50, "max_steps": 40, "epochs": 10_000,
            "checkpoint_every": 50,
        },
        "n_eval_articles": 6,
        "decode": {
            "n_groups": 4, "beams_per_group": 2, "diversity_penalty": 0.71,
            "repeat_penalty": 3.0, "length_decay": 0.87, "max_len": 10,
        },
    },
}

SPLIT_RATIOS = (0.8, 0.1, 0.1)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _merge(base: dict, overrides: dict | None) -> dict:
    if not overrides:
        return json.loads(json.dumps(base))
    out = json.loads(json.dumps(base))
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def pipeline_demo(
    seed: int = 0,
    scale: str = "desk",
    out_dir: Path | str | None = None,
    overrides: dict | None = None,
) -> dict:
    """Run the whole synthetic pipeline and return the quality report."""
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
    settings = _merge(SCALES[scale], overrides)
    report: dict[str, Any] = {"scale": scale, "seed": seed}
    stage = "corpus"
    try:
        records = synthetic.generate(settings["n_articles"], seed)
        splits = corpus.split(records, SPLIT_RATIOS, seed)
        fine_train = corpus.filter_for_finetune(
            splits.train, non_news_brands=(synthetic.NON_NEWS_BRAND,)
        )
        fine_valid = corpus.filter_for_finetune(
            splits.valid, non_news_brands=(synthetic.NON_NEWS_BRAND,)
        )
        fine_test = corpus.filter_for_finetune(
            splits.test, non_news_brands=(synthetic.NON_NEWS_BRAND,)
        )
        report["corpus"] = {
            "n_articles": len(records),
            "n_train": len(splits.train),
            "n_valid": len(splits.valid),
            "n_test": len(splits.test),
            "n_finetune_train": len(fine_train),
        }

        stage = "tokenizer"
        texts = [r.body for r in splits.train]
        texts += [r.title for r in fine_train]
        vocab = tokenizer.learn(texts, settings["vocab_target"])
        vocab_sha = tokenizer.vocab_sha256(vocab)
        report["vocab"] = {"size": vocab.size, "sha256": vocab_sha}

        stage = "pretrain"
        mcfg = model.ModelConfig(
            vocab_size=vocab.size, seed=seed, **settings["model"]
        )
        params = model.init(mcfg)
        pre_docs = [tokenizer.encode(r.body, vocab) for r in splits.train]
        val_docs = [tokenizer.encode(r.body, vocab) for r in splits.valid]
        pre_cfg = trainer.TrainConfig(seed=seed, **settings["pretrain"])
        pre = trainer.pretrain(
            params, pre_docs, vocab, pre_cfg, mcfg, valid_docs=val_docs,
        )
        if pre.aborted:
            raise RuntimeError("pre-training diverged")
        val_ppl = next(
            e["val_ppl"] for e in reversed(pre.log) if "val_ppl" in e
        )
        losses = [e["loss"] for e in pre.log if "loss" in e]
        report["pretrain"] = {
            "steps": pre.optimizer.step,
            "first_loss": losses[0],
            "final_loss": losses[-1],
            "val_ppl": val_ppl,
            "uniform_ppl": float(vocab.size),
            "ppl_gate": vocab.size / 10.0,
            "val_ppl_below_gate": bool(val_ppl < vocab.size / 10.0),
            "overflow_count": pre.optimizer.overflow_count,
        }

        stage = "finetune"
        def to_example(record):
            return trainer.format_finetune_example(
                tokenizer.encode(record.body, vocab),
                tokenizer.encode(record.title, vocab),
                vocab,
            )

        train_examples = [to_example(r) for r in fine_train]
        valid_examples = [to_example(r) for r in fine_valid]
        pre_steps = pre.optimizer.step
        ckpt = trainer.Checkpoint(
            mcfg, vocab_sha, pre.params, False, pre.optimizer
        )
        fine_cfg = trainer.TrainConfig(seed=seed, **settings["finetune"])
        fine = trainer.finetune(
            ckpt, train_examples, vocab, fine_cfg,
            valid_examples=valid_examples,
        )
        if fine.aborted:
            raise RuntimeError("fine-tuning diverged")
        fine_losses = [e["loss"] for e in fine.log if "loss" in e]
        val_loss = next(
            e["val_loss"] for e in reversed(fine.log) if "val_loss" in e
        )
        report["finetune"] = {
            "steps": fine.optimizer.step - pre_steps,
            "first_loss": fine_losses[0],
            "final_loss": fine_losses[-1],
            "val_masked_loss": val_loss,
        }

        stage = "generate"
        dcfg = decode.DecodeConfig(seed=seed, **settings["decode"])
        scorer = model.as_scorer(fine.params, mcfg)
        sep = tokenizer.special_id("<special1>", vocab)
        eos = tokenizer.special_id("<eos>", vocab)
        eval_records = fine_test[: settings["n_eval_articles"]]
        if not eval_records:
            raise RuntimeError("no held-out titled articles to evaluate")
        matches = 0
        distinct_sum = 0.0
        candidate_sets = []
        references = []
        samples = []
        for record in eval_records:
            prompt = (tokenizer.encode(record.body, vocab)[: trainer.BODY_CLIP]
                      + [sep])
            groups = decode.diverse_beam_search(scorer, prompt, dcfg, eos)
            leaders = [g[0] for g in groups]
            suffixes = [
                list(b.ids[:-1]) if b.ids and b.ids[-1] == eos else list(b.ids)
                for b in leaders
            ]
            headlines = [tokenizer.decode(s, vocab) for s in suffixes]
            entity = synthetic.planted_entity(record)
            if synthetic.entity_in_headlines(entity, headlines):
                matches += 1
            first_tokens = {b.ids[0] for b in leaders if b.ids}
            distinct_sum += len(first_tokens) / len(leaders)
            candidate_sets.append(suffixes)
            references.append(tokenizer.encode(record.title, vocab))
            if len(samples) < 3:
                samples.append({
                    "article_id": record.id,
                    "entity": entity,
                    "reference": record.title,
                    "headlines": headlines,
                })
        report["generation"] = {
            "n_eval_articles": len(eval_records),
            "entity_match_rate": matches / len(eval_records),
            "mean_first_token_distinct": distinct_sum / len(eval_records),
            "mean_set_bleu": metrics.mean_headline_set_bleu(
                candidate_sets, references
            ),
            "samples": samples,
        }

        stage = "write"
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.json").write_bytes(report_bytes(report))
            (out / "resolved_config.json").write_text(
                json.dumps({"seed": seed, "scale": scale, **settings},
                           sort_keys=True, indent=2) + "\n",
                encoding="utf-8",
            )
            tokenizer.save_vocab(vocab, out / "vocab.txt")
            trainer.save_checkpoint(
                out / "finetuned.bin",
                trainer.Checkpoint(mcfg, vocab_sha, fine.params, True,
                                   fine.optimizer),
            )
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(stage, exc) from exc
    return report


def report_bytes(report: dict) -> bytes:
    """Canonical serialization used for reproducibility comparisons."""
    return (json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False)
            + "\n").encode("utf-8")
