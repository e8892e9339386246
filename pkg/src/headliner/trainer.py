"""Pre-training and fine-tuning loops.

Covers the batching schemes (contiguous packing for pre-training, one
right-padded example per row for fine-tuning), the warmup plus
inverse-square-root learning-rate schedule, AdamW with decoupled weight
decay, the fine-tuning example layout (clipped body, separator token,
headline, end token, loss mask over headline targets only), and a
versioned binary checkpoint format that round-trips byte-identically.

All arithmetic runs at float32 so that a save/load/resume cycle
reproduces an uninterrupted run bit-exactly.
"""

from __future__ import annotations

import copy
import json
import math
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import metrics, model, tokenizer
from .model import ModelConfig, Parameters

CHECKPOINT_MAGIC = b"HLCP0001"
CHECKPOINT_VERSION = 1

# Fine-tuning example budget: 448-token body, separator, headline, end token.
BODY_CLIP = 448
EXAMPLE_BUDGET = 512
TITLE_CLIP = EXAMPLE_BUDGET - BODY_CLIP - 2  # 62


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float
    batch_rows: int
    seq_len: int
    n_warmup: int = 2000
    weight_decay: float = 0.0
    max_steps: int | None = None
    epochs: int = 1
    checkpoint_every: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.n_warmup < 1:
            raise ValueError("n_warmup must be >= 1")
        if self.batch_rows < 1 or self.seq_len < 2:
            raise ValueError("batch_rows must be >= 1 and seq_len >= 2")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


@dataclass
class OptimizerState:
    m: Parameters
    v: Parameters
    step: int = 0
    overflow_count: int = 0
    batches_seen: int = 0


@dataclass(frozen=True)
class FinetuneExample:
    ids: tuple[int, ...]
    loss_mask: tuple[bool, ...]  # one entry per shifted target


@dataclass
class Checkpoint:
    model_config: ModelConfig
    vocab_sha256: str
    params: Parameters
    finetuned: bool = False
    optimizer: OptimizerState | None = None


@dataclass
class TrainResult:
    params: Parameters
    optimizer: OptimizerState
    log: list[dict]
    checkpoint_paths: list[Path]
    aborted: bool = False


def init_optimizer(params: Parameters) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak, then inverse-square-root decay.

    Continuous at the peak: both branches equal ``peak_lr`` at
    ``step == n_warmup``.
    """
    if step < 1:
        raise ValueError("step counts from 1")
    if step <= config.n_warmup:
        return config.peak_lr * step / config.n_warmup
    return config.peak_lr * math.sqrt(config.n_warmup / step)


def _decayed(name: str) -> bool:
    """Weight decay applies to weight matrices and embeddings only."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("g", "b", "bq", "bk", "bv", "bo", "b1", "b2")


def adamw_step(
    params: Parameters,
    grads: Parameters,
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> bool:
    """One AdamW update in place. Returns False if the step was rejected.

    Any non-finite gradient rejects the whole step before touching
    parameters or moments; the overflow counter records the rejection.
    """
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            state.overflow_count += 1
            return False
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        if config.weight_decay > 0 and _decayed(name):
            p -= (lr * config.weight_decay) * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    return True


def wrap_document(ids: Sequence[int], vocab: tokenizer.Vocab) -> list[int]:
    sos = tokenizer.special_id("<sos>", vocab)
    eos = tokenizer.special_id("<eos>", vocab)
    return [sos, *ids, eos]


def pack_pretrain_batches(
    docs: Iterable[Sequence[int]], batch_rows: int, seq_len: int
) -> Iterator[np.ndarray]:
    """Concatenate documents and cut into ``batch_rows x seq_len`` blocks.

    No padding is inserted; only the final partial block is dropped.
    Documents must already carry their own start/end tokens.
    """
    block = batch_rows * seq_len
    buffer: list[int] = []
    for doc in docs:
        buffer.extend(int(t) for t in doc)
        while len(buffer) >= block:
            ids = np.asarray(buffer[:block], dtype=np.int64)
            del buffer[:block]
            yield ids.reshape(batch_rows, seq_len)


def format_finetune_example(
    body_ids: Sequence[int],
    title_ids: Sequence[int],
    vocab: tokenizer.Vocab,
) -> FinetuneExample:
    """Body clipped to 448 ids, separator, headline clipped to 62, end token.

    The loss mask is true exactly where the next token is a headline id
    or the end token, so training sees gradients from the headline only.
    """
    if len(title_ids) == 0:
        raise ValueError("fine-tuning requires a non-empty title")
    body = [int(t) for t in body_ids[:BODY_CLIP]]
    title = [int(t) for t in title_ids[:TITLE_CLIP]]
    sep = tokenizer.special_id("<special1>", vocab)
    eos = tokenizer.special_id("<eos>", vocab)
    ids = body + [sep] + title + [eos]
    nb, nt = len(body), len(title)
    mask = [nb <= t <= nb + nt for t in range(len(ids) - 1)]
    return FinetuneExample(ids=tuple(ids), loss_mask=tuple(mask))


def _epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    order = list(range(n))
    random.Random(f"{seed}:{epoch}").shuffle(order)
    return order


def _snapshot(params: Parameters, state: OptimizerState):
    return ({k: p.copy() for k, p in params.items()}, copy.deepcopy(state))


def _validation_ppl(params, mcfg, valid_docs, vocab) -> float:
    seq_fn = model.sequence_log_prob_fn(params, mcfg)
    wrapped = [wrap_document(d, vocab)[: mcfg.context] for d in valid_docs]
    return metrics.perplexity(seq_fn, wrapped).ppl


def pretrain(
    params: Parameters,
    docs: Sequence[Sequence[int]],
    vocab: tokenizer.Vocab,
    tcfg: TrainConfig,
    mcfg: ModelConfig,
    *,
    optimizer: OptimizerState | None = None,
    valid_docs: Sequence[Sequence[int]] | None = None,
    out_dir: Path | str | None = None,
) -> TrainResult:
    """Next-token training over packed document blocks.

    Deterministic given configs: the per-epoch document order depends
    only on ``tcfg.seed`` and the epoch index, so resuming from a
    checkpoint replays the exact batch sequence of an uninterrupted run.
    A non-finite loss aborts and restores the last checkpointed state.
    """
    if tcfg.seq_len > mcfg.context:
        raise ValueError("seq_len exceeds the model context")
    state = optimizer if optimizer is not None else init_optimizer(params)
    vocab_sha = tokenizer.vocab_sha256(vocab)
    log: list[dict] = []
    paths: list[Path] = []
    last_good = _snapshot(params, state)
    skip = state.batches_seen
    seen = 0
    mask = None
    done = False
    aborted = False

    def checkpoint(tag: int) -> None:
        nonlocal last_good
        last_good = _snapshot(params, state)
        if valid_docs:
            entry = {"step": state.step,
                     "val_ppl": _validation_ppl(params, mcfg, valid_docs, vocab)}
            log.append(entry)
        if out_dir is not None:
            path = Path(out_dir) / f"ckpt_{tag:07d}.bin"
            save_checkpoint(
                path,
                Checkpoint(mcfg, vocab_sha, params, False, state),
            )
            paths.append(path)

    for epoch in range(tcfg.epochs):
        if done:
            break
        order = _epoch_order(len(docs), tcfg.seed, epoch)
        stream = (wrap_document(docs[i], vocab) for i in order)
        for block in pack_pretrain_batches(stream, tcfg.batch_rows, tcfg.seq_len):
            if tcfg.max_steps is not None and state.step >= tcfg.max_steps:
                done = True
                break
            seen += 1
            if seen <= skip:
                continue
            if mask is None:
                mask = np.ones((tcfg.batch_rows, tcfg.seq_len - 1), dtype=bool)
            loss, grads = model.loss_and_grads(params, block, mask, mcfg)
            if not math.isfinite(loss):
                p, s = last_good
                params.clear()
                params.update(p)
                state.m, state.v = s.m, s.v
                state.step, state.overflow_count = s.step, s.overflow_count
                state.batches_seen = s.batches_seen
                aborted = True
                done = True
                break
            lr = lr_at(state.step + 1, tcfg)
            accepted = adamw_step(params, grads, state, lr, tcfg)
            state.batches_seen += 1
            log.append({"step": state.step, "lr": lr, "loss": loss,
                        "accepted": accepted})
            if accepted and state.step % tcfg.checkpoint_every == 0:
                checkpoint(state.step)

    if not aborted:
        checkpoint(state.step)
    return TrainResult(params, state, log, paths, aborted)


def _pad_batch(
    examples: Sequence[FinetuneExample], pad_id: int
) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(e.ids) for e in examples)
    ids = np.full((len(examples), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(examples), width - 1), dtype=bool)
    for r, e in enumerate(examples):
        ids[r, : len(e.ids)] = e.ids
        mask[r, : len(e.loss_mask)] = e.loss_mask
    return ids, mask


def masked_loss(
    params: Parameters,
    examples: Sequence[FinetuneExample],
    vocab: tokenizer.Vocab,
    mcfg: ModelConfig,
) -> float:
    """Mean headline NLL over a set of examples, no parameter update."""
    pad = tokenizer.special_id("<special3>", vocab)
    total, count = 0.0, 0
    for i in range(0, len(examples), 16):
        ids, mask = _pad_batch(examples[i : i + 16], pad)
        loss, _ = model.loss_and_grads(params, ids, mask, mcfg)
        n = int(mask.sum())
        total += loss * n
        count += n
    return total / count


def finetune(
    ckpt: Checkpoint,
    examples: Sequence[FinetuneExample],
    vocab: tokenizer.Vocab,
    tcfg: TrainConfig,
    *,
    valid_examples: Sequence[FinetuneExample] | None = None,
    out_dir: Path | str | None = None,
) -> TrainResult:
    """Resume from a pre-trained checkpoint and train on headline targets.

    The optimizer state stored in the checkpoint is restored, batches
    hold one right-padded example per row (padding is excluded from the
    loss by the mask; batches are not length-sorted), and the resulting
    checkpoints carry the fine-tuned flag.
    """
    vocab_sha = tokenizer.vocab_sha256(vocab)
    if ckpt.vocab_sha256 != vocab_sha:
        raise ValueError(
            "checkpoint was built with a different vocabulary "
            f"({ckpt.vocab_sha256[:12]} != {vocab_sha[:12]})"
        )
    if ckpt.optimizer is None:
        raise ValueError("fine-tuning requires the checkpoint's optimizer state")
    params = ckpt.params
    state = ckpt.optimizer
    mcfg = ckpt.model_config
    if any(len(e.ids) > mcfg.context for e in examples):
        raise ValueError("example exceeds the model context")
    pad = tokenizer.special_id("<special3>", vocab)
    base_step = state.step
    log: list[dict] = []
    paths: list[Path] = []
    last_good = _snapshot(params, state)
    aborted = False
    done = False

    def checkpoint(tag: int) -> None:
        nonlocal last_good
        last_good = _snapshot(params, state)
        if valid_examples:
            log.append({"step": state.step,
                        "val_loss": masked_loss(params, valid_examples, vocab, mcfg)})
        if out_dir is not None:
            path = Path(out_dir) / f"ckpt_{tag:07d}.bin"
            save_checkpoint(path, Checkpoint(mcfg, vocab_sha, params, True, state))
            paths.append(path)

    for epoch in range(tcfg.epochs):
        if done:
            break
        order = _epoch_order(len(examples), tcfg.seed, epoch)
        for i in range(0, len(order), tcfg.batch_rows):
            if (tcfg.max_steps is not None
                    and state.step - base_step >= tcfg.max_steps):
                done = True
                break
            batch = [examples[j] for j in order[i : i + tcfg.batch_rows]]
            ids, mask = _pad_batch(batch, pad)
            loss, grads = model.loss_and_grads(params, ids, mask, mcfg)
            if not math.isfinite(loss):
                p, s = last_good
                params.clear()
                params.update(p)
                state.m, state.v = s.m, s.v
                state.step, state.overflow_count = s.step, s.overflow_count
                state.batches_seen = s.batches_seen
                aborted = True
                done = True
                break
            lr = lr_at(state.step + 1, tcfg)
            accepted = adamw_step(params, grads, state, lr, tcfg)
            state.batches_seen += 1
            log.append({"step": state.step, "lr": lr, "loss": loss,
                        "accepted": accepted})
            if accepted and state.step % tcfg.checkpoint_every == 0:
                checkpoint(state.step)

    if not aborted:
        checkpoint(state.step)
    return TrainResult(params, state, log, paths, aborted)


def _config_dict(mcfg: ModelConfig) -> dict:
    return {
        "n_layers": mcfg.n_layers,
        "d_model": mcfg.d_model,
        "n_heads": mcfg.n_heads,
        "context": mcfg.context,
        "vocab_size": mcfg.vocab_size,
        "seed": mcfg.seed,
    }


def save_checkpoint(path: Path | str, ckpt: Checkpoint) -> Path:
    """Versioned binary: magic, JSON header, float32 arrays in fixed order.

    The header is serialized with sorted keys and the arrays as
    little-endian float32 in :func:`model.param_names` order, so saving
    a loaded checkpoint reproduces the file byte for byte.
    """
    names = model.param_names(ckpt.model_config)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": _config_dict(ckpt.model_config),
        "vocab_sha256": ckpt.vocab_sha256,
        "finetuned": ckpt.finetuned,
        "has_optimizer": ckpt.optimizer is not None,
    }
    if ckpt.optimizer is not None:
        header["optimizer"] = {
            "step": ckpt.optimizer.step,
            "overflow_count": ckpt.optimizer.overflow_count,
            "batches_seen": ckpt.optimizer.batches_seen,
        }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        groups = [ckpt.params]
        if ckpt.optimizer is not None:
            groups += [ckpt.optimizer.m, ckpt.optimizer.v]
        for group in groups:
            for name in names:
                arr = np.ascontiguousarray(group[name], dtype="<f4")
                fh.write(arr.tobytes())
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        mcfg = ModelConfig(**header["config"])
        names = model.param_names(mcfg)

        def read_group() -> Parameters:
            out: Parameters = {}
            for name in names:
                shape = model.param_shape(name, mcfg)
                n = int(np.prod(shape))
                buf = fh.read(4 * n)
                if len(buf) != 4 * n:
                    raise ValueError(f"{path}: truncated at {name}")
                out[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            return out

        params = read_group()
        optimizer = None
        if header["has_optimizer"]:
            m = read_group()
            v = read_group()
            meta = header["optimizer"]
            optimizer = OptimizerState(
                m=m, v=v, step=meta["step"],
                overflow_count=meta["overflow_count"],
                batches_seen=meta["batches_seen"],
            )
    return Checkpoint(
        model_config=mcfg,
        vocab_sha256=header["vocab_sha256"],
        params=params,
        finetuned=header["finetuned"],
        optimizer=optimizer,
    )
