"""Generation over any next-token scorer.

A scorer maps a token prefix to one row of log probabilities for the
next token. On top of that protocol this module provides greedy
decoding, temperature/top-k/top-p sampling, beam search, and a grouped
diverse beam search in which groups advance sequentially per step and
later groups pay a penalty for re-selecting tokens that earlier groups
chose at the same step.

Scoring recursion for one extension:

    new = length_decay * prev + logp - diversity_penalty * div_count
                                     - repeat_penalty * rep_count

where div_count is the token's selection count by earlier groups at
this step and rep_count is its occurrence count in the beam's own
prompt plus suffix. length_decay < 1 discounts the running score and
therefore favors longer outputs. All penalties act in log space.
Ties are broken by higher score, then lower token id, then lower beam
index, making every algorithm deterministic.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tokenizer, trainer
from .trainer import Checkpoint

Scorer = Callable[[Sequence[int]], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    n_groups: int = 4
    beams_per_group: int = 2
    diversity_penalty: float = 0.71
    repeat_penalty: float = 3.0
    length_decay: float = 0.87
    max_len: int = 48
    temperature: float = 1.0
    top_k: int = 0
    top_p: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_groups < 1 or self.beams_per_group < 1:
            raise ValueError("n_groups and beams_per_group must be >= 1")
        if self.diversity_penalty < 0 or self.repeat_penalty < 0:
            raise ValueError("penalties must be >= 0")
        if not 0 < self.length_decay <= 1:
            raise ValueError("length_decay must lie in (0, 1]")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0 (0 disables it)")


@dataclass(frozen=True)
class Beam:
    ids: tuple[int, ...]  # decoded suffix, prompt excluded
    score: float
    finished: bool


def score_update(
    prev_score: float,
    token_logprob: float,
    div_count: int,
    rep_count: int,
    diversity_penalty: float,
    repeat_penalty: float,
    length_decay: float,
) -> float:
    return (length_decay * prev_score + token_logprob
            - diversity_penalty * div_count - repeat_penalty * rep_count)


def greedy(
    scorer: Scorer, prompt: Sequence[int], max_len: int, eos_id: int
) -> list[int]:
    """Highest-probability token each step; lowest id wins ties."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    prefix = list(prompt)
    out: list[int] = []
    for _ in range(max_len):
        token = int(np.argmax(scorer(prefix)))
        out.append(token)
        prefix.append(token)
        if token == eos_id:
            break
    return out


def truncate_distribution(
    log_row: np.ndarray, temperature: float, top_k: int, top_p: float
) -> tuple[np.ndarray, np.ndarray]:
    """Temperature, then top-k, then nucleus truncation, then renormalize.

    Returns kept token ids (most probable first) and their renormalized
    probabilities. The nucleus keeps the smallest prefix of the kept
    set whose cumulative probability reaches top_p; top_p = 1 keeps
    everything.
    """
    logits = np.asarray(log_row, dtype=np.float64) / temperature
    order = np.lexsort((np.arange(logits.shape[0]), -logits))
    if top_k > 0:
        order = order[:top_k]
    kept = logits[order]
    kept = np.exp(kept - kept[0])
    probs = kept / kept.sum()
    if top_p < 1.0:
        cum = np.cumsum(probs)
        cut = int(np.searchsorted(cum, top_p, side="left"))
        cut = min(cut, len(probs) - 1)
        order = order[: cut + 1]
        probs = probs[: cut + 1] / probs[: cut + 1].sum()
    return order, probs


def generate_sampling(
    scorer: Scorer,
    prompt: Sequence[int],
    max_len: int,
    eos_id: int,
    *,
    temperature: float = 1.0,
    top_k: int = 0,
    top_p: float = 1.0,
    seed: int = 0,
) -> list[int]:
    """Ancestral sampling from the truncated distribution, seeded."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must lie in (0, 1]")
    if top_k < 0:
        raise ValueError("top_k must be >= 0")
    rng = np.random.default_rng(seed)
    prefix = list(prompt)
    out: list[int] = []
    for _ in range(max_len):
        ids, probs = truncate_distribution(
            scorer(prefix), temperature, top_k, top_p
        )
        r = rng.random()
        idx = min(int(np.searchsorted(np.cumsum(probs), r, side="right")),
                  len(ids) - 1)
        token = int(ids[idx])
        out.append(token)
        prefix.append(token)
        if token == eos_id:
            break
    return out


class _Group:
    __slots__ = ("active", "finished", "width")

    def __init__(self, width: int):
        self.active: list[Beam] = [Beam((), 0.0, False)]
        self.finished: list[Beam] = []
        self.width = width


def _advance_group(
    scorer: Scorer,
    prompt: list[int],
    group: _Group,
    ledger: Counter,
    diversity_penalty: float,
    repeat_penalty: float,
    length_decay: float,
    eos_id: int,
) -> list[int]:
    """One step of breadth-limited search for one group.

    Scores every (beam, token) extension, keeps the best
    ``width - finished`` of them, retires those that emitted the end
    token, and returns the selected tokens for the shared step ledger.
    """
    n_select = group.width - len(group.finished)
    if not group.active or n_select <= 0:
        group.active = []
        return []
    rows = [np.asarray(scorer(prompt + list(b.ids)), dtype=np.float64)
            for b in group.active]
    vocab_size = rows[0].shape[0]
    div = np.zeros(vocab_size)
    for token, count in ledger.items():
        if 0 <= token < vocab_size:
            div[token] = count
    scores = np.empty((len(group.active), vocab_size))
    for i, (beam, row) in enumerate(zip(group.active, rows)):
        rep = np.bincount(
            np.asarray(prompt + list(beam.ids), dtype=np.int64),
            minlength=vocab_size,
        )[:vocab_size]
        scores[i] = (length_decay * beam.score + row
                     - diversity_penalty * div - repeat_penalty * rep)
    flat = scores.ravel()
    beam_idx = np.repeat(np.arange(len(group.active)), vocab_size)
    token_idx = np.tile(np.arange(vocab_size), len(group.active))
    ranked = np.lexsort((beam_idx, token_idx, -flat))
    picked = ranked[: min(n_select, flat.shape[0])]

    new_active: list[Beam] = []
    selected: list[int] = []
    for j in picked:
        b = group.active[int(beam_idx[j])]
        token = int(token_idx[j])
        beam = Beam(b.ids + (token,), float(flat[j]), token == eos_id)
        selected.append(token)
        if beam.finished:
            group.finished.append(beam)
        else:
            new_active.append(beam)
    group.active = new_active
    return selected


def _beam_sort_key(beam: Beam):
    return (-beam.score, beam.ids)


def _run_groups(
    scorer: Scorer,
    prompt: Sequence[int],
    n_groups: int,
    beams_per_group: int,
    diversity_penalty: float,
    repeat_penalty: float,
    length_decay: float,
    max_len: int,
    eos_id: int,
) -> list[list[Beam]]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    prompt = list(prompt)
    groups = [_Group(beams_per_group) for _ in range(n_groups)]
    for _ in range(max_len):
        ledger: Counter = Counter()
        if all(not g.active for g in groups):
            break
        for g in groups:
            selected = _advance_group(
                scorer, prompt, g, ledger,
                diversity_penalty, repeat_penalty, length_decay, eos_id,
            )
            ledger.update(selected)
    return [sorted(g.finished + g.active, key=_beam_sort_key) for g in groups]


def beam_search(
    scorer: Scorer,
    prompt: Sequence[int],
    total_beams: int,
    max_len: int,
    eos_id: int,
    *,
    length_decay: float = 1.0,
    repeat_penalty: float = 0.0,
) -> list[Beam]:
    """Breadth-``total_beams`` search; finished beams retire and are kept.

    Returned best first. With one beam this reduces to greedy decoding.
    """
    if total_beams < 1:
        raise ValueError("total_beams must be >= 1")
    return _run_groups(
        scorer, prompt, 1, total_beams, 0.0, repeat_penalty,
        length_decay, max_len, eos_id,
    )[0]


def diverse_beam_search(
    scorer: Scorer,
    prompt: Sequence[int],
    config: DecodeConfig,
    eos_id: int,
) -> list[list[Beam]]:
    """Grouped beam search with a per-step cross-group diversity penalty.

    Groups advance in index order within each step; a group's candidate
    scores subtract ``diversity_penalty`` times the number of times
    earlier groups selected the same token at this step, so the first
    group runs plain beam search. Returns one best-first beam list per
    group.
    """
    return _run_groups(
        scorer, prompt,
        config.n_groups, config.beams_per_group,
        config.diversity_penalty, config.repeat_penalty,
        config.length_decay, config.max_len, eos_id,
    )


def generate_headlines(
    ckpt: Checkpoint,
    vocab: tokenizer.Vocab,
    body: str,
    config: DecodeConfig | None = None,
) -> list[str]:
    """Headline per group for one article body, best beams first.

    Encodes the body, clips it to the fine-tuning budget, appends the
    separator token, runs diverse beam search, and decodes each group's
    best beam with the terminal end token stripped.
    """
    from . import model  # local import keeps module load light

    if config is None:
        config = DecodeConfig()
    if not ckpt.finetuned:
        warnings.warn(
            "checkpoint is not fine-tuned for headline generation",
            stacklevel=2,
        )
    body_ids = tokenizer.encode(body, vocab)[: trainer.BODY_CLIP]
    prompt = body_ids + [tokenizer.special_id("<special1>", vocab)]
    scorer = model.as_scorer(ckpt.params, ckpt.model_config)
    eos = tokenizer.special_id("<eos>", vocab)
    groups = diverse_beam_search(scorer, prompt, config, eos)
    out = []
    for beams in groups:
        ids = list(beams[0].ids)
        if ids and ids[-1] == eos:
            ids = ids[:-1]
        out.append(tokenizer.decode(ids, vocab))
    return out
