"""Perplexity and BLEU, including the headline-set objective for tuning.

Perplexity is the exponential of the mean per-token negative log
likelihood, accumulated over documents scored independently. BLEU is
clipped modified n-gram precision up to 4-grams with a brevity penalty;
a headline set is scored by its best candidate, and the mean of set
scores over articles is the objective the decoding-parameter tuner
maximizes.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class PerplexityReport:
    ppl: float
    token_count: int
    mean_nll: float


def perplexity(
    seq_log_probs: Callable[[Sequence[int]], np.ndarray],
    docs: Iterable[Sequence[int]],
) -> PerplexityReport:
    """Perplexity of a scorer over a stream of documents.

    ``seq_log_probs`` maps a document of length L to an ``(L-1, V)``
    matrix whose row t is the log distribution over the token at t+1.
    Documents are scored independently; callers wanting start-of-text
    conditioning prepend their start token before calling. A uniform
    scorer gives exactly V, a perfect one exactly 1.
    """
    nll = 0.0
    count = 0
    empty = True
    for doc in docs:
        empty = False
        ids = [int(t) for t in doc]
        if len(ids) < 2:
            continue
        rows = np.asarray(seq_log_probs(ids), dtype=np.float64)
        if rows.shape[0] != len(ids) - 1:
            raise ValueError(
                f"scorer returned {rows.shape[0]} rows for {len(ids) - 1} targets"
            )
        targets = np.asarray(ids[1:])
        nll -= float(rows[np.arange(len(targets)), targets].sum())
        count += len(targets)
    if empty:
        raise ValueError("perplexity of an empty document stream is undefined")
    if count == 0:
        raise ValueError("no scorable tokens: every document has length < 2")
    mean_nll = nll / count
    return PerplexityReport(ppl=math.exp(mean_nll), token_count=count,
                            mean_nll=mean_nll)


@dataclass(frozen=True)
class BleuScore:
    value: float
    precisions: tuple[float, ...]  # raw, unsmoothed
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _ngrams(seq: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def sentence_bleu(
    hypothesis: Sequence[Hashable],
    reference: Sequence[Hashable],
    max_n: int = 4,
) -> BleuScore:
    """Clipped n-gram precision BLEU with brevity penalty.

    Zero precisions (including orders the hypothesis is too short to
    have) enter the geometric mean with add-one smoothing on numerator
    and denominator; the ``precisions`` field reports the raw values.
    An empty hypothesis scores 0.
    """
    if len(reference) == 0:
        raise ValueError("BLEU needs a non-empty reference")
    h, r = len(hypothesis), len(reference)
    if h == 0:
        return BleuScore(0.0, (0.0,) * max_n, 0.0, 0, r)
    raw: list[float] = []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        hyp_counts = _ngrams(hypothesis, n)
        ref_counts = _ngrams(reference, n)
        matched = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        total = max(h - n + 1, 0)
        raw.append(matched / total if total else 0.0)
        if matched == 0:
            log_sum += math.log((matched + 1) / (total + 1))
        else:
            log_sum += math.log(matched / total)
    bp = 1.0 if h >= r else math.exp(1.0 - r / h)
    value = bp * math.exp(log_sum / max_n)
    return BleuScore(value, tuple(raw), bp, h, r)


def headline_set_bleu(
    candidates: Sequence[Sequence[Hashable]],
    reference: Sequence[Hashable],
    max_n: int = 4,
) -> float:
    """Best sentence BLEU over a candidate set: one good headline suffices."""
    if len(candidates) == 0:
        raise ValueError("headline set must be non-empty")
    return max(sentence_bleu(c, reference, max_n).value for c in candidates)


def mean_headline_set_bleu(
    candidate_sets: Sequence[Sequence[Sequence[Hashable]]],
    references: Sequence[Sequence[Hashable]],
    max_n: int = 4,
) -> float:
    """Mean of per-article set scores; the tuning objective."""
    if len(candidate_sets) != len(references):
        raise ValueError("one candidate set per reference required")
    if len(references) == 0:
        raise ValueError("no articles to score")
    return sum(
        headline_set_bleu(c, r, max_n)
        for c, r in zip(candidate_sets, references)
    ) / len(references)


def words(text: str) -> list[str]:
    """Whitespace word mode for debugging BLEU on plain strings."""
    return text.split()
