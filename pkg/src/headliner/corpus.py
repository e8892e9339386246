"""Article record ingestion, filtering, and deterministic corpus splitting.

Records arrive as line-delimited JSON with a required ``body`` field and
optional ``title``, ``brand``, and ``id`` fields. Everything downstream
(tokenizer learning, pre-training, fine-tuning, evaluation) consumes the
immutable :class:`ArticleRecord` sequences produced here.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArticleRecord:
    """One article. ``title`` is None for body-only records."""

    id: str
    body: str
    title: str | None = None
    brand: str | None = None


@dataclass(frozen=True)
class IngestResult:
    records: tuple[ArticleRecord, ...]
    skipped: int


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[ArticleRecord, ...]
    valid: tuple[ArticleRecord, ...]
    test: tuple[ArticleRecord, ...]
    seed: int


def _parse_line(raw: str, lineno: int) -> ArticleRecord | None:
    """Parse one record line. Returns None (and logs) when malformed."""
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        logger.warning("line %d: invalid JSON (%s), skipped", lineno, exc.msg)
        return None
    if not isinstance(obj, dict):
        logger.warning("line %d: record is not an object, skipped", lineno)
        return None

    body = obj.get("body")
    if not isinstance(body, str) or not body.strip():
        logger.warning("line %d: missing or empty body, skipped", lineno)
        return None

    title = obj.get("title")
    if title is not None:
        if not isinstance(title, str):
            logger.warning("line %d: non-string title, skipped", lineno)
            return None
        if "\n" in title or "\r" in title:
            # Headlines are single-line by construction downstream.
            logger.warning("line %d: title contains a newline, skipped", lineno)
            return None
        title = title.strip() or None

    brand = obj.get("brand")
    if brand is not None and not isinstance(brand, str):
        logger.warning("line %d: non-string brand, skipped", lineno)
        return None

    rid = obj.get("id")
    rid = str(rid) if rid is not None else f"line{lineno}"
    return ArticleRecord(id=rid, body=body.strip(), title=title, brand=brand)


def ingest_records(source: Iterable[str | bytes] | IO) -> IngestResult:
    """Read line-delimited records from ``source``, skipping malformed lines.

    ``source`` may be an open file (text or binary) or any iterable of
    lines. Malformed lines are counted and logged, never fatal; an
    unreadable stream raises whatever the underlying iterator raises.
    Input order is preserved and no field content is invented, only
    surrounding whitespace is stripped.
    """
    records: list[ArticleRecord] = []
    skipped = 0
    for lineno, raw in enumerate(source, start=1):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError:
                logger.warning("line %d: undecodable bytes, skipped", lineno)
                skipped += 1
                continue
        if not raw.strip():
            continue
        record = _parse_line(raw, lineno)
        if record is None:
            skipped += 1
        else:
            records.append(record)
    return IngestResult(records=tuple(records), skipped=skipped)


def concat_ingress(body: str, ingress: str) -> str:
    """Prepend the lead paragraph to the body with a blank line between."""
    return ingress + "\n\n" + body


def filter_for_finetune(
    records: Sequence[ArticleRecord],
    non_news_brands: Iterable[str] = (),
) -> tuple[ArticleRecord, ...]:
    """Keep records that have a headline and are not tagged as non-news.

    ``non_news_brands`` lists brand tags to drop (there is no intrinsic
    "news" predicate on a record, so the tag list is configuration).
    Idempotent.
    """
    dropped = frozenset(non_news_brands)
    return tuple(
        r for r in records if r.title and (r.brand is None or r.brand not in dropped)
    )


def split(
    records: Sequence[ArticleRecord],
    ratios: tuple[float, float, float],
    seed: int,
) -> CorpusSplit:
    """Randomly partition records into train/valid/test by ``ratios``.

    Deterministic given ``seed``. Boundaries are the rounded cumulative
    fractions, so each part size is within one of its exact share and the
    parts always cover the input exactly.
    """
    if len(ratios) != 3:
        raise ValueError("expected exactly three ratios")
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")

    shuffled = list(records)
    random.Random(seed).shuffle(shuffled)

    n = len(shuffled)
    cut1 = math.floor(n * ratios[0] + 0.5)
    cut2 = math.floor(n * (ratios[0] + ratios[1]) + 0.5)
    cut2 = max(cut1, min(cut2, n))
    return CorpusSplit(
        train=tuple(shuffled[:cut1]),
        valid=tuple(shuffled[cut1:cut2]),
        test=tuple(shuffled[cut2:]),
        seed=seed,
    )


def record_to_json(record: ArticleRecord) -> str:
    """Serialize one record to a JSON line (keys with None values omitted)."""
    obj: dict[str, str] = {"id": record.id, "body": record.body}
    if record.title is not None:
        obj["title"] = record.title
    if record.brand is not None:
        obj["brand"] = record.brand
    return json.dumps(obj, ensure_ascii=False)


def write_records(records: Iterable[ArticleRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record_to_json(record) + "\n")


def read_records(path) -> IngestResult:
    with open(path, "r", encoding="utf-8") as fh:
        return ingest_records(fh)
