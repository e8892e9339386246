"""Blind human-evaluation harness for generated headlines.

A worksheet shows, per article, five headlines: the four generated ones
and the real one in a seeded random slot. Which slot holds the real
headline lives in a separate key file so the worksheet itself carries
no unblinding information. Evaluators fill three nested binary criteria
per headline (language, usable, good: passing one implies passing the
previous). Ingestion normalizes nesting violations by conjunction and
reports them, majority voting requires two of exactly three evaluators,
and the report tables expose conditional rates (among headlines passing
the previous criterion) alongside total rates, split by real/generated,
by evaluator, and by brand. Fleiss' kappa measures chance-corrected
inter-annotator agreement.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

WORKSHEET_COLUMNS = (
    "article_id", "body", "slot", "headline",
    "language", "usable", "good", "feedback",
)
KEY_COLUMNS = ("article_id", "real_slot", "seed")
CRITERIA = ("language", "usable", "good")
N_SLOTS = 5
HEADLINES_PER_ARTICLE = 4


@dataclass(frozen=True)
class AnnotationRecord:
    article_id: str
    slot: int
    evaluator: str
    language: int
    usable: int
    good: int
    real: bool
    brand: str | None = None


@dataclass
class IngestResult:
    records: list[AnnotationRecord]
    warnings: list[str]
    missing: list[tuple[str, int, str]]  # article, slot, evaluator

    @property
    def n_complete(self) -> int:
        return len(self.records)


def build_worksheet(
    articles: Sequence[tuple[str, str]],
    generated: Mapping[str, Sequence[str]],
    real_headlines: Mapping[str, str],
    seed: int,
) -> tuple[list[dict], list[dict]]:
    """Worksheet and key rows for a blind evaluation round.

    Each article contributes five rows with blank criteria cells; the
    real headline's slot is drawn uniformly per article from the seed.
    """
    rows: list[dict] = []
    key: list[dict] = []
    for article_id, body in articles:
        if article_id not in generated or article_id not in real_headlines:
            raise ValueError(f"article {article_id}: missing headlines")
        cands = list(generated[article_id])
        if len(cands) != HEADLINES_PER_ARTICLE:
            raise ValueError(
                f"article {article_id}: expected {HEADLINES_PER_ARTICLE} "
                f"generated headlines, got {len(cands)}"
            )
        rng = random.Random(f"{seed}:{article_id}")
        real_slot = rng.randint(1, N_SLOTS)
        lineup = list(cands)
        lineup.insert(real_slot - 1, real_headlines[article_id])
        for slot, headline in enumerate(lineup, start=1):
            rows.append({
                "article_id": article_id, "body": body, "slot": slot,
                "headline": headline,
                "language": "", "usable": "", "good": "", "feedback": "",
            })
        key.append({"article_id": article_id, "real_slot": real_slot,
                    "seed": seed})
    return rows, key


def write_worksheet(path: Path | str, rows: Iterable[dict]) -> None:
    _write_csv(path, WORKSHEET_COLUMNS, rows)


def write_key(path: Path | str, rows: Iterable[dict]) -> None:
    _write_csv(path, KEY_COLUMNS, rows)


def _write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})


def load_key(path: Path | str) -> dict[str, int]:
    out: dict[str, int] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["article_id"]] = int(row["real_slot"])
    return out


def _parse_binary(cell: str, where: str) -> int | None:
    cell = cell.strip()
    if cell == "":
        return None
    if cell in ("0", "1"):
        return int(cell)
    raise ValueError(f"{where}: expected 0, 1, or blank, got {cell!r}")


def ingest_annotations(
    filled: Mapping[str, Path | str],
    key: Mapping[str, int],
    brands: Mapping[str, str] | None = None,
) -> IngestResult:
    """Read filled worksheets, one file per evaluator.

    Rows with any blank criterion cell are recorded as missing. Nesting
    violations (a criterion passed while the previous failed) are
    normalized by conjunction and reported as warnings. Unknown article
    ids and non-binary cells are errors.
    """
    records: list[AnnotationRecord] = []
    warnings: list[str] = []
    missing: list[tuple[str, int, str]] = []
    for evaluator, path in sorted(filled.items()):
        with open(path, encoding="utf-8", newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                article_id = row["article_id"]
                if article_id not in key:
                    raise ValueError(
                        f"{path}:{lineno}: unknown article id {article_id!r}"
                    )
                slot = int(row["slot"])
                values = [
                    _parse_binary(row.get(c, ""), f"{path}:{lineno}:{c}")
                    for c in CRITERIA
                ]
                if any(v is None for v in values):
                    missing.append((article_id, slot, evaluator))
                    continue
                language, usable, good = values
                if usable > language:
                    usable = language
                    warnings.append(
                        f"{path}:{lineno}: usable without language, normalized"
                    )
                if good > usable:
                    good = usable
                    warnings.append(
                        f"{path}:{lineno}: good without usable, normalized"
                    )
                records.append(AnnotationRecord(
                    article_id=article_id, slot=slot, evaluator=evaluator,
                    language=language, usable=usable, good=good,
                    real=(slot == key[article_id]),
                    brand=(brands or {}).get(article_id),
                ))
    return IngestResult(records, warnings, missing)


@dataclass(frozen=True)
class HeadlineVote:
    article_id: str
    slot: int
    real: bool
    brand: str | None
    language: bool
    usable: bool
    good: bool


def majority_vote(
    records: Sequence[AnnotationRecord],
) -> tuple[list[HeadlineVote], list[tuple[str, int]]]:
    """Two-of-three vote per headline and criterion.

    Headlines without exactly three evaluators are excluded as
    incomplete and returned separately.
    """
    groups: dict[tuple[str, int], list[AnnotationRecord]] = {}
    for r in records:
        groups.setdefault((r.article_id, r.slot), []).append(r)
    votes: list[HeadlineVote] = []
    excluded: list[tuple[str, int]] = []
    for (article_id, slot), rs in sorted(groups.items()):
        if len(rs) != 3 or len({r.evaluator for r in rs}) != 3:
            excluded.append((article_id, slot))
            continue
        votes.append(HeadlineVote(
            article_id=article_id, slot=slot, real=rs[0].real,
            brand=rs[0].brand,
            language=sum(r.language for r in rs) >= 2,
            usable=sum(r.usable for r in rs) >= 2,
            good=sum(r.good for r in rs) >= 2,
        ))
    return votes, excluded


@dataclass(frozen=True)
class RateTable:
    n: int
    passed: dict[str, int]
    conditional: dict[str, float | None]
    total: dict[str, float | None]


def _rate_table(items: Sequence[Mapping[str, int] | HeadlineVote]) -> RateTable:
    def value(item, criterion):
        v = getattr(item, criterion) if hasattr(item, criterion) \
            else item[criterion]
        return int(bool(v))

    n = len(items)
    passed = {c: sum(value(i, c) for i in items) for c in CRITERIA}
    conditional: dict[str, float | None] = {}
    total: dict[str, float | None] = {}
    prev = n
    for c in CRITERIA:
        conditional[c] = passed[c] / prev if prev > 0 else None
        total[c] = passed[c] / n if n > 0 else None
        prev = passed[c]
    return RateTable(n=n, passed=passed, conditional=conditional, total=total)


@dataclass
class AcceptanceTables:
    per_evaluator: dict[str, RateTable]
    majority_generated: RateTable
    majority_real: RateTable
    per_brand: dict[str, RateTable] = field(default_factory=dict)
    excluded: list[tuple[str, int]] = field(default_factory=list)


def acceptance_tables(records: Sequence[AnnotationRecord]) -> AcceptanceTables:
    """Evaluator-level and majority-vote rate tables.

    Conditional rates are computed among headlines that passed the
    preceding criterion; total rates over all headlines in the group.
    Empty denominators yield None, never zero. Brand tables cover
    generated headlines only.
    """
    per_evaluator: dict[str, RateTable] = {}
    for evaluator in sorted({r.evaluator for r in records}):
        per_evaluator[evaluator] = _rate_table(
            [r for r in records if r.evaluator == evaluator]
        )
    votes, excluded = majority_vote(records)
    per_brand: dict[str, RateTable] = {}
    for brand in sorted({v.brand for v in votes if v.brand is not None}):
        per_brand[brand] = _rate_table(
            [v for v in votes if v.brand == brand and not v.real]
        )
    return AcceptanceTables(
        per_evaluator=per_evaluator,
        majority_generated=_rate_table([v for v in votes if not v.real]),
        majority_real=_rate_table([v for v in votes if v.real]),
        per_brand=per_brand,
        excluded=excluded,
    )


def fleiss_kappa(ratings: np.ndarray | Sequence[Sequence[int]]) -> float:
    """Chance-corrected agreement for a fixed rater count.

    ``ratings`` has one row per item and one column per category; cell
    values count the raters assigning that item to that category. Every
    row must sum to the same rater count n >= 2. Returns 1.0 for perfect
    agreement; values near 0 indicate chance-level agreement. When all
    ratings fall in one category expected agreement is 1 and kappa is
    undefined, which is an error.
    """
    m = np.asarray(ratings, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise ValueError("ratings must be a matrix with at least 2 items")
    row_sums = m.sum(axis=1)
    n = row_sums[0]
    if n < 2 or not np.all(row_sums == n):
        raise ValueError("every item needs the same rater count n >= 2")
    p_i = ((m * m).sum(axis=1) - n) / (n * (n - 1))
    p_bar = float(p_i.mean())
    p_j = m.sum(axis=0) / (m.shape[0] * n)
    p_e = float((p_j * p_j).sum())
    if p_e >= 1.0:
        raise ValueError(
            "all ratings in one category: expected agreement is 1, "
            "kappa undefined"
        )
    return (p_bar - p_e) / (1.0 - p_e)


def ratings_matrix(
    records: Sequence[AnnotationRecord], criterion: str
) -> np.ndarray:
    """Fleiss input for one criterion: per headline, counts of 0s and 1s.

    Only headlines with exactly three evaluators are included, matching
    the majority-vote population.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    groups: dict[tuple[str, int], list[int]] = {}
    for r in records:
        groups.setdefault((r.article_id, r.slot), []).append(
            getattr(r, criterion)
        )
    rows = []
    for _, vals in sorted(groups.items()):
        if len(vals) == 3:
            ones = sum(vals)
            rows.append([3 - ones, ones])
    return np.asarray(rows, dtype=np.int64)
