"""Blind worksheet construction, ingestion, voting, rates, agreement."""

import csv
import math
import random

import numpy as np
import pytest

from headliner import evalkit


def _articles(n):
    return [(f"art{i:05d}", f"runko {i}") for i in range(n)]


def _generated(articles):
    return {
        aid: [f"{aid} otsikko {j}" for j in range(4)]
        for aid, _ in articles
    }


def _real(articles):
    return {aid: f"{aid} oikea" for aid, _ in articles}


def _build(n=4, seed=0):
    arts = _articles(n)
    return evalkit.build_worksheet(
        arts, _generated(arts), _real(arts), seed
    )


# -------------------------------------------------------------- worksheet

def test_worksheet_row_counts():
    rows, key = _build(n=100)
    assert len(rows) == 500
    assert len(key) == 100


def test_real_slot_is_seeded_per_article():
    rows, key = _build(n=6, seed=42)
    for entry in key:
        want = random.Random(f"42:{entry['article_id']}").randint(1, 5)
        assert entry["real_slot"] == want
        assert entry["seed"] == 42


def test_real_headline_lands_in_key_slot():
    rows, key = _build(n=5, seed=9)
    slots = {k["article_id"]: k["real_slot"] for k in key}
    for row in rows:
        if row["slot"] == slots[row["article_id"]]:
            assert row["headline"].endswith("oikea")
        else:
            assert "otsikko" in row["headline"]


def test_generated_order_preserved_around_insertion():
    rows, key = _build(n=1, seed=3)
    real_slot = key[0]["real_slot"]
    others = [r["headline"] for r in rows if r["slot"] != real_slot]
    assert others == [f"art00000 otsikko {j}" for j in range(4)]


def test_slot_distribution_roughly_uniform():
    counts = [0] * 5
    for seed in range(5000):
        slot = random.Random(f"{seed}:artX").randint(1, 5)
        counts[slot - 1] += 1
    se = math.sqrt(5000 * 0.2 * 0.8)
    for c in counts:
        assert abs(c - 1000) <= 3 * se


def test_worksheet_criteria_cells_blank():
    rows, _ = _build()
    for row in rows:
        assert row["language"] == row["usable"] == row["good"] == ""


def test_worksheet_requires_four_generated():
    arts = _articles(1)
    gen = {arts[0][0]: ["a", "b", "c"]}
    with pytest.raises(ValueError):
        evalkit.build_worksheet(arts, gen, _real(arts), 0)
    with pytest.raises(ValueError):
        evalkit.build_worksheet(arts, {}, _real(arts), 0)


def test_worksheet_file_is_blind(tmp_path):
    rows, key = _build(n=3, seed=1)
    wpath = tmp_path / "worksheet.csv"
    kpath = tmp_path / "key.csv"
    evalkit.write_worksheet(wpath, rows)
    evalkit.write_key(kpath, key)
    with open(wpath, newline="") as fh:
        header = next(csv.reader(fh))
    assert header == list(evalkit.WORKSHEET_COLUMNS)
    assert "real_slot" not in header
    assert evalkit.load_key(kpath) == {
        k["article_id"]: k["real_slot"] for k in key
    }


# ------------------------------------------------------------- ingestion

def _fill(path, rows, mark):
    """Write a filled worksheet; mark(row) -> (language, usable, good)."""
    filled = []
    for row in rows:
        r = dict(row)
        r["language"], r["usable"], r["good"] = mark(row)
        filled.append(r)
    evalkit._write_csv(path, evalkit.WORKSHEET_COLUMNS, filled)


def test_ingest_round_trip(tmp_path):
    rows, key_rows = _build(n=2, seed=5)
    key = {k["article_id"]: k["real_slot"] for k in key_rows}
    path = tmp_path / "e1.csv"
    _fill(path, rows, lambda row: (1, 1, 0))
    result = evalkit.ingest_annotations({"e1": path}, key)
    assert result.n_complete == 10
    assert not result.warnings and not result.missing
    for rec in result.records:
        assert (rec.language, rec.usable, rec.good) == (1, 1, 0)
        assert rec.evaluator == "e1"
        assert rec.real == (rec.slot == key[rec.article_id])
    assert sum(r.real for r in result.records) == 2


def test_ingest_normalizes_nesting(tmp_path):
    rows, key_rows = _build(n=1)
    key = {k["article_id"]: k["real_slot"] for k in key_rows}
    path = tmp_path / "e1.csv"
    marks = iter([(0, 1, 1), (1, 0, 1), (1, 1, 1), (0, 0, 0), (1, 0, 0)])
    _fill(path, rows, lambda row: next(marks))
    result = evalkit.ingest_annotations({"e1": path}, key)
    by_slot = {r.slot: r for r in result.records}
    # usable without language collapses to 0; good without usable too.
    assert (by_slot[1].language, by_slot[1].usable, by_slot[1].good) == (0, 0, 0)
    assert (by_slot[2].language, by_slot[2].usable, by_slot[2].good) == (1, 0, 0)
    assert (by_slot[3].language, by_slot[3].usable, by_slot[3].good) == (1, 1, 1)
    assert len(result.warnings) == 3  # slot 1 trips both rules, slot 2 one
    assert all("normalized" in w for w in result.warnings)


def test_ingest_records_missing_cells(tmp_path):
    rows, key_rows = _build(n=1)
    key = {k["article_id"]: k["real_slot"] for k in key_rows}
    path = tmp_path / "e1.csv"
    marks = iter([(1, 1, 1), ("", "", ""), (1, "", 0), (0, 0, 0), (1, 1, 0)])
    _fill(path, rows, lambda row: next(marks))
    result = evalkit.ingest_annotations({"e1": path}, key)
    assert result.n_complete == 3
    assert {(m[1]) for m in result.missing} == {2, 3}
    assert all(m[2] == "e1" for m in result.missing)


def test_ingest_rejects_unknown_article(tmp_path):
    rows, _ = _build(n=1)
    path = tmp_path / "e1.csv"
    _fill(path, rows, lambda row: (1, 1, 1))
    with pytest.raises(ValueError, match="unknown article id"):
        evalkit.ingest_annotations({"e1": path}, {"other": 1})


def test_ingest_rejects_non_binary_cells(tmp_path):
    rows, key_rows = _build(n=1)
    key = {k["article_id"]: k["real_slot"] for k in key_rows}
    path = tmp_path / "e1.csv"
    _fill(path, rows, lambda row: ("2", 0, 0))
    with pytest.raises(ValueError, match="expected 0, 1, or blank"):
        evalkit.ingest_annotations({"e1": path}, key)


def test_ingest_attaches_brands(tmp_path):
    rows, key_rows = _build(n=2)
    key = {k["article_id"]: k["real_slot"] for k in key_rows}
    path = tmp_path / "e1.csv"
    _fill(path, rows, lambda row: (1, 0, 0))
    brands = {"art00000": "daily", "art00001": "sport"}
    result = evalkit.ingest_annotations({"e1": path}, key, brands)
    got = {r.article_id: r.brand for r in result.records}
    assert got == brands


# ---------------------------------------------------------- majority vote

def _rec(aid, slot, evaluator, lang, usable, good, real=False, brand=None):
    return evalkit.AnnotationRecord(
        article_id=aid, slot=slot, evaluator=evaluator,
        language=lang, usable=usable, good=good, real=real, brand=brand,
    )


def test_majority_two_of_three():
    records = [
        _rec("a", 1, "e1", 1, 1, 0),
        _rec("a", 1, "e2", 1, 0, 0),
        _rec("a", 1, "e3", 0, 1, 1),
    ]
    votes, excluded = evalkit.majority_vote(records)
    assert not excluded
    v = votes[0]
    assert (v.language, v.usable, v.good) == (True, True, False)


def test_majority_excludes_wrong_evaluator_counts():
    records = [
        _rec("a", 1, "e1", 1, 1, 1),
        _rec("a", 1, "e2", 1, 1, 1),
        _rec("b", 1, "e1", 1, 1, 1),
        _rec("b", 1, "e1", 1, 1, 1),  # duplicate evaluator
        _rec("b", 1, "e2", 1, 1, 1),
    ]
    votes, excluded = evalkit.majority_vote(records)
    assert votes == []
    assert set(excluded) == {("a", 1), ("b", 1)}


# ------------------------------------------------------------ rate tables

def _bulk_records(n, n_language, n_usable, n_good, evaluator="e1"):
    assert n >= n_language >= n_usable >= n_good
    records = []
    for i in range(n):
        lang = int(i < n_language)
        usable = int(i < n_usable)
        good = int(i < n_good)
        records.append(_rec(f"a{i}", 1, evaluator, lang, usable, good))
    return records


def test_rate_table_hand_counts():
    records = _bulk_records(10, 8, 4, 1)
    tables = evalkit.acceptance_tables(records)
    t = tables.per_evaluator["e1"]
    assert t.n == 10
    assert t.passed == {"language": 8, "usable": 4, "good": 1}
    assert t.total["language"] == pytest.approx(0.8)
    assert t.total["usable"] == pytest.approx(0.4)
    assert t.total["good"] == pytest.approx(0.1)
    assert t.conditional["language"] == pytest.approx(0.8)
    assert t.conditional["usable"] == pytest.approx(0.5)  # 4 of 8
    assert t.conditional["good"] == pytest.approx(0.25)  # 1 of 4


def test_conditional_rates_multiply_to_totals():
    records = _bulk_records(40, 30, 12, 6)
    t = evalkit.acceptance_tables(records).per_evaluator["e1"]
    product = 1.0
    for c in evalkit.CRITERIA:
        product *= t.conditional[c]
        assert t.total[c] == pytest.approx(product, abs=1e-12)


def test_paper_table_arithmetic():
    # Conditional rates (0.87, 0.35, 0.68) over 50,000 headlines hit
    # integer counts exactly: 43500, 15225, 10353.
    records = _bulk_records(50_000, 43_500, 15_225, 10_353)
    t = evalkit.acceptance_tables(records).per_evaluator["e1"]
    assert t.conditional["language"] == pytest.approx(0.87, abs=1e-12)
    assert t.conditional["usable"] == pytest.approx(0.35, abs=1e-12)
    assert t.conditional["good"] == pytest.approx(0.68, abs=1e-12)
    totals = [round(t.total[c], 2) for c in evalkit.CRITERIA]
    assert totals == [0.87, 0.30, 0.21]
    published = (0.87, 0.31, 0.21)
    for got, want in zip(totals, published):
        assert abs(got - want) <= 0.01 + 1e-12


def test_empty_denominator_yields_none():
    records = _bulk_records(5, 0, 0, 0)
    t = evalkit.acceptance_tables(records).per_evaluator["e1"]
    assert t.conditional["language"] == 0.0
    assert t.conditional["usable"] is None
    assert t.conditional["good"] is None


def test_tables_split_real_generated_and_brand():
    records = []
    for e in ("e1", "e2", "e3"):
        records += [
            _rec("a", 1, e, 1, 1, 1, real=True, brand="daily"),
            _rec("a", 2, e, 1, 0, 0, real=False, brand="daily"),
            _rec("b", 1, e, 0, 0, 0, real=False, brand="sport"),
        ]
    tables = evalkit.acceptance_tables(records)
    assert tables.majority_real.n == 1
    assert tables.majority_real.passed["good"] == 1
    assert tables.majority_generated.n == 2
    assert tables.majority_generated.passed["language"] == 1
    # Brand tables cover generated headlines only.
    assert tables.per_brand["daily"].n == 1
    assert tables.per_brand["sport"].n == 1
    assert tables.per_brand["daily"].passed["language"] == 1
    assert tables.per_brand["sport"].passed["language"] == 0


# ------------------------------------------------------------ agreement

def test_kappa_perfect_agreement_is_exactly_one():
    ratings = [[3, 0], [0, 3], [3, 0], [0, 3]]
    assert evalkit.fleiss_kappa(ratings) == 1.0


def test_kappa_hand_oracle():
    ratings = [[2, 1], [1, 2], [3, 0], [0, 3]]
    # Independent route straight from the agreement formula.
    m = np.asarray(ratings, dtype=float)
    n = 3
    p_i = ((m**2).sum(axis=1) - n) / (n * (n - 1))
    p_bar = p_i.mean()
    p_j = m.sum(axis=0) / m.sum()
    p_e = (p_j**2).sum()
    want = (p_bar - p_e) / (1 - p_e)
    got = evalkit.fleiss_kappa(ratings)
    assert got == pytest.approx(want, abs=1e-9)
    assert got == pytest.approx(1 / 3, abs=1e-9)


def test_kappa_random_ratings_near_zero():
    rng = np.random.default_rng(11)
    ones = rng.binomial(3, 0.5, size=1000)
    ratings = np.stack([3 - ones, ones], axis=1)
    assert abs(evalkit.fleiss_kappa(ratings)) <= 0.05


def test_kappa_validation():
    with pytest.raises(ValueError):
        evalkit.fleiss_kappa([[3, 0]])  # one item
    with pytest.raises(ValueError):
        evalkit.fleiss_kappa([[3, 0], [2, 1], [1, 1]])  # ragged counts
    with pytest.raises(ValueError):
        evalkit.fleiss_kappa([[1, 0], [0, 1]])  # single rater
    with pytest.raises(ValueError):
        evalkit.fleiss_kappa([[3, 0], [3, 0]])  # one category only


def test_ratings_matrix_counts():
    records = [
        _rec("a", 1, "e1", 1, 1, 0),
        _rec("a", 1, "e2", 1, 0, 0),
        _rec("a", 1, "e3", 0, 0, 0),
        _rec("b", 1, "e1", 1, 1, 1),  # only one evaluator: dropped
    ]
    m = evalkit.ratings_matrix(records, "language")
    assert m.tolist() == [[1, 2]]
    m = evalkit.ratings_matrix(records, "usable")
    assert m.tolist() == [[2, 1]]
    with pytest.raises(ValueError):
        evalkit.ratings_matrix(records, "fluency")
