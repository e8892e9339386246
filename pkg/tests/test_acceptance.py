"""Release gate: twelve checks at fixed tolerances, one verdict line each.

Run ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines.
The desk-scale pipeline check trains a real model and takes a few
minutes; everything else finishes in seconds.
"""

import random
import time

import numpy as np
import pytest

from headliner import decode, evalkit, gp_tune, metrics, model, tokenizer


def _verdict(n, ok, detail):
    print(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {n}: {detail}"


def _log_softmax(logits):
    m = logits.max()
    return logits - (m + np.log(np.exp(logits - m).sum()))


def _random_scorer(seed, vocab):
    """Deterministic log-prob table over prefixes, standard-normal logits."""
    def scorer(prefix):
        key = abs(hash((seed, vocab) + tuple(prefix))) % 2**63
        return _log_softmax(np.random.default_rng(key).normal(size=vocab))
    return scorer


def _cached(scorer):
    memo = {}
    def inner(prefix):
        key = tuple(prefix)
        if key not in memo:
            memo[key] = scorer(prefix)
        return memo[key]
    return inner


# 1 -------------------------------------------------------------------

def test_01_tokenizer_round_trip_speed():
    """1000 random UTF-8 strings survive encode/decode in under 10 s."""
    texts = [f"uutinen {i}: hanke etenee kaupungissa {i}" for i in range(40)]
    vocab = tokenizer.learn(texts, 300)

    rng = random.Random(20260818)
    strings = []
    for _ in range(1000):
        n = rng.randint(1, 64)
        strings.append("".join(
            chr(rng.choice((rng.randint(0x20, 0xD7FF),
                            rng.randint(0xE000, 0x10FFFF))))
            for _ in range(n)
        ))

    start = time.monotonic()
    bad = sum(tokenizer.decode(tokenizer.encode(s, vocab), vocab) != s
              for s in strings)
    elapsed = time.monotonic() - start
    _verdict(
        1, bad == 0 and elapsed < 10.0,
        f"1000 round trips, {bad} mismatches, {elapsed:.2f}s (limit 10s)",
    )


# 2 -------------------------------------------------------------------

def test_02_gradient_check():
    """Full-tensor central differences, 64-bit, 2 layers of width 16.

    Per parameter group the relative error ||analytic - numeric|| /
    ||numeric|| must not exceed 1e-4, all within two minutes.
    """
    cfg = model.ModelConfig(
        n_layers=2, d_model=16, n_heads=2, context=24, vocab_size=29, seed=7
    )
    params = model.init(cfg, dtype=np.float64)
    rng = np.random.default_rng(3)
    ids = np.array([
        rng.integers(0, cfg.vocab_size, size=10),
        rng.integers(0, cfg.vocab_size, size=10),
    ])
    mask = rng.random((2, 9)) < 0.6
    mask[0, 0] = True

    start = time.monotonic()
    _, grads = model.loss_and_grads(params, ids, mask, cfg)
    eps = 1e-6
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        numeric = np.zeros_like(flat)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp, _ = model.loss_and_grads(params, ids, mask, cfg)
            flat[idx] = orig - eps
            lm, _ = model.loss_and_grads(params, ids, mask, cfg)
            flat[idx] = orig
            numeric[idx] = (lp - lm) / (2 * eps)
        analytic = grads[name].reshape(-1)
        rel = (np.linalg.norm(analytic - numeric)
               / max(np.linalg.norm(numeric), 1e-12))
        worst = max(worst, rel)
    elapsed = time.monotonic() - start
    _verdict(
        2, worst <= 1e-4 and elapsed < 120.0,
        f"worst group relative error {worst:.2e} (limit 1e-4), "
        f"{elapsed:.1f}s (limit 120s)",
    )


# 3 -------------------------------------------------------------------

def test_03_perplexity_oracles():
    """Uniform scorer gives V, a perfect one gives 1, products match."""
    V = 50
    uniform = lambda ids: np.full((len(ids) - 1, V), -np.log(V))
    r_uniform = metrics.perplexity(uniform, [[1, 2, 3, 4], [5, 6]])
    ok_uniform = abs(r_uniform.ppl - V) / V <= 1e-6

    def perfect(ids):
        rows = np.full((len(ids) - 1, V), -1e9)
        rows[np.arange(len(ids) - 1), ids[1:]] = 0.0
        return rows
    r_perfect = metrics.perplexity(perfect, [[1, 2, 3], [4, 5]])
    ok_perfect = abs(r_perfect.ppl - 1.0) <= 1e-9

    probs = (0.5, 0.25, 0.8)
    def hand(ids):
        rows = np.full((3, V), -50.0)
        for t, p in enumerate(probs):
            rows[t, ids[t + 1]] = np.log(p)
        return rows
    r_hand = metrics.perplexity(hand, [[0, 1, 2, 3]])
    expect = (0.5 * 0.25 * 0.8) ** (-1.0 / 3.0)
    ok_hand = abs(r_hand.ppl - expect) <= 1e-9

    _verdict(
        3, ok_uniform and ok_perfect and ok_hand,
        f"uniform {r_uniform.ppl:.8f} vs {V}, perfect {r_perfect.ppl:.12f}, "
        f"3-token {r_hand.ppl:.12f} vs {expect:.12f}",
    )


# 4 -------------------------------------------------------------------

def test_04_reduction_lattice():
    """Each decoder generalizes the previous one, bit for bit.

    top_k=1 sampling equals greedy, a single beam equals greedy, a
    single group equals plain beam search, and zero diversity penalty
    makes every group identical.
    """
    eos = 0
    start = time.monotonic()
    checks = []
    for seed in range(5):
        scorer = _cached(_random_scorer(seed, 7))
        g = decode.greedy(scorer, [3], 6, eos)
        s = decode.generate_sampling(scorer, [3], 6, eos, top_k=1, seed=seed)
        checks.append(s == g)

        b1 = decode.beam_search(scorer, [3], 1, 6, eos)
        checks.append(list(b1[0].ids) == g)

        cfg = decode.DecodeConfig(
            n_groups=1, beams_per_group=3, diversity_penalty=0.71,
            repeat_penalty=1.5, length_decay=0.9, max_len=6,
        )
        via_dbs = decode.diverse_beam_search(scorer, [3], cfg, eos)[0]
        via_bs = decode.beam_search(
            scorer, [3], 3, 6, eos, length_decay=0.9, repeat_penalty=1.5,
        )
        checks.append(
            [b.ids for b in via_dbs] == [b.ids for b in via_bs]
            and [b.score for b in via_dbs] == [b.score for b in via_bs]
        )

        cfg0 = decode.DecodeConfig(
            n_groups=4, beams_per_group=2, diversity_penalty=0.0,
            repeat_penalty=0.0, length_decay=1.0, max_len=6,
        )
        groups = decode.diverse_beam_search(scorer, [3], cfg0, eos)
        first = [(b.ids, b.score) for b in groups[0]]
        checks.append(all(
            [(b.ids, b.score) for b in grp] == first for grp in groups[1:]
        ))
    elapsed = time.monotonic() - start
    _verdict(
        4, all(checks) and elapsed < 60.0,
        f"{sum(checks)}/{len(checks)} bit-exact reductions over 5 seeds, "
        f"{elapsed:.2f}s (limit 60s)",
    )


# 5 -------------------------------------------------------------------

def test_05_beam_search_exhaustive_oracle():
    """Width V^max_len beam search recovers the exhaustive argmax."""
    eos = 0

    def exhaustive_best(scorer, vocab, max_len):
        best_score, best_path = -np.inf, None
        def walk(prefix, score):
            nonlocal best_score, best_path
            if (prefix and prefix[-1] == eos) or len(prefix) == max_len:
                if score > best_score:
                    best_score, best_path = score, tuple(prefix)
                return
            logp = scorer(prefix)
            for t in range(vocab):
                prefix.append(t)
                walk(prefix, score + logp[t])
                prefix.pop()
        walk([], 0.0)
        return best_score, best_path

    start = time.monotonic()
    n_cases = 0
    ok = True
    for vocab in (2, 3, 4, 5, 6):
        for max_len in (1, 2, 3, 4):
            for seed in (0, 1):
                scorer = _cached(_random_scorer(seed * 101 + vocab, vocab))
                want_score, want_path = exhaustive_best(scorer, vocab, max_len)
                beams = decode.beam_search(
                    scorer, [], vocab ** max_len, max_len, eos
                )
                got = beams[0]
                ok = ok and got.ids == want_path
                ok = ok and abs(got.score - want_score) <= 1e-9
                n_cases += 1
    elapsed = time.monotonic() - start
    _verdict(
        5, ok and elapsed < 60.0,
        f"{n_cases} exhaustive comparisons (V<=6, len<=4), "
        f"{elapsed:.2f}s (limit 60s)",
    )


# 6 -------------------------------------------------------------------

def test_06_diversity_forces_distinct_first_tokens():
    """Strong diversity penalty separates the group leaders.

    With logits confined to a 3-nat band and a penalty of 10, every one
    of 100 seeded runs must give pairwise-distinct leader first tokens.
    """
    def band_scorer(seed, vocab):
        def scorer(prefix):
            key = abs(hash((seed, vocab) + tuple(prefix))) % 2**63
            logits = np.random.default_rng(key).uniform(0.0, 3.0, vocab)
            return _log_softmax(logits)
        return scorer

    cfg = decode.DecodeConfig(
        n_groups=4, beams_per_group=2, diversity_penalty=10.0,
        repeat_penalty=0.0, length_decay=1.0, max_len=4,
    )
    hits = 0
    for seed in range(100):
        groups = decode.diverse_beam_search(band_scorer(seed, 12), [], cfg, 0)
        firsts = [grp[0].ids[0] for grp in groups]
        hits += len(set(firsts)) == cfg.n_groups
    _verdict(6, hits == 100, f"{hits}/100 seeds with 4 distinct first tokens")


# 7 -------------------------------------------------------------------

def test_07_length_decay_prefers_longer():
    """Decaying the running score rewards continuing over stopping.

    On scorers where stopping immediately is locally best, the mean
    top-beam length at decay 0.87 must strictly exceed decay 1.0.
    """
    def toy(p_stop):
        root = np.log([p_stop, 1.0 - p_stop - 1e-3, 1e-3])
        cont = np.log([0.03, 0.96, 0.01])
        return lambda prefix: root if len(prefix) == 0 else cont

    lengths = {0.87: [], 1.0: []}
    for p_stop in (0.45, 0.5, 0.55):
        for beta in lengths:
            beams = decode.beam_search(
                toy(p_stop), [], 2, 8, 0, length_decay=beta
            )
            lengths[beta].append(len(beams[0].ids))
    mean_decay = float(np.mean(lengths[0.87]))
    mean_plain = float(np.mean(lengths[1.0]))
    _verdict(
        7, mean_decay > mean_plain,
        f"mean top-beam length {mean_decay:.2f} at decay 0.87 vs "
        f"{mean_plain:.2f} at 1.0",
    )


# 8 -------------------------------------------------------------------

def test_08_desk_pipeline_quality_gate(desk_run):
    """Desk-scale run: size, architecture, perplexity, entity recall, time."""
    import json

    report, out, elapsed = desk_run
    mcfg = json.loads((out / "resolved_config.json").read_text())["model"]
    n_articles = report["corpus"]["n_articles"]
    val_ppl = report["pretrain"]["val_ppl"]
    gate = report["vocab"]["size"] / 10.0
    entity_rate = report["generation"]["entity_match_rate"]
    ok = (
        n_articles >= 512
        and mcfg["n_layers"] == 4 and mcfg["d_model"] == 128
        and val_ppl < gate
        and entity_rate >= 0.8
        and elapsed <= 1800.0
    )
    _verdict(
        8, ok,
        f"{n_articles} articles, {mcfg['n_layers']}x{mcfg['d_model']} model, "
        f"val ppl {val_ppl:.2f} < {gate:.1f}, entity match "
        f"{entity_rate:.2f} >= 0.8, {elapsed:.0f}s (limit 1800s)",
    )


# 9 -------------------------------------------------------------------

def test_09_tuner_recovers_optima():
    """Quadratic and 3-D bowl optima recovered; incumbents never regress."""
    traces = []

    quad_errs = []
    bounds1 = gp_tune.Bounds(((0.0, 1.0),))
    for seed in range(10):
        result = gp_tune.tune(
            lambda x: -(x[0] - 0.3) ** 2, bounds1, budget=30, seed=seed
        )
        quad_errs.append(abs(result.best_point[0] - 0.3))
        traces.append(result.trace)
    ok_quad = max(quad_errs) <= 0.05

    center = np.array([0.71, 3.0, 0.87])
    span = np.array([2.0, 3.0, 0.5])
    def bowl(x):
        return -float(np.sum(((np.asarray(x) - center) / span) ** 2))
    result3 = gp_tune.tune(bowl, gp_tune.decoding_bounds(), budget=60, seed=0)
    errs3 = np.abs(np.asarray(result3.best_point) - center)
    traces.append(result3.trace)
    ok_bowl = bool(np.all(errs3 <= 0.1))

    def flaky(x):
        if x[0] < 0.2:
            return None
        return -(x[0] - 0.7) ** 2
    flaky_result = gp_tune.tune(flaky, bounds1, budget=25, seed=4)
    traces.append(flaky_result.trace)

    ok_mono = True
    for trace in traces:
        incumbents = [e["incumbent"] for e in trace if e["incumbent"] is not None]
        ok_mono = ok_mono and all(
            b >= a for a, b in zip(incumbents, incumbents[1:])
        )
    _verdict(
        9, ok_quad and ok_bowl and ok_mono,
        f"quadratic worst error {max(quad_errs):.3f} over 10 seeds "
        f"(limit 0.05), bowl per-dim errors "
        f"{np.round(errs3, 3).tolist()} (limit 0.1), "
        f"incumbents monotone: {ok_mono}",
    )


# 10 ------------------------------------------------------------------

def test_10_conditional_rate_cascade():
    """Conditional pass rates compose into the published totals.

    Conditionals (0.87, 0.35, 0.68) must reproduce totals that round to
    (0.87, 0.30, 0.21) and land within 0.01 of (0.87, 0.31, 0.21).
    """
    n, n_lang, n_usable, n_good = 50000, 43500, 15225, 10353
    records = []
    for evaluator in ("e1", "e2", "e3"):
        for i in range(n):
            records.append(evalkit.AnnotationRecord(
                article_id=f"a{i}", slot=1, evaluator=evaluator,
                language=int(i < n_lang), usable=int(i < n_usable),
                good=int(i < n_good), real=False,
            ))
    table = evalkit.acceptance_tables(records).majority_generated

    conditional = tuple(table.conditional[c]
                        for c in ("language", "usable", "good"))
    total = tuple(table.total[c] for c in ("language", "usable", "good"))
    published = (0.87, 0.31, 0.21)
    ok = (
        table.n == n
        and conditional == (0.87, 0.35, 0.68)
        and tuple(round(t, 2) for t in total) == (0.87, 0.30, 0.21)
        and all(abs(t - p) <= 0.01 for t, p in zip(total, published))
    )
    _verdict(
        10, ok,
        f"conditionals {tuple(round(c, 4) for c in conditional)}, totals "
        f"{tuple(round(t, 5) for t in total)} vs published {published}",
    )


# 11 ------------------------------------------------------------------

def test_11_agreement_statistic():
    """Perfect agreement scores exactly 1; random stays near 0."""
    perfect = [[3, 0], [0, 3], [3, 0], [0, 3], [3, 0]]
    kappa_perfect = evalkit.fleiss_kappa(perfect)
    ok_perfect = kappa_perfect == 1.0

    k = np.random.default_rng(11).binomial(3, 0.5, size=1000)
    kappa_random = evalkit.fleiss_kappa(np.stack([k, 3 - k], axis=1))
    ok_random = abs(kappa_random) <= 0.05

    fixture = np.array([[2, 1], [1, 2], [3, 0], [0, 3]], dtype=float)
    n_items, n_raters = 4, 3
    p_i = ((fixture ** 2).sum(axis=1) - n_raters) / (n_raters * (n_raters - 1))
    p_j = fixture.sum(axis=0) / (n_items * n_raters)
    p_o, p_e = p_i.mean(), float((p_j ** 2).sum())
    want = (p_o - p_e) / (1.0 - p_e)
    kappa_fixture = evalkit.fleiss_kappa(fixture)
    ok_fixture = abs(kappa_fixture - want) <= 1e-9

    _verdict(
        11, ok_perfect and ok_random and ok_fixture,
        f"perfect {kappa_perfect}, random {kappa_random:.4f} (limit 0.05), "
        f"fixture {kappa_fixture:.10f} vs formula {want:.10f}",
    )


# 12 ------------------------------------------------------------------

def test_12_pipeline_byte_reproducibility(tiny_pair):
    """Same seed, same machine: the demo report is byte-identical."""
    from headliner import pipeline

    (report_a, out_a), (report_b, out_b) = tiny_pair
    in_memory = pipeline.report_bytes(report_a) == pipeline.report_bytes(report_b)
    on_disk = ((out_a / "report.json").read_bytes()
               == (out_b / "report.json").read_bytes())
    _verdict(
        12, in_memory and on_disk,
        f"in-memory identical: {in_memory}, report.json identical: {on_disk}",
    )
