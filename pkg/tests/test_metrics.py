"""Caption metrics against brute-force oracles and hand-computed cases."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualgcn.metrics import (EVAL_COLUMNS, bleu_n, cider, difficulty_metric, evaluate_corpus, lcs_length,
                             parse_metric_spec, rouge_l, summarize, tokenize)

VOCAB = [f"w{i}" for i in range(20)]


# -- independent oracles ---------------------------------------------------------------

def grams(tokens, k):
    return [tuple(tokens[i:i + k]) for i in range(len(tokens) - k + 1)]


def oracle_bleu(cand, refs, n):
    if not cand:
        return 0.0
    product = 1.0
    for k in range(1, n + 1):
        cg = grams(cand, k)
        if not cg:
            return 0.0
        matched = 0
        for g in set(cg):
            matched += min(cg.count(g), max(grams(r, k).count(g) for r in refs))
        if matched == 0:
            return 0.0
        product *= matched / len(cg)
    c = len(cand)
    r = sorted((abs(len(x) - c), len(x)) for x in refs)[0][1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * product ** (1.0 / n)


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def oracle_lcs(a, b):
    for size in range(min(len(a), len(b)), 0, -1):
        for idx in itertools.combinations(range(len(a)), size):
            if is_subsequence([a[i] for i in idx], b):
                return size
    return 0


def oracle_rouge(cand, refs, beta=1.2):
    best = 0.0
    for ref in refs:
        lcs = oracle_lcs(cand, ref)
        if lcs:
            p, r = lcs / len(cand), lcs / len(ref)
            best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def oracle_cider(cands, refsets, sigma=6.0):
    n_docs = len(refsets)
    scores = []
    for cand, refs in zip(cands, refsets):
        total = 0.0
        for k in range(1, 5):
            space = sorted({g for rs in refsets for r in rs for g in grams(r, k)} | set(grams(cand, k)))
            pos = {g: i for i, g in enumerate(space)}
            df = np.zeros(len(space))
            for rs in refsets:
                for g in {g for r in rs for g in grams(r, k)}:
                    df[pos[g]] += 1
            idf = np.log(n_docs) - np.log(np.maximum(df, 1.0))

            def vec(tokens):
                v = np.zeros(len(space))
                for g in grams(tokens, k):
                    v[pos[g]] += 1
                return v * idf

            c = vec(cand)
            for ref in refs:
                r = vec(ref)
                if np.linalg.norm(c) == 0 or np.linalg.norm(r) == 0:
                    continue
                pen = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma ** 2))
                total += (np.minimum(c, r) * r).sum() / (np.linalg.norm(c) * np.linalg.norm(r)) * pen / len(refs)
        scores.append(10.0 * total / 4)
    return scores


def random_sentence(rng, lo=1, hi=12, vocab=20):
    return [VOCAB[i] for i in rng.integers(0, vocab, size=int(rng.integers(lo, hi + 1)))]


def random_case(rng):
    vocab = int(rng.integers(3, 21))
    cand = random_sentence(rng, 0, 12, vocab)
    refs = [random_sentence(rng, 1, 12, vocab) for _ in range(int(rng.integers(1, 5)))]
    if rng.random() < 0.3 and cand:
        refs[0] = list(cand)  # keep some high-overlap cases
    return cand, refs


# -- oracle agreement ----------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_bleu_matches_oracle(n):
    rng = np.random.default_rng(100 + n)
    nonzero = 0
    for _ in range(50):
        cand, refs = random_case(rng)
        got = bleu_n(cand, refs, n)
        assert abs(got - oracle_bleu(cand, refs, n)) <= 1e-9
        nonzero += got > 0
    assert nonzero >= 10


def test_rouge_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        cand, refs = random_case(rng)
        assert abs(rouge_l(cand, refs) - oracle_rouge(cand, refs)) <= 1e-9
        for r in refs:
            assert lcs_length(cand, r) == oracle_lcs(cand, r)


def test_cider_matches_oracle():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n_img = int(rng.integers(2, 6))
        cases = [random_case(rng) for _ in range(n_img)]
        cands, refs = [c for c, _ in cases], [r for _, r in cases]
        mean, per = cider(cands, refs)
        want = oracle_cider(cands, refs)
        assert max(abs(a - b) for a, b in zip(per, want)) <= 1e-9
        assert abs(mean - sum(want) / n_img) <= 1e-9


# -- hand cases ----------------------------------------------------------------------

def test_clipped_unigram_case():
    score = bleu_n("the the the the the the the", ["the cat is on the mat"], 1)
    assert score == pytest.approx(2 / 7, abs=1e-12)


def test_rouge_hand_case():
    assert lcs_length("a b c d".split(), "a c b d".split()) == 3
    assert rouge_l("a b c d", ["a c b d"]) == pytest.approx(0.75, abs=1e-12)


def test_cider_perfect_match_case():
    _, per = cider(["a man riding a horse", "two dogs on grass"],
                   [["a man riding a horse"], ["the sky is blue"]])
    assert per[0] == pytest.approx(10.0, abs=1e-12)
    assert per[1] == 0.0


def test_degenerate_inputs():
    assert bleu_n("", ["a b"], 1) == 0.0
    assert rouge_l("", ["a b"]) == 0.0
    assert rouge_l("x y", ["a b"]) == 0.0
    assert bleu_n("a b c", ["a b c"], 4) == 0.0  # no 4-gram, no smoothing
    assert bleu_n("a b c", ["a b c"], 4, smooth=True) > 0.0
    assert bleu_n("a b c d", ["a b c d"], 4) == 1.0
    with pytest.raises(ValueError):
        bleu_n("a", ["a"], 5)
    with pytest.raises(ValueError):
        bleu_n("a", [], 1)
    with pytest.raises(ValueError):
        cider(["a"], [["a"]])
    with pytest.raises(ValueError):
        cider(["a", "b"], [["a"]])


def test_tokenizer():
    assert tokenize("A Dog, on the mat!") == ["a", "dog", "on", "the", "mat"]
    assert tokenize(["A", "b"]) == ["a", "b"]


def test_difficulty_metric_specs():
    cand, refs = "a cat sat on the mat today", ["the cat sat on the mat"]
    b1, b4 = bleu_n(cand, refs, 1), bleu_n(cand, refs, 4)
    assert difficulty_metric(cand, refs) == pytest.approx((b1 + b4) / 2)
    assert difficulty_metric(cand, refs, "bleu1") == b1
    assert difficulty_metric(refs[0], refs, "mean(bleu1, bleu4)") == 1.0
    assert difficulty_metric("", refs) == 0.0
    assert parse_metric_spec("mean(bleu1,rougeL)") == ["bleu1", "rougeL"]
    with pytest.raises(ValueError):
        parse_metric_spec("meteor")


# -- properties -----------------------------------------------------------------------

sentences = st.lists(st.sampled_from(VOCAB[:8]), min_size=1, max_size=12)


@settings(max_examples=80)
@given(st.lists(st.sampled_from(VOCAB[:8]), max_size=12), st.lists(sentences, min_size=1, max_size=4))
def test_metric_ranges_and_reference_order(cand, refs):
    for n in range(1, 5):
        v = bleu_n(cand, refs, n)
        assert 0.0 <= v <= 1.0
        assert v == bleu_n(cand, refs[::-1], n)
    assert 0.0 <= rouge_l(cand, refs) <= 1.0


@settings(max_examples=40)
@given(st.lists(sentences, min_size=2, max_size=4))
def test_identical_candidate_maximises(refs):
    for r in refs:
        others = [x for x in refs if x != r] or refs
        assert bleu_n(r, [r], 1) == 1.0
        assert rouge_l(r, [r]) == 1.0
        assert bleu_n(r, [r], 1) >= bleu_n(others[0], [r], 1)
    _, per = cider(refs, [[r] for r in refs])
    assert all(0.0 <= s <= 10.0 + 1e-9 for s in per)


def test_bleu_non_increasing_in_order_for_sentence_pairs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        cand, ref = random_sentence(rng, 1, 12, 8), random_sentence(rng, 1, 12, 8)
        scores = [bleu_n(cand, [ref], n) for n in range(1, 5)]
        assert all(b <= a + 1e-12 for a, b in zip(scores, scores[1:])), (cand, ref, scores)


def test_bleu_order_can_rise_with_several_references():
    # unigram clipping uses the best single reference per gram, so bigrams can match better
    assert bleu_n("a b a", ["a b", "b a"], 2) > bleu_n("a b a", ["a b", "b a"], 1)


# -- corpus helpers -------------------------------------------------------------------

def test_evaluate_and_summarize():
    rows = evaluate_corpus([3, 9], ["a cat on a mat", "a dog"], [["a cat on a mat"], ["the dog runs"]])
    assert [r["image_id"] for r in rows] == [3, 9]
    assert set(rows[0]) == set(EVAL_COLUMNS)
    assert rows[0]["bleu1"] == 1.0 and rows[0]["cider"] == pytest.approx(10.0)
    summary = summarize(rows)
    assert summary["bleu1"] == pytest.approx(100 * (1.0 + rows[1]["bleu1"]) / 2)
    single = evaluate_corpus([1], ["a"], [["a"]])
    assert math.isnan(single[0]["cider"])
    assert math.isnan(summarize(single)["cider"]) and summarize(single)["bleu1"] == 100.0
