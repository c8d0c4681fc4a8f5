"""Caption metrics: sentence BLEU-n, ROUGE-L and CIDEr-D.

Scores are in [0, 1] except CIDEr, which is scaled to [0, 10].
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

_PUNCT = re.compile(r"[^\w\s<>]")

Tokens = Sequence[str]


def tokenize(text: str | Sequence[str]) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace. Token lists pass through."""
    if not isinstance(text, str):
        return [str(t).lower() for t in text]
    return _PUNCT.sub("", text.lower()).split()


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(c: int, ref_lens: Iterable[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def bleu_n(candidate, references, n: int = 4, smooth: bool = False) -> float:
    """Sentence BLEU: geometric mean of clipped 1..n-gram precisions times brevity penalty.

    Without ``smooth`` any zero precision makes the score 0. ``smooth`` applies
    add-one to the numerator and denominator for orders above 1.
    """
    if not 1 <= n <= 4:
        raise ValueError("BLEU order must be in 1..4")
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not refs:
        raise ValueError("BLEU needs at least one reference")
    c = len(cand)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        counts = ngrams(cand, k)
        total = sum(counts.values())
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= ngrams(r, k)
        clipped = sum(min(cnt, max_ref[g]) for g, cnt in counts.items())
        if smooth and k > 1:
            clipped, total = clipped + 1, total + 1
        if clipped == 0 or total == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    r = _closest_ref_length(c, [len(x) for x in refs])
    bp = min(1.0, math.exp(1.0 - r / c))
    return bp * math.exp(log_sum / n)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta: float = 1.2) -> float:
    cand = tokenize(candidate)
    best = 0.0
    for ref in references:
        ref = tokenize(ref)
        if not cand or not ref:
            continue
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
        best = max(best, f)
    return best


@dataclass
class CorpusStats:
    """Document frequency of every 1..n-gram over per-image reference sets."""

    df: Counter = field(default_factory=Counter)
    n_docs: int = 0
    n: int = 4

    @classmethod
    def from_references(cls, references: Sequence[Sequence], n: int = 4) -> "CorpusStats":
        stats = cls(n=n)
        for refs in references:
            seen = set()
            for r in refs:
                toks = tokenize(r)
                for k in range(1, n + 1):
                    seen.update(ngrams(toks, k))
            stats.df.update(seen)
        stats.n_docs = len(references)
        return stats

    def idf(self, gram: tuple) -> float:
        return math.log(self.n_docs) - math.log(max(1.0, self.df[gram]))


def _tfidf(tokens: Tokens, stats: CorpusStats):
    vec = [dict() for _ in range(stats.n)]
    norm = [0.0] * stats.n
    for k in range(1, stats.n + 1):
        for g, tf in ngrams(tokens, k).items():
            w = tf * stats.idf(g)
            vec[k - 1][g] = w
            norm[k - 1] += w * w
    return vec, [math.sqrt(x) for x in norm]


def cider(candidates: Sequence, references: Sequence[Sequence], sigma: float = 6.0,
          n: int = 4, stats: CorpusStats | None = None) -> tuple[float, list[float]]:
    """CIDEr-D over an aligned corpus. Returns ``(mean, per_image)``."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must be aligned")
    if len(references) < 2:
        raise ValueError("CIDEr needs a corpus of at least two images for idf; use BLEU for one image")
    stats = stats or CorpusStats.from_references(references, n)
    scores = []
    for cand, refs in zip(candidates, references):
        ct = tokenize(cand)
        cvec, cnorm = _tfidf(ct, stats)
        acc = [0.0] * n
        for ref in refs:
            rt = tokenize(ref)
            rvec, rnorm = _tfidf(rt, stats)
            delta = len(ct) - len(rt)
            penalty = math.exp(-(delta ** 2) / (2.0 * sigma ** 2))
            for k in range(n):
                if cnorm[k] == 0.0 or rnorm[k] == 0.0:
                    continue
                dot = sum(min(w, rvec[k][g]) * rvec[k][g] for g, w in cvec[k].items() if g in rvec[k])
                acc[k] += dot / (cnorm[k] * rnorm[k]) * penalty
        scores.append(10.0 * sum(acc) / n / len(refs))
    return sum(scores) / len(scores), scores


_METRICS = {
    "bleu1": lambda c, r: bleu_n(c, r, 1),
    "bleu2": lambda c, r: bleu_n(c, r, 2),
    "bleu3": lambda c, r: bleu_n(c, r, 3),
    "bleu4": lambda c, r: bleu_n(c, r, 4),
    "rougeL": rouge_l,
}


def parse_metric_spec(spec: str) -> list[str]:
    s = spec.replace(" ", "")
    m = re.fullmatch(r"mean\(([\w,]+)\)", s)
    names = m.group(1).split(",") if m else [s]
    unknown = [x for x in names if x not in _METRICS]
    if unknown or not names:
        raise ValueError(f"unknown metric spec {spec!r}; choose from {sorted(_METRICS)} or mean(...)")
    return names


def difficulty_metric(candidate, references, spec: str = "mean(bleu1,bleu4)") -> float:
    names = parse_metric_spec(spec)
    return sum(_METRICS[x](candidate, references) for x in names) / len(names)


EVAL_COLUMNS = ("image_id", "bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider")


def evaluate_corpus(ids: Sequence, candidates: Sequence, references: Sequence[Sequence]) -> list[dict]:
    """Per-image rows with every metric; CIDEr is omitted (NaN) for single-image corpora."""
    if len(ids) >= 2:
        _, cid = cider(candidates, references)
    else:
        cid = [float("nan")] * len(ids)
    rows = []
    for i, cand, refs, c in zip(ids, candidates, references, cid):
        rows.append({
            "image_id": i,
            "bleu1": bleu_n(cand, refs, 1), "bleu2": bleu_n(cand, refs, 2),
            "bleu3": bleu_n(cand, refs, 3), "bleu4": bleu_n(cand, refs, 4),
            "rougeL": rouge_l(cand, refs), "cider": c,
        })
    return rows


def summarize(rows: Sequence[dict]) -> dict[str, float]:
    """Corpus means scaled by 100 (CIDEr by 100 as well, matching the usual table scale)."""
    out = {}
    for key in EVAL_COLUMNS[1:]:
        vals = [r[key] for r in rows if not math.isnan(r[key])]
        out[key] = 100.0 * sum(vals) / len(vals) if vals else float("nan")
    return out
