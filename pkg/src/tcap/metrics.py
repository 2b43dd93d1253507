"""Corpus-level caption metrics: BLEU and CIDEr-D.

BLEU@k multiplies the geometric mean of modified n-gram precisions
(counts clipped against the references) for n = 1..k by the brevity
penalty exp(1 - r/c) when the total candidate length c is at most the
effective reference length r (closest reference length per candidate,
ties toward the shorter). Any zero precision at or below k makes
BLEU@k exactly 0 (no smoothing).

CIDEr-D averages, over n = 1..4 and over references, the clipped
tf-idf cosine

    sim_n(c, r) = exp(-(len(c)-len(r))^2 / (2 sigma^2))
                  * sum_g min(h_g, r_g) * r_g / (||h|| ||r||)

where h_g, r_g are n-gram counts weighted by idf = log(N / df), df
counting the corpus examples whose references contain the n-gram
(candidate-only n-grams get the maximal idf log N), sigma = 6, and the
final score is scaled by 10. When both weighted vectors vanish at some
n — every n-gram present in all documents, e.g. any 1-example corpus —
that level falls back to the same clipped cosine on raw counts (the
uniform-idf limit), so identical sentences still score 10.
"""

import math
from collections import Counter
from dataclasses import dataclass

CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(candidates, references):
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    if len(references) != len(candidates):
        raise ValueError("need exactly one reference list per candidate")
    if any(len(refs) == 0 for refs in references):
        raise ValueError("every candidate needs at least one reference")


def bleu(candidates, references, max_n: int = 4) -> list[float]:
    """Corpus BLEU@1..max_n for tokenized candidates and references."""
    _check_corpus(candidates, references)
    clipped = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = ngram_counts(cand, n)
            if not counts:
                continue
            best = Counter()
            for r in refs:
                for g, c in ngram_counts(r, n).items():
                    best[g] = max(best[g], c)
            totals[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, best[g]) for g, c in counts.items())

    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    precisions = [clipped[i] / totals[i] if totals[i] else 0.0 for i in range(max_n)]
    scores = []
    for k in range(1, max_n + 1):
        if any(p == 0.0 for p in precisions[:k]):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in precisions[:k]) / k))
    return scores


def _clipped_cosine(hyp: dict, ref: dict) -> float:
    """sum_g min(h_g, r_g) * r_g / (||h|| ||r||), 0 if either norm is 0."""
    hn = math.sqrt(sum(v * v for v in hyp.values()))
    rn = math.sqrt(sum(v * v for v in ref.values()))
    if hn == 0.0 or rn == 0.0:
        return 0.0
    num = sum(min(v, ref.get(g, 0.0)) * ref.get(g, 0.0) for g, v in hyp.items())
    return num / (hn * rn)


def cider_d(candidates, references, max_n: int = 4,
            sigma: float = CIDER_SIGMA) -> tuple[float, list[float]]:
    """CIDEr-D corpus mean and per-example scores (see module docstring)."""
    _check_corpus(candidates, references)
    n_docs = len(candidates)
    df = [Counter() for _ in range(max_n)]
    for refs in references:
        for n in range(1, max_n + 1):
            seen = set()
            for r in refs:
                seen.update(ngram_counts(r, n))
            for g in seen:
                df[n - 1][g] += 1

    log_n = math.log(n_docs)

    def weighted(counts: Counter, n: int) -> dict:
        return {g: c * (log_n - math.log(max(1.0, df[n - 1][g])))
                for g, c in counts.items()}

    per_example = []
    for cand, refs in zip(candidates, references):
        cand_counts = [ngram_counts(cand, n) for n in range(1, max_n + 1)]
        cand_vecs = [weighted(cand_counts[n - 1], n) for n in range(1, max_n + 1)]
        level_sums = [0.0] * max_n
        for r in refs:
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2.0 * sigma * sigma))
            for n in range(1, max_n + 1):
                ref_counts = ngram_counts(r, n)
                ref_vec = weighted(ref_counts, n)
                val = _clipped_cosine(cand_vecs[n - 1], ref_vec)
                if val == 0.0 and _norm_zero(cand_vecs[n - 1]) and _norm_zero(ref_vec):
                    val = _clipped_cosine(dict(cand_counts[n - 1]), dict(ref_counts))
                level_sums[n - 1] += penalty * val
        score = CIDER_SCALE * sum(level_sums) / (max_n * len(refs))
        per_example.append(score)
    return sum(per_example) / n_docs, per_example


def _norm_zero(vec: dict) -> bool:
    return all(v == 0.0 for v in vec.values())


@dataclass(frozen=True)
class MetricReport:
    """Corpus BLEU@1..4, corpus CIDEr-D, and per-example breakdown."""

    bleu: tuple[float, float, float, float]
    cider: float
    per_example: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {"bleu": list(self.bleu), "cider": self.cider,
                "per_example": list(self.per_example)}


def evaluate(candidates, references) -> MetricReport:
    """Score a decoded corpus against its references."""
    corpus_bleu = bleu(candidates, references)
    cider_mean, cider_each = cider_d(candidates, references)
    per_example = []
    for i, (cand, refs) in enumerate(zip(candidates, references)):
        sent_bleu = bleu([cand], [refs])
        per_example.append({"index": i, "cider": cider_each[i],
                            "bleu": sent_bleu})
    return MetricReport(bleu=tuple(corpus_bleu), cider=cider_mean,
                        per_example=tuple(per_example))
