"""Caption quality metrics: BLEU-1..4, ROUGE-L, and CIDEr-D.

All metrics share the package-wide text normalization (lowercase, punctuation
stripped) and whitespace tokenization.  BLEU is computed without smoothing:
a zero clipped precision at any order zeroes the score.  ROUGE-L takes the
maximum precision and maximum recall over the references before the
F-measure.  CIDEr-D uses idf-weighted 1-4-gram vectors with clipped counts,
a Gaussian length penalty, and the standard x10 scaling.
"""

from __future__ import annotations

import math
from collections import Counter

from capret.data.vocab import normalize_caption

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_MAX_ORDER = 4


def caption_tokens(text: str) -> list[str]:
    return normalize_caption(text).split()


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def _bleu_statistics(hyp_tokens: list[str], refs_tokens: list[list[str]], max_n: int):
    """Per-segment counts: clipped matches and totals per order, hypothesis
    length, and the closest reference length (ties to the shorter)."""
    matches = [0] * max_n
    totals = [0] * max_n
    for i in range(1, max_n + 1):
        hyp_counts = _ngram_counts(hyp_tokens, i)
        max_ref = Counter()
        for ref in refs_tokens:
            for gram, c in _ngram_counts(ref, i).items():
                if c > max_ref[gram]:
                    max_ref[gram] = c
        matches[i - 1] = sum(min(c, max_ref[g]) for g, c in hyp_counts.items())
        totals[i - 1] = max(0, len(hyp_tokens) - i + 1)
    c = len(hyp_tokens)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs_tokens)[1]
    return matches, totals, c, r


def corpus_bleu(hypotheses: list[str], references: list[list[str]], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n: clipped n-gram counts pooled over all segments,
    geometric mean of precisions, brevity penalty exp(1 - r/c) when c < r."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} reference lists")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    c_total = 0
    r_total = 0
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        m, t, c, r = _bleu_statistics(caption_tokens(hyp), [caption_tokens(x) for x in refs], max_n)
        for i in range(max_n):
            matches[i] += m[i]
            totals[i] += t[i]
        c_total += c
        r_total += r
    if c_total == 0:
        return [0.0] * max_n
    bp = 1.0 if c_total >= r_total else math.exp(1.0 - r_total / c_total)
    scores = []
    for n in range(1, max_n + 1):
        log_sum = 0.0
        zero = False
        for i in range(n):
            if matches[i] == 0 or totals[i] == 0:
                zero = True
                break
            log_sum += math.log(matches[i] / totals[i])
        scores.append(0.0 if zero else bp * math.exp(log_sum / n))
    return scores


def bleu(hypothesis: str, references: list[str], n: int = 4) -> float:
    """Single-segment BLEU-n (the corpus formula applied to one pair)."""
    if not 1 <= n <= CIDER_MAX_ORDER:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    return corpus_bleu([hypothesis], [references], max_n=n)[n - 1]


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: str, references: list[str]) -> float:
    """LCS F-measure with beta=1.2; the maximum precision and maximum recall
    over the references are taken separately before combining."""
    if not references:
        raise ValueError("ROUGE-L needs at least one reference")
    hyp = caption_tokens(hypothesis)
    if not hyp:
        return 0.0
    prec, rec = [], []
    for ref_text in references:
        ref = caption_tokens(ref_text)
        lcs = _lcs_length(hyp, ref)
        prec.append(lcs / len(hyp))
        rec.append(lcs / len(ref) if ref else 0.0)
    p, r = max(prec), max(rec)
    if p == 0.0 or r == 0.0:
        return 0.0
    beta_sq = ROUGE_BETA**2
    return (1 + beta_sq) * p * r / (r + beta_sq * p)


# ---------------------------------------------------------------------------
# CIDEr-D


def _tfidf_vector(counts: Counter, df: Counter, log_corpus_size: float):
    """Per-order tf-idf maps, their norms, and the token length."""
    vec = [dict() for _ in range(CIDER_MAX_ORDER)]
    norm = [0.0] * CIDER_MAX_ORDER
    length = 0
    for gram, freq in counts.items():
        idf = log_corpus_size - math.log(max(1.0, df[gram]))
        order = len(gram) - 1
        w = freq * idf
        vec[order][gram] = w
        norm[order] += w * w
        if order == 0:
            length += freq
    return vec, [math.sqrt(x) for x in norm], length


def _cider_sim(vec_h, norm_h, len_h, vec_r, norm_r, len_r) -> list[float]:
    delta = float(len_h - len_r)
    penalty = math.exp(-(delta**2) / (2 * CIDER_SIGMA**2))
    vals = []
    for order in range(CIDER_MAX_ORDER):
        acc = 0.0
        for gram, wh in vec_h[order].items():
            wr = vec_r[order].get(gram, 0.0)
            acc += min(wh, wr) * wr
        if norm_h[order] != 0.0 and norm_r[order] != 0.0:
            acc /= norm_h[order] * norm_r[order]
        vals.append(acc * penalty)
    return vals


def cider_d(hypotheses: list[str], references: list[list[str]]) -> tuple[float, list[float]]:
    """Corpus CIDEr-D: returns (corpus mean, per-image scores), each in [0, 10].

    Document frequency is presence-based over each image's reference set, so
    at least two images are required for the idf weights to be meaningful.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} reference lists")
    if len(hypotheses) < 2:
        raise ValueError("CIDEr-D needs at least 2 images (idf is degenerate on one)")
    all_counts = []
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        hyp_tokens = caption_tokens(hyp)
        hyp_counts = Counter()
        for n in range(1, CIDER_MAX_ORDER + 1):
            hyp_counts.update(_ngram_counts(hyp_tokens, n))
        ref_counts = []
        for ref_text in refs:
            ref_tokens = caption_tokens(ref_text)
            counts = Counter()
            for n in range(1, CIDER_MAX_ORDER + 1):
                counts.update(_ngram_counts(ref_tokens, n))
            ref_counts.append(counts)
        all_counts.append((hyp_counts, ref_counts))

    df = Counter()
    for _, ref_counts in all_counts:
        seen = set()
        for counts in ref_counts:
            seen.update(counts.keys())
        for gram in seen:
            df[gram] += 1

    log_corpus_size = math.log(float(len(all_counts)))
    per_image = []
    for hyp_counts, ref_counts in all_counts:
        vec_h, norm_h, len_h = _tfidf_vector(hyp_counts, df, log_corpus_size)
        order_sums = [0.0] * CIDER_MAX_ORDER
        for counts in ref_counts:
            vec_r, norm_r, len_r = _tfidf_vector(counts, df, log_corpus_size)
            for i, val in enumerate(_cider_sim(vec_h, norm_h, len_h, vec_r, norm_r, len_r)):
                order_sums[i] += val
        score = sum(order_sums) / CIDER_MAX_ORDER / len(ref_counts) * 10.0
        per_image.append(score)
    return float(sum(per_image) / len(per_image)), per_image
