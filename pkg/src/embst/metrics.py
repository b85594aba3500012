"""Corpus BLEU with multiple references, and word error rate."""

from __future__ import annotations

import math
from collections import Counter


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, reference_sets, max_n=4):
    """Corpus-level BLEU in [0, 100].

    Clipped n-gram precisions for n = 1..max_n (counts clipped against
    the per-utterance maximum over references), geometric mean, and a
    brevity penalty computed from the reference length closest to each
    hypothesis (ties go to the shorter reference).  Orders the corpus is
    too short to instantiate (zero hypothesis n-grams) drop out of the
    mean; a genuinely zero precision yields BLEU 0.
    """
    if not hypotheses:
        raise ValueError("bleu: empty hypothesis set")
    if len(hypotheses) != len(reference_sets):
        raise ValueError(f"bleu: {len(hypotheses)} hypotheses vs {len(reference_sets)} reference sets")

    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(hypotheses, reference_sets):
        if not refs:
            raise ValueError("bleu: an utterance has no references")
        hyp = list(hyp)
        hyp_len += len(hyp)
        closest = min(refs, key=lambda r: (abs(len(r) - len(hyp)), len(r)))
        ref_len += len(closest)
        for n in range(1, max_n + 1):
            hyp_counts = _ngram_counts(hyp, n)
            if not hyp_counts:
                continue
            clip = Counter()
            for ref in refs:
                for gram, c in _ngram_counts(list(ref), n).items():
                    clip[gram] = max(clip[gram], c)
            totals[n - 1] += sum(hyp_counts.values())
            matches[n - 1] += sum(min(c, clip[gram]) for gram, c in hyp_counts.items())

    log_sum = 0.0
    for n in range(max_n):
        if totals[n] == 0:
            continue
        if matches[n] == 0:
            return 0.0
        log_sum += math.log(matches[n] / totals[n])
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    if hyp_len == 0:
        return 0.0
    return 100.0 * bp * math.exp(log_sum / max_n)


def wer(hypothesis, reference):
    """Word error rate in percent; can exceed 100.

    Levenshtein distance with unit substitution/insertion/deletion
    costs, divided by the reference length.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref:
        raise ValueError("wer: empty reference")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(
                prev[j] + 1,                       # deletion
                cur[j - 1] + 1,                    # insertion
                prev[j - 1] + (0 if r == h else 1) # substitution
            )
        prev = cur
    return 100.0 * prev[-1] / len(ref)
