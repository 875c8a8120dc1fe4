"""Independent brute-force BLEU reference used to cross-check metrics.bleu.

Deliberately written from the definition with plain dict bookkeeping and
no shared code with the package implementation.
"""
import math


def _count_ngrams(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i + j] for j in range(n))
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def reference_bleu(hyps, refs, max_n=4):
    """Corpus BLEU (0-100), unsmoothed, brevity penalty exp(1 - r/c)."""
    assert len(hyps) == len(refs) and hyps
    clipped = {n: 0 for n in range(1, max_n + 1)}
    possible = {n: 0 for n in range(1, max_n + 1)}
    c = 0
    r = 0
    for hyp, ref in zip(hyps, refs):
        c += len(hyp)
        r += len(ref)
        for n in range(1, max_n + 1):
            hcounts = _count_ngrams(hyp, n)
            rcounts = _count_ngrams(ref, n)
            for gram, k in hcounts.items():
                clipped[n] += min(k, rcounts.get(gram, 0))
                possible[n] += k
    if c == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        if possible[n] == 0 or clipped[n] == 0:
            return 0.0
        log_sum += math.log(clipped[n] / possible[n])
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_sum / max_n)
