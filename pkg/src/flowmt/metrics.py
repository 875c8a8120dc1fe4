"""Corpus-level BLEU and related evaluation helpers."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import UsageError


@dataclass
class BleuReport:
    """Corpus BLEU with its components, on the usual 0-100 scale."""

    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int

    def format(self) -> str:
        parts = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.bleu:.2f} ({parts}) "
                f"BP = {self.brevity_penalty:.3f} "
                f"hyp_len = {self.hyp_length} ref_len = {self.ref_length}")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps: list[list[str]], refs: list[list[str]], max_n: int = 4,
         smooth: bool = False) -> BleuReport:
    """Clipped modified n-gram precision with brevity penalty exp(1 - r/c).

    Unsmoothed by default: any order with zero matches gives BLEU 0.
    With ``smooth``, add-one smoothing is applied to orders above 1
    (useful for very short toy sentences).
    """
    if len(hyps) != len(refs):
        raise UsageError(f"got {len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise UsageError("need at least one hypothesis/reference pair")

    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())

    precisions = []
    for n in range(max_n):
        if smooth and n > 0:
            precisions.append((matches[n] + 1) / (totals[n] + 1))
        else:
            precisions.append(matches[n] / totals[n] if totals[n] > 0 else 0.0)

    if hyp_len == 0:
        bp = 0.0
        score = 0.0
    else:
        bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
        if min(precisions) > 0.0:
            log_avg = sum(math.log(p) for p in precisions) / max_n
            score = 100.0 * bp * math.exp(log_avg)
        else:
            score = 0.0
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def bleu_from_strings(hyps: list[str], refs: list[str], max_n: int = 4,
                      smooth: bool = False) -> BleuReport:
    return bleu([h.split() for h in hyps], [r.split() for r in refs],
                max_n=max_n, smooth=smooth)


def lang_copy_rate(hyps: list[list[str]], src_lang_tokens: set[str]) -> float:
    """Fraction of hypotheses containing at least one source-language
    surface token — the copying-failure indicator for disjoint-vocabulary
    language pairs."""
    if not hyps:
        raise UsageError("need at least one hypothesis")
    hit = sum(1 for hyp in hyps if any(t in src_lang_tokens for t in hyp))
    return hit / len(hyps)


def copy_rate(hyps: list[list[str]], srcs: list[list[str]]) -> float:
    """Fraction of hypothesis tokens copied verbatim from the source
    (clipped per-token, so repeating a source token is not free)."""
    if len(hyps) != len(srcs):
        raise UsageError(f"got {len(hyps)} hypotheses but {len(srcs)} sources")
    copied = 0
    total = 0
    for hyp, src in zip(hyps, srcs):
        total += len(hyp)
        src_counts = Counter(src)
        hyp_counts = Counter(hyp)
        copied += sum(min(c, src_counts[t]) for t, c in hyp_counts.items())
    return copied / total if total else 0.0
