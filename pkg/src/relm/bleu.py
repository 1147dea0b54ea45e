"""Corpus BLEU matching the SacreBLEU signature BLEU+c.mixed+#.1+s.exp+tok.13a."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .corpus import tokenize_13a

MAX_ORDER = 4
SIGNATURE = "BLEU+c.mixed+#.1+s.exp+tok.13a"


@dataclass(frozen=True)
class BleuResult:
    score: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    counts: tuple[int, ...] = ()
    totals: tuple[int, ...] = ()

    def __str__(self):
        prec = "/".join(f"{p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.score:.2f} {prec} (BP = {self.brevity_penalty:.3f} "
                f"hyp_len = {self.hyp_len} ref_len = {self.ref_len})")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str]) -> BleuResult:
    """Single-reference, case-sensitive corpus BLEU with exponential smoothing.

    Precisions are reported as percentages. An n-gram order with zero matches
    gets ``1 / (2^k * total_n)`` where ``k`` counts zero-match orders so far;
    an order with no candidate n-grams at all contributes a zero precision.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("bleu needs at least one hypothesis")
    correct = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = tokenize_13a(hyp)
        r = tokenize_13a(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(0, len(h) - n + 1)

    precisions = [0.0] * MAX_ORDER
    smooth = 1.0
    for n in range(MAX_ORDER):
        if total[n] == 0:
            break
        if correct[n] == 0:
            smooth *= 2.0
            precisions[n] = 100.0 / (smooth * total[n])
        else:
            precisions[n] = 100.0 * correct[n] / total[n]

    if hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len) if hyp_len > 0 else 0.0
    else:
        bp = 1.0
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuResult(score, tuple(precisions), bp, hyp_len, ref_len, tuple(correct), tuple(total))
