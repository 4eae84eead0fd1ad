"""Token error rate (the word-error-rate analogue) via Levenshtein alignment."""

from __future__ import annotations

from typing import NamedTuple, Sequence


class WerResult(NamedTuple):
    rate: float
    s: int
    i: int
    d: int

    @property
    def errors(self) -> int:
        return self.s + self.i + self.d


def edit_ops(reference: Sequence, hypothesis: Sequence) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum unit-cost alignment.

    When several alignments are optimal the backtrace prefers a substitution
    (or match), then an insertion, then a deletion.
    """
    n, m = len(reference), len(hypothesis)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for a in range(1, n + 1):
        dist[a][0] = a
    for b in range(1, m + 1):
        dist[0][b] = b
    for a in range(1, n + 1):
        ra = reference[a - 1]
        row, prev = dist[a], dist[a - 1]
        for b in range(1, m + 1):
            sub = prev[b - 1] + (ra != hypothesis[b - 1])
            row[b] = min(sub, row[b - 1] + 1, prev[b] + 1)
    s = i = d = 0
    a, b = n, m
    while a > 0 or b > 0:
        cur = dist[a][b]
        if a > 0 and b > 0 and cur == dist[a - 1][b - 1] + (reference[a - 1] != hypothesis[b - 1]):
            s += reference[a - 1] != hypothesis[b - 1]
            a, b = a - 1, b - 1
        elif b > 0 and cur == dist[a][b - 1] + 1:
            i += 1
            b -= 1
        else:
            d += 1
            a -= 1
    return s, i, d


def wer(reference: Sequence, hypothesis: Sequence) -> WerResult:
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    s, i, d = edit_ops(list(reference), list(hypothesis))
    return WerResult((s + i + d) / len(reference), s, i, d)


def corpus_wer(references: Sequence[Sequence], hypotheses: Sequence[Sequence]) -> WerResult:
    """Pooled rate: total edits over total reference length."""
    if len(references) != len(hypotheses):
        raise ValueError("references and hypotheses differ in count")
    s = i = d = n = 0
    for ref, hyp in zip(references, hypotheses):
        r = wer(ref, hyp)
        s, i, d, n = s + r.s, i + r.i, d + r.d, n + len(ref)
    return WerResult((s + i + d) / n, s, i, d)
