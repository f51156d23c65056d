"""Edit-distance counts and the CER / CR / AR rates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class MetricReport:
    cer: float
    cr: float
    ar: float
    substitutions: int
    deletions: int
    insertions: int
    ref_length: int

    @classmethod
    def from_counts(cls, sub: int, dele: int, ins: int, ref_length: int) -> "MetricReport":
        # an empty reference has nothing to get right; errors are counted per line
        n = max(ref_length, 1)
        return cls(cer=(sub + dele + ins) / n,
                   cr=(ref_length - dele - sub) / n,
                   ar=(ref_length - dele - sub - ins) / n,
                   substitutions=sub, deletions=dele, insertions=ins, ref_length=ref_length)

    def line(self) -> str:
        return (f"CER {self.cer:.4f}  CR {self.cr:.4f}  AR {self.ar:.4f}  "
                f"(S {self.substitutions} D {self.deletions} I {self.insertions} N {self.ref_length})")


def edit_ops(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """Unit-cost Levenshtein alignment counts (substitutions, deletions, insertions).

    Backtrace prefers the diagonal, then deletion, then insertion when costs tie.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    sub = dele = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(sub), dele, ins


def report(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> MetricReport:
    """Corpus-level rates: counts are summed over lines before dividing."""
    if len(refs) != len(hyps):
        raise ValueError(f"corpus length mismatch: {len(refs)} references vs {len(hyps)} hypotheses")
    S = D = I = N = 0
    for r, h in zip(refs, hyps):
        s, d, i = edit_ops(r, h)
        S, D, I, N = S + s, D + d, I + i, N + len(r)
    return MetricReport.from_counts(S, D, I, N)
