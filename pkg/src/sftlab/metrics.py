"""Levenshtein alignment, word error rate and forgetting deltas."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class WerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    n_ref: int = 0
    # set when the reference is empty but the hypothesis is not
    empty_reference: bool = False

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / max(1, self.n_ref)

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.n_ref + other.n_ref,
                         self.empty_reference or other.empty_reference)

    def to_dict(self) -> dict:
        return {"wer": self.wer, "sub": self.substitutions, "del": self.deletions, "ins": self.insertions,
                "n_ref": self.n_ref}


def edit_distance(ref: Sequence, hyp: Sequence) -> WerReport:
    """Unit-cost alignment of ``hyp`` against ``ref``.

    Among optimal alignments the backtrace prefers a diagonal step
    (match or substitution), then a deletion, then an insertion.
    """
    n, m = len(ref), len(hyp)
    # d[i][j]: distance between ref[:i] and hyp[:j]
    d = [list(range(m + 1))]
    for i in range(1, n + 1):
        row = [i] + [0] * m
        prev = d[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (r != hyp[j - 1])
            dele = prev[j] + 1
            ins = row[j - 1] + 1
            row[j] = diag if diag <= dele and diag <= ins else (dele if dele <= ins else ins)
        d.append(row)
    s = de = ins = 0
    i, j = n, m
    while i or j:
        cur = d[i][j]
        if i and j and cur == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and cur == d[i - 1][j] + 1:
            de += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerReport(s, de, ins, n, empty_reference=(n == 0 and m > 0))


def corpus_wer(reports: Iterable[WerReport]) -> WerReport:
    """Pooled errors over pooled reference length."""
    total = WerReport()
    for r in reports:
        total = total + r
    return total


def forgetting(wer_by_stage: dict[int, dict[str, float]], splits: Iterable[str]) -> dict[int, dict[str, float]]:
    """Change in WER relative to stage 0 for each listed split."""
    base = wer_by_stage[0]
    return {s: {k: wer_by_stage[s][k] - base[k] for k in splits} for s in sorted(wer_by_stage)}
