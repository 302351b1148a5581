"""Edit-distance based error rates."""

from __future__ import annotations

from typing import Hashable, Mapping, Sequence


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(hyps: Mapping[str, str], refs: Mapping[str, str]) -> float:
    """Corpus word error rate in percent over whitespace-separated words."""
    missing = sorted(set(refs) ^ set(hyps))
    if missing:
        raise ValueError(f"utterance ids differ between hypotheses and references: {missing}")
    errors = words = 0
    for utt_id, ref in refs.items():
        ref_words = ref.split()
        errors += edit_distance(ref_words, hyps[utt_id].split())
        words += len(ref_words)
    if words == 0:
        return 0.0 if errors == 0 else float("inf")
    return 100.0 * errors / words
