"""Rare-word set construction from training transcripts."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Set

from .textnorm import normalize_word, normalize_words


@dataclass
class RareWordSet:
    """Words ranked outside the ``common_k`` most frequent ones.

    Ranking sorts counted words by descending frequency, breaking ties
    lexicographically. Words never seen in the counted transcripts are
    treated as rare by membership tests.
    """

    common_k: int
    words: Set[str]
    source_counts: Dict[str, int]

    def __contains__(self, word: str) -> bool:
        norm = normalize_word(word)
        if norm in self.words:
            return True
        return norm not in self.source_counts

    def is_rare(self, word: str) -> bool:
        return word in self

    def sorted_words(self) -> List[str]:
        return sorted(self.words)


def build_rare_set(transcripts: Iterable, common_k: int) -> RareWordSet:
    """Rank words of the training transcripts and keep those beyond the top k.

    Args:
        transcripts: Transcript strings, or pre-split word sequences.
        common_k: Number of most-frequent words excluded from the set.

    Returns:
        The rare-word set over normalized (uppercase) words.
    """
    if common_k < 0:
        raise ValueError("common_k must be >= 0")
    counts: Counter = Counter()
    empty = True
    for item in transcripts:
        empty = False
        words = normalize_words(item) if isinstance(item, str) else [
            normalize_word(w) for w in item
        ]
        counts.update(w for w in words if w)
    if empty:
        raise ValueError("transcripts must be non-empty")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    rare = {w for w, _ in ranked[common_k:]}
    return RareWordSet(common_k=common_k, words=rare, source_counts=dict(counts))
