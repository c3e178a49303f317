"""Phoneme lexicon with a deterministic letter-cluster fallback.

Lookup is total: a word either hits the lexicon verbatim or is spelled out
by scanning it left to right, consuming the longest matching letter cluster
at each position (rule-file order breaks length ties).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from .textnorm import normalize_word


@dataclass
class PhonemeLexicon:
    """Word pronunciations plus fallback spelling rules.

    Attributes:
        entries: Normalized word -> phoneme-symbol sequence.
        phoneme_inventory: Ordered phoneme symbols; a symbol's id is its index.
        fallback_rules: (letter cluster, phoneme symbols) in priority order.
    """

    entries: Dict[str, Tuple[str, ...]]
    phoneme_inventory: List[str]
    fallback_rules: List[Tuple[str, Tuple[str, ...]]]
    _phoneme_ids: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.phoneme_inventory)) != len(self.phoneme_inventory):
            raise ValueError("duplicate phoneme symbols in inventory")
        # Canonical (sorted) symbol order keeps ids stable across any
        # construction path, including a save/load round trip.
        self.phoneme_inventory = sorted(self.phoneme_inventory)
        self._phoneme_ids = {p: i for i, p in enumerate(self.phoneme_inventory)}
        for word, phones in self.entries.items():
            for p in phones:
                if p not in self._phoneme_ids:
                    raise ValueError(f"lexicon entry {word!r} uses unknown phoneme {p!r}")
        for cluster, phones in self.fallback_rules:
            if not cluster:
                raise ValueError("empty fallback cluster")
            for p in phones:
                if p not in self._phoneme_ids:
                    raise ValueError(f"fallback rule {cluster!r} uses unknown phoneme {p!r}")

    @property
    def num_phonemes(self) -> int:
        return len(self.phoneme_inventory)

    def phoneme_to_id(self, symbol: str) -> int:
        return self._phoneme_ids[symbol]

    def symbols_to_ids(self, symbols: Sequence[str]) -> List[int]:
        return [self._phoneme_ids[s] for s in symbols]

    def lookup_symbols(self, word: str) -> List[str]:
        """Phoneme symbols for one word: lexicon entry, else fallback spelling."""
        norm = normalize_word(word)
        if not norm:
            raise ValueError(f"word {word!r} is empty after normalization")
        hit = self.entries.get(norm)
        if hit is not None:
            return list(hit)
        out: List[str] = []
        i = 0
        lowered = norm.lower()
        while i < len(lowered):
            best = None
            for cluster, phones in self.fallback_rules:
                if lowered.startswith(cluster, i):
                    if best is None or len(cluster) > len(best[0]):
                        best = (cluster, phones)
            if best is None:
                raise ValueError(
                    f"no fallback rule covers {lowered[i]!r} in word {word!r}"
                )
            out.extend(best[1])
            i += len(best[0])
        return out

    def lookup(self, word: str) -> List[int]:
        """Phoneme ids for one word (lexicon hit or deterministic fallback)."""
        return self.symbols_to_ids(self.lookup_symbols(word))

    def lookup_words(self, words: Sequence[str]) -> List[int]:
        """Concatenated phoneme ids over a word sequence."""
        ids: List[int] = []
        for w in words:
            ids.extend(self.lookup(w))
        return ids

    def save(self, lexicon_path, rules_path) -> None:
        """Write "WORD<TAB>PH ..." entries and "cluster<TAB>PH ..." rules."""
        with open(lexicon_path, "w", encoding="utf-8") as f:
            for word in sorted(self.entries):
                f.write(f"{word}\t{' '.join(self.entries[word])}\n")
        with open(rules_path, "w", encoding="utf-8") as f:
            for cluster, phones in self.fallback_rules:
                f.write(f"{cluster}\t{' '.join(phones)}\n")

    @classmethod
    def load(cls, lexicon_path, rules_path) -> "PhonemeLexicon":
        entries: Dict[str, Tuple[str, ...]] = {}
        symbols: List[str] = []
        seen = set()

        def note(phones):
            for p in phones:
                if p not in seen:
                    seen.add(p)
                    symbols.append(p)

        with open(lexicon_path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                word, phones = line.split("\t")
                entries[normalize_word(word)] = tuple(phones.split())
                note(phones.split())
        rules: List[Tuple[str, Tuple[str, ...]]] = []
        with open(rules_path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                cluster, phones = line.split("\t")
                rules.append((cluster, tuple(phones.split())))
                note(phones.split())
        return cls(entries=entries, phoneme_inventory=symbols, fallback_rules=rules)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.phoneme_inventory:
            h.update(p.encode("utf-8") + b"\n")
        h.update(b"--entries--\n")
        for word in sorted(self.entries):
            h.update(f"{word}\t{' '.join(self.entries[word])}\n".encode("utf-8"))
        h.update(b"--rules--\n")
        for cluster, phones in self.fallback_rules:
            h.update(f"{cluster}\t{' '.join(phones)}\n".encode("utf-8"))
        return h.hexdigest()


def g2p(word: str, lexicon: PhonemeLexicon) -> List[int]:
    """Grapheme-to-phoneme conversion for one word.

    Returns the lexicon pronunciation verbatim when present, otherwise the
    concatenation of longest-match fallback rules. Deterministic for fixed
    lexicon contents; never empty for a non-empty word.
    """
    return lexicon.lookup(word)
