"""Subword vocabulary: BPE training, encoding with merge dropout, decoding.

Tokens follow the continuation-marker convention: a piece that is followed
by more pieces inside the same word carries a trailing ``@@`` (so "abut"
may encode as ``ab@@ ut``). Ids are dense ``0..size-1``; ``blank`` and
``unk`` are reserved ids that encoding never emits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

MARKER = "@@"
BLANK_TOKEN = "<blank>"
UNK_TOKEN = "<unk>"


class EncodingError(ValueError):
    """Raised when a word cannot be encoded with the vocabulary's alphabet."""


def _symbolize(word: str) -> List[str]:
    """Split a word into per-character symbols with continuation markers."""
    if not word:
        return []
    return [c + MARKER for c in word[:-1]] + [word[-1]]


def _combine(left: str, right: str) -> str:
    """Join two adjacent symbols into the merged symbol."""
    assert left.endswith(MARKER), (left, right)
    return left[: -len(MARKER)] + right


@dataclass
class SubwordVocab:
    """Subword inventory with its ordered merge rules.

    Attributes:
        tokens: All token strings; a token's id is its index.
        merges: Ordered merge rules, highest priority first.
        blank_id: Reserved id, never produced by encoding.
        unk_id: Reserved id, never produced by encoding.
    """

    tokens: List[str]
    merges: List[Tuple[str, str]]
    blank_id: int = 0
    unk_id: int = 1
    _token_ids: Dict[str, int] = field(init=False, repr=False)
    _merge_rank: Dict[Tuple[str, str], int] = field(init=False, repr=False)
    _alphabet: set = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._token_ids = {t: i for i, t in enumerate(self.tokens)}
        for left, right in self.merges:
            merged = _combine(left, right)
            for part in (left, right, merged):
                if part not in self._token_ids:
                    raise ValueError(f"merge rule references unknown token {part!r}")
        self._merge_rank = {pair: i for i, pair in enumerate(self.merges)}
        self._alphabet = {
            t[: -len(MARKER)]
            for t in self.tokens
            if t.endswith(MARKER) and len(t) == 1 + len(MARKER)
        }

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def alphabet(self) -> set:
        return set(self._alphabet)

    def token_to_id(self, token: str) -> int:
        return self._token_ids[token]

    def encode(
        self,
        word: str,
        dropout_p: float = 0.0,
        rng: Optional[np.random.Generator] = None,
    ) -> List[int]:
        """Encode one word into subword ids.

        Merges are applied greedily in priority order. With ``dropout_p > 0``
        every candidate merge application is independently skipped with that
        probability (re-drawn each round); when all candidates of a round are
        skipped, merging stops, so ``dropout_p=1`` yields per-character pieces.

        Args:
            word: Word over the vocabulary's alphabet (no whitespace).
            dropout_p: Merge-skip probability in [0, 1].
            rng: Source of randomness, required only when ``dropout_p > 0``.

        Returns:
            Subword ids whose decoding reproduces ``word``.

        Raises:
            EncodingError: If ``word`` contains a character outside the alphabet.
        """
        if not 0.0 <= dropout_p <= 1.0:
            raise ValueError(f"dropout_p must be a probability, got {dropout_p}")
        if dropout_p > 0.0 and rng is None:
            raise ValueError("rng is required when dropout_p > 0")
        for ch in word:
            if ch not in self._alphabet:
                raise EncodingError(f"character {ch!r} not in subword alphabet")
        symbols = _symbolize(word)
        while len(symbols) > 1:
            survivors = []
            for i in range(len(symbols) - 1):
                pair = (symbols[i], symbols[i + 1])
                rank = self._merge_rank.get(pair)
                if rank is None:
                    continue
                if dropout_p > 0.0 and rng.random() < dropout_p:
                    continue
                survivors.append((rank, i, pair))
            if not survivors:
                break
            best_pair = min(survivors)[2]
            allowed = {i for rank, i, pair in survivors if pair == best_pair}
            merged = _combine(*best_pair)
            out: List[str] = []
            i = 0
            while i < len(symbols):
                if (
                    i in allowed
                    and i + 1 < len(symbols)
                    and (symbols[i], symbols[i + 1]) == best_pair
                ):
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbols = out
        return [self._token_ids[s] for s in symbols]

    def encode_words(
        self,
        words: Sequence[str],
        dropout_p: float = 0.0,
        rng: Optional[np.random.Generator] = None,
    ) -> List[int]:
        """Encode a word sequence; per-word encodings are concatenated."""
        ids: List[int] = []
        for w in words:
            ids.extend(self.encode(w, dropout_p, rng))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Reassemble words from subword ids, space-separated."""
        words: List[str] = []
        current = ""
        for i in ids:
            if i in (self.blank_id, self.unk_id):
                raise ValueError(f"reserved id {i} cannot be decoded")
            token = self.tokens[i]
            if token.endswith(MARKER):
                current += token[: -len(MARKER)]
            else:
                words.append(current + token)
                current = ""
        if current:
            words.append(current)
        return " ".join(words)

    def save(self, vocab_path, merges_path) -> None:
        """Write the token list (one per line) and merge rules ("left right")."""
        with open(vocab_path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")
        with open(merges_path, "w", encoding="utf-8") as f:
            for left, right in self.merges:
                f.write(f"{left} {right}\n")

    @classmethod
    def load(cls, vocab_path, merges_path) -> "SubwordVocab":
        with open(vocab_path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        merges: List[Tuple[str, str]] = []
        with open(merges_path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                left, right = line.split(" ")
                merges.append((left, right))
        return cls(tokens=tokens, merges=merges)

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for t in self.tokens:
            h.update(t.encode("utf-8"))
            h.update(b"\n")
        h.update(b"--merges--\n")
        for left, right in self.merges:
            h.update(f"{left} {right}\n".encode("utf-8"))
        return h.hexdigest()


def train_bpe(
    word_counts: Dict[str, int],
    vocab_size: int,
    extra_alphabet: str = "",
) -> SubwordVocab:
    """Learn merge rules from word frequencies.

    The initial inventory is the reserved tokens plus both the final and the
    continuation form of every alphabet character, so any word over the
    alphabet stays encodable. Merges are added greedily by weighted pair
    frequency (ties broken lexicographically) until ``vocab_size`` tokens
    exist or no pair repeats.

    Args:
        word_counts: Normalized word -> occurrence count.
        vocab_size: Target total token count (must fit the base inventory).
        extra_alphabet: Characters guaranteed encodable even if absent
            from ``word_counts``.

    Returns:
        The trained vocabulary.
    """
    alphabet = sorted({c for w in word_counts for c in w} | set(extra_alphabet))
    tokens: List[str] = [BLANK_TOKEN, UNK_TOKEN]
    for c in alphabet:
        tokens.append(c + MARKER)
        tokens.append(c)
    if vocab_size < len(tokens):
        raise ValueError(
            f"vocab_size {vocab_size} smaller than base inventory {len(tokens)}"
        )
    known = set(tokens)
    seqs = {w: _symbolize(w) for w in word_counts if w}
    merges: List[Tuple[str, str]] = []
    while len(tokens) < vocab_size:
        pair_counts: Dict[Tuple[str, str], int] = {}
        for w, symbols in seqs.items():
            n = word_counts[w]
            for i in range(len(symbols) - 1):
                pair = (symbols[i], symbols[i + 1])
                pair_counts[pair] = pair_counts.get(pair, 0) + n
        if not pair_counts:
            break
        best_pair, best_count = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best_count < 2:
            break
        merged = _combine(*best_pair)
        merges.append(best_pair)
        if merged not in known:
            tokens.append(merged)
            known.add(merged)
        for w, symbols in seqs.items():
            out: List[str] = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best_pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            seqs[w] = out
    return SubwordVocab(tokens=tokens, merges=merges)
