"""Synthetic speech-feature corpus with a phoneme-grounded lexicon.

Every word is a phoneme sequence spelled out by grapheme variants; a
phoneme has a fixed random prototype vector, and an utterance's features
are the noisy prototypes repeated a few frames each. Homophone pairs reuse
a common word's phonemes under a rare alternative spelling, so graphemic
confusion between common and rare words is realizable acoustically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .phonemes import PhonemeLexicon
from .rarewords import build_rare_set
from .subwords import SubwordVocab, train_bpe
from .textnorm import normalize_word

# phoneme -> spelling variants; the first variant is the canonical spelling
PHONEME_TABLE: Tuple[Tuple[str, Tuple[str, ...]], ...] = (
    ("AH0", ("a",)),
    ("B", ("b",)),
    ("D", ("d",)),
    ("EH1", ("e",)),
    ("F", ("f", "ph")),
    ("G", ("g",)),
    ("IY1", ("ee", "ea")),
    ("K", ("k", "c")),
    ("L", ("l",)),
    ("M", ("m",)),
    ("N", ("n",)),
    ("P", ("p",)),
    ("R", ("r",)),
    ("S", ("s",)),
    ("T", ("t",)),
    ("UW1", ("oo", "u")),
    ("Z", ("z", "x")),
    ("AY1", ("i", "y")),
)

MULTI_VARIANT = tuple(p for p, variants in PHONEME_TABLE if len(variants) > 1)


@dataclass
class SyntheticCorpusConfig:
    """Knobs of the generated corpus; identical (config, seed) pairs give
    bit-identical datasets."""

    n_common_words: int = 30
    n_rare_words: int = 24
    n_homophone_pairs: int = 12
    phoneme_prototype_dim: int = 12
    frames_per_phoneme: Tuple[int, int] = (3, 6)
    noise_std: float = 0.15
    train_utterances: int = 260
    dev_utterances: int = 40
    test_utterances: int = 200
    words_per_utterance: Tuple[int, int] = (3, 5)
    max_rare_occurrences: int = 1
    rare_words_per_test_utterance: Tuple[int, int] = (1, 2)
    subword_vocab_size: int = 64
    seed: int = 17

    def __post_init__(self):
        if self.n_homophone_pairs > min(self.n_common_words, self.n_rare_words):
            raise ValueError("more homophone pairs than common or rare words")
        if self.phoneme_prototype_dim < 1:
            raise ValueError("phoneme_prototype_dim must be >= 1")
        lo, hi = self.frames_per_phoneme
        if lo < 1 or hi < lo:
            raise ValueError("frames_per_phoneme must satisfy 1 <= lo <= hi")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["frames_per_phoneme"] = list(self.frames_per_phoneme)
        d["words_per_utterance"] = list(self.words_per_utterance)
        d["rare_words_per_test_utterance"] = list(self.rare_words_per_test_utterance)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCorpusConfig":
        d = dict(d)
        for key in ("frames_per_phoneme", "words_per_utterance", "rare_words_per_test_utterance"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # [T, D1] float32
    transcript: str
    chapter: str
    book: str


@dataclass
class Dataset:
    """Generated splits plus the text artifacts they were built from."""

    config: SyntheticCorpusConfig
    splits: Dict[str, List[Utterance]]
    lexicon: PhonemeLexicon
    vocab: SubwordVocab
    word_counts: Dict[str, int]
    common_words: List[str]
    rare_words: List[str]
    prototypes: np.ndarray = field(repr=False, default=None)

    def transcripts(self, split: str) -> List[str]:
        return [u.transcript for u in self.splits[split]]

    def rare_set(self, common_k: Optional[int] = None):
        k = common_k if common_k is not None else len(self.common_words)
        return build_rare_set(self.transcripts("train"), k)


def _spell(phonemes: Sequence[str], variant_idx: Dict[str, int]) -> str:
    out = []
    table = dict(PHONEME_TABLE)
    for p in phonemes:
        variants = table[p]
        out.append(variants[variant_idx.get(p, 0) % len(variants)])
    return "".join(out)


def _draw_phonemes(rng: np.random.Generator, lo: int, hi: int, force_multi_variant: bool) -> Tuple[str, ...]:
    n = int(rng.integers(lo, hi + 1))
    symbols = [PHONEME_TABLE[int(rng.integers(len(PHONEME_TABLE)))][0] for _ in range(n)]
    if force_multi_variant and not any(s in MULTI_VARIANT for s in symbols):
        symbols[int(rng.integers(n))] = MULTI_VARIANT[int(rng.integers(len(MULTI_VARIANT)))]
    return tuple(symbols)


def _make_words(config: SyntheticCorpusConfig, rng: np.random.Generator):
    """Invent common and rare words; homophone pairs share phonemes but
    differ in spelling, split across the common/rare boundary."""
    words: Dict[str, Tuple[str, ...]] = {}
    common: List[str] = []
    rare: List[str] = []

    def admit(spelling: str, phonemes: Tuple[str, ...]) -> bool:
        if not spelling or spelling in words:
            return False
        words[spelling] = phonemes
        return True

    while len(common) < config.n_common_words:
        force = len(common) < config.n_homophone_pairs
        phonemes = _draw_phonemes(rng, 2, 4, force_multi_variant=force)
        spelling = _spell(phonemes, {})
        if admit(spelling, phonemes):
            common.append(spelling)

    for i in range(config.n_homophone_pairs):
        base = common[i]
        phonemes = words[base]
        spelled = None
        for flip in MULTI_VARIANT:
            if flip in phonemes:
                candidate = _spell(phonemes, {flip: 1})
                if candidate not in words:
                    spelled = candidate
                    break
        if spelled is None:
            raise ValueError(f"could not spell a homophone for {base!r}")
        words[spelled] = phonemes
        rare.append(spelled)

    while len(rare) < config.n_rare_words:
        phonemes = _draw_phonemes(rng, 3, 5, force_multi_variant=False)
        spelling = _spell(phonemes, {})
        if admit(spelling, phonemes):
            rare.append(spelling)

    return words, common, rare


def _build_lexicon(words: Dict[str, Tuple[str, ...]]) -> PhonemeLexicon:
    entries = {normalize_word(w): tuple(ph) for w, ph in words.items()}
    rules = []
    for phoneme, variants in PHONEME_TABLE:
        for v in variants:
            rules.append((v, (phoneme,)))
    inventory = [p for p, _ in PHONEME_TABLE]
    return PhonemeLexicon(entries=entries, phoneme_inventory=inventory, fallback_rules=rules)


def synth_corpus(config: SyntheticCorpusConfig) -> Dataset:
    """Generate the dataset, lexicon, subword vocabulary, and frequency table."""
    rng = np.random.default_rng(config.seed)
    words, common, rare = _make_words(config, rng)
    lexicon = _build_lexicon(words)
    prototypes = rng.normal(size=(lexicon.num_phonemes, config.phoneme_prototype_dim))

    def features_for(transcript: str, noise_rng) -> np.ndarray:
        rows = []
        lo, hi = config.frames_per_phoneme
        for word in transcript.split():
            for pid in lexicon.lookup(word):
                r = int(noise_rng.integers(lo, hi + 1))
                base = prototypes[pid]
                noise = config.noise_std * noise_rng.normal(size=(r, config.phoneme_prototype_dim))
                rows.append(base + noise)
        return np.concatenate(rows, axis=0).astype(np.float32)

    def sample_common(k: int) -> List[str]:
        return [common[int(rng.integers(len(common)))] for _ in range(k)]

    lo_w, hi_w = config.words_per_utterance

    # train: common-word utterances, then each rare word inserted into
    # max_rare_occurrences random positions
    train_words: List[List[str]] = [
        sample_common(int(rng.integers(lo_w, hi_w + 1))) for _ in range(config.train_utterances)
    ]
    for rare_word in rare:
        for _ in range(config.max_rare_occurrences):
            utt = int(rng.integers(len(train_words)))
            pos = int(rng.integers(len(train_words[utt]) + 1))
            train_words[utt].insert(pos, rare_word)

    def rare_heavy(count: int, lo_r: int, hi_r: int) -> List[List[str]]:
        out = []
        for _ in range(count):
            base = sample_common(int(rng.integers(lo_w, hi_w + 1)))
            n_rare = int(rng.integers(lo_r, hi_r + 1))
            for _ in range(n_rare):
                pos = int(rng.integers(len(base) + 1))
                base.insert(pos, rare[int(rng.integers(len(rare)))])
            out.append(base)
        return out

    lo_r, hi_r = config.rare_words_per_test_utterance
    dev_words = rare_heavy(config.dev_utterances, lo_r, hi_r)
    test_words = rare_heavy(config.test_utterances, lo_r, hi_r)

    splits: Dict[str, List[Utterance]] = {}
    for split, all_words in (("train", train_words), ("dev", dev_words), ("test", test_words)):
        utts = []
        for i, w in enumerate(all_words):
            transcript = " ".join(w)
            utts.append(
                Utterance(
                    utt_id=f"{split}-{i:04d}",
                    features=features_for(transcript, rng),
                    transcript=transcript,
                    chapter=f"{split}-ch{i // 20:03d}",
                    book=f"{split}-bk{i // 100:03d}",
                )
            )
        splits[split] = utts

    word_counts: Dict[str, int] = {}
    for utt in splits["train"]:
        for w in utt.transcript.split():
            word_counts[normalize_word(w)] = word_counts.get(normalize_word(w), 0) + 1
    min_common = min(word_counts[normalize_word(w)] for w in common)
    max_rare = max(word_counts.get(normalize_word(w), 0) for w in rare)
    if min_common <= max_rare:
        raise ValueError(
            "frequency separation failed: raise train_utterances or lower max_rare_occurrences"
        )

    vocab = train_bpe(
        {w.lower(): c for w, c in word_counts.items()},
        vocab_size=config.subword_vocab_size,
        extra_alphabet="".join(sorted({c for w in words for c in w})),
    )
    return Dataset(
        config=config,
        splits=splits,
        lexicon=lexicon,
        vocab=vocab,
        word_counts=word_counts,
        common_words=[normalize_word(w) for w in common],
        rare_words=[normalize_word(w) for w in rare],
        prototypes=prototypes,
    )


# ------------------------------------------------------------------ file IO


def save_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "corpus_config.json").write_text(
        json.dumps(dataset.config.to_dict(), indent=1), encoding="utf-8"
    )
    dataset.lexicon.save(out / "lexicon.txt", out / "g2p_rules.txt")
    dataset.vocab.save(out / "vocab.txt", out / "merges.txt")
    with open(out / "words.txt", "w", encoding="utf-8") as f:
        for w in sorted(dataset.word_counts):
            f.write(f"{w} {dataset.word_counts[w]}\n")
    with open(out / "rare_words.txt", "w", encoding="utf-8") as f:
        for w in dataset.rare_words:
            f.write(w + "\n")
    with open(out / "common_words.txt", "w", encoding="utf-8") as f:
        for w in dataset.common_words:
            f.write(w + "\n")
    for split, utts in dataset.splits.items():
        with open(out / f"{split}.tsv", "w", encoding="utf-8") as f:
            for u in utts:
                f.write(f"{u.utt_id}\t{u.chapter}\t{u.book}\t{u.transcript}\n")
        np.savez(out / f"{split}_feats.npz", **{u.utt_id: u.features for u in utts})


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    config = SyntheticCorpusConfig.from_dict(
        json.loads((src / "corpus_config.json").read_text(encoding="utf-8"))
    )
    lexicon = PhonemeLexicon.load(src / "lexicon.txt", src / "g2p_rules.txt")
    vocab = SubwordVocab.load(src / "vocab.txt", src / "merges.txt")
    word_counts = {}
    for line in (src / "words.txt").read_text(encoding="utf-8").splitlines():
        if line:
            w, c = line.rsplit(" ", 1)
            word_counts[w] = int(c)
    rare_words = [w for w in (src / "rare_words.txt").read_text(encoding="utf-8").splitlines() if w]
    common_words = [w for w in (src / "common_words.txt").read_text(encoding="utf-8").splitlines() if w]
    splits: Dict[str, List[Utterance]] = {}
    for split in ("train", "dev", "test"):
        feats = np.load(src / f"{split}_feats.npz")
        utts = []
        for line in (src / f"{split}.tsv").read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            utt_id, chapter, book, transcript = line.split("\t")
            utts.append(
                Utterance(
                    utt_id=utt_id,
                    features=feats[utt_id],
                    transcript=transcript,
                    chapter=chapter,
                    book=book,
                )
            )
        splits[split] = utts
    return Dataset(
        config=config,
        splits=splits,
        lexicon=lexicon,
        vocab=vocab,
        word_counts=word_counts,
        common_words=common_words,
        rare_words=rare_words,
    )
