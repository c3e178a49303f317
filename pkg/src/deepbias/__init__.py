"""Contextual deep biasing for neural transducers at desk scale.

The package covers the full loop: subword/phoneme front ends, a small
streaming transducer, a biasing module with selectable query sites and word
encoders, text-injection training, FST-boosted beam search, and biased
word-error-rate scoring, plus a synthetic corpus and CLI to drive them.
"""

from .model import ModelConfig, Transducer, full_scale_preset
from .subwords import SubwordVocab, train_bpe
from .phonemes import PhonemeLexicon, g2p
from .rarewords import RareWordSet, build_rare_set

__all__ = [
    "ModelConfig",
    "Transducer",
    "full_scale_preset",
    "SubwordVocab",
    "train_bpe",
    "PhonemeLexicon",
    "g2p",
    "RareWordSet",
    "build_rare_set",
]

__version__ = "0.1.0"
