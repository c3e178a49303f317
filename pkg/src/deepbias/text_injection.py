"""Unspoken-text pathway: phoneme features with masking and repetition,
mixed speech/text batches, and rerouting of paired utterances through the
text encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from .phonemes import PhonemeLexicon
from .subwords import SubwordVocab
from .textnorm import normalize_words


@dataclass
class UnspokenTextExample:
    """A transcript rendered as repeated (possibly masked) phoneme features.

    ``phoneme_ids`` holds the true pre-mask sequence; ``features`` rows are
    one-hot over the phoneme inventory plus a dedicated trailing mask
    dimension, so a masked phoneme is distinguishable from padding.
    """

    transcript: Tuple[str, ...]
    phoneme_ids: Tuple[int, ...]
    features: np.ndarray
    target_subwords: Tuple[int, ...]


def text_feature_width(lexicon: PhonemeLexicon) -> int:
    """Phoneme inventory plus the mask dimension."""
    return lexicon.num_phonemes + 1


def make_text_features(
    transcript: str,
    lexicon: PhonemeLexicon,
    vocab: SubwordVocab,
    mask_p: float,
    repeat_range: Tuple[int, int],
    rng: np.random.Generator,
    bpe_dropout: float = 0.0,
) -> UnspokenTextExample:
    """Build text-pathway features for one transcript.

    Phonemes come from the lexicon per word and are concatenated; each one
    is independently replaced by the mask symbol with probability ``mask_p``
    before being repeated r times with r drawn uniformly from
    ``repeat_range`` (inclusive; equal bounds give deterministic length).
    The label sequence is the subword encoding of the transcript and is
    never affected by masking or repetition.
    """
    words = normalize_words(transcript)
    if not words:
        raise ValueError(f"transcript {transcript!r} is empty after normalization")
    if not 0.0 <= mask_p <= 1.0:
        raise ValueError("mask_p must be a probability")
    lo, hi = repeat_range
    if lo < 1 or hi < lo:
        raise ValueError("repeat_range must satisfy 1 <= lo <= hi")
    phoneme_ids = tuple(lexicon.lookup_words(words))
    mask_id = lexicon.num_phonemes
    emitted: List[int] = []
    for pid in phoneme_ids:
        symbol = mask_id if rng.random() < mask_p else pid
        repeats = int(rng.integers(lo, hi + 1)) if hi > lo else lo
        emitted.extend([symbol] * repeats)
    width = text_feature_width(lexicon)
    features = np.zeros((len(emitted), width), dtype=np.float32)
    features[np.arange(len(emitted)), emitted] = 1.0
    target = tuple(
        vocab.encode_words([w.lower() for w in words], bpe_dropout, rng)
    )
    return UnspokenTextExample(
        transcript=tuple(words),
        phoneme_ids=phoneme_ids,
        features=features,
        target_subwords=target,
    )


@dataclass
class RoutedExample:
    """A training item tagged with the pathway it will take."""

    utt_id: str
    origin: str  # speech | text | swapped
    transcript: str
    audio_features: Optional[np.ndarray] = None
    text: Optional[UnspokenTextExample] = None


def paired_text_swap(
    batch: Sequence,
    p: float,
    rng: np.random.Generator,
    lexicon: PhonemeLexicon,
    vocab: SubwordVocab,
    mask_p: float = 0.15,
    repeat_range: Tuple[int, int] = (1, 3),
    bpe_dropout: float = 0.0,
) -> List[RoutedExample]:
    """Reroute each paired item through the text pathway with probability p.

    Items keep their transcripts; swapped items drop their audio features
    and carry freshly built text features instead.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("swap probability must be in [0, 1]")
    routed: List[RoutedExample] = []
    for item in batch:
        if p > 0.0 and rng.random() < p:
            text = make_text_features(
                item.transcript, lexicon, vocab, mask_p, repeat_range, rng, bpe_dropout
            )
            routed.append(
                RoutedExample(
                    utt_id=item.utt_id,
                    origin="swapped",
                    transcript=item.transcript,
                    text=text,
                )
            )
        else:
            routed.append(
                RoutedExample(
                    utt_id=item.utt_id,
                    origin="speech",
                    transcript=item.transcript,
                    audio_features=item.features,
                )
            )
    return routed


@dataclass
class MixedBatch:
    """Speech and text encoder outputs concatenated on the batch axis.

    Items are padded to a common length with zero rows; losses must rely on
    the per-item valid lengths.
    """

    encoder_states: Tensor
    enc_lens: Tensor
    targets: Tensor
    u_lens: Tensor
    origins: Tuple[str, ...]
    utt_ids: Tuple[str, ...]

    def __post_init__(self):
        if self.encoder_states.shape[0] != len(self.origins):
            raise ValueError("origin tag per batch item required")


def _pad_targets(target_seqs: Sequence[Sequence[int]], device) -> Tuple[Tensor, Tensor]:
    u_lens = torch.tensor([len(t) for t in target_seqs], dtype=torch.long, device=device)
    u_max = int(u_lens.max()) if len(target_seqs) else 0
    targets = torch.zeros(len(target_seqs), u_max, dtype=torch.long, device=device)
    for i, t in enumerate(target_seqs):
        if t:
            targets[i, : len(t)] = torch.tensor(list(t), dtype=torch.long, device=device)
    return targets, u_lens


def batch_concat(
    speech_states: Optional[Tensor],
    speech_lens: Optional[Tensor],
    speech_targets: Sequence[Sequence[int]],
    text_states: Optional[Tensor],
    text_lens: Optional[Tensor],
    text_targets: Sequence[Sequence[int]],
    speech_origins: Optional[Sequence[str]] = None,
    speech_ids: Optional[Sequence[str]] = None,
    text_ids: Optional[Sequence[str]] = None,
) -> MixedBatch:
    """Concatenate the two pathways on the batch axis, padding lengths.

    Either side may be absent; hidden widths must agree when both exist.
    Downstream losses treat every row identically.
    """
    sides = []
    if speech_states is not None and speech_states.shape[0] > 0:
        sides.append((speech_states, speech_lens, speech_targets,
                      tuple(speech_origins) if speech_origins else ("speech",) * speech_states.shape[0],
                      tuple(speech_ids) if speech_ids else tuple(f"speech-{i}" for i in range(speech_states.shape[0]))))
    if text_states is not None and text_states.shape[0] > 0:
        sides.append((text_states, text_lens, text_targets,
                      ("text",) * text_states.shape[0],
                      tuple(text_ids) if text_ids else tuple(f"text-{i}" for i in range(text_states.shape[0]))))
    if not sides:
        raise ValueError("both pathways empty")
    width = {s[0].shape[-1] for s in sides}
    if len(width) != 1:
        raise ValueError(f"hidden widths differ across pathways: {sorted(width)}")
    L = max(s[0].shape[1] for s in sides)
    device = sides[0][0].device
    padded = []
    lens = []
    target_seqs: List[Sequence[int]] = []
    origins: List[str] = []
    ids: List[str] = []
    for states, slens, stargets, sorigins, sids in sides:
        pad = L - states.shape[1]
        if pad:
            states = torch.cat(
                [states, states.new_zeros(states.shape[0], pad, states.shape[2])], dim=1
            )
        padded.append(states)
        lens.append(slens)
        target_seqs.extend(stargets)
        origins.extend(sorigins)
        ids.extend(sids)
    states = torch.cat(padded, dim=0)
    enc_lens = torch.cat(lens, dim=0)
    targets, u_lens = _pad_targets(target_seqs, device)
    return MixedBatch(
        encoder_states=states,
        enc_lens=enc_lens,
        targets=targets,
        u_lens=u_lens,
        origins=tuple(origins),
        utt_ids=tuple(ids),
    )
