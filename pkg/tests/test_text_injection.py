from collections import Counter
from dataclasses import dataclass

import numpy as np
import pytest
import torch

from deepbias.losses import transducer_loss_batch
from deepbias.model import ModelConfig, Transducer
from deepbias.phonemes import PhonemeLexicon
from deepbias.subwords import SubwordVocab
from deepbias.text_injection import (
    batch_concat,
    make_text_features,
    paired_text_swap,
    text_feature_width,
)


@pytest.fixture(scope="module")
def lexicon():
    return PhonemeLexicon(
        entries={"ABUT": ("AH0", "B", "AH1", "T")},
        phoneme_inventory=["AH0", "AH1", "B", "T", "K"],
        fallback_rules=[
            ("a", ("AH0",)), ("b", ("B",)), ("t", ("T",)),
            ("u", ("AH1",)), ("k", ("K",)),
        ],
    )


@pytest.fixture(scope="module")
def vocab():
    tokens = [
        "<blank>", "<unk>",
        "a@@", "a", "b@@", "b", "u@@", "u", "t@@", "t", "k@@", "k",
        "ab@@", "ut",
    ]
    return SubwordVocab(tokens=tokens, merges=[("a@@", "b@@"), ("u@@", "t")])


def test_no_mask_rows_when_mask_p_zero(lexicon, vocab):
    rng = np.random.default_rng(0)
    ex = make_text_features("abut", lexicon, vocab, 0.0, (1, 3), rng)
    mask_dim = lexicon.num_phonemes
    assert ex.features.shape[1] == text_feature_width(lexicon)
    assert ex.features[:, mask_dim].sum() == 0
    assert all(ex.features.sum(axis=1) == 1)


def test_all_mask_rows_when_mask_p_one(lexicon, vocab):
    rng = np.random.default_rng(0)
    ex = make_text_features("abut", lexicon, vocab, 1.0, (2, 2), rng)
    mask_dim = lexicon.num_phonemes
    assert np.all(ex.features[:, mask_dim] == 1)
    assert ex.target_subwords == tuple(vocab.encode("abut"))
    assert ex.phoneme_ids == tuple(lexicon.lookup("abut"))


def test_fixed_repeat_rows(lexicon, vocab):
    rng = np.random.default_rng(0)
    ex = make_text_features("abut", lexicon, vocab, 0.0, (2, 2), rng)
    ids = [int(row.argmax()) for row in ex.features]
    want = []
    for pid in lexicon.lookup("abut"):
        want.extend([pid, pid])
    assert ids == want
    assert len(ids) == 8


def test_target_never_altered_by_masking(lexicon, vocab):
    base = make_text_features("abut", lexicon, vocab, 0.0, (1, 1), np.random.default_rng(0))
    for seed in range(5):
        ex = make_text_features(
            "abut", lexicon, vocab, 0.7, (1, 3), np.random.default_rng(seed)
        )
        assert ex.target_subwords == base.target_subwords


def test_rejects_bad_inputs(lexicon, vocab):
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        make_text_features("", lexicon, vocab, 0.0, (1, 1), rng)
    with pytest.raises(ValueError):
        make_text_features("abut", lexicon, vocab, 2.0, (1, 1), rng)
    with pytest.raises(ValueError):
        make_text_features("abut", lexicon, vocab, 0.0, (0, 1), rng)


# -------------------------------------------------------------- batch_concat


def test_batch_concat_speech_only():
    states = torch.randn(2, 4, 8)
    lens = torch.tensor([4, 3])
    mix = batch_concat(states, lens, [[1, 2], [3]], None, None, [])
    assert mix.origins == ("speech", "speech")
    assert torch.equal(mix.encoder_states, states)
    assert mix.targets.shape == (2, 2)
    assert list(mix.u_lens) == [2, 1]


def test_batch_concat_text_only():
    states = torch.randn(3, 2, 8)
    lens = torch.tensor([2, 2, 1])
    mix = batch_concat(None, None, [], states, lens, [[1], [2], [3]])
    assert mix.origins == ("text", "text", "text")
    assert mix.encoder_states.shape == (3, 2, 8)


def test_batch_concat_pads_and_tags():
    speech = torch.randn(1, 5, 8)
    text = torch.randn(2, 3, 8)
    mix = batch_concat(
        speech, torch.tensor([5]), [[1, 2, 3]],
        text, torch.tensor([3, 2]), [[4], [5, 6]],
        speech_origins=["swapped"], speech_ids=["s0"], text_ids=["t0", "t1"],
    )
    assert mix.encoder_states.shape == (3, 5, 8)
    assert torch.all(mix.encoder_states[1, 3:] == 0)
    assert list(mix.enc_lens) == [5, 3, 2]
    assert mix.origins == ("swapped", "text", "text")
    assert mix.utt_ids == ("s0", "t0", "t1")


def test_batch_concat_width_mismatch():
    with pytest.raises(ValueError, match="width"):
        batch_concat(
            torch.randn(1, 2, 8), torch.tensor([2]), [[1]],
            torch.randn(1, 2, 4), torch.tensor([2]), [[1]],
        )


def test_batch_concat_preserves_target_multiset():
    speech_targets = [[1, 2], [3]]
    text_targets = [[4, 5, 6]]
    mix = batch_concat(
        torch.zeros(2, 3, 8), torch.tensor([3, 3]), speech_targets,
        torch.zeros(1, 2, 8), torch.tensor([2]), text_targets,
    )
    got = []
    for i in range(3):
        got.append(tuple(mix.targets[i, : mix.u_lens[i]].tolist()))
    assert Counter(got) == Counter([(1, 2), (3,), (4, 5, 6)])


# ---------------------------------------------------------------- swapping


@dataclass
class Paired:
    utt_id: str
    features: np.ndarray
    transcript: str


def paired_batch():
    return [Paired(f"u{i}", np.ones((6, 3), dtype=np.float32), "abut") for i in range(6)]


def test_swap_probability_zero_is_identity(lexicon, vocab):
    routed = paired_text_swap(paired_batch(), 0.0, np.random.default_rng(0), lexicon, vocab)
    assert all(r.origin == "speech" for r in routed)
    assert all(r.text is None and r.audio_features is not None for r in routed)


def test_swap_probability_one_swaps_all(lexicon, vocab):
    routed = paired_text_swap(paired_batch(), 1.0, np.random.default_rng(0), lexicon, vocab)
    assert all(r.origin == "swapped" for r in routed)
    assert all(r.audio_features is None for r in routed)
    for r in routed:
        assert r.text.target_subwords == tuple(vocab.encode("abut"))


def test_swap_seeded_reproducible(lexicon, vocab):
    a = paired_text_swap(paired_batch(), 0.5, np.random.default_rng(11), lexicon, vocab)
    b = paired_text_swap(paired_batch(), 0.5, np.random.default_rng(11), lexicon, vocab)
    assert [r.origin for r in a] == [r.origin for r in b]
    assert {r.origin for r in a} == {"speech", "swapped"}


# ------------------------------------------------------- loss-mask exactness


def test_padding_perturbation_leaves_loss_bits_unchanged():
    cfg = ModelConfig(
        d_audio_in=3, d_text_in=6, d_hidden=4, d_word_embed=4,
        shared_layers=1, predictor_layers=1, heads=2, vocab_size=6,
        lookahead_frames=1,
    )
    model = Transducer(cfg, seed=0).double()
    torch.manual_seed(0)
    feats = torch.randn(2, 12, 3, dtype=torch.float64)
    lens = torch.tensor([12, 8])
    targets = torch.tensor([[1, 2], [3, 0]])
    u_lens = torch.tensor([2, 1])

    def losses(features):
        enc, enc_lens = model.encode_speech(features, lens)
        _, pred = model.predictor.unroll(
            torch.cat([torch.zeros(2, 1, dtype=torch.long), targets], dim=1)
        )
        joint = model.jointer(enc.unsqueeze(2), pred.unsqueeze(1))
        logp = model.output.log_probs(joint)
        return transducer_loss_batch(logp, targets, enc_lens, u_lens)

    base = losses(feats)
    bumped = feats.clone()
    bumped[1, 8:, :] += 123.0
    again = losses(bumped)
    assert torch.equal(base, again)
